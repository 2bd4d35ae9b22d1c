//! Architecture description, parameter storage, forward inference, and
//! checkpoint serialization.
//!
//! A [`NetworkSpec`] describes a VGG-like encoder (blocks of two 3x3
//! convolutions with optional batch-norm, followed by 2x2 max pooling while
//! the feature map stays at least 8x8), a 3-layer fully-connected head fed by
//! global average pooling, and an optional U-Net-style decoder for the
//! multi-task segmentation branch. A [`Checkpoint`] holds the spec plus the
//! current weights, the initialization snapshot taken at build time, and
//! training metadata.
//!
//! Complexity measures are computed on the classification branch only, so
//! every layer carries a [`Scope`] tag distinguishing encoder/head layers
//! from decoder layers.

mod backward;
mod forward;
mod io;
mod path;
mod vector;

pub use backward::{backward, Grads};
pub use forward::{ForwardCache, ForwardOutput, Mode};
pub use io::{load, save, CHECKPOINT_FORMAT_VERSION};
pub use path::dense_chain_squared_ones;
pub use vector::ParamVector;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Spatial size below which max pooling is disabled.
const MIN_POOLED_EXTENT: usize = 8;
/// Channel-doubling cap, in multiples of the base width (32 -> 2048 pattern).
const CHANNEL_CAP_FACTOR: usize = 64;
/// Head width cap, in multiples of the base width (the 512 in the FC tables).
const FC_CAP_FACTOR: usize = 16;

/// Architecture description. Input images are single-channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input spatial size (H, W); channel count is fixed at 1.
    pub input_hw: (usize, usize),
    /// Output channels of each conv block (two conv layers per block).
    pub channels: Vec<usize>,
    /// Whether each block ends in a 2x2 max pool.
    pub pool: Vec<bool>,
    /// The three fully-connected widths; the last is always 2 (binary logits).
    pub fc_widths: [usize; 3],
    /// Batch normalization after every convolution.
    pub batchnorm: bool,
    /// Dropout rate on the hidden FC activations, in [0, 1). 0 disables.
    pub dropout: f32,
    /// Attach the segmentation decoder branch.
    pub decoder: bool,
}

impl NetworkSpec {
    /// Standard schedule: channel widths double per block from `base_width`
    /// (capped at 64x base), pooling stays on while the pooled map is at
    /// least 8x8, and FC widths follow the published pattern for the given
    /// depth. `base_width = 32` with 256x256 inputs reproduces the full-scale
    /// tables; `base_width = 8` with 32x32 inputs is the desk scale.
    pub fn vgg_like(
        input_hw: (usize, usize),
        blocks: usize,
        base_width: usize,
        batchnorm: bool,
        dropout: f32,
        decoder: bool,
    ) -> Result<Self> {
        if !(1..=8).contains(&blocks) {
            return Err(CoreError::InvalidSpec {
                what: "network spec",
                detail: format!("block count {blocks} outside [1, 8]"),
            });
        }
        if base_width == 0 {
            return Err(CoreError::InvalidSpec {
                what: "network spec",
                detail: "base width must be >= 1".into(),
            });
        }
        let channels: Vec<usize> = (0..blocks)
            .map(|i| (base_width << i.min(63)).min(base_width * CHANNEL_CAP_FACTOR))
            .collect();
        let (mut h, mut w) = input_hw;
        let pool: Vec<bool> = (0..blocks)
            .map(|_| {
                let can = h.div_ceil(2) >= MIN_POOLED_EXTENT && w.div_ceil(2) >= MIN_POOLED_EXTENT;
                if can {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
                can
            })
            .collect();
        // Hidden FC widths are floored at 4: a 2-unit ReLU bottleneck can die
        // for every sample at once, freezing training. The floor is inactive
        // at full scale (base 32 keeps all table widths).
        let fc1 = if blocks >= 2 {
            (base_width << (blocks - 2).min(63)).min(base_width * FC_CAP_FACTOR).max(4)
        } else {
            base_width.max(4)
        };
        let fc2 = (fc1 / 2).max(4).min((2 * base_width).max(4));
        let spec = NetworkSpec {
            input_hw,
            channels,
            pool,
            fc_widths: [fc1, fc2, 2],
            batchnorm,
            dropout,
            decoder,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| CoreError::InvalidSpec { what: "network spec", detail };
        if !(1..=8).contains(&self.channels.len()) {
            return Err(fail(format!("block count {} outside [1, 8]", self.channels.len())));
        }
        if self.channels.len() != self.pool.len() {
            return Err(fail(format!(
                "channels ({}) and pool ({}) lengths differ",
                self.channels.len(),
                self.pool.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(fail("block channel widths must be >= 1".into()));
        }
        if self.fc_widths[2] != 2 {
            return Err(fail(format!("final FC width must be 2, got {}", self.fc_widths[2])));
        }
        if self.fc_widths.iter().any(|&x| x == 0) {
            return Err(fail("FC widths must be >= 1".into()));
        }
        if self.input_hw.0 == 0 || self.input_hw.1 == 0 {
            return Err(fail("input extents must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(fail(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn blocks(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of the encoder output feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let (mut h, mut w) = self.input_hw;
        for &p in &self.pool {
            if p {
                h = h.div_ceil(2);
                w = w.div_ceil(2);
            }
        }
        (h, w)
    }
}

/// Which branch a layer belongs to. Complexity measures only see
/// `Classifier` layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    Classifier,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv { k: usize, cin: usize, cout: usize },
    UpConv { k: usize, cin: usize, cout: usize },
    Dense { din: usize, dout: usize },
    BatchNorm { ch: usize },
}

impl LayerKind {
    /// Shapes of the trainable tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::Conv { k, cin, cout } | LayerKind::UpConv { k, cin, cout } => {
                vec![vec![k, k, cin, cout], vec![cout]]
            }
            LayerKind::Dense { din, dout } => vec![vec![din, dout], vec![dout]],
            LayerKind::BatchNorm { ch } => vec![vec![ch], vec![ch]],
        }
    }

    /// Shapes of the non-trainable state tensors (batch-norm running stats).
    pub fn state_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerKind::BatchNorm { ch } => vec![vec![ch], vec![ch]],
            _ => vec![],
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }

    /// Does this layer carry a weight matrix that the norm measures consume?
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::UpConv { .. } | LayerKind::Dense { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub scope: Scope,
}

/// Execution plan: indices into the layer table describing the wiring.
#[derive(Debug, Clone)]
pub struct Plan {
    pub input_hw: (usize, usize),
    pub input_c: usize,
    pub blocks: Vec<BlockPlan>,
    pub head: HeadPlan,
    pub decoder: Option<DecoderPlan>,
}

#[derive(Debug, Clone)]
pub struct BlockPlan {
    pub conv1: usize,
    pub bn1: Option<usize>,
    pub conv2: usize,
    pub bn2: Option<usize>,
    pub pool: bool,
}

#[derive(Debug, Clone)]
pub struct HeadPlan {
    pub fcs: Vec<usize>,
    pub dropout: f32,
}

#[derive(Debug, Clone)]
pub struct DecoderPlan {
    pub stages: Vec<DecoderStage>,
    pub out_conv: usize,
}

/// One decoder stage: up-convolution to double the resolution, channel
/// concatenation with the matching encoder block's pre-pool activation, then
/// two convolutions.
#[derive(Debug, Clone)]
pub struct DecoderStage {
    pub up: usize,
    pub conv1: usize,
    pub bn1: Option<usize>,
    pub conv2: usize,
    pub bn2: Option<usize>,
    /// Encoder block whose pre-pool activation is concatenated.
    pub skip_block: usize,
}

pub(crate) fn build_plan(spec: &NetworkSpec) -> (Plan, Vec<LayerDesc>) {
    let mut layers: Vec<LayerDesc> = Vec::new();
    let push = |name: String, kind: LayerKind, scope: Scope, layers: &mut Vec<LayerDesc>| -> usize {
        layers.push(LayerDesc { name, kind, scope });
        layers.len() - 1
    };

    let mut blocks = Vec::with_capacity(spec.blocks());
    let mut cin = 1usize;
    for (b, (&c, &pool)) in spec.channels.iter().zip(&spec.pool).enumerate() {
        let conv1 = push(
            format!("enc{b}.conv1"),
            LayerKind::Conv { k: 3, cin, cout: c },
            Scope::Classifier,
            &mut layers,
        );
        let bn1 = spec.batchnorm.then(|| {
            push(format!("enc{b}.bn1"), LayerKind::BatchNorm { ch: c }, Scope::Classifier, &mut layers)
        });
        let conv2 = push(
            format!("enc{b}.conv2"),
            LayerKind::Conv { k: 3, cin: c, cout: c },
            Scope::Classifier,
            &mut layers,
        );
        let bn2 = spec.batchnorm.then(|| {
            push(format!("enc{b}.bn2"), LayerKind::BatchNorm { ch: c }, Scope::Classifier, &mut layers)
        });
        blocks.push(BlockPlan { conv1, bn1, conv2, bn2, pool });
        cin = c;
    }

    let mut fcs = Vec::with_capacity(3);
    let mut din = *spec.channels.last().expect("validated: >= 1 block");
    for (i, &dout) in spec.fc_widths.iter().enumerate() {
        let idx = push(
            format!("head.fc{}", i + 1),
            LayerKind::Dense { din, dout },
            Scope::Classifier,
            &mut layers,
        );
        fcs.push(idx);
        din = dout;
    }
    let head = HeadPlan { fcs, dropout: spec.dropout };

    let decoder = spec.decoder.then(|| {
        let mut stages = Vec::new();
        let mut cur = *spec.channels.last().expect("validated");
        for (s, b) in (0..spec.blocks()).rev().filter(|&b| spec.pool[b]).enumerate() {
            let target = spec.channels[b];
            let up = push(
                format!("dec{s}.up"),
                LayerKind::UpConv { k: 2, cin: cur, cout: target },
                Scope::Decoder,
                &mut layers,
            );
            let conv1 = push(
                format!("dec{s}.conv1"),
                LayerKind::Conv { k: 3, cin: 2 * target, cout: target },
                Scope::Decoder,
                &mut layers,
            );
            let bn1 = spec.batchnorm.then(|| {
                push(format!("dec{s}.bn1"), LayerKind::BatchNorm { ch: target }, Scope::Decoder, &mut layers)
            });
            let conv2 = push(
                format!("dec{s}.conv2"),
                LayerKind::Conv { k: 3, cin: target, cout: target },
                Scope::Decoder,
                &mut layers,
            );
            let bn2 = spec.batchnorm.then(|| {
                push(format!("dec{s}.bn2"), LayerKind::BatchNorm { ch: target }, Scope::Decoder, &mut layers)
            });
            stages.push(DecoderStage { up, conv1, bn1, conv2, bn2, skip_block: b });
            cur = target;
        }
        let out_conv = push(
            "dec.out".into(),
            LayerKind::Conv { k: 1, cin: cur, cout: 1 },
            Scope::Decoder,
            &mut layers,
        );
        DecoderPlan { stages, out_conv }
    });

    let plan = Plan {
        input_hw: spec.input_hw,
        input_c: 1,
        blocks,
        head,
        decoder,
    };
    (plan, layers)
}

/// Total trainable parameter count of the whole network described by `spec`
/// (convolutions, dense layers, and batch-norm scale/shift; running
/// statistics are not trainable).
pub fn param_count(spec: &NetworkSpec) -> Result<usize> {
    spec.validate()?;
    let (_, layers) = build_plan(spec);
    Ok(layers.iter().map(|l| l.kind.trainable_count()).sum())
}

/// Parameter count of a bare convolution stack: `sum_i (k^2 c_{i-1} c_i + c_i)`
/// for 3x3 kernels over the given channel schedule starting from one input
/// channel. This is the closed-form view of the VC-style count restricted to
/// conv layers, kept for cross-checking the full enumeration.
pub fn conv_param_count(channels: &[usize]) -> usize {
    let mut cin = 1usize;
    let mut total = 0usize;
    for &c in channels {
        total += 9 * cin * c + c; // conv1 of the block
        total += 9 * c * c + c; // conv2 of the block
        cin = c;
    }
    total
}

/// Why a training run stopped (or that it never ran).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StoppingReason {
    Untrained,
    ThresholdMet,
    PatienceExhausted,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub group_id: u32,
    pub run_id: u32,
    pub experiment_id: String,
    pub epochs_trained: usize,
    pub steps_taken: u64,
    pub step_at_error_threshold: Option<u64>,
    pub stopping_reason: StoppingReason,
    /// Train-set 1-0 error at the end of training; None until trained.
    pub final_train_error: Option<f64>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        CheckpointMeta {
            seed: 0,
            group_id: 0,
            run_id: 0,
            experiment_id: String::new(),
            epochs_trained: 0,
            steps_taken: 0,
            step_at_error_threshold: None,
            stopping_reason: StoppingReason::Untrained,
            final_train_error: None,
        }
    }
}

/// A model: spec, current weights, the initialization snapshot, batch-norm
/// running statistics, and training metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub meta: CheckpointMeta,
    pub(crate) plan: Plan,
    layers: Vec<LayerDesc>,
    /// Trainable tensors per layer, layer order as in `layers`.
    pub(crate) params: Vec<Vec<Tensor>>,
    /// Snapshot of `params` taken at build time, never updated.
    pub(crate) init_params: Vec<Vec<Tensor>>,
    /// Non-trainable per-layer state (batch-norm running mean/var).
    pub(crate) state: Vec<Vec<Tensor>>,
}

/// Build a checkpoint with Kaiming-normal weights (std = sqrt(2 / fan_in)),
/// zero biases, unit batch-norm scale. The init snapshot equals the weights.
pub fn build(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<Checkpoint> {
    spec.validate()?;
    let (plan, layers) = build_plan(spec);
    let mut params = Vec::with_capacity(layers.len());
    let mut state = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let mut layer_rng = rng.derive(i as u64);
        let tensors = match layer.kind {
            LayerKind::Conv { k, cin, cout } | LayerKind::UpConv { k, cin, cout } => {
                let std = (2.0 / (k * k * cin) as f64).sqrt();
                let kernel = layer_rng.sample_normal(0.0, std, &[k, k, cin, cout]);
                vec![kernel, Tensor::zeros(&[cout])]
            }
            LayerKind::Dense { din, dout } => {
                let std = (2.0 / din as f64).sqrt();
                let w = layer_rng.sample_normal(0.0, std, &[din, dout]);
                vec![w, Tensor::zeros(&[dout])]
            }
            LayerKind::BatchNorm { ch } => {
                vec![Tensor::filled(&[ch], 1.0), Tensor::zeros(&[ch])]
            }
        };
        let st = match layer.kind {
            LayerKind::BatchNorm { ch } => vec![Tensor::zeros(&[ch]), Tensor::filled(&[ch], 1.0)],
            _ => vec![],
        };
        params.push(tensors);
        state.push(st);
    }
    Ok(Checkpoint {
        spec: spec.clone(),
        meta: CheckpointMeta { seed: rng.seed(), ..CheckpointMeta::default() },
        plan,
        layers,
        init_params: params.clone(),
        params,
        state,
    })
}

impl Checkpoint {
    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn params(&self) -> &[Vec<Tensor>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.params
    }

    /// Layer index of the i-th fully-connected head layer.
    pub fn fc_layer_index(&self, i: usize) -> usize {
        self.plan.head.fcs[i]
    }

    pub fn init_params(&self) -> &[Vec<Tensor>] {
        &self.init_params
    }

    pub fn state(&self) -> &[Vec<Tensor>] {
        &self.state
    }

    /// Reassemble from parts; shapes are validated against the spec's plan.
    pub fn from_parts(
        spec: NetworkSpec,
        meta: CheckpointMeta,
        params: Vec<Vec<Tensor>>,
        init_params: Vec<Vec<Tensor>>,
        state: Vec<Vec<Tensor>>,
    ) -> Result<Self> {
        spec.validate()?;
        let (plan, layers) = build_plan(&spec);
        let check = |name: &str, got: &[Vec<Tensor>], want: &dyn Fn(&LayerKind) -> Vec<Vec<usize>>| -> Result<()> {
            if got.len() != layers.len() {
                return Err(CoreError::ShapeMismatch {
                    op: "Checkpoint::from_parts",
                    detail: format!("{name}: {} layer groups, plan has {}", got.len(), layers.len()),
                });
            }
            for (layer, tensors) in layers.iter().zip(got) {
                let shapes = want(&layer.kind);
                if tensors.len() != shapes.len()
                    || tensors.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice())
                {
                    return Err(CoreError::ShapeMismatch {
                        op: "Checkpoint::from_parts",
                        detail: format!("{name}: layer `{}` tensor shapes do not match plan", layer.name),
                    });
                }
            }
            Ok(())
        };
        check("params", &params, &|k| k.param_shapes())?;
        check("init_params", &init_params, &|k| k.param_shapes())?;
        check("state", &state, &|k| k.state_shapes())?;
        Ok(Checkpoint { spec, meta, plan, layers, params, init_params, state })
    }

    /// Indices of the weight-bearing layers (conv/dense) in the given scope,
    /// in layer order. These are the `W_i` of the norm measures.
    pub fn weight_layer_indices(&self, scope: Scope) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.scope == scope && l.kind.is_weight_layer())
            .map(|(i, _)| i)
            .collect()
    }

    /// Matricized weight of layer `idx`: convolution kernels reshape to
    /// (C_out) x (k^2 C_in); dense weights are used as stored.
    pub fn matricized_weight(&self, idx: usize, which: WeightSet) -> Tensor {
        let src = match which {
            WeightSet::Current => &self.params[idx][0],
            WeightSet::Init => &self.init_params[idx][0],
        };
        matricize(&self.layers[idx].kind, src)
    }

    /// Count of trainable parameters in the given scope.
    pub fn trainable_count(&self, scope: Option<Scope>) -> usize {
        self.layers
            .iter()
            .filter(|l| scope.is_none_or(|s| l.scope == s))
            .map(|l| l.kind.trainable_count())
            .sum()
    }
}

/// Which parameter set to read from a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSet {
    Current,
    Init,
}

pub(crate) fn matricize(kind: &LayerKind, t: &Tensor) -> Tensor {
    match *kind {
        LayerKind::Conv { k, cin, cout } | LayerKind::UpConv { k, cin, cout } => {
            let cols = k * k * cin;
            let mut data = vec![0f32; cout * cols];
            // kernel layout [ky][kx][ci][co] -> matrix [co][(ky*k+kx)*cin+ci]
            for row in 0..cols {
                for co in 0..cout {
                    data[co * cols + row] = t.data()[row * cout + co];
                }
            }
            Tensor::new(&[cout, cols], data).expect("shape consistent")
        }
        LayerKind::Dense { din, dout } => {
            Tensor::new(&[din, dout], t.data().to_vec()).expect("shape consistent")
        }
        LayerKind::BatchNorm { .. } => unreachable!("batch-norm has no weight matrix"),
    }
}
