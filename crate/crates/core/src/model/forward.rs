//! Forward inference.
//!
//! Two paths: a batched, cache-building pass used by training (batch-norm
//! uses batch statistics, dropout is live), and a per-image stateless pass
//! used for evaluation (running statistics, dropout off). Every layer output
//! is checked finite; the error names the layer.

use crate::error::{CoreError, Result};
use crate::rng::SeededRng;
use crate::tensor::{self, Tensor};

use super::Checkpoint;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Inference mode. Train uses batch statistics and live dropout; eval uses
/// running statistics and no dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Classification logits, N x 2.
    pub logits: Tensor,
    /// Segmentation probabilities, N x H x W, when the spec has a decoder.
    pub masks: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f64>,
    pub istd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub x_in: Tensor,
    pub z1: Tensor,
    pub bn1: Option<BnCache>,
    pub a1_pre: Tensor,
    pub a1: Tensor,
    pub z2: Tensor,
    pub bn2: Option<BnCache>,
    pub a2_pre: Tensor,
    /// Post-ReLU activation, the skip source and pooling input.
    pub a2: Tensor,
    pub pool_idx: Option<Vec<u32>>,
    pub out: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct FcCache {
    pub x_in: Tensor,
    pub z: Tensor,
    /// Scale factors (0 or 1/(1-p)) applied after ReLU, when dropout is live.
    pub dropout: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecStageCache {
    pub x_in: Tensor,
    pub up_out: Tensor,
    pub concat: Tensor,
    pub z1: Tensor,
    pub bn1: Option<BnCache>,
    pub a1_pre: Tensor,
    pub a1: Tensor,
    pub z2: Tensor,
    pub bn2: Option<BnCache>,
    pub a2_pre: Tensor,
    pub a2: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct DecCache {
    pub stages: Vec<DecStageCache>,
    pub out_z: Tensor,
    pub masks: Tensor,
}

/// Everything the backward pass needs from a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) blocks: Vec<BlockCache>,
    pub(crate) fc: Vec<FcCache>,
    pub(crate) dec: Option<DecCache>,
}

/// New running statistics computed by a training forward pass; the trainer
/// applies them to the checkpoint after the step.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub layer: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

fn check_finite(t: &Tensor, layer: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFiniteActivation { layer: layer.to_string() })
    }
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.rank() != 4 {
        return Err(CoreError::ShapeMismatch {
            op,
            detail: format!("expected N x H x W x C batch, got shape {:?}", t.shape()),
        });
    }
    Ok((t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]))
}

fn image_of(batch: &Tensor, i: usize) -> Tensor {
    let sz: usize = batch.shape()[1..].iter().product();
    Tensor::new(&batch.shape()[1..], batch.data()[i * sz..(i + 1) * sz].to_vec())
        .expect("slice length matches")
}

fn conv_batch(x: &Tensor, kernel: &Tensor, bias: &Tensor, name: &str) -> Result<Tensor> {
    let (n, h, w, c) = dims4(x, "conv")?;
    debug_assert_eq!(kernel.shape()[2], c, "plan wiring keeps channels consistent");
    let cout = kernel.shape()[3];
    let pc = tensor::prepare_conv(kernel, bias);
    let mut out = Tensor::zeros(&[n, h, w, cout]);
    let isz = h * w * c;
    let osz = h * w * cout;
    for i in 0..n {
        tensor::conv2d_fast(
            &x.data()[i * isz..(i + 1) * isz],
            h,
            w,
            &pc,
            &mut out.data_mut()[i * osz..(i + 1) * osz],
        );
    }
    check_finite(&out, name)?;
    Ok(out)
}

fn upconv_batch(x: &Tensor, kernel: &Tensor, bias: &Tensor, name: &str) -> Result<Tensor> {
    let (n, h, w, _c) = dims4(x, "upconv")?;
    let cout = kernel.shape()[3];
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, oh, ow, cout]);
    let osz = oh * ow * cout;
    for i in 0..n {
        let img = image_of(x, i);
        let o = tensor::upconv2(&img, kernel, bias)?;
        out.data_mut()[i * osz..(i + 1) * osz].copy_from_slice(o.data());
    }
    check_finite(&out, name)?;
    Ok(out)
}

fn relu_batch(x: &Tensor) -> Tensor {
    tensor::relu(x)
}

fn pool_batch(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, h, w, c) = dims4(x, "maxpool")?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(&[n, oh, ow, c]);
    let mut idx = vec![0u32; n * oh * ow * c];
    let isz = h * w * c;
    let osz = oh * ow * c;
    for i in 0..n {
        let img = image_of(x, i);
        let (o, ids) = tensor::maxpool2_with_idx(&img)?;
        out.data_mut()[i * osz..(i + 1) * osz].copy_from_slice(o.data());
        for (dst, &src) in idx[i * osz..(i + 1) * osz].iter_mut().zip(&ids) {
            *dst = src + (i * isz) as u32;
        }
    }
    Ok((out, idx))
}

fn gap_batch(x: &Tensor) -> Result<Tensor> {
    let (n, _h, _w, c) = dims4(x, "global_avg_pool")?;
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let img = image_of(x, i);
        let g = tensor::global_avg_pool(&img)?;
        out.data_mut()[i * c..(i + 1) * c].copy_from_slice(g.data());
    }
    Ok(out)
}

fn dense_batch(x: &Tensor, w: &Tensor, b: &Tensor, name: &str) -> Result<Tensor> {
    let mut out = tensor::matmul(x, w)?;
    let dout = w.shape()[1];
    for row in out.data_mut().chunks_exact_mut(dout) {
        for (o, &bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    check_finite(&out, name)?;
    Ok(out)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, w, ca) = dims4(a, "concat")?;
    let (nb, hb, wb, cb) = dims4(b, "concat")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(CoreError::ShapeMismatch {
            op: "concat",
            detail: format!("spatial sizes differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let mut out = Tensor::zeros(&[n, h, w, ca + cb]);
    let oc = ca + cb;
    let od = out.data_mut();
    for p in 0..n * h * w {
        od[p * oc..p * oc + ca].copy_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        od[p * oc + ca..(p + 1) * oc].copy_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Ok(out)
}

fn sigmoid_batch(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

/// Batch-statistics normalization over N*H*W per channel.
fn bn_train_batch(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    name: &str,
) -> Result<(Tensor, BnCache, Tensor, Tensor)> {
    let (n, h, w, c) = dims4(x, "batchnorm")?;
    let m = (n * h * w) as f64;
    let mut mean = vec![0f64; c];
    for px in x.data().chunks_exact(c) {
        for (acc, &v) in mean.iter_mut().zip(px) {
            *acc += v as f64;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![0f64; c];
    for px in x.data().chunks_exact(c) {
        for ((acc, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    for (opx, px) in out.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for ch in 0..c {
            let xh = (px[ch] as f64 - mean[ch]) * istd[ch];
            opx[ch] = (gamma.data()[ch] as f64 * xh + beta.data()[ch] as f64) as f32;
        }
    }
    check_finite(&out, name)?;
    let mean_t = Tensor::new(&[c], mean.iter().map(|&v| v as f32).collect())?;
    let var_t = Tensor::new(&[c], var.iter().map(|&v| v as f32).collect())?;
    Ok((out, BnCache { mean, istd }, mean_t, var_t))
}

/// Running-statistics normalization of a single HxWxC image.
fn bn_eval_image(x: &Tensor, gamma: &Tensor, beta: &Tensor, rm: &Tensor, rv: &Tensor, name: &str) -> Result<Tensor> {
    let c = *x.shape().last().expect("rank >= 1");
    let mut out = Tensor::zeros(x.shape());
    for (opx, px) in out.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for ch in 0..c {
            let istd = 1.0 / (rv.data()[ch] as f64 + BN_EPS).sqrt();
            let xh = (px[ch] as f64 - rm.data()[ch] as f64) * istd;
            opx[ch] = (gamma.data()[ch] as f64 * xh + beta.data()[ch] as f64) as f32;
        }
    }
    check_finite(&out, name)?;
    Ok(out)
}

fn dropout_mask(rng: &mut SeededRng, len: usize, rate: f32) -> Vec<f32> {
    let scale = 1.0 / (1.0 - rate);
    (0..len).map(|_| if (rng.uniform() as f32) < rate { 0.0 } else { scale }).collect()
}

impl Checkpoint {
    /// Forward pass on an N x H x W x 1 batch.
    ///
    /// Train mode normalizes with batch statistics and applies dropout (the
    /// rng is required when the spec has dropout); running statistics are not
    /// modified — the training loop owns that. Eval mode is deterministic and
    /// needs no rng.
    pub fn forward(&self, batch: &Tensor, mode: Mode, rng: Option<&mut SeededRng>) -> Result<ForwardOutput> {
        match mode {
            Mode::Eval => self.forward_eval(batch, self.spec.decoder),
            Mode::Train => {
                let (out, _cache, _updates) = self.forward_train_cached(batch, rng)?;
                Ok(out)
            }
        }
    }

    /// Training-mode forward returning the backprop cache and the batch-norm
    /// running-statistic updates this batch implies.
    pub fn forward_train_cached(
        &self,
        batch: &Tensor,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(ForwardOutput, ForwardCache, Vec<RunningUpdate>)> {
        self.check_batch(batch)?;
        if self.plan.head.dropout > 0.0 && rng.is_none() {
            return Err(CoreError::InvalidSpec {
                what: "forward",
                detail: "train-mode forward with dropout requires an rng stream".into(),
            });
        }
        let mut updates = Vec::new();
        let mut blocks = Vec::with_capacity(self.plan.blocks.len());
        let mut x = batch.clone();
        for bp in &self.plan.blocks {
            let x_in = x;
            let (k1, b1) = (&self.params[bp.conv1][0], &self.params[bp.conv1][1]);
            let z1 = conv_batch(&x_in, k1, b1, &self.layers()[bp.conv1].name)?;
            let (a1_pre, bn1) = match bp.bn1 {
                Some(l) => {
                    let (o, cache, m, v) = bn_train_batch(&z1, &self.params[l][0], &self.params[l][1], &self.layers()[l].name)?;
                    updates.push(self.running_update(l, &m, &v));
                    (o, Some(cache))
                }
                None => (z1.clone(), None),
            };
            let a1 = relu_batch(&a1_pre);
            let (k2, b2) = (&self.params[bp.conv2][0], &self.params[bp.conv2][1]);
            let z2 = conv_batch(&a1, k2, b2, &self.layers()[bp.conv2].name)?;
            let (a2_pre, bn2) = match bp.bn2 {
                Some(l) => {
                    let (o, cache, m, v) = bn_train_batch(&z2, &self.params[l][0], &self.params[l][1], &self.layers()[l].name)?;
                    updates.push(self.running_update(l, &m, &v));
                    (o, Some(cache))
                }
                None => (z2.clone(), None),
            };
            let a2 = relu_batch(&a2_pre);
            let (out, pool_idx) = if bp.pool {
                let (o, idx) = pool_batch(&a2)?;
                (o, Some(idx))
            } else {
                (a2.clone(), None)
            };
            x = out.clone();
            blocks.push(BlockCache { x_in, z1, bn1, a1_pre, a1, z2, bn2, a2_pre, a2, pool_idx, out });
        }

        let mut h = gap_batch(&x)?;
        let mut fc_caches = Vec::with_capacity(self.plan.head.fcs.len());
        let n_fc = self.plan.head.fcs.len();
        for (i, &l) in self.plan.head.fcs.iter().enumerate() {
            let z = dense_batch(&h, &self.params[l][0], &self.params[l][1], &self.layers()[l].name)?;
            if i + 1 < n_fc {
                let mut a = relu_batch(&z);
                let dropout = if self.plan.head.dropout > 0.0 {
                    let mask = dropout_mask(
                        rng.as_deref_mut().expect("checked above"),
                        a.len(),
                        self.plan.head.dropout,
                    );
                    for (v, &m) in a.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    Some(mask)
                } else {
                    None
                };
                fc_caches.push(FcCache { x_in: h, z, dropout });
                h = a;
            } else {
                fc_caches.push(FcCache { x_in: h, z: z.clone(), dropout: None });
                h = z;
            }
        }
        let logits = h;

        let dec = match &self.plan.decoder {
            None => None,
            Some(dp) => {
                let mut dx = x.clone();
                let mut stages = Vec::with_capacity(dp.stages.len());
                for sp in &dp.stages {
                    let x_in = dx;
                    let up_out = upconv_batch(&x_in, &self.params[sp.up][0], &self.params[sp.up][1], &self.layers()[sp.up].name)?;
                    let skip = &blocks[sp.skip_block].a2;
                    let concat = concat_channels(&up_out, skip)?;
                    let z1 = conv_batch(&concat, &self.params[sp.conv1][0], &self.params[sp.conv1][1], &self.layers()[sp.conv1].name)?;
                    let (a1_pre, bn1) = match sp.bn1 {
                        Some(l) => {
                            let (o, cache, m, v) = bn_train_batch(&z1, &self.params[l][0], &self.params[l][1], &self.layers()[l].name)?;
                            updates.push(self.running_update(l, &m, &v));
                            (o, Some(cache))
                        }
                        None => (z1.clone(), None),
                    };
                    let a1 = relu_batch(&a1_pre);
                    let z2 = conv_batch(&a1, &self.params[sp.conv2][0], &self.params[sp.conv2][1], &self.layers()[sp.conv2].name)?;
                    let (a2_pre, bn2) = match sp.bn2 {
                        Some(l) => {
                            let (o, cache, m, v) = bn_train_batch(&z2, &self.params[l][0], &self.params[l][1], &self.layers()[l].name)?;
                            updates.push(self.running_update(l, &m, &v));
                            (o, Some(cache))
                        }
                        None => (z2.clone(), None),
                    };
                    let a2 = relu_batch(&a2_pre);
                    dx = a2.clone();
                    stages.push(DecStageCache { x_in, up_out, concat, z1, bn1, a1_pre, a1, z2, bn2, a2_pre, a2 });
                }
                let out_z = conv_batch(&dx, &self.params[dp.out_conv][0], &self.params[dp.out_conv][1], &self.layers()[dp.out_conv].name)?;
                let probs = sigmoid_batch(&out_z);
                let (n, hh, ww, _) = dims4(&probs, "mask")?;
                let masks = Tensor::new(&[n, hh, ww], probs.data().to_vec())?;
                Some(DecCache { stages, out_z, masks })
            }
        };

        let masks = dec.as_ref().map(|d| d.masks.clone());
        let cache = ForwardCache { blocks, fc: fc_caches, dec };
        Ok((ForwardOutput { logits, masks }, cache, updates))
    }

    fn running_update(&self, layer: usize, mean: &Tensor, var: &Tensor) -> RunningUpdate {
        let rm = &self.state[layer][0];
        let rv = &self.state[layer][1];
        let mix = |old: &Tensor, new: &Tensor| {
            let data = old
                .data()
                .iter()
                .zip(new.data())
                .map(|(&o, &n)| ((1.0 - BN_MOMENTUM) * o as f64 + BN_MOMENTUM * n as f64) as f32)
                .collect();
            Tensor::new(old.shape(), data).expect("same shape")
        };
        RunningUpdate { layer, mean: mix(rm, mean), var: mix(rv, var) }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let (_n, h, w, c) = dims4(batch, "forward")?;
        if (h, w) != self.plan.input_hw || c != self.plan.input_c {
            return Err(CoreError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch is {}x{}x{} but the spec wants {}x{}x{}",
                    h, w, c, self.plan.input_hw.0, self.plan.input_hw.1, self.plan.input_c
                ),
            });
        }
        Ok(())
    }

    /// Eval-mode forward (running statistics, no dropout), image by image.
    pub(crate) fn forward_eval(&self, batch: &Tensor, want_masks: bool) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let n = batch.shape()[0];
        let (ih, iw) = self.plan.input_hw;
        let mut logits = Tensor::zeros(&[n, 2]);
        let mut masks = if want_masks && self.plan.decoder.is_some() {
            Some(Tensor::zeros(&[n, ih, iw]))
        } else {
            None
        };
        // Convert conv kernels to f64 once for the whole batch.
        let prepared: Vec<Option<tensor::PreparedConv>> = self
            .layers()
            .iter()
            .enumerate()
            .map(|(i, l)| {
                matches!(l.kind, super::LayerKind::Conv { .. })
                    .then(|| tensor::prepare_conv(&self.params[i][0], &self.params[i][1]))
            })
            .collect();
        let conv_img = |x: &Tensor, layer: usize| -> Tensor {
            let pc = prepared[layer].as_ref().expect("conv layer prepared");
            let (h, w) = (x.shape()[0], x.shape()[1]);
            let mut out = Tensor::zeros(&[h, w, pc.cout]);
            tensor::conv2d_fast(x.data(), h, w, pc, out.data_mut());
            out
        };
        for i in 0..n {
            let mut x = image_of(batch, i);
            let mut skips: Vec<Option<Tensor>> = vec![None; self.plan.blocks.len()];
            let keep_skip: Vec<bool> = (0..self.plan.blocks.len())
                .map(|b| {
                    masks.is_some()
                        && self
                            .plan
                            .decoder
                            .as_ref()
                            .is_some_and(|d| d.stages.iter().any(|s| s.skip_block == b))
                })
                .collect();
            for (b, bp) in self.plan.blocks.iter().enumerate() {
                x = conv_img(&x, bp.conv1);
                check_finite(&x, &self.layers()[bp.conv1].name)?;
                if let Some(l) = bp.bn1 {
                    x = bn_eval_image(&x, &self.params[l][0], &self.params[l][1], &self.state[l][0], &self.state[l][1], &self.layers()[l].name)?;
                }
                x = tensor::relu(&x);
                x = conv_img(&x, bp.conv2);
                check_finite(&x, &self.layers()[bp.conv2].name)?;
                if let Some(l) = bp.bn2 {
                    x = bn_eval_image(&x, &self.params[l][0], &self.params[l][1], &self.state[l][0], &self.state[l][1], &self.layers()[l].name)?;
                }
                x = tensor::relu(&x);
                if keep_skip[b] {
                    skips[b] = Some(x.clone());
                }
                if bp.pool {
                    x = tensor::maxpool2(&x)?;
                }
            }
            let feat = x.clone();
            let mut h = tensor::global_avg_pool(&x)?;
            let n_fc = self.plan.head.fcs.len();
            for (j, &l) in self.plan.head.fcs.iter().enumerate() {
                let w = &self.params[l][0];
                let hm = Tensor::new(&[1, h.len()], h.data().to_vec())?;
                let mut z = tensor::matmul(&hm, w)?;
                for (zv, &bv) in z.data_mut().iter_mut().zip(self.params[l][1].data()) {
                    *zv += bv;
                }
                check_finite(&z, &self.layers()[l].name)?;
                h = Tensor::new(&[z.len()], z.data().to_vec())?;
                if j + 1 < n_fc {
                    h = tensor::relu(&h);
                }
            }
            logits.data_mut()[i * 2..(i + 1) * 2].copy_from_slice(h.data());

            if let (Some(m), Some(dp)) = (&mut masks, &self.plan.decoder) {
                let mut dx = feat;
                for sp in &dp.stages {
                    dx = tensor::upconv2(&dx, &self.params[sp.up][0], &self.params[sp.up][1])?;
                    check_finite(&dx, &self.layers()[sp.up].name)?;
                    let skip = skips[sp.skip_block].as_ref().expect("skip retained");
                    dx = concat_image(&dx, skip)?;
                    dx = conv_img(&dx, sp.conv1);
                    check_finite(&dx, &self.layers()[sp.conv1].name)?;
                    if let Some(l) = sp.bn1 {
                        dx = bn_eval_image(&dx, &self.params[l][0], &self.params[l][1], &self.state[l][0], &self.state[l][1], &self.layers()[l].name)?;
                    }
                    dx = tensor::relu(&dx);
                    dx = conv_img(&dx, sp.conv2);
                    check_finite(&dx, &self.layers()[sp.conv2].name)?;
                    if let Some(l) = sp.bn2 {
                        dx = bn_eval_image(&dx, &self.params[l][0], &self.params[l][1], &self.state[l][0], &self.state[l][1], &self.layers()[l].name)?;
                    }
                    dx = tensor::relu(&dx);
                }
                let z = conv_img(&dx, dp.out_conv);
                check_finite(&z, &self.layers()[dp.out_conv].name)?;
                let probs = sigmoid_batch(&z);
                m.data_mut()[i * ih * iw..(i + 1) * ih * iw].copy_from_slice(probs.data());
            }
        }
        Ok(ForwardOutput { logits, masks })
    }
}

fn concat_image(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (h, w, ca) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let cb = b.shape()[2];
    if b.shape()[0] != h || b.shape()[1] != w {
        return Err(CoreError::ShapeMismatch {
            op: "concat",
            detail: format!("spatial sizes differ: {:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let oc = ca + cb;
    let mut out = Tensor::zeros(&[h, w, oc]);
    let od = out.data_mut();
    for p in 0..h * w {
        od[p * oc..p * oc + ca].copy_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        od[p * oc + ca..(p + 1) * oc].copy_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Ok(out)
}
