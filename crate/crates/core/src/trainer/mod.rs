//! Training: Adam over hand-rolled backprop, the two stopping criteria,
//! training-curve recording, and evaluation metrics.
//!
//! A run is deterministic in `(spec, dataset, partition, config)`: weight
//! init, per-epoch shuffles, and dropout masks all come from streams derived
//! from `config.seed`, so reruns are bit-identical end to end.

mod adam;
mod loss;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use loss::{
    combined_loss, cross_entropy, cross_entropy_grad, dice_loss, dice_loss_grad, DICE_EPS,
};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::model::{backward, build, Checkpoint, Grads, Mode, NetworkSpec, StoppingReason};
use crate::rng::SeededRng;
use crate::synthdata::{LabeledDataset, Partition};
use crate::tensor::Tensor;

const INIT_TAG: u64 = 1;
const SHUFFLE_TAG: u64 = 2;
const DROPOUT_TAG: u64 = 3;

/// When to stop training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stopping {
    /// Stop once the per-epoch full-train-set 1-0 error reaches epsilon.
    TargetTrainError { epsilon: f64 },
    /// Stop after `epochs` consecutive epochs without a strict improvement of
    /// the validation 1-0 risk; the best-epoch weights are restored.
    Patience { epochs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Weight of the cross-entropy term; `1.0` trains classification only,
    /// below 1 the Dice term of the mask head joins in.
    pub lambda: f64,
    pub stopping: Stopping,
    pub max_epochs: usize,
    /// Train-error thresholds whose first-crossing steps are recorded. The
    /// first entry is the headline threshold stored in checkpoint metadata.
    pub error_thresholds: Vec<f64>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| CoreError::InvalidSpec { what: "train config", detail };
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(fail(format!("learning rate {} invalid", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(fail("batch size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(fail(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if let Stopping::Patience { epochs } = self.stopping {
            if epochs == 0 {
                return Err(fail("patience must be >= 1 epoch".into()));
            }
        }
        if self.error_thresholds.iter().any(|&t| !(0.0 < t && t < 1.0)) {
            return Err(fail(format!("thresholds {:?} must lie in (0, 1)", self.error_thresholds)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer step count at the end of this epoch.
    pub step: u64,
    /// Full-train-set 1-0 error, eval mode.
    pub train_error: f64,
    /// Validation 1-0 risk (patience mode only).
    pub val_risk: Option<f64>,
}

/// Per-epoch error curve plus first-crossing events per recorded threshold.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
    /// (threshold, step of first crossing), in the order crossings happened.
    pub crossings: Vec<(f64, u64)>,
    pub total_steps: u64,
}

impl TrainingTrace {
    pub fn first_crossing(&self, threshold: f64) -> Option<u64> {
        self.crossings.iter().find(|(t, _)| *t == threshold).map(|&(_, s)| s)
    }
}

/// Classification quality on one partition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalResult {
    /// 1-0 risk; always `1 - accuracy`.
    pub error: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub n: usize,
    pub dataset_tag: String,
}

/// Metrics from confusion counts. Positive class is label 1. Degenerate
/// denominators (no positives, no negatives, nothing predicted positive)
/// resolve to 1.0: there was nothing to get wrong.
pub fn confusion_metrics(tp: usize, fp: usize, fn_: usize, tn: usize) -> (f64, f64, f64, f64, f64) {
    let n = tp + fp + fn_ + tn;
    assert!(n > 0, "empty evaluation set");
    let accuracy = (tp + tn) as f64 / n as f64;
    let error = 1.0 - accuracy;
    let sensitivity = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let specificity = if tn + fp == 0 { 1.0 } else { tn as f64 / (tn + fp) as f64 };
    let f1 = if 2 * tp + fp + fn_ == 0 { 1.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
    (error, accuracy, f1, sensitivity, specificity)
}

/// Predicted class per row of N x 2 logits; ties go to class 0.
pub fn predictions(logits: &Tensor) -> Vec<u8> {
    logits
        .data()
        .chunks_exact(2)
        .map(|row| u8::from(row[1] > row[0]))
        .collect()
}

/// Eval-mode metrics of `ckpt` on the dataset rows named by `indices`.
pub fn evaluate(ckpt: &Checkpoint, ds: &LabeledDataset, indices: &[usize], tag: &str) -> Result<EvalResult> {
    if indices.is_empty() {
        return Err(CoreError::InvalidSpec {
            what: "evaluation",
            detail: "empty index set".into(),
        });
    }
    let batch = ds.batch(indices);
    let out = ckpt.forward(&batch, Mode::Eval, None)?;
    let preds = predictions(&out.logits);
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &i) in preds.iter().zip(indices) {
        match (ds.labels[i], p) {
            (1, 1) => tp += 1,
            (0, 1) => fp += 1,
            (1, 0) => fn_ += 1,
            (0, 0) => tn += 1,
            _ => unreachable!("labels are binary"),
        }
    }
    let (error, accuracy, f1, sensitivity, specificity) = confusion_metrics(tp, fp, fn_, tn);
    Ok(EvalResult { error, accuracy, f1, sensitivity, specificity, n: indices.len(), dataset_tag: tag.into() })
}

fn eval_error(ckpt: &Checkpoint, ds: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    Ok(evaluate(ckpt, ds, indices, "")?.error)
}

/// Output of one gradient computation.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Grads,
    pub logits: Tensor,
    pub masks: Option<Tensor>,
}

/// Forward + loss + reverse pass on one batch. `lambda` weights the
/// cross-entropy term; below 1 the Dice term requires ground-truth masks and
/// a decoder. Gradient shapes mirror the weight shapes.
pub fn backprop(
    ckpt: &Checkpoint,
    images: &Tensor,
    labels: &[u8],
    gt_masks: Option<&Tensor>,
    lambda: f64,
    rng: Option<&mut SeededRng>,
) -> Result<StepOutput> {
    let (out, cache, _updates) = ckpt.forward_train_cached(images, rng)?;
    let (ce, mut dlogits) = cross_entropy_grad(&out.logits, labels)?;
    for g in dlogits.data_mut() {
        *g *= lambda as f32;
    }
    let mut loss = lambda * ce;
    let dmask = if lambda < 1.0 {
        let gt = gt_masks.ok_or_else(|| CoreError::InvalidSpec {
            what: "backprop",
            detail: "lambda < 1 requires ground-truth masks".into(),
        })?;
        let pred = out.masks.as_ref().ok_or_else(|| CoreError::InvalidSpec {
            what: "backprop",
            detail: "lambda < 1 requires a decoder (with_decoder spec)".into(),
        })?;
        let (di, mut dmask) = dice_loss_grad(pred, gt)?;
        loss += (1.0 - lambda) * di;
        for g in dmask.data_mut() {
            *g *= (1.0 - lambda) as f32;
        }
        Some(dmask)
    } else {
        None
    };
    let grads = backward(ckpt, &cache, &dlogits, dmask.as_ref())?;
    Ok(StepOutput { loss, grads, logits: out.logits, masks: out.masks })
}

/// Train a fresh model on the partition's train rows. Returns the checkpoint
/// (weights restored to the best epoch under patience stopping) and the
/// per-epoch trace. Deterministic in `config.seed`.
pub fn train(
    spec: &NetworkSpec,
    ds: &LabeledDataset,
    partition: &Partition,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainingTrace)> {
    config.validate()?;
    if matches!(config.stopping, Stopping::Patience { .. }) && partition.val.is_none() {
        return Err(CoreError::InvalidSpec {
            what: "train",
            detail: "patience stopping requires a validation split".into(),
        });
    }
    if config.lambda < 1.0 && (ds.masks.is_none() || !spec.decoder) {
        return Err(CoreError::InvalidSpec {
            what: "train",
            detail: "combined loss requires masks in the dataset and a decoder in the spec".into(),
        });
    }
    if partition.train.is_empty() {
        return Err(CoreError::InvalidSpec { what: "train", detail: "empty train partition".into() });
    }

    let root = SeededRng::new(config.seed, 0);
    let mut ckpt = build(spec, &mut root.derive(INIT_TAG))?;
    ckpt.meta.seed = config.seed;
    let mut adam = AdamState::new(&ckpt);
    let mut trace = TrainingTrace::default();
    let mut crossed: Vec<bool> = vec![false; config.error_thresholds.len()];
    let mut step: u64 = 0;
    let mut reason = StoppingReason::MaxEpochs;

    let mut best_val = f64::INFINITY;
    let mut best_snapshot: Option<(Vec<Vec<Tensor>>, Vec<Vec<Tensor>>)> = None;
    let mut stale_epochs = 0usize;

    'training: for epoch in 1..=config.max_epochs {
        let mut order = partition.train.clone();
        root.derive(SHUFFLE_TAG).derive(epoch as u64).shuffle(&mut order);

        for chunk in order.chunks(config.batch_size) {
            let images = ds.batch(chunk);
            let labels = ds.labels_at(chunk);
            let masks = if config.lambda < 1.0 { ds.masks_at(chunk) } else { None };
            let mut drop_rng = root.derive(DROPOUT_TAG).derive(step);

            let (out, cache, updates) = ckpt
                .forward_train_cached(&images, Some(&mut drop_rng))
                .map_err(|e| at_step(e, epoch, step))?;
            let (ce, mut dlogits) = cross_entropy_grad(&out.logits, &labels)?;
            let mut loss = config.lambda * ce;
            for g in dlogits.data_mut() {
                *g *= config.lambda as f32;
            }
            let dmask = match (&masks, &out.masks) {
                (Some(gt), Some(pred)) => {
                    let (di, mut dm) = dice_loss_grad(pred, gt)?;
                    loss += (1.0 - config.lambda) * di;
                    for g in dm.data_mut() {
                        *g *= (1.0 - config.lambda) as f32;
                    }
                    Some(dm)
                }
                _ => None,
            };
            if !loss.is_finite() {
                return Err(CoreError::Diverged {
                    epoch,
                    step,
                    detail: format!("loss became {loss}"),
                });
            }
            let grads = backward(&ckpt, &cache, &dlogits, dmask.as_ref())?;
            adam_step(&mut ckpt.params, &grads, &mut adam, config.learning_rate, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
                .map_err(|e| at_step(e, epoch, step))?;
            for u in updates {
                ckpt.state[u.layer][0] = u.mean;
                ckpt.state[u.layer][1] = u.var;
            }
            step += 1;
        }

        let train_error = eval_error(&ckpt, ds, &partition.train)?;
        for (i, &thr) in config.error_thresholds.iter().enumerate() {
            if !crossed[i] && train_error <= thr {
                crossed[i] = true;
                trace.crossings.push((thr, step));
            }
        }
        let val_risk = match config.stopping {
            Stopping::Patience { .. } => {
                Some(eval_error(&ckpt, ds, partition.val.as_ref().expect("checked above"))?)
            }
            Stopping::TargetTrainError { .. } => None,
        };
        trace.epochs.push(EpochRecord { epoch, step, train_error, val_risk });

        match config.stopping {
            Stopping::TargetTrainError { epsilon } => {
                if train_error <= epsilon {
                    reason = StoppingReason::ThresholdMet;
                    break 'training;
                }
            }
            Stopping::Patience { epochs } => {
                let val = val_risk.expect("patience mode always evaluates");
                if val < best_val {
                    best_val = val;
                    best_snapshot = Some((ckpt.params.clone(), ckpt.state.clone()));
                    stale_epochs = 0;
                } else {
                    stale_epochs += 1;
                    if stale_epochs >= epochs {
                        reason = StoppingReason::PatienceExhausted;
                        break 'training;
                    }
                }
            }
        }
    }

    if matches!(config.stopping, Stopping::Patience { .. }) {
        if let Some((params, state)) = best_snapshot {
            ckpt.params = params;
            ckpt.state = state;
        }
    }

    ckpt.meta.epochs_trained = trace.epochs.len();
    ckpt.meta.steps_taken = step;
    ckpt.meta.stopping_reason = reason;
    ckpt.meta.final_train_error = Some(eval_error(&ckpt, ds, &partition.train)?);
    ckpt.meta.step_at_error_threshold = config
        .error_thresholds
        .first()
        .and_then(|&t| trace.first_crossing(t));
    trace.total_steps = step;
    Ok((ckpt, trace))
}

fn at_step(e: CoreError, epoch: usize, step: u64) -> CoreError {
    match e {
        CoreError::Diverged { detail, .. } => CoreError::Diverged { epoch, step, detail },
        CoreError::NonFiniteActivation { layer } => CoreError::Diverged {
            epoch,
            step,
            detail: format!("non-finite activation in layer `{layer}`"),
        },
        other => other,
    }
}

/// Write a trace as structured text: one `epoch` record per epoch plus one
/// `crossing` record per threshold event.
pub fn write_trace(trace: &TrainingTrace, path: &Path) -> Result<()> {
    let mut s = String::from("kind,a,b,c,d\n");
    for e in &trace.epochs {
        let val = e.val_risk.map(|v| v.to_string()).unwrap_or_else(|| "NA".into());
        writeln!(s, "epoch,{},{},{},{}", e.epoch, e.step, e.train_error, val).expect("string write");
    }
    for (thr, st) in &trace.crossings {
        writeln!(s, "crossing,{thr},{st},,").expect("string write");
    }
    writeln!(s, "total,{},,,", trace.total_steps).expect("string write");
    std::fs::write(path, s)?;
    Ok(())
}

/// Parse a trace written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<TrainingTrace> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: &str| CoreError::InvalidSpec {
        what: "training trace",
        detail: format!("malformed line: {line}"),
    };
    let mut trace = TrainingTrace::default();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        match parts.first() {
            Some(&"epoch") if parts.len() == 5 => {
                let val = if parts[4] == "NA" {
                    None
                } else {
                    Some(parts[4].parse().map_err(|_| bad(line))?)
                };
                trace.epochs.push(EpochRecord {
                    epoch: parts[1].parse().map_err(|_| bad(line))?,
                    step: parts[2].parse().map_err(|_| bad(line))?,
                    train_error: parts[3].parse().map_err(|_| bad(line))?,
                    val_risk: val,
                });
            }
            Some(&"crossing") if parts.len() == 5 => {
                trace.crossings.push((
                    parts[1].parse().map_err(|_| bad(line))?,
                    parts[2].parse().map_err(|_| bad(line))?,
                ));
            }
            Some(&"total") if parts.len() == 5 => {
                trace.total_steps = parts[1].parse().map_err(|_| bad(line))?;
            }
            _ => return Err(bad(line)),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, DatasetSpec};

    fn tiny_dataset() -> LabeledDataset {
        let spec = DatasetSpec {
            n_samples: 24,
            image_hw: (16, 16),
            radius: (3.0, 4.5),
            ring_thickness: (1.5, 2.0),
            ..DatasetSpec::desk_default()
        };
        generate(&spec, 5).unwrap()
    }

    fn tiny_net() -> NetworkSpec {
        NetworkSpec::vgg_like((16, 16), 1, 2, false, 0.0, false).unwrap()
    }

    #[test]
    fn confusion_worked_example() {
        let (error, accuracy, f1, sens, spec) = confusion_metrics(3, 1, 2, 4);
        assert!((sens - 0.6).abs() < 1e-12);
        assert!((spec - 0.8).abs() < 1e-12);
        assert!((f1 - 2.0 * 3.0 / (2.0 * 3.0 + 1.0 + 2.0)).abs() < 1e-12);
        assert!((f1 - 0.666_667).abs() < 1e-6);
        assert!((error + accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn confusion_perfect_and_degenerate() {
        let (error, acc, f1, sens, spec) = confusion_metrics(5, 0, 0, 5);
        assert_eq!((error, acc, f1, sens, spec), (0.0, 1.0, 1.0, 1.0, 1.0));
        // Always-positive predictor on balanced data.
        let (_, _, _, sens, spec) = confusion_metrics(5, 5, 0, 0);
        assert_eq!(sens, 1.0);
        assert_eq!(spec, 0.0);
    }

    #[test]
    fn tie_logits_predict_class_zero() {
        let logits = Tensor::new(&[2, 2], vec![0.5, 0.5, -1.0, 2.0]).unwrap();
        assert_eq!(predictions(&logits), vec![0, 1]);
    }

    #[test]
    fn max_epochs_zero_returns_init() {
        let ds = tiny_dataset();
        let part = ds.split.partition(0);
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            lambda: 1.0,
            stopping: Stopping::TargetTrainError { epsilon: 0.01 },
            max_epochs: 0,
            error_thresholds: vec![0.01],
            seed: 7,
        };
        let (ckpt, trace) = train(&tiny_net(), &ds, &part, &config).unwrap();
        assert_eq!(ckpt.meta.stopping_reason, StoppingReason::MaxEpochs);
        assert_eq!(ckpt.meta.epochs_trained, 0);
        assert_eq!(trace.total_steps, 0);
        // Weights equal the init snapshot.
        assert_eq!(ckpt.params(), ckpt.init_params());
    }

    #[test]
    fn patience_with_constant_risk_stops_after_p_plus_one() {
        let mut ds = tiny_dataset();
        ds.split = crate::synthdata::make_folds(ds.len(), crate::synthdata::SplitScheme::FiveFold, 3).unwrap();
        let part = ds.split.partition(0);
        let p = 3;
        let config = TrainConfig {
            // Vanishing learning rate: the decision function never changes, so
            // the validation risk is constant epoch over epoch.
            learning_rate: 1e-12,
            batch_size: 4,
            lambda: 1.0,
            stopping: Stopping::Patience { epochs: p },
            max_epochs: 50,
            error_thresholds: vec![0.1],
            seed: 11,
        };
        let (ckpt, trace) = train(&tiny_net(), &ds, &part, &config).unwrap();
        assert_eq!(ckpt.meta.stopping_reason, StoppingReason::PatienceExhausted);
        // First epoch sets the best; P more non-improving epochs exhaust it.
        assert_eq!(trace.epochs.len(), p + 1);
        let risks: Vec<f64> = trace.epochs.iter().map(|e| e.val_risk.unwrap()).collect();
        assert!(risks.windows(2).all(|w| w[0] == w[1]), "risk moved: {risks:?}");
    }

    #[test]
    fn patience_requires_validation_split() {
        let ds = tiny_dataset();
        let part = ds.split.partition(0); // holdout: no val
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            lambda: 1.0,
            stopping: Stopping::Patience { epochs: 2 },
            max_epochs: 5,
            error_thresholds: vec![0.1],
            seed: 1,
        };
        assert!(train(&tiny_net(), &ds, &part, &config).is_err());
    }

    #[test]
    fn trace_roundtrip() {
        let trace = TrainingTrace {
            epochs: vec![
                EpochRecord { epoch: 1, step: 10, train_error: 0.5, val_risk: None },
                EpochRecord { epoch: 2, step: 20, train_error: 0.25, val_risk: Some(0.375) },
            ],
            crossings: vec![(0.5, 10), (0.3, 20)],
            total_steps: 20,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        write_trace(&trace, &path).unwrap();
        assert_eq!(read_trace(&path).unwrap(), trace);
    }

    #[test]
    fn thresholds_outside_unit_interval_rejected() {
        let config = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 1,
            lambda: 1.0,
            stopping: Stopping::TargetTrainError { epsilon: 0.01 },
            max_epochs: 1,
            error_thresholds: vec![1.5],
            seed: 0,
        };
        assert!(config.validate().is_err());
    }
}
