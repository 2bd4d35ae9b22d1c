//! The margin and the 25 complexity measures of a trained checkpoint.
//!
//! Measures are computed on the classification branch (encoder plus FC head):
//! decoder weights never enter the norms, the path forward, or the
//! perturbation vector. Norm measures use matricized kernel weights without
//! biases; the PAC-Bayes vector `w` includes every trainable parameter of the
//! branch (biases and batch-norm scale/shift included), which also defines
//! omega.
//!
//! A measure whose preconditions fail (non-positive margin, a zero spectral
//! norm, a sigma search pinned at a bracket edge, a never-crossed error
//! threshold) carries an explicit flag. Where the formula still produces a
//! number (e.g. the init-distance flatness measures at w = w0), the number is
//! kept alongside the flag.

mod norms;
mod pacbayes;

pub use norms::{frobenius_measures, margin_percentile, spectral_measures, LayerNorms};
pub use pacbayes::{
    criterion_curve, flatness_measures, pacbayes_sigma, BracketEdge, FlatnessInputs, PacBayesConfig,
    PerturbMode, SigmaSearch,
};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::linalg::spectral_norm;
use crate::model::{Checkpoint, Mode, Scope, WeightSet};
use crate::rng::SeededRng;
use crate::synthdata::LabeledDataset;
use crate::trainer::TrainingTrace;

const SPECTRAL_TAG: u64 = 30;
const PACBAYES_TAG: u64 = 31;

/// The 25 measures, in canonical report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeasureId {
    NumParams,
    InverseMargin,
    LogProdOfSpec,
    LogProdOfSpecOverMargin,
    LogSumOfSpec,
    LogSumOfSpecOverMargin,
    LogSpecInitMain,
    LogSpecOrigMain,
    FroOverSpec,
    FroDist,
    LogProdOfFro,
    LogProdOfFroOverMargin,
    LogSumOfFro,
    LogSumOfFroOverMargin,
    DistSpecInit,
    ParamNorm,
    PathNorm,
    PathNormOverMargin,
    PacbayesFlatness,
    PacbayesInit,
    PacbayesOrig,
    PacbayesMagFlatness,
    PacbayesMagInit,
    PacbayesMagOrig,
    StepsToError,
}

impl MeasureId {
    pub const ALL: [MeasureId; 25] = [
        MeasureId::NumParams,
        MeasureId::InverseMargin,
        MeasureId::LogProdOfSpec,
        MeasureId::LogProdOfSpecOverMargin,
        MeasureId::LogSumOfSpec,
        MeasureId::LogSumOfSpecOverMargin,
        MeasureId::LogSpecInitMain,
        MeasureId::LogSpecOrigMain,
        MeasureId::FroOverSpec,
        MeasureId::FroDist,
        MeasureId::LogProdOfFro,
        MeasureId::LogProdOfFroOverMargin,
        MeasureId::LogSumOfFro,
        MeasureId::LogSumOfFroOverMargin,
        MeasureId::DistSpecInit,
        MeasureId::ParamNorm,
        MeasureId::PathNorm,
        MeasureId::PathNormOverMargin,
        MeasureId::PacbayesFlatness,
        MeasureId::PacbayesInit,
        MeasureId::PacbayesOrig,
        MeasureId::PacbayesMagFlatness,
        MeasureId::PacbayesMagInit,
        MeasureId::PacbayesMagOrig,
        MeasureId::StepsToError,
    ];

    /// Canonical dotted name: the frozen column header of every report.
    /// `dist.spec.init` is sometimes listed elsewhere as `log.dist.spec.init`;
    /// the quantity here is the plain (un-logged) sum, reported under the
    /// plain name.
    pub fn name(self) -> &'static str {
        match self {
            MeasureId::NumParams => "num.params",
            MeasureId::InverseMargin => "inverse.margin",
            MeasureId::LogProdOfSpec => "log.prod.of.spec",
            MeasureId::LogProdOfSpecOverMargin => "log.prod.of.spec.over.margin",
            MeasureId::LogSumOfSpec => "log.sum.of.spec",
            MeasureId::LogSumOfSpecOverMargin => "log.sum.of.spec.over.margin",
            MeasureId::LogSpecInitMain => "log.spec.init.main",
            MeasureId::LogSpecOrigMain => "log.spec.orig.main",
            MeasureId::FroOverSpec => "fro.over.spec",
            MeasureId::FroDist => "fro.dist",
            MeasureId::LogProdOfFro => "log.prod.of.fro",
            MeasureId::LogProdOfFroOverMargin => "log.prod.of.fro.over.margin",
            MeasureId::LogSumOfFro => "log.sum.of.fro",
            MeasureId::LogSumOfFroOverMargin => "log.sum.of.fro.over.margin",
            MeasureId::DistSpecInit => "dist.spec.init",
            MeasureId::ParamNorm => "param.norm",
            MeasureId::PathNorm => "path.norm",
            MeasureId::PathNormOverMargin => "path.norm.over.margin",
            MeasureId::PacbayesFlatness => "pacbayes.flatness",
            MeasureId::PacbayesInit => "pacbayes.init",
            MeasureId::PacbayesOrig => "pacbayes.orig",
            MeasureId::PacbayesMagFlatness => "pacbayes.mag.flatness",
            MeasureId::PacbayesMagInit => "pacbayes.mag.init",
            MeasureId::PacbayesMagOrig => "pacbayes.mag.orig",
            MeasureId::StepsToError => "steps.to.error",
        }
    }

    pub fn from_name(name: &str) -> Option<MeasureId> {
        MeasureId::ALL.iter().copied().find(|m| m.name() == name)
    }

    pub fn index(self) -> usize {
        MeasureId::ALL.iter().position(|&m| m == self).expect("member of ALL")
    }
}

/// Why a measure is flagged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Undefined {
    MarginNotPositive,
    ZeroSpectralNorm,
    LogOfNonPositive,
    SigmaAtBracketEdge,
    ThresholdNotCrossed,
}

impl Undefined {
    pub fn as_str(self) -> &'static str {
        match self {
            Undefined::MarginNotPositive => "margin-not-positive",
            Undefined::ZeroSpectralNorm => "zero-spectral-norm",
            Undefined::LogOfNonPositive => "log-of-non-positive",
            Undefined::SigmaAtBracketEdge => "sigma-at-bracket-edge",
            Undefined::ThresholdNotCrossed => "threshold-not-crossed",
        }
    }
}

/// One measure's outcome. `value` is the formula's number when it exists;
/// `flag` marks a failed precondition. A flagged entry is excluded from
/// correlation regardless of `value`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureEntry {
    pub value: Option<f64>,
    pub flag: Option<Undefined>,
}

impl MeasureEntry {
    /// The value usable for correlation: defined and unflagged.
    pub fn usable(&self) -> Option<f64> {
        if self.flag.is_none() {
            self.value
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureRow {
    pub name: String,
    pub value: Option<f64>,
    pub flag: Option<Undefined>,
}

/// All 25 measures plus the auxiliaries they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReport {
    /// Exactly 25 rows, in [`MeasureId::ALL`] order.
    pub rows: Vec<MeasureRow>,
    pub margin: f64,
    pub sigma: SigmaSearch,
    pub sigma_mag: SigmaSearch,
    /// Number of weight layers (d) in the classification branch.
    pub layer_count: usize,
    /// Number of trainable parameters (omega) in the classification branch.
    pub omega: usize,
    /// Training-set size (m).
    pub train_size: usize,
    /// Wall time per measure group, seconds. Volatile; not serialized.
    #[serde(skip)]
    pub timings: Vec<(String, f64)>,
}

impl MeasureReport {
    pub fn get(&self, id: MeasureId) -> MeasureEntry {
        let row = &self.rows[id.index()];
        MeasureEntry { value: row.value, flag: row.flag }
    }

    /// Formula value regardless of flags (for identity checks).
    pub fn raw_value(&self, id: MeasureId) -> Option<f64> {
        self.rows[id.index()].value
    }

    pub fn usable(&self, id: MeasureId) -> Option<f64> {
        self.get(id).usable()
    }

    pub fn flagged(&self) -> Vec<(MeasureId, Undefined)> {
        MeasureId::ALL
            .iter()
            .filter_map(|&id| self.get(id).flag.map(|f| (id, f)))
            .collect()
    }
}

/// Everything `compute_all` needs beyond the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub pacbayes: PacBayesConfig,
    pub spectral_tol: f64,
    pub spectral_max_iter: usize,
    /// Train-error threshold of the optimization measure (must be one of the
    /// thresholds the trainer recorded).
    pub steps_threshold: f64,
    pub seed: u64,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            pacbayes: PacBayesConfig::default(),
            spectral_tol: 1e-6,
            spectral_max_iter: 200,
            steps_threshold: 0.01,
            seed: 0,
        }
    }
}

/// Margin: 10th percentile over the train rows of
/// (true-class logit - other-class logit), eval mode.
pub fn margin(ckpt: &Checkpoint, ds: &LabeledDataset, train_idx: &[usize]) -> Result<f64> {
    if train_idx.is_empty() {
        return Err(CoreError::InvalidSpec { what: "margin", detail: "empty training set".into() });
    }
    let out = ckpt.forward(&ds.batch(train_idx), Mode::Eval, None)?;
    let margins: Vec<f64> = out
        .logits
        .data()
        .chunks_exact(2)
        .zip(train_idx)
        .map(|(row, &i)| {
            let (z0, z1) = (row[0] as f64, row[1] as f64);
            if ds.labels[i] == 0 {
                z0 - z1
            } else {
                z1 - z0
            }
        })
        .collect();
    Ok(margin_percentile(&margins))
}

/// Per-layer norms of the classification branch's weight layers, computed
/// once and shared by all norm measures (so the closed-form identities hold
/// exactly on the same estimates).
pub fn layer_norms(ckpt: &Checkpoint, cfg: &MeasureConfig) -> Result<Vec<LayerNorms>> {
    let rng = SeededRng::new(cfg.seed, SPECTRAL_TAG);
    let mut out = Vec::new();
    for (pos, idx) in ckpt.weight_layer_indices(Scope::Classifier).into_iter().enumerate() {
        let w = ckpt.matricized_weight(idx, WeightSet::Current);
        let w0 = ckpt.matricized_weight(idx, WeightSet::Init);
        let mut diff = w.clone();
        for (d, &i) in diff.data_mut().iter_mut().zip(w0.data()) {
            *d -= i;
        }
        let mut rng_w = rng.derive(pos as u64 * 2);
        let mut rng_d = rng.derive(pos as u64 * 2 + 1);
        let sigma = spectral_norm(&w, cfg.spectral_tol, cfg.spectral_max_iter, &mut rng_w)?.value;
        let dist_sigma = spectral_norm(&diff, cfg.spectral_tol, cfg.spectral_max_iter, &mut rng_d)?.value;
        out.push(LayerNorms {
            sigma,
            fro_sq: crate::tensor::frobenius_norm_sq(&w),
            dist_fro_sq: crate::tensor::frobenius_norm_sq(&diff),
            dist_sigma,
        });
    }
    Ok(out)
}

/// First-crossing step of the configured threshold, flagged when the run
/// never got there.
pub fn steps_measure(trace: &TrainingTrace, threshold: f64) -> MeasureEntry {
    match trace.first_crossing(threshold) {
        Some(step) => MeasureEntry { value: Some(step as f64), flag: None },
        None => MeasureEntry { value: None, flag: Some(Undefined::ThresholdNotCrossed) },
    }
}

/// Compute the full 25-measure report. Deterministic in `cfg.seed`.
pub fn compute_all(
    ckpt: &Checkpoint,
    ds: &LabeledDataset,
    train_idx: &[usize],
    trace: &TrainingTrace,
    cfg: &MeasureConfig,
) -> Result<MeasureReport> {
    let mut timings = Vec::new();
    let clock = Instant::now();

    let gamma = margin(ckpt, ds, train_idx)?;
    let mut t_prev = clock.elapsed().as_secs_f64();
    timings.push(("margin".to_string(), t_prev));

    let norms = layer_norms(ckpt, cfg)?;
    let d = norms.len();
    let spec = spectral_measures(&norms, gamma);
    let fro = frobenius_measures(&norms, gamma);
    let t_now = clock.elapsed().as_secs_f64();
    timings.push(("norms".to_string(), t_now - t_prev));
    t_prev = t_now;

    let path_logits = ckpt.forward_squared_on_ones()?;
    let path_norm: f64 = path_logits.data().iter().map(|&v| v as f64).sum();
    let path_entry = MeasureEntry { value: Some(path_norm), flag: None };
    let path_margin = if gamma > 0.0 {
        MeasureEntry { value: Some(path_norm / (gamma * gamma)), flag: None }
    } else if gamma < 0.0 {
        MeasureEntry { value: Some(path_norm / (gamma * gamma)), flag: Some(Undefined::MarginNotPositive) }
    } else {
        MeasureEntry { value: None, flag: Some(Undefined::MarginNotPositive) }
    };
    let t_now = clock.elapsed().as_secs_f64();
    timings.push(("path".to_string(), t_now - t_prev));
    t_prev = t_now;

    let pb_rng = SeededRng::new(cfg.seed, PACBAYES_TAG);
    let sigma = pacbayes_sigma(ckpt, ds, train_idx, PerturbMode::Uniform, &cfg.pacbayes, &pb_rng)?;
    let sigma_mag = pacbayes_sigma(ckpt, ds, train_idx, PerturbMode::Magnitude, &cfg.pacbayes, &pb_rng)?;
    let w = ckpt.vectorize(Some(Scope::Classifier));
    let w0 = ckpt.vectorize_init(Some(Scope::Classifier));
    let flat = flatness_measures(&FlatnessInputs {
        sigma: sigma.sigma,
        sigma_mag: sigma_mag.sigma,
        w: &w.values,
        w0: &w0.values,
        m: train_idx.len(),
        delta: cfg.pacbayes.delta,
        epsilon: cfg.pacbayes.epsilon,
        mag_orig_uses_magnitude: cfg.pacbayes.mag_orig_uses_magnitude,
    });
    let uniform_flag = sigma.at_edge.map(|_| Undefined::SigmaAtBracketEdge);
    let mag_flag = sigma_mag.at_edge.map(|_| Undefined::SigmaAtBracketEdge);
    let t_now = clock.elapsed().as_secs_f64();
    timings.push(("pacbayes".to_string(), t_now - t_prev));
    t_prev = t_now;

    let steps = steps_measure(trace, cfg.steps_threshold);
    let num_params = ckpt.trainable_count(Some(Scope::Classifier));
    let inverse_margin = if gamma > 0.0 {
        MeasureEntry { value: Some(1.0 / (gamma * gamma)), flag: None }
    } else if gamma < 0.0 {
        MeasureEntry { value: Some(1.0 / (gamma * gamma)), flag: Some(Undefined::MarginNotPositive) }
    } else {
        MeasureEntry { value: None, flag: Some(Undefined::MarginNotPositive) }
    };

    let entries: Vec<(MeasureId, MeasureEntry)> = vec![
        (MeasureId::NumParams, MeasureEntry { value: Some(num_params as f64), flag: None }),
        (MeasureId::InverseMargin, inverse_margin),
        (MeasureId::LogProdOfSpec, spec.log_prod_of_spec),
        (MeasureId::LogProdOfSpecOverMargin, spec.log_prod_of_spec_over_margin),
        (MeasureId::LogSumOfSpec, spec.log_sum_of_spec),
        (MeasureId::LogSumOfSpecOverMargin, spec.log_sum_of_spec_over_margin),
        (MeasureId::LogSpecInitMain, spec.log_spec_init_main),
        (MeasureId::LogSpecOrigMain, spec.log_spec_orig_main),
        (MeasureId::FroOverSpec, spec.fro_over_spec),
        (MeasureId::FroDist, fro.fro_dist),
        (MeasureId::LogProdOfFro, fro.log_prod_of_fro),
        (MeasureId::LogProdOfFroOverMargin, fro.log_prod_of_fro_over_margin),
        (MeasureId::LogSumOfFro, fro.log_sum_of_fro),
        (MeasureId::LogSumOfFroOverMargin, fro.log_sum_of_fro_over_margin),
        (MeasureId::DistSpecInit, fro.dist_spec_init),
        (MeasureId::ParamNorm, fro.param_norm),
        (MeasureId::PathNorm, path_entry),
        (MeasureId::PathNormOverMargin, path_margin),
        (
            MeasureId::PacbayesFlatness,
            MeasureEntry { value: Some(flat.pacbayes_flatness), flag: uniform_flag },
        ),
        (MeasureId::PacbayesInit, MeasureEntry { value: Some(flat.pacbayes_init), flag: uniform_flag }),
        (MeasureId::PacbayesOrig, MeasureEntry { value: Some(flat.pacbayes_orig), flag: uniform_flag }),
        (
            MeasureId::PacbayesMagFlatness,
            MeasureEntry { value: Some(flat.pacbayes_mag_flatness), flag: mag_flag },
        ),
        (MeasureId::PacbayesMagInit, MeasureEntry { value: Some(flat.pacbayes_mag_init), flag: mag_flag }),
        (MeasureId::PacbayesMagOrig, MeasureEntry { value: Some(flat.pacbayes_mag_orig), flag: mag_flag }),
        (MeasureId::StepsToError, steps),
    ];
    debug_assert_eq!(entries.len(), MeasureId::ALL.len());
    let rows: Vec<MeasureRow> = MeasureId::ALL
        .iter()
        .zip(&entries)
        .map(|(&id, &(eid, entry))| {
            assert_eq!(id, eid, "entry order matches the canonical order");
            MeasureRow { name: id.name().to_string(), value: entry.value, flag: entry.flag }
        })
        .collect();
    let t_now = clock.elapsed().as_secs_f64();
    timings.push(("assemble".to_string(), t_now - t_prev));

    Ok(MeasureReport {
        rows,
        margin: gamma,
        sigma,
        sigma_mag,
        layer_count: d,
        omega: w.omega(),
        train_size: train_idx.len(),
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::TrainingTrace;

    #[test]
    fn canonical_names_are_stable() {
        assert_eq!(MeasureId::ALL.len(), 25);
        assert_eq!(MeasureId::NumParams.name(), "num.params");
        assert_eq!(MeasureId::StepsToError.name(), "steps.to.error");
        assert_eq!(MeasureId::from_name("pacbayes.mag.flatness"), Some(MeasureId::PacbayesMagFlatness));
        assert_eq!(MeasureId::from_name("nope"), None);
        for (i, id) in MeasureId::ALL.iter().enumerate() {
            assert_eq!(id.index(), i);
        }
    }

    #[test]
    fn steps_measure_first_crossing() {
        let trace = TrainingTrace {
            epochs: vec![],
            crossings: vec![(0.1, 500), (0.01, 900)],
            total_steps: 1000,
        };
        assert_eq!(steps_measure(&trace, 0.1).value, Some(500.0));
        assert_eq!(steps_measure(&trace, 0.01).value, Some(900.0));
        let missing = steps_measure(&trace, 0.05);
        assert_eq!(missing.value, None);
        assert_eq!(missing.flag, Some(Undefined::ThresholdNotCrossed));
    }
}
