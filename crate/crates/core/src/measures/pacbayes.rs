//! PAC-Bayes flatness: the sigma search and the six flatness measures.
//!
//! Sigma is the largest Gaussian perturbation scale whose Monte Carlo
//! estimate of the expected perturbed training error stays within
//! `target_deviation` of the unperturbed error (the deviation form; an
//! absolute-threshold form is available behind a switch). The same
//! per-sample perturbation directions are reused at every scale (common
//! random numbers), which keeps the deviation curve stable and the bisection
//! consistent with a grid scan.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Checkpoint, Mode, Scope};
use crate::rng::SeededRng;
use crate::synthdata::LabeledDataset;
use crate::tensor::Tensor;
use crate::trainer::predictions;

const SUBSAMPLE_TAG: u64 = 20;
const UNIFORM_TAG: u64 = 21;
const MAGNITUDE_TAG: u64 = 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacBayesConfig {
    /// Allowed increase of the expected perturbed training error.
    pub target_deviation: f64,
    pub mc_samples: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub search_iterations: usize,
    pub delta: f64,
    /// Variance floor of the magnitude-aware perturbation.
    pub epsilon: f64,
    /// Use the absolute criterion `E[err] <= target` instead of the
    /// deviation form `E[err] <= err + target`.
    pub absolute_criterion: bool,
    /// Evaluate the denominator of the magnitude-aware "orig" measure with
    /// |w_i|^2 instead of the printed displacement form.
    pub mag_orig_uses_magnitude: bool,
    /// Estimate the perturbed risk on a fixed random subsample of the train
    /// partition of this size (None = the whole partition).
    pub risk_subsample: Option<usize>,
}

impl Default for PacBayesConfig {
    fn default() -> Self {
        PacBayesConfig {
            target_deviation: 0.1,
            mc_samples: 10,
            sigma_min: 1e-5,
            sigma_max: 2.0,
            search_iterations: 20,
            delta: 0.1,
            epsilon: 1e-3,
            absolute_criterion: false,
            mag_orig_uses_magnitude: false,
            risk_subsample: None,
        }
    }
}

impl PacBayesConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| crate::error::CoreError::InvalidSpec { what: "pac-bayes config", detail };
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(fail(format!("bracket ({}, {}) invalid", self.sigma_min, self.sigma_max)));
        }
        if !(0.0 < self.delta && self.delta < 1.0) {
            return Err(fail(format!("delta {} outside (0, 1)", self.delta)));
        }
        if self.mc_samples == 0 {
            return Err(fail("mc_samples must be >= 1".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(fail(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Which perturbation family the search uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbMode {
    /// u ~ N(0, sigma^2 I).
    Uniform,
    /// u_i ~ N(0, sigma^2 w_i^2 + epsilon^2).
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BracketEdge {
    Lo,
    Hi,
}

/// Outcome of the sigma search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearch {
    pub sigma: f64,
    /// Set when the criterion held at the top of the bracket or failed at the
    /// bottom; the search result is then the bracket edge itself.
    pub at_edge: Option<BracketEdge>,
    /// Deviation (or absolute error, under the absolute criterion) observed
    /// at the returned sigma.
    pub criterion_value: f64,
    /// Unperturbed training error on the evaluation sample.
    pub base_error: f64,
    pub evaluations: usize,
}

/// Shared evaluation state for one sigma search: the frozen subsample, the
/// flattened weights, and the per-draw unit perturbation directions.
struct SearchContext<'a> {
    ckpt: &'a Checkpoint,
    images: Tensor,
    labels: Vec<u8>,
    w: Vec<f32>,
    segments: Vec<(usize, usize, usize)>,
    draws: Vec<Vec<f32>>,
    mode: PerturbMode,
    epsilon: f64,
}

impl<'a> SearchContext<'a> {
    fn new(
        ckpt: &'a Checkpoint,
        ds: &LabeledDataset,
        train_idx: &[usize],
        mode: PerturbMode,
        cfg: &PacBayesConfig,
        rng: &SeededRng,
    ) -> Self {
        let eval_idx: Vec<usize> = match cfg.risk_subsample {
            Some(k) if k < train_idx.len() => {
                let mut picks = rng.derive(SUBSAMPLE_TAG).choose_indices(train_idx.len(), k);
                picks.sort_unstable();
                picks.into_iter().map(|p| train_idx[p]).collect()
            }
            _ => train_idx.to_vec(),
        };
        let images = ds.batch(&eval_idx);
        let labels = ds.labels_at(&eval_idx);
        let pv = ckpt.vectorize(Some(Scope::Classifier));
        let tag = match mode {
            PerturbMode::Uniform => UNIFORM_TAG,
            PerturbMode::Magnitude => MAGNITUDE_TAG,
        };
        let draws: Vec<Vec<f32>> = (0..cfg.mc_samples)
            .map(|j| {
                let mut r = rng.derive(tag).derive(j as u64);
                let mut z = vec![0f32; pv.values.len()];
                r.fill_normal(&mut z, 0.0, 1.0);
                z
            })
            .collect();
        SearchContext {
            ckpt,
            images,
            labels,
            w: pv.values,
            segments: pv.segments,
            draws,
            mode,
            epsilon: cfg.epsilon,
        }
    }

    /// Mean 1-0 error over the Monte Carlo draws at perturbation scale sigma.
    /// A draw that sends an activation non-finite scores as full error.
    fn mean_perturbed_error(&self, sigma: f64) -> f64 {
        let mut work = self.ckpt.clone();
        let mut total = 0f64;
        for z in &self.draws {
            let perturbed: Vec<f32> = match self.mode {
                PerturbMode::Uniform => self
                    .w
                    .iter()
                    .zip(z)
                    .map(|(&wv, &zv)| wv + (sigma * zv as f64) as f32)
                    .collect(),
                PerturbMode::Magnitude => self
                    .w
                    .iter()
                    .zip(z)
                    .map(|(&wv, &zv)| {
                        let var = sigma * sigma * (wv as f64) * (wv as f64) + self.epsilon * self.epsilon;
                        wv + (var.sqrt() * zv as f64) as f32
                    })
                    .collect(),
            };
            let pv = crate::model::ParamVector { values: perturbed, segments: self.segments.clone() };
            work.devectorize(&pv).expect("segments come from the same checkpoint");
            total += match work.forward(&self.images, Mode::Eval, None) {
                Ok(out) => {
                    let preds = predictions(&out.logits);
                    let wrong = preds.iter().zip(&self.labels).filter(|(p, l)| p != l).count();
                    wrong as f64 / self.labels.len() as f64
                }
                Err(_) => 1.0,
            };
        }
        total / self.draws.len() as f64
    }

    fn base_error(&self) -> f64 {
        let out = self.ckpt.forward(&self.images, Mode::Eval, None).expect("unperturbed forward");
        let preds = predictions(&out.logits);
        let wrong = preds.iter().zip(&self.labels).filter(|(p, l)| p != l).count();
        wrong as f64 / self.labels.len() as f64
    }
}

/// Criterion values at the given sigmas, sharing the exact evaluation state
/// (subsample, perturbation directions) the search would use for the same
/// `rng`. This is the hook for grid-scan cross-checks of the bisection.
pub fn criterion_curve(
    ckpt: &Checkpoint,
    ds: &LabeledDataset,
    train_idx: &[usize],
    mode: PerturbMode,
    cfg: &PacBayesConfig,
    rng: &SeededRng,
    sigmas: &[f64],
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let ctx = SearchContext::new(ckpt, ds, train_idx, mode, cfg, rng);
    let base = ctx.base_error();
    Ok(sigmas
        .iter()
        .map(|&s| {
            let mean = ctx.mean_perturbed_error(s);
            if cfg.absolute_criterion {
                mean
            } else {
                mean - base
            }
        })
        .collect())
}

/// Largest sigma in the bracket (to bisection resolution) satisfying the
/// perturbation criterion. Deterministic given `rng`.
pub fn pacbayes_sigma(
    ckpt: &Checkpoint,
    ds: &LabeledDataset,
    train_idx: &[usize],
    mode: PerturbMode,
    cfg: &PacBayesConfig,
    rng: &SeededRng,
) -> Result<SigmaSearch> {
    cfg.validate()?;
    let ctx = SearchContext::new(ckpt, ds, train_idx, mode, cfg, rng);
    let base = ctx.base_error();
    let criterion = |mean_err: f64| -> f64 {
        if cfg.absolute_criterion {
            mean_err
        } else {
            mean_err - base
        }
    };
    let mut evaluations = 0usize;
    let mut eval_at = |sigma: f64| -> f64 {
        evaluations += 1;
        criterion(ctx.mean_perturbed_error(sigma))
    };

    let hi_val = eval_at(cfg.sigma_max);
    if hi_val <= cfg.target_deviation {
        return Ok(SigmaSearch {
            sigma: cfg.sigma_max,
            at_edge: Some(BracketEdge::Hi),
            criterion_value: hi_val,
            base_error: base,
            evaluations,
        });
    }
    let lo_val = eval_at(cfg.sigma_min);
    if lo_val > cfg.target_deviation {
        return Ok(SigmaSearch {
            sigma: cfg.sigma_min,
            at_edge: Some(BracketEdge::Lo),
            criterion_value: lo_val,
            base_error: base,
            evaluations,
        });
    }

    let (mut lo, mut hi) = (cfg.sigma_min, cfg.sigma_max);
    let mut lo_val = lo_val;
    for _ in 0..cfg.search_iterations {
        let mid = 0.5 * (lo + hi);
        let v = eval_at(mid);
        if v <= cfg.target_deviation {
            lo = mid;
            lo_val = v;
        } else {
            hi = mid;
        }
    }
    Ok(SigmaSearch { sigma: lo, at_edge: None, criterion_value: lo_val, base_error: base, evaluations })
}

/// The six flatness measures. `w`/`w0` are the flattened trained/init
/// parameters of the classification branch, `m` the training-set size.
pub struct FlatnessInputs<'a> {
    pub sigma: f64,
    pub sigma_mag: f64,
    pub w: &'a [f32],
    pub w0: &'a [f32],
    pub m: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub mag_orig_uses_magnitude: bool,
}

pub struct FlatnessMeasures {
    pub pacbayes_flatness: f64,
    pub pacbayes_init: f64,
    pub pacbayes_orig: f64,
    pub pacbayes_mag_flatness: f64,
    pub pacbayes_mag_init: f64,
    pub pacbayes_mag_orig: f64,
}

pub fn flatness_measures(inp: &FlatnessInputs) -> FlatnessMeasures {
    let omega = inp.w.len() as f64;
    let log_m_term = ((inp.m as f64 + 2.0) / inp.delta).ln();
    let norm_sq = |v: &[f32]| -> f64 { v.iter().map(|&x| (x as f64) * (x as f64)).sum() };
    let dist_sq: f64 = inp
        .w
        .iter()
        .zip(inp.w0)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    let w_sq = norm_sq(inp.w);

    let s2 = inp.sigma * inp.sigma;
    let pacbayes_flatness = 1.0 / s2;
    let pacbayes_init = dist_sq / (4.0 * s2) + log_m_term;
    let pacbayes_orig = w_sq / (4.0 * s2) + log_m_term;

    let sp2 = inp.sigma_mag * inp.sigma_mag;
    let e2 = inp.epsilon * inp.epsilon;
    let pacbayes_mag_flatness = 1.0 / sp2;
    // Denominator keeps the per-coordinate displacement (the printed form).
    let mag_sum = |numerator_norm_sq: f64| -> f64 {
        let num = e2 + (sp2 + 1.0) * numerator_norm_sq / omega;
        inp.w
            .iter()
            .zip(inp.w0)
            .map(|(&wi, &w0i)| {
                let di = wi as f64 - w0i as f64;
                let den = e2 + sp2 * di * di;
                (num / den).ln()
            })
            .sum::<f64>()
            / 4.0
    };
    let pacbayes_mag_init = mag_sum(dist_sq) + log_m_term;
    // As printed, the denominator keeps the displacement; the switch swaps in
    // the weight magnitude.
    let pacbayes_mag_orig = if inp.mag_orig_uses_magnitude {
        let num = e2 + (sp2 + 1.0) * w_sq / omega;
        inp.w
            .iter()
            .map(|&wi| {
                let den = e2 + sp2 * (wi as f64) * (wi as f64);
                (num / den).ln()
            })
            .sum::<f64>()
            / 4.0
            + log_m_term
    } else {
        mag_sum(w_sq) + log_m_term
    };

    FlatnessMeasures {
        pacbayes_flatness,
        pacbayes_init,
        pacbayes_orig,
        pacbayes_mag_flatness,
        pacbayes_mag_init,
        pacbayes_mag_orig,
    }
}
