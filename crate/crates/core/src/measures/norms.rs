//! The margin, spectral-norm, Frobenius-norm, and path measures, written
//! against per-layer norm data so the formula layer is testable on scalar
//! fixtures.
//!
//! Products over layers fold in log space (sums of logs) to avoid overflow.

use super::{MeasureEntry, Undefined};

/// Norms of one weight layer: the spectral norm and squared Frobenius norm of
/// the matricized weights, and the same for the displacement from init.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorms {
    pub sigma: f64,
    pub fro_sq: f64,
    pub dist_fro_sq: f64,
    pub dist_sigma: f64,
}

/// 10th-percentile margin by the nearest-rank rule: the element at 1-based
/// index ceil(0.1 m) of the ascending sort. May be negative.
pub fn margin_percentile(margins: &[f64]) -> f64 {
    assert!(!margins.is_empty(), "margin needs a non-empty training set");
    let mut sorted = margins.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite margins"));
    let rank = ((0.1 * sorted.len() as f64).ceil() as usize).max(1);
    sorted[rank - 1]
}

fn defined(v: f64) -> MeasureEntry {
    MeasureEntry { value: Some(v), flag: None }
}

fn undefined(reason: Undefined) -> MeasureEntry {
    MeasureEntry { value: None, flag: Some(reason) }
}

fn flagged(v: f64, reason: Undefined) -> MeasureEntry {
    MeasureEntry { value: Some(v), flag: Some(reason) }
}

/// Divide a value by gamma^2 in log space, carrying the margin flag.
fn over_margin_log(log_unnormalized: MeasureEntry, gamma: f64) -> MeasureEntry {
    match (log_unnormalized.value, gamma) {
        (Some(v), g) if g > 0.0 => MeasureEntry {
            value: Some(v - (g * g).ln()),
            flag: log_unnormalized.flag,
        },
        (Some(v), g) if g < 0.0 => flagged(v - (g * g).ln(), Undefined::MarginNotPositive),
        (Some(_), _) => undefined(Undefined::MarginNotPositive),
        (None, _) => log_unnormalized,
    }
}

/// The seven spectral measures. `norms` must be non-empty.
pub struct SpectralMeasures {
    pub log_prod_of_spec: MeasureEntry,
    pub log_prod_of_spec_over_margin: MeasureEntry,
    pub log_sum_of_spec: MeasureEntry,
    pub log_sum_of_spec_over_margin: MeasureEntry,
    pub log_spec_init_main: MeasureEntry,
    pub log_spec_orig_main: MeasureEntry,
    pub fro_over_spec: MeasureEntry,
}

pub fn spectral_measures(norms: &[LayerNorms], gamma: f64) -> SpectralMeasures {
    let d = norms.len() as f64;
    let any_zero_sigma = norms.iter().any(|n| n.sigma <= 0.0);

    let log_prod = if any_zero_sigma {
        undefined(Undefined::ZeroSpectralNorm)
    } else {
        defined(norms.iter().map(|n| 2.0 * n.sigma.ln()).sum())
    };
    let log_prod_margin = over_margin_log(log_prod, gamma);

    // log(d (prod sigma_i^2)^(1/d)) = ln d + (1/d) log_prod.
    let log_sum = match log_prod.value {
        Some(v) if log_prod.flag.is_none() => defined(d.ln() + v / d),
        _ => undefined(Undefined::ZeroSpectralNorm),
    };
    // log(d (prod sigma_i^2 / gamma^2)^(1/d)) = ln d + (1/d)(log_prod - ln gamma^2).
    let log_sum_margin = match (log_prod.value, gamma) {
        (Some(v), g) if g > 0.0 && log_prod.flag.is_none() => defined(d.ln() + (v - (g * g).ln()) / d),
        (Some(v), g) if g < 0.0 && log_prod.flag.is_none() => {
            flagged(d.ln() + (v - (g * g).ln()) / d, Undefined::MarginNotPositive)
        }
        (Some(_), _) => undefined(Undefined::MarginNotPositive),
        (None, _) => undefined(Undefined::ZeroSpectralNorm),
    };

    let fro_over_spec = if any_zero_sigma {
        undefined(Undefined::ZeroSpectralNorm)
    } else {
        defined(norms.iter().map(|n| n.fro_sq / (n.sigma * n.sigma)).sum())
    };

    // log(prod sigma_i^2 * sum_j dist_j / sigma_j^2 / gamma^2)
    let init_sum: f64 = if any_zero_sigma {
        f64::NAN
    } else {
        norms.iter().map(|n| n.dist_fro_sq / (n.sigma * n.sigma)).sum()
    };
    let log_spec_init_main = if any_zero_sigma {
        undefined(Undefined::ZeroSpectralNorm)
    } else if gamma == 0.0 {
        undefined(Undefined::MarginNotPositive)
    } else if init_sum <= 0.0 {
        undefined(Undefined::LogOfNonPositive)
    } else {
        let v = norms.iter().map(|n| 2.0 * n.sigma.ln()).sum::<f64>() + init_sum.ln()
            - (gamma * gamma).ln();
        if gamma < 0.0 {
            flagged(v, Undefined::MarginNotPositive)
        } else {
            defined(v)
        }
    };

    let orig_sum: f64 = if any_zero_sigma {
        f64::NAN
    } else {
        norms.iter().map(|n| n.fro_sq / (n.sigma * n.sigma)).sum()
    };
    let log_spec_orig_main = if any_zero_sigma {
        undefined(Undefined::ZeroSpectralNorm)
    } else if gamma == 0.0 {
        undefined(Undefined::MarginNotPositive)
    } else if orig_sum <= 0.0 {
        undefined(Undefined::LogOfNonPositive)
    } else {
        let v = norms.iter().map(|n| 2.0 * n.sigma.ln()).sum::<f64>() + orig_sum.ln()
            - (gamma * gamma).ln();
        if gamma < 0.0 {
            flagged(v, Undefined::MarginNotPositive)
        } else {
            defined(v)
        }
    };

    SpectralMeasures {
        log_prod_of_spec: log_prod,
        log_prod_of_spec_over_margin: log_prod_margin,
        log_sum_of_spec: log_sum,
        log_sum_of_spec_over_margin: log_sum_margin,
        log_spec_init_main,
        log_spec_orig_main,
        fro_over_spec,
    }
}

/// The seven Frobenius measures.
pub struct FrobeniusMeasures {
    pub fro_dist: MeasureEntry,
    pub log_prod_of_fro: MeasureEntry,
    pub log_prod_of_fro_over_margin: MeasureEntry,
    pub log_sum_of_fro: MeasureEntry,
    pub log_sum_of_fro_over_margin: MeasureEntry,
    pub dist_spec_init: MeasureEntry,
    pub param_norm: MeasureEntry,
}

pub fn frobenius_measures(norms: &[LayerNorms], gamma: f64) -> FrobeniusMeasures {
    let d = norms.len() as f64;
    let any_zero_fro = norms.iter().any(|n| n.fro_sq <= 0.0);

    let fro_dist = defined(norms.iter().map(|n| n.dist_fro_sq).sum());
    let param_norm = defined(norms.iter().map(|n| n.fro_sq).sum());
    let dist_spec_init = defined(norms.iter().map(|n| n.dist_sigma * n.dist_sigma).sum());

    let log_prod = if any_zero_fro {
        undefined(Undefined::LogOfNonPositive)
    } else {
        defined(norms.iter().map(|n| n.fro_sq.ln()).sum())
    };
    let log_prod_margin = over_margin_log(log_prod, gamma);
    let log_sum = match log_prod.value {
        Some(v) if log_prod.flag.is_none() => defined(d.ln() + v / d),
        _ => undefined(Undefined::LogOfNonPositive),
    };
    let log_sum_margin = match (log_prod.value, gamma) {
        (Some(v), g) if g > 0.0 && log_prod.flag.is_none() => defined(d.ln() + (v - (g * g).ln()) / d),
        (Some(v), g) if g < 0.0 && log_prod.flag.is_none() => {
            flagged(d.ln() + (v - (g * g).ln()) / d, Undefined::MarginNotPositive)
        }
        (Some(_), _) => undefined(Undefined::MarginNotPositive),
        (None, _) => undefined(Undefined::LogOfNonPositive),
    };

    FrobeniusMeasures {
        fro_dist,
        log_prod_of_fro: log_prod,
        log_prod_of_fro_over_margin: log_prod_margin,
        log_sum_of_fro: log_sum,
        log_sum_of_fro_over_margin: log_sum_margin,
        dist_spec_init,
        param_norm,
    }
}
