//! Rank-correlation analysis between measure values and generalization:
//! Kendall's tau over the whole family, the granulated coefficient over
//! cross-group pairs, and the robustness-weighted sign-error with
//! Hoeffding-based precision weights.
//!
//! Models whose value for a measure is flagged are excluded pairwise for that
//! measure only; exclusion counts are reported.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::measures::{MeasureId, MeasureReport};

/// Which generalization quantity `g` the coefficients are computed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GChoice {
    /// Generalization gap: test risk minus train risk.
    Gap,
    /// Test risk itself.
    TestRisk,
}

impl GChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            GChoice::Gap => "gap",
            GChoice::TestRisk => "test-risk",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<GChoice> {
        match s {
            "gap" => Some(GChoice::Gap),
            "test-risk" => Some(GChoice::TestRisk),
            _ => None,
        }
    }
}

/// One trained model's measures and generalization numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRecord {
    /// Group id: the architecture depth of this model's group.
    pub group_id: u32,
    pub model_id: String,
    pub report: MeasureReport,
    /// Generalization gap (test risk - train risk).
    pub gap: f64,
    pub test_risk: f64,
    /// Test-set size, the n of the Hoeffding precision.
    pub n_test: usize,
}

impl FamilyRecord {
    pub fn g(&self, choice: GChoice) -> f64 {
        match choice {
            GChoice::Gap => self.gap,
            GChoice::TestRisk => self.test_risk,
        }
    }
}

/// A whole experiment's records, grouped by architecture depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyResults {
    pub experiment_id: String,
    pub records: Vec<FamilyRecord>,
}

impl FamilyResults {
    /// Distinct group ids, ascending.
    pub fn group_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.group_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn sign(x: f64) -> i32 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Kendall's tau with the fixed 1/(n(n-1)) normalizer: the average over
/// ordered pairs of sign(delta mu) * sign(delta g); ties contribute zero.
pub fn kendall_tau(mu: &[f64], g: &[f64]) -> Result<f64> {
    if mu.len() != g.len() {
        return Err(CoreError::CorrelationInput(format!(
            "length mismatch: {} measures vs {} g-values",
            mu.len(),
            g.len()
        )));
    }
    let n = mu.len();
    if n < 2 {
        return Err(CoreError::CorrelationInput(format!("need at least 2 models, got {n}")));
    }
    let mut acc: i64 = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            acc += (sign(mu[i] - mu[j]) * sign(g[i] - g[j])) as i64;
        }
    }
    // Ordered pairs double the unordered sum.
    Ok(2.0 * acc as f64 / (n as f64 * (n as f64 - 1.0)))
}

/// Result of the granulated analysis for one measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Granulated {
    /// psi per unordered group pair (i < j by group id).
    pub pairs: Vec<((u32, u32), f64)>,
    /// Mean of the pair values: the family-level coefficient. Dividing by the
    /// number of pairs actually averaged keeps it in [-1, 1].
    pub psi: f64,
    /// Group pairs skipped because exclusion emptied a side.
    pub skipped: Vec<(u32, u32)>,
}

/// Granulated coefficient: Kendall-style sign agreement restricted to
/// cross-group pairs, averaged over the group pairs actually available.
pub fn granulated_psi(family: &FamilyResults, measure: MeasureId, g_choice: GChoice) -> Result<Granulated> {
    let groups = family.group_ids();
    if groups.len() < 2 {
        return Err(CoreError::CorrelationInput(format!(
            "granulated analysis needs >= 2 groups, got {}",
            groups.len()
        )));
    }
    let usable: Vec<(u32, f64, f64)> = family
        .records
        .iter()
        .filter_map(|r| r.report.usable(measure).map(|mu| (r.group_id, mu, r.g(g_choice))))
        .collect();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for (a, &ga) in groups.iter().enumerate() {
        for &gb in &groups[a + 1..] {
            let side_a: Vec<&(u32, f64, f64)> = usable.iter().filter(|r| r.0 == ga).collect();
            let side_b: Vec<&(u32, f64, f64)> = usable.iter().filter(|r| r.0 == gb).collect();
            if side_a.is_empty() || side_b.is_empty() {
                skipped.push((ga, gb));
                continue;
            }
            let mut acc: i64 = 0;
            for ra in &side_a {
                for rb in &side_b {
                    acc += (sign(ra.1 - rb.1) * sign(ra.2 - rb.2)) as i64;
                }
            }
            pairs.push(((ga, gb), acc as f64 / (side_a.len() * side_b.len()) as f64));
        }
    }
    if pairs.is_empty() {
        return Err(CoreError::CorrelationInput(
            "every group pair lost a side to undefined-measure exclusion".into(),
        ));
    }
    let psi = pairs.iter().map(|&(_, v)| v).sum::<f64>() / pairs.len() as f64;
    Ok(Granulated { pairs, psi, skipped })
}

/// Hoeffding-based precision of one pair's generalization difference:
/// (1 - 2 exp(-2 n (dg/2)^2))^2, with the inner term clamped at zero by
/// default so near-zero differences carry no weight.
pub fn hoeffding_chi(dg: f64, n: usize, clamp_negative: bool) -> f64 {
    assert!(n >= 1, "precision needs n >= 1");
    let inner = 1.0 - 2.0 * (-2.0 * n as f64 * (dg.abs() / 2.0).powi(2)).exp();
    let inner = if clamp_negative { inner.max(0.0) } else { inner };
    inner * inner
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    /// Precision threshold: pairs with chi <= t are discarded.
    pub t: f64,
    /// Group pairs with fewer surviving weighted pairs are discarded.
    pub min_weighted_pairs: usize,
    pub clamp_negative_precision: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig { t: 0.5, min_weighted_pairs: 5, clamp_negative_precision: true }
    }
}

/// Robust sign-error aggregates for one measure.
#[derive(Debug, Clone, PartialEq)]
pub enum RobustOutcome {
    Ok(RobustResult),
    /// Every group pair was discarded: too little precision to say anything.
    InsufficientPrecision { discarded_group_pairs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustResult {
    /// Normalized weighted sign-error per surviving group pair, in [0, 1].
    pub per_pair: Vec<((u32, u32), f64)>,
    pub mean: f64,
    pub max: f64,
    /// 90th percentile by the nearest-rank rule.
    pub p90: f64,
    /// The per-pair values sorted ascending: the CDF samples for plotting.
    pub cdf: Vec<f64>,
    pub discarded_group_pairs: usize,
}

/// Precision-weighted sign-error. Per cross-group pair of models:
/// kappa = max(0, chi(|dg|, min(n1, n2)) - t) weights the discordance
/// (1 - sign(dmu) sign(dg)) / 2. Each group pair reports the kappa-weighted
/// average (normalizing by the weight sum keeps it in [0, 1]); group pairs
/// with too few surviving pairs are discarded.
pub fn robust_sign_error(
    family: &FamilyResults,
    measure: MeasureId,
    g_choice: GChoice,
    cfg: &RobustConfig,
) -> Result<RobustOutcome> {
    if !(cfg.t < 1.0) {
        return Err(CoreError::CorrelationInput(format!("threshold t = {} must be < 1", cfg.t)));
    }
    let groups = family.group_ids();
    if groups.len() < 2 {
        return Err(CoreError::CorrelationInput(format!(
            "robust analysis needs >= 2 groups, got {}",
            groups.len()
        )));
    }
    let usable: Vec<(u32, f64, f64, usize)> = family
        .records
        .iter()
        .filter_map(|r| r.report.usable(measure).map(|mu| (r.group_id, mu, r.g(g_choice), r.n_test)))
        .collect();

    let mut per_pair = Vec::new();
    let mut discarded = 0usize;
    for (a, &ga) in groups.iter().enumerate() {
        for &gb in &groups[a + 1..] {
            let side_a: Vec<&(u32, f64, f64, usize)> = usable.iter().filter(|r| r.0 == ga).collect();
            let side_b: Vec<&(u32, f64, f64, usize)> = usable.iter().filter(|r| r.0 == gb).collect();
            let mut weight_sum = 0f64;
            let mut error_sum = 0f64;
            let mut surviving = 0usize;
            for ra in &side_a {
                for rb in &side_b {
                    let dg = ra.2 - rb.2;
                    let n = ra.3.min(rb.3);
                    let chi = hoeffding_chi(dg, n, cfg.clamp_negative_precision);
                    let kappa = (chi - cfg.t).max(0.0);
                    if kappa <= 0.0 {
                        continue;
                    }
                    surviving += 1;
                    let disagreement = (1.0 - (sign(ra.1 - rb.1) * sign(dg)) as f64) / 2.0;
                    weight_sum += kappa;
                    error_sum += kappa * disagreement;
                }
            }
            if surviving < cfg.min_weighted_pairs || weight_sum <= 0.0 {
                discarded += 1;
                continue;
            }
            per_pair.push(((ga, gb), error_sum / weight_sum));
        }
    }
    if per_pair.is_empty() {
        return Ok(RobustOutcome::InsufficientPrecision { discarded_group_pairs: discarded });
    }
    let mut cdf: Vec<f64> = per_pair.iter().map(|&(_, v)| v).collect();
    cdf.sort_by(|a, b| a.partial_cmp(b).expect("finite sign-errors"));
    let mean = cdf.iter().sum::<f64>() / cdf.len() as f64;
    let max = *cdf.last().expect("non-empty");
    let rank = ((0.9 * cdf.len() as f64).ceil() as usize).max(1);
    let p90 = cdf[rank - 1];
    Ok(RobustOutcome::Ok(RobustResult { per_pair, mean, max, p90, cdf, discarded_group_pairs: discarded }))
}

/// Correlation band on |tau|: low [0, 0.3), moderate [0.3, 0.5), high above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Band {
    Low,
    Moderate,
    High,
}

impl Band {
    pub fn of_tau(tau: f64) -> Band {
        let a = tau.abs();
        if a < 0.3 {
            Band::Low
        } else if a < 0.5 {
            Band::Moderate
        } else {
            Band::High
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Band::Low => "low",
            Band::Moderate => "moderate",
            Band::High => "high",
        }
    }
}

/// One measure's row of the correlation table.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub measure: MeasureId,
    pub tau: Option<f64>,
    pub psi: Option<f64>,
    pub robust_mean: Option<f64>,
    pub robust_max: Option<f64>,
    pub robust_p90: Option<f64>,
    pub robust_cdf: Vec<f64>,
    pub band: Option<Band>,
    /// Models whose value entered the statistics.
    pub n_used: usize,
    /// Models excluded for this measure (flagged entries).
    pub n_excluded: usize,
    /// Robust group pairs discarded for insufficient precision.
    pub robust_discarded_pairs: usize,
}

/// The full 25-row correlation report for one g-choice.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub experiment_id: String,
    pub g_choice: GChoice,
    pub robust_cfg: RobustConfig,
    pub rows: Vec<CorrelationRow>,
}

/// Build the table: per measure, tau over the pooled family, granulated psi,
/// and the robust aggregates, with per-measure exclusion counts.
pub fn correlation_table(
    family: &FamilyResults,
    g_choice: GChoice,
    robust_cfg: &RobustConfig,
) -> Result<CorrelationReport> {
    if family.records.len() < 2 {
        return Err(CoreError::CorrelationInput(format!(
            "family has {} records; need at least 2",
            family.records.len()
        )));
    }
    let mut rows = Vec::with_capacity(MeasureId::ALL.len());
    for id in MeasureId::ALL {
        let pairs: Vec<(f64, f64)> = family
            .records
            .iter()
            .filter_map(|r| r.report.usable(id).map(|mu| (mu, r.g(g_choice))))
            .collect();
        let n_used = pairs.len();
        let n_excluded = family.records.len() - n_used;
        let tau = if n_used >= 2 {
            let (mu, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            Some(kendall_tau(&mu, &g)?)
        } else {
            None
        };
        let psi = granulated_psi(family, id, g_choice).ok().map(|g| g.psi);
        let robust = robust_sign_error(family, id, g_choice, robust_cfg)?;
        let (robust_mean, robust_max, robust_p90, robust_cdf, robust_discarded_pairs) = match robust {
            RobustOutcome::Ok(r) => (Some(r.mean), Some(r.max), Some(r.p90), r.cdf, r.discarded_group_pairs),
            RobustOutcome::InsufficientPrecision { discarded_group_pairs } => {
                (None, None, None, Vec::new(), discarded_group_pairs)
            }
        };
        rows.push(CorrelationRow {
            measure: id,
            tau,
            psi,
            robust_mean,
            robust_max,
            robust_p90,
            robust_cdf,
            band: tau.map(Band::of_tau),
            n_used,
            n_excluded,
            robust_discarded_pairs,
        });
    }
    Ok(CorrelationReport {
        experiment_id: family.experiment_id.clone(),
        g_choice,
        robust_cfg: *robust_cfg,
        rows,
    })
}
