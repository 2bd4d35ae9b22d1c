//! Experiment configuration: the versioned TOML schema and its resolution
//! into fully-pinned settings per experiment kind.
//!
//! Kind defaults mirror the three experiment designs at desk scale:
//!
//! - `e1`: holdout split, train to a 1% train-error target, no batch-norm or
//!   dropout, cross-entropy only.
//! - `e2`: five folds rotated across runs, early stopping on validation risk,
//!   batch-norm + dropout.
//! - `e3`: like `e2` plus the decoder branch and the combined loss at
//!   lambda = 0.2.
//!
//! Desk-scale training uses learning rate 1e-4 throughout; at these model
//! and dataset sizes 1e-5 moves the decision function too slowly to reach
//! the error targets in a sane epoch budget. Full-scale rates stay
//! expressible through `[train] learning_rate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use genmeter_core::correlation::RobustConfig;
use genmeter_core::measures::{MeasureConfig, PacBayesConfig};
use genmeter_core::synthdata::{DatasetSpec, SplitScheme};
use genmeter_core::trainer::{Stopping, TrainConfig};

use crate::{CliError, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    E1,
    E2,
    E3,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::E1 => "e1",
            ExperimentKind::E2 => "e2",
            ExperimentKind::E3 => "e3",
        }
    }
}

/// The raw TOML file. Most fields are optional; kind defaults fill the rest.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: Option<u32>,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub datagen: DatagenSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub measures: MeasuresSection,
    #[serde(default)]
    pub robust: RobustSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: Option<String>,
    pub kind: ExperimentKind,
    pub depths: Option<Vec<usize>>,
    pub runs_per_group: Option<usize>,
    pub base_seed: Option<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { id: None, kind: ExperimentKind::E1, depths: None, runs_per_group: None, base_seed: None }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Path to the i.i.d. GMDS1 dataset.
    pub iid: Option<PathBuf>,
    /// Paths to shifted variants (cross-eval only).
    #[serde(default)]
    pub shifts: Vec<PathBuf>,
}

/// Overrides for `gen-data`; defaults are the desk-scale generator settings.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatagenSection {
    pub n_samples: Option<usize>,
    pub image: Option<[usize; 2]>,
    pub class_balance: Option<f64>,
    pub radius: Option<[f64; 2]>,
    pub ring_thickness: Option<[f64; 2]>,
    pub noise_std: Option<f64>,
    pub background_level: Option<f64>,
    pub intensity_range: Option<[f64; 2]>,
    pub with_masks: Option<bool>,
}

impl DatagenSection {
    pub fn to_spec(&self) -> DatasetSpec {
        let d = DatasetSpec::desk_default();
        DatasetSpec {
            n_samples: self.n_samples.unwrap_or(d.n_samples),
            image_hw: self.image.map(|[h, w]| (h, w)).unwrap_or(d.image_hw),
            class_balance: self.class_balance.unwrap_or(d.class_balance),
            radius: self.radius.map(|[a, b]| (a, b)).unwrap_or(d.radius),
            ring_thickness: self.ring_thickness.map(|[a, b]| (a, b)).unwrap_or(d.ring_thickness),
            noise_std: self.noise_std.unwrap_or(d.noise_std),
            background_level: self.background_level.unwrap_or(d.background_level),
            intensity_range: self.intensity_range.map(|[a, b]| (a, b)).unwrap_or(d.intensity_range),
            shift_tag: d.shift_tag,
            with_masks: self.with_masks.unwrap_or(d.with_masks),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub base_width: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub target_error: Option<f64>,
    pub lambda: Option<f64>,
    pub thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuresSection {
    /// Skip measure computation entirely (training-only runs).
    pub skip: Option<bool>,
    pub mc_samples: Option<usize>,
    pub sigma_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub search_iterations: Option<usize>,
    pub delta: Option<f64>,
    pub epsilon: Option<f64>,
    pub risk_subsample: Option<usize>,
    pub spectral_tol: Option<f64>,
    pub spectral_max_iter: Option<usize>,
    pub steps_threshold: Option<f64>,
    pub absolute_criterion: Option<bool>,
    pub mag_orig_uses_magnitude: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSection {
    pub t: Option<f64>,
    pub min_weighted_pairs: Option<usize>,
    pub clamp_negative_precision: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// A fully-pinned experiment: every knob resolved, ready to run and to hash.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub schema_version: u32,
    pub experiment_id: String,
    pub kind: ExperimentKind,
    pub depths: Vec<usize>,
    pub runs_per_group: usize,
    pub base_seed: u64,
    pub iid_data: PathBuf,
    pub shift_data: Vec<PathBuf>,
    pub base_width: usize,
    pub batchnorm: bool,
    pub dropout: f32,
    pub decoder: bool,
    pub split_scheme: SplitScheme,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub target_error: f64,
    pub lambda: f64,
    pub thresholds: Vec<f64>,
    pub skip_measures: bool,
    pub measure: MeasureConfig,
    pub robust: RobustConfig,
    pub out_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn stopping(&self) -> Stopping {
        match self.kind {
            ExperimentKind::E1 => Stopping::TargetTrainError { epsilon: self.target_error },
            ExperimentKind::E2 | ExperimentKind::E3 => Stopping::Patience { epochs: self.patience },
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            lambda: self.lambda,
            stopping: self.stopping(),
            max_epochs: self.max_epochs,
            error_thresholds: self.thresholds.clone(),
            seed,
        }
    }

    /// Stable fingerprint of the resolved settings.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", crate::fnv1a64(json.as_bytes()))
    }
}

pub fn parse_config_str(text: &str) -> Result<ConfigFile> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config parse error: {e}")))?;
    if let Some(v) = file.schema_version {
        if v != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Usage(format!(
                "config schema version {v} unsupported (expected {CONFIG_SCHEMA_VERSION})"
            )));
        }
    }
    Ok(file)
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Fill every unset knob with its kind default.
pub fn resolve(
    file: &ConfigFile,
    seed_override: Option<u64>,
    out_override: Option<PathBuf>,
) -> Result<ResolvedConfig> {
    let kind = file.experiment.kind;
    let (bn, dropout, decoder, split) = match kind {
        ExperimentKind::E1 => (false, 0.0f32, false, SplitScheme::Holdout),
        ExperimentKind::E2 => (true, 0.25, false, SplitScheme::FiveFold),
        ExperimentKind::E3 => (true, 0.25, true, SplitScheme::FiveFold),
    };
    let lambda_default = match kind {
        ExperimentKind::E3 => 0.2,
        _ => 1.0,
    };
    let thresholds_default = match kind {
        ExperimentKind::E1 => vec![0.01, 0.1],
        _ => vec![0.1, 0.01],
    };
    let steps_threshold_default = match kind {
        ExperimentKind::E1 => 0.01,
        _ => 0.1,
    };
    let experiment_id = file
        .experiment
        .id
        .clone()
        .unwrap_or_else(|| format!("{}-desk", kind.as_str()));
    let thresholds = file.train.thresholds.clone().unwrap_or(thresholds_default);
    let steps_threshold = file.measures.steps_threshold.unwrap_or(steps_threshold_default);
    if !thresholds.contains(&steps_threshold) {
        return Err(CliError::Usage(format!(
            "steps_threshold {steps_threshold} must be one of the recorded thresholds {thresholds:?}"
        )));
    }
    let lambda = file.train.lambda.unwrap_or(lambda_default);
    if kind != ExperimentKind::E3 && lambda < 1.0 {
        return Err(CliError::Usage("lambda < 1 requires the e3 (multi-task) kind".into()));
    }
    let base_seed = seed_override.or(file.experiment.base_seed).unwrap_or(1234);
    let pb_defaults = PacBayesConfig::default();
    let measure = MeasureConfig {
        pacbayes: PacBayesConfig {
            target_deviation: pb_defaults.target_deviation,
            mc_samples: file.measures.mc_samples.unwrap_or(pb_defaults.mc_samples),
            sigma_min: file.measures.sigma_min.unwrap_or(pb_defaults.sigma_min),
            sigma_max: file.measures.sigma_max.unwrap_or(pb_defaults.sigma_max),
            search_iterations: file.measures.search_iterations.unwrap_or(pb_defaults.search_iterations),
            delta: file.measures.delta.unwrap_or(pb_defaults.delta),
            epsilon: file.measures.epsilon.unwrap_or(pb_defaults.epsilon),
            absolute_criterion: file.measures.absolute_criterion.unwrap_or(false),
            mag_orig_uses_magnitude: file.measures.mag_orig_uses_magnitude.unwrap_or(false),
            risk_subsample: file.measures.risk_subsample.or(Some(256)),
        },
        spectral_tol: file.measures.spectral_tol.unwrap_or(1e-6),
        spectral_max_iter: file.measures.spectral_max_iter.unwrap_or(200),
        steps_threshold,
        seed: 0, // set per job
    };
    let robust_defaults = RobustConfig::default();
    let robust = RobustConfig {
        t: file.robust.t.unwrap_or(robust_defaults.t),
        min_weighted_pairs: file.robust.min_weighted_pairs.unwrap_or(robust_defaults.min_weighted_pairs),
        clamp_negative_precision: file
            .robust
            .clamp_negative_precision
            .unwrap_or(robust_defaults.clamp_negative_precision),
    };
    let resolved = ResolvedConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        experiment_id,
        kind,
        depths: file.experiment.depths.clone().unwrap_or_else(|| vec![1, 2, 3, 4]),
        runs_per_group: file.experiment.runs_per_group.unwrap_or(5),
        base_seed,
        iid_data: file
            .data
            .iid
            .clone()
            .ok_or_else(|| CliError::Usage("config must point [data] iid at a GMDS1 file".into()))?,
        shift_data: file.data.shifts.clone(),
        base_width: file.model.base_width.unwrap_or(8),
        batchnorm: bn,
        dropout,
        decoder,
        split_scheme: split,
        learning_rate: file.train.learning_rate.unwrap_or(1e-4),
        batch_size: file.train.batch_size.unwrap_or(match kind {
            ExperimentKind::E1 => 2,
            _ => 8,
        }),
        max_epochs: file.train.max_epochs.unwrap_or(match kind {
            ExperimentKind::E1 => 80,
            _ => 60,
        }),
        patience: file.train.patience.unwrap_or(10),
        target_error: file.train.target_error.unwrap_or(0.01),
        lambda,
        thresholds,
        skip_measures: file.measures.skip.unwrap_or(false),
        measure,
        robust,
        out_dir: out_override
            .or_else(|| file.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from(format!("out/{}", kind.as_str()))),
    };
    if resolved.depths.is_empty() {
        return Err(CliError::Usage("depth list must be non-empty".into()));
    }
    if resolved.runs_per_group < 2 {
        return Err(CliError::Usage("runs_per_group must be >= 2".into()));
    }
    Ok(resolved)
}
