//! Experiment orchestration: train the (depth x run) family, evaluate,
//! measure, persist one directory per model, and aggregate `family.csv`.
//!
//! Jobs are embarrassingly parallel: every ingredient of a job (its seed, its
//! fold rotation, its output directory) is derived from the job identity
//! before execution, so the worker count cannot change any artifact byte.
//! Wall times go to a separate volatile file, keeping the primary artifacts
//! rerun-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use genmeter_core::measures::{compute_all, MeasureConfig};
use genmeter_core::model::{save, NetworkSpec};
use genmeter_core::synthdata::{self, LabeledDataset, SplitScheme};
use genmeter_core::trainer::{evaluate, train, write_trace, EvalResult};
use genmeter_core::CoreError;

use crate::config::{ExperimentKind, ResolvedConfig};
use crate::family::{row_from_parts, write_family, FamilyRow};
use crate::{fnv1a64, job_seed, CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub depth: usize,
    pub run: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: ResolvedConfig,
    pub config_hash: String,
    /// FNV-1a of the i.i.d. dataset file bytes.
    pub data_fingerprint: String,
    pub n_jobs: usize,
    pub n_models: usize,
    pub failures: Vec<Failure>,
    pub job_seeds: Vec<(usize, usize, u64)>,
}

#[derive(Debug, Clone, Serialize)]
struct Timings {
    total_secs: f64,
    per_job_secs: Vec<(String, f64)>,
    jobs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelEvals {
    train: EvalResult,
    val: Option<EvalResult>,
    test: EvalResult,
}

pub struct RunSummary {
    pub out_dir: PathBuf,
    pub family_csv: PathBuf,
    pub rows: Vec<FamilyRow>,
    pub failures: Vec<Failure>,
    pub wall_secs: f64,
}

enum JobResult {
    Done(Box<FamilyRow>),
    Diverged(Failure),
}

pub fn model_dir(out_dir: &Path, depth: usize, run: usize) -> PathBuf {
    out_dir.join("models").join(format!("d{depth}_r{run:02}"))
}

/// Execute the whole experiment described by `cfg` with `jobs` workers.
pub fn run_experiment(cfg: &ResolvedConfig, jobs: usize, verbose: bool) -> Result<RunSummary> {
    let started = Instant::now();
    let data_bytes = fs::read(&cfg.iid_data)
        .map_err(|e| CliError::Runtime(format!("cannot read dataset {}: {e}", cfg.iid_data.display())))?;
    let data_fingerprint = format!("{:016x}", fnv1a64(&data_bytes));
    let mut ds = synthdata::read(&cfg.iid_data)?;

    if cfg.kind == ExperimentKind::E3 && ds.masks.is_none() {
        return Err(CliError::Usage("the e3 (multi-task) kind needs a dataset with masks".into()));
    }
    if cfg.split_scheme == SplitScheme::FiveFold {
        ds.split = synthdata::make_folds(ds.len(), SplitScheme::FiveFold, cfg.base_seed)?;
    }
    for &d in &cfg.depths {
        if !(1..=8).contains(&d) {
            return Err(CliError::Usage(format!("depth {d} outside [1, 8]")));
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;

    let job_list: Vec<(usize, usize)> = cfg
        .depths
        .iter()
        .flat_map(|&d| (0..cfg.runs_per_group).map(move |r| (d, r)))
        .collect();
    let seeds: Vec<(usize, usize, u64)> =
        job_list.iter().map(|&(d, r)| (d, r, job_seed(cfg.base_seed, d, r))).collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Runtime(format!("worker pool: {e}")))?;
    let outcomes: Result<Vec<(JobResult, f64)>> = pool.install(|| {
        job_list
            .par_iter()
            .map(|&(depth, run)| {
                let t0 = Instant::now();
                let outcome = run_one(cfg, &ds, depth, run, verbose)?;
                Ok((outcome, t0.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let outcomes = outcomes?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut per_job_secs = Vec::new();
    for ((depth, run), (outcome, secs)) in job_list.iter().zip(outcomes) {
        per_job_secs.push((format!("d{depth}_r{run:02}"), secs));
        match outcome {
            JobResult::Done(row) => rows.push(*row),
            JobResult::Diverged(f) => {
                if verbose {
                    eprintln!("[genmeter] excluded d{depth}_r{run:02}: {}", f.reason);
                }
                failures.push(f);
            }
        }
    }
    rows.sort_by_key(|r| (r.group_id, r.run_id));

    let family_csv = cfg.out_dir.join("family.csv");
    write_family(&rows, &family_csv)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        data_fingerprint,
        n_jobs: job_list.len(),
        n_models: rows.len(),
        failures: failures.clone(),
        job_seeds: seeds,
    };
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    let wall_secs = started.elapsed().as_secs_f64();
    let timings = Timings { total_secs: wall_secs, per_job_secs, jobs: jobs.max(1) };
    fs::write(
        cfg.out_dir.join("timings.json"),
        serde_json::to_string_pretty(&timings).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    Ok(RunSummary { out_dir: cfg.out_dir.clone(), family_csv, rows, failures, wall_secs })
}

fn run_one(
    cfg: &ResolvedConfig,
    ds: &LabeledDataset,
    depth: usize,
    run: usize,
    verbose: bool,
) -> Result<JobResult> {
    let seed = job_seed(cfg.base_seed, depth, run);
    let rotation = match cfg.split_scheme {
        SplitScheme::FiveFold => run % 5,
        SplitScheme::Holdout => 0,
    };
    let (h, w) = ds.spec.image_hw;
    let spec = NetworkSpec::vgg_like((h, w), depth, cfg.base_width, cfg.batchnorm, cfg.dropout, cfg.decoder)?;
    let partition = ds.split.partition(rotation);
    let train_cfg = cfg.train_config(seed);

    if verbose {
        eprintln!("[genmeter] training d{depth}_r{run:02} (seed {seed})");
    }
    let (mut ckpt, trace) = match train(&spec, ds, &partition, &train_cfg) {
        Ok(x) => x,
        Err(CoreError::Diverged { epoch, step, detail }) => {
            return Ok(JobResult::Diverged(Failure {
                depth,
                run,
                seed,
                reason: format!("diverged at epoch {epoch}, step {step}: {detail}"),
            }));
        }
        Err(e) => return Err(e.into()),
    };
    ckpt.meta.experiment_id = cfg.experiment_id.clone();
    ckpt.meta.group_id = depth as u32;
    ckpt.meta.run_id = run as u32;

    let train_eval = evaluate(&ckpt, ds, &partition.train, &ds.spec.shift_tag)?;
    let val_eval = partition
        .val
        .as_ref()
        .map(|v| evaluate(&ckpt, ds, v, &ds.spec.shift_tag))
        .transpose()?;
    let test_eval = evaluate(&ckpt, ds, &partition.test, &ds.spec.shift_tag)?;

    let dir = model_dir(&cfg.out_dir, depth, run);
    fs::create_dir_all(&dir)?;
    save(&ckpt, &dir)?;
    write_trace(&trace, &dir.join("trace.csv"))?;
    let evals = ModelEvals { train: train_eval.clone(), val: val_eval.clone(), test: test_eval.clone() };
    fs::write(
        dir.join("evals.json"),
        serde_json::to_string_pretty(&evals).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;

    let report = if cfg.skip_measures {
        None
    } else {
        let mcfg = MeasureConfig { seed, ..cfg.measure.clone() };
        let report = compute_all(&ckpt, ds, &partition.train, &trace, &mcfg)?;
        fs::write(
            dir.join("measures.json"),
            serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?,
        )?;
        Some(report)
    };

    // Training-only runs still land in family.csv with empty measure columns.
    let report = report.unwrap_or_else(|| empty_report(&ckpt, &partition.train));
    let row = row_from_parts(
        &cfg.experiment_id,
        cfg.kind.as_str(),
        depth as u32,
        run as u32,
        seed,
        rotation as u32,
        &ckpt.meta,
        train_eval.error,
        val_eval.as_ref().map(|e| e.error),
        test_eval.error,
        partition.train.len(),
        partition.test.len(),
        &report,
    );
    Ok(JobResult::Done(Box::new(row)))
}

fn empty_report(ckpt: &genmeter_core::model::Checkpoint, train_idx: &[usize]) -> genmeter_core::measures::MeasureReport {
    use genmeter_core::measures::{MeasureId, MeasureReport, MeasureRow, SigmaSearch};
    let rows = MeasureId::ALL
        .iter()
        .map(|id| MeasureRow { name: id.name().to_string(), value: None, flag: None })
        .collect();
    let zero = SigmaSearch { sigma: 0.0, at_edge: None, criterion_value: 0.0, base_error: 0.0, evaluations: 0 };
    MeasureReport {
        rows,
        margin: 0.0,
        sigma: zero,
        sigma_mag: zero,
        layer_count: 0,
        omega: ckpt.vectorize(Some(genmeter_core::model::Scope::Classifier)).omega(),
        train_size: train_idx.len(),
        timings: vec![],
    }
}
