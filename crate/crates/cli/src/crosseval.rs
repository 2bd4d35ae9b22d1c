//! Cross-distribution evaluation: every trained model of a run evaluated on
//! every shifted dataset variant (full set) plus its own i.i.d. test
//! partition, with per-(depth, variant) mean and standard deviation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use genmeter_core::model::load;
use genmeter_core::synthdata::{self, SplitScheme};
use genmeter_core::trainer::evaluate;

use crate::experiment::RunManifest;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEvalRow {
    pub depth: u32,
    pub run: u32,
    pub variant: String,
    pub n: usize,
    pub error: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

pub struct CrossEvalOutput {
    pub rows: Vec<CrossEvalRow>,
    pub models_csv: PathBuf,
    pub summary_csv: PathBuf,
}

/// Evaluate every model under `run_dir/models` on each dataset in `variants`
/// and on its own i.i.d. test partition.
pub fn cross_eval(run_dir: &Path, variants: &[PathBuf], out_dir: &Path) -> Result<CrossEvalOutput> {
    let manifest_path = run_dir.join("manifest.json");
    let manifest: RunManifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| CliError::Runtime(format!("malformed run manifest: {e}")))?;

    let mut iid = synthdata::read(&manifest.config.iid_data)?;
    if manifest.config.split_scheme == SplitScheme::FiveFold {
        iid.split = synthdata::make_folds(iid.len(), SplitScheme::FiveFold, manifest.config.base_seed)?;
    }
    let shifted: Vec<_> = variants
        .iter()
        .map(|p| synthdata::read(p))
        .collect::<std::result::Result<_, _>>()?;

    let models_root = run_dir.join("models");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&models_root)
        .map_err(|e| CliError::Usage(format!("cannot list {}: {e}", models_root.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Runtime(format!("no model directories under {}", models_root.display())));
    }

    let mut rows = Vec::new();
    for dir in &dirs {
        let ckpt = load(dir)?;
        let depth = ckpt.meta.group_id;
        let run = ckpt.meta.run_id;
        let rotation = match manifest.config.split_scheme {
            SplitScheme::FiveFold => (run as usize) % 5,
            SplitScheme::Holdout => 0,
        };
        let test_idx = iid.split.partition(rotation).test;
        let iid_eval = evaluate(&ckpt, &iid, &test_idx, "iid-test")?;
        rows.push(CrossEvalRow {
            depth,
            run,
            variant: "iid-test".into(),
            n: iid_eval.n,
            error: iid_eval.error,
            accuracy: iid_eval.accuracy,
            f1: iid_eval.f1,
            sensitivity: iid_eval.sensitivity,
            specificity: iid_eval.specificity,
        });
        for ds in &shifted {
            let all: Vec<usize> = (0..ds.len()).collect();
            let ev = evaluate(&ckpt, ds, &all, &ds.spec.shift_tag)?;
            rows.push(CrossEvalRow {
                depth,
                run,
                variant: ds.spec.shift_tag.clone(),
                n: ev.n,
                error: ev.error,
                accuracy: ev.accuracy,
                f1: ev.f1,
                sensitivity: ev.sensitivity,
                specificity: ev.specificity,
            });
        }
    }
    rows.sort_by(|a, b| (a.variant.clone(), a.depth, a.run).cmp(&(b.variant.clone(), b.depth, b.run)));

    fs::create_dir_all(out_dir)?;
    let models_csv = out_dir.join("cross_eval_models.csv");
    let mut s = String::from("variant,depth,run,n,error,accuracy,f1,sensitivity,specificity\n");
    for r in &rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.depth, r.run, r.n, r.error, r.accuracy, r.f1, r.sensitivity, r.specificity
        )
        .expect("string write");
    }
    fs::write(&models_csv, s)?;

    let summary_csv = out_dir.join("cross_eval_summary.csv");
    fs::write(&summary_csv, summarize(&rows))?;
    Ok(CrossEvalOutput { rows, models_csv, summary_csv })
}

/// Mean and sample standard deviation of accuracy/error per (variant, depth).
pub fn summarize(rows: &[CrossEvalRow]) -> String {
    let mut keys: Vec<(String, u32)> = rows.iter().map(|r| (r.variant.clone(), r.depth)).collect();
    keys.sort();
    keys.dedup();
    let mut s = String::from("variant,depth,n_models,accuracy_mean,accuracy_std,error_mean,error_std\n");
    for (variant, depth) in keys {
        let members: Vec<&CrossEvalRow> =
            rows.iter().filter(|r| r.variant == variant && r.depth == depth).collect();
        let stat = |get: &dyn Fn(&CrossEvalRow) -> f64| -> (f64, f64) {
            let n = members.len() as f64;
            let mean = members.iter().map(|r| get(r)).sum::<f64>() / n;
            let var = if members.len() > 1 {
                members.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (am, astd) = stat(&|r| r.accuracy);
        let (em, estd) = stat(&|r| r.error);
        writeln!(s, "{variant},{depth},{},{am},{astd},{em},{estd}", members.len()).expect("write");
    }
    s
}
