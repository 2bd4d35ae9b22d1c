//! `family.csv`: the frozen interchange table between the harness and the
//! correlation stage. One row per trained model; run metadata, error numbers,
//! the 25 measure columns under their canonical dotted names, and an
//! `undefined` column listing `measure=reason` pairs for flagged entries.
//!
//! Floats are written in Rust's shortest round-trip form, so parse(write(x))
//! is bit-exact and reruns produce identical bytes.

use std::path::Path;

use genmeter_core::correlation::{FamilyRecord, FamilyResults};
use genmeter_core::measures::{MeasureId, MeasureReport, MeasureRow, SigmaSearch, Undefined};

use crate::{CliError, Result};

/// Fixed leading columns, before the 25 measure columns and `undefined`.
const LEAD_COLUMNS: [&str; 22] = [
    "experiment",
    "kind",
    "group_id",
    "run_id",
    "seed",
    "fold_rotation",
    "stopping_reason",
    "epochs",
    "steps",
    "step_at_threshold",
    "train_error",
    "val_error",
    "test_error",
    "gap",
    "test_risk",
    "n_train",
    "n_test",
    "margin",
    "sigma",
    "sigma_mag",
    "layer_count",
    "omega",
];

#[derive(Debug, Clone, PartialEq)]
pub struct FamilyRow {
    pub experiment: String,
    pub kind: String,
    pub group_id: u32,
    pub run_id: u32,
    pub seed: u64,
    pub fold_rotation: u32,
    pub stopping_reason: String,
    pub epochs: usize,
    pub steps: u64,
    pub step_at_threshold: Option<u64>,
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub test_error: f64,
    pub gap: f64,
    pub test_risk: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub margin: f64,
    pub sigma: f64,
    pub sigma_mag: f64,
    pub layer_count: usize,
    pub omega: usize,
    /// Value per measure in canonical order; None = undefined.
    pub measures: Vec<Option<f64>>,
    /// Flag per measure in canonical order.
    pub flags: Vec<Option<Undefined>>,
}

impl FamilyRow {
    pub fn model_id(&self) -> String {
        format!("d{}_r{:02}", self.group_id, self.run_id)
    }
}

pub fn header() -> Vec<String> {
    let mut cols: Vec<String> = LEAD_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend(MeasureId::ALL.iter().map(|m| m.name().to_string()));
    cols.push("undefined".into());
    cols
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

fn parse_f64(s: &str, col: &str) -> Result<f64> {
    s.parse().map_err(|_| CliError::Runtime(format!("family.csv: bad float `{s}` in column {col}")))
}

fn parse_opt_f64(s: &str, col: &str) -> Result<Option<f64>> {
    if s == "NA" {
        Ok(None)
    } else {
        parse_f64(s, col).map(Some)
    }
}

fn undefined_from_str(s: &str) -> Option<Undefined> {
    match s {
        "margin-not-positive" => Some(Undefined::MarginNotPositive),
        "zero-spectral-norm" => Some(Undefined::ZeroSpectralNorm),
        "log-of-non-positive" => Some(Undefined::LogOfNonPositive),
        "sigma-at-bracket-edge" => Some(Undefined::SigmaAtBracketEdge),
        "threshold-not-crossed" => Some(Undefined::ThresholdNotCrossed),
        _ => None,
    }
}

pub fn write_family(rows: &[FamilyRow], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    wtr.write_record(header()).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in rows {
        let mut rec: Vec<String> = vec![
            row.experiment.clone(),
            row.kind.clone(),
            row.group_id.to_string(),
            row.run_id.to_string(),
            row.seed.to_string(),
            row.fold_rotation.to_string(),
            row.stopping_reason.clone(),
            row.epochs.to_string(),
            row.steps.to_string(),
            fmt_opt_u64(row.step_at_threshold),
            row.train_error.to_string(),
            fmt_opt_f64(row.val_error),
            row.test_error.to_string(),
            row.gap.to_string(),
            row.test_risk.to_string(),
            row.n_train.to_string(),
            row.n_test.to_string(),
            row.margin.to_string(),
            row.sigma.to_string(),
            row.sigma_mag.to_string(),
            row.layer_count.to_string(),
            row.omega.to_string(),
        ];
        for v in &row.measures {
            rec.push(fmt_opt_f64(*v));
        }
        let undefined: Vec<String> = MeasureId::ALL
            .iter()
            .zip(&row.flags)
            .filter_map(|(m, f)| f.map(|f| format!("{}={}", m.name(), f.as_str())))
            .collect();
        rec.push(undefined.join(";"));
        wtr.write_record(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    wtr.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

pub fn read_family(path: &Path) -> Result<Vec<FamilyRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let want = header();
    if got != want {
        return Err(CliError::Runtime(format!(
            "family.csv header mismatch: expected {} columns starting {:?}, found {} starting {:?}",
            want.len(),
            &want[..3.min(want.len())],
            got.len(),
            &got[..3.min(got.len())]
        )));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Runtime(e.to_string()))?;
        let f = |i: usize| -> &str { rec.get(i).unwrap_or("") };
        let parse_u = |i: usize, col: &str| -> Result<u64> {
            f(i).parse()
                .map_err(|_| CliError::Runtime(format!("family.csv: bad integer `{}` in column {col}", f(i))))
        };
        let mut measures = Vec::with_capacity(25);
        for (k, id) in MeasureId::ALL.iter().enumerate() {
            measures.push(parse_opt_f64(f(LEAD_COLUMNS.len() + k), id.name())?);
        }
        let mut flags: Vec<Option<Undefined>> = vec![None; 25];
        let undef_col = f(LEAD_COLUMNS.len() + 25);
        if !undef_col.is_empty() {
            for item in undef_col.split(';') {
                let (name, reason) = item.split_once('=').ok_or_else(|| {
                    CliError::Runtime(format!("family.csv: malformed undefined entry `{item}`"))
                })?;
                let id = MeasureId::from_name(name).ok_or_else(|| {
                    CliError::Runtime(format!("family.csv: unknown measure `{name}` in undefined column"))
                })?;
                flags[id.index()] = Some(undefined_from_str(reason).ok_or_else(|| {
                    CliError::Runtime(format!("family.csv: unknown undefined reason `{reason}`"))
                })?);
            }
        }
        rows.push(FamilyRow {
            experiment: f(0).to_string(),
            kind: f(1).to_string(),
            group_id: parse_u(2, "group_id")? as u32,
            run_id: parse_u(3, "run_id")? as u32,
            seed: parse_u(4, "seed")?,
            fold_rotation: parse_u(5, "fold_rotation")? as u32,
            stopping_reason: f(6).to_string(),
            epochs: parse_u(7, "epochs")? as usize,
            steps: parse_u(8, "steps")?,
            step_at_threshold: if f(9) == "NA" { None } else { Some(parse_u(9, "step_at_threshold")?) },
            train_error: parse_f64(f(10), "train_error")?,
            val_error: parse_opt_f64(f(11), "val_error")?,
            test_error: parse_f64(f(12), "test_error")?,
            gap: parse_f64(f(13), "gap")?,
            test_risk: parse_f64(f(14), "test_risk")?,
            n_train: parse_u(15, "n_train")? as usize,
            n_test: parse_u(16, "n_test")? as usize,
            margin: parse_f64(f(17), "margin")?,
            sigma: parse_f64(f(18), "sigma")?,
            sigma_mag: parse_f64(f(19), "sigma_mag")?,
            layer_count: parse_u(20, "layer_count")? as usize,
            omega: parse_u(21, "omega")? as usize,
            measures,
            flags,
        });
    }
    Ok(rows)
}

/// Reassemble the in-memory family for the correlation stage. The sigma
/// search diagnostics beyond the values themselves live in each model's
/// `measures.json`, not in the CSV.
pub fn to_family_results(rows: &[FamilyRow]) -> FamilyResults {
    let experiment_id = rows.first().map(|r| r.experiment.clone()).unwrap_or_default();
    let records = rows
        .iter()
        .map(|row| {
            let mrows: Vec<MeasureRow> = MeasureId::ALL
                .iter()
                .enumerate()
                .map(|(i, id)| MeasureRow {
                    name: id.name().to_string(),
                    value: row.measures[i],
                    flag: row.flags[i],
                })
                .collect();
            let search = |sigma: f64| SigmaSearch {
                sigma,
                at_edge: None,
                criterion_value: 0.0,
                base_error: 0.0,
                evaluations: 0,
            };
            FamilyRecord {
                group_id: row.group_id,
                model_id: row.model_id(),
                report: MeasureReport {
                    rows: mrows,
                    margin: row.margin,
                    sigma: search(row.sigma),
                    sigma_mag: search(row.sigma_mag),
                    layer_count: row.layer_count,
                    omega: row.omega,
                    train_size: row.n_train,
                    timings: vec![],
                },
                gap: row.gap,
                test_risk: row.test_risk,
                n_test: row.n_test,
            }
        })
        .collect();
    FamilyResults { experiment_id, records }
}

/// Build a row from one finished job.
#[allow(clippy::too_many_arguments)]
pub fn row_from_parts(
    experiment: &str,
    kind: &str,
    group_id: u32,
    run_id: u32,
    seed: u64,
    fold_rotation: u32,
    meta: &genmeter_core::model::CheckpointMeta,
    train_error: f64,
    val_error: Option<f64>,
    test_error: f64,
    n_train: usize,
    n_test: usize,
    report: &MeasureReport,
) -> FamilyRow {
    let reason = match meta.stopping_reason {
        genmeter_core::model::StoppingReason::Untrained => "untrained",
        genmeter_core::model::StoppingReason::ThresholdMet => "threshold-met",
        genmeter_core::model::StoppingReason::PatienceExhausted => "patience-exhausted",
        genmeter_core::model::StoppingReason::MaxEpochs => "max-epochs",
    };
    FamilyRow {
        experiment: experiment.to_string(),
        kind: kind.to_string(),
        group_id,
        run_id,
        seed,
        fold_rotation,
        stopping_reason: reason.to_string(),
        epochs: meta.epochs_trained,
        steps: meta.steps_taken,
        step_at_threshold: meta.step_at_error_threshold,
        train_error,
        val_error,
        test_error,
        gap: test_error - train_error,
        test_risk: test_error,
        n_train,
        n_test,
        margin: report.margin,
        sigma: report.sigma.sigma,
        sigma_mag: report.sigma_mag.sigma,
        layer_count: report.layer_count,
        omega: report.omega,
        measures: MeasureId::ALL.iter().map(|&id| report.get(id).value).collect(),
        flags: MeasureId::ALL.iter().map(|&id| report.get(id).flag).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> FamilyRow {
        FamilyRow {
            experiment: "e1-test".into(),
            kind: "e1".into(),
            group_id: 2,
            run_id: 3,
            seed: 77,
            fold_rotation: 0,
            stopping_reason: "threshold-met".into(),
            epochs: 12,
            steps: 4800,
            step_at_threshold: Some(4400),
            train_error: 0.008,
            val_error: None,
            test_error: 0.055,
            gap: 0.047,
            test_risk: 0.055,
            n_train: 800,
            n_test: 200,
            margin: 1.25,
            sigma: 0.031_25,
            sigma_mag: 0.5,
            layer_count: 7,
            omega: 4321,
            measures: MeasureId::ALL
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 24 { None } else { Some(0.1 * i as f64 + 0.013) })
                .collect(),
            flags: MeasureId::ALL
                .iter()
                .enumerate()
                .map(|(i, _)| if i == 24 { Some(Undefined::ThresholdNotCrossed) } else { None })
                .collect(),
        }
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("family.csv");
        let rows = vec![sample_row()];
        write_family(&rows, &path).unwrap();
        let back = read_family(&path).unwrap();
        assert_eq!(back, rows);
        // Re-serialization is byte-identical.
        let path2 = dir.path().join("family2.csv");
        write_family(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_mismatch_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("family.csv");
        std::fs::write(&path, "nope,columns\n1,2\n").unwrap();
        match read_family(&path) {
            Err(CliError::Runtime(msg)) => assert!(msg.contains("header mismatch"), "{msg}"),
            other => panic!("expected runtime error, got {other:?}"),
        }
    }

    #[test]
    fn family_results_carry_flags() {
        let rows = vec![sample_row()];
        let family = to_family_results(&rows);
        assert_eq!(family.records.len(), 1);
        let rec = &family.records[0];
        assert_eq!(rec.model_id, "d2_r03");
        assert_eq!(rec.report.usable(MeasureId::StepsToError), None);
        assert!(rec.report.usable(MeasureId::NumParams).is_some());
        assert_eq!(rec.gap, 0.047);
    }
}
