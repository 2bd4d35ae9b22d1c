//! Report emission: the correlation table as CSV and aligned text, the
//! robust sign-error CDF data, error-vs-depth curve data, and an optional
//! self-contained SVG bar chart of the robust aggregates.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use genmeter_core::correlation::{
    correlation_table, Band, CorrelationReport, GChoice, RobustConfig,
};
use genmeter_core::measures::MeasureId;

use crate::family::{to_family_results, FamilyRow};
use crate::{CliError, Result};

const CORR_COLUMNS: [&str; 11] = [
    "measure",
    "g_choice",
    "tau",
    "psi",
    "robust_mean",
    "robust_max",
    "robust_p90",
    "band",
    "n_used",
    "n_excluded",
    "robust_discarded_pairs",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

pub fn correlation_csv(report: &CorrelationReport) -> String {
    let mut s = CORR_COLUMNS.join(",");
    s.push('\n');
    for row in &report.rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.measure.name(),
            report.g_choice.as_str(),
            opt(row.tau),
            opt(row.psi),
            opt(row.robust_mean),
            opt(row.robust_max),
            opt(row.robust_p90),
            row.band.map(|b| b.as_str()).unwrap_or("NA"),
            row.n_used,
            row.n_excluded,
            row.robust_discarded_pairs,
        )
        .expect("string write");
    }
    s
}

/// Parsed form of a correlation CSV; the counterpart of [`correlation_csv`],
/// losing only the per-pair CDF samples (they live in the CDF file).
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCorrelation {
    pub g_choice: GChoice,
    pub rows: Vec<ParsedCorrelationRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedCorrelationRow {
    pub measure: MeasureId,
    pub tau: Option<f64>,
    pub psi: Option<f64>,
    pub robust_mean: Option<f64>,
    pub robust_max: Option<f64>,
    pub robust_p90: Option<f64>,
    pub band: Option<Band>,
    pub n_used: usize,
    pub n_excluded: usize,
    pub robust_discarded_pairs: usize,
}

impl ParsedCorrelation {
    pub fn from_report(report: &CorrelationReport) -> Self {
        ParsedCorrelation {
            g_choice: report.g_choice,
            rows: report
                .rows
                .iter()
                .map(|r| ParsedCorrelationRow {
                    measure: r.measure,
                    tau: r.tau,
                    psi: r.psi,
                    robust_mean: r.robust_mean,
                    robust_max: r.robust_max,
                    robust_p90: r.robust_p90,
                    band: r.band,
                    n_used: r.n_used,
                    n_excluded: r.n_excluded,
                    robust_discarded_pairs: r.robust_discarded_pairs,
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = CORR_COLUMNS.join(",");
        s.push('\n');
        for row in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                row.measure.name(),
                self.g_choice.as_str(),
                opt(row.tau),
                opt(row.psi),
                opt(row.robust_mean),
                opt(row.robust_max),
                opt(row.robust_p90),
                row.band.map(|b| b.as_str()).unwrap_or("NA"),
                row.n_used,
                row.n_excluded,
                row.robust_discarded_pairs,
            )
            .expect("string write");
        }
        s
    }
}

pub fn parse_correlation_csv(text: &str) -> Result<ParsedCorrelation> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if header != CORR_COLUMNS.join(",") {
        return Err(CliError::Runtime(format!("correlation csv header mismatch: `{header}`")));
    }
    let bad = |line: &str, what: &str| CliError::Runtime(format!("correlation csv: bad {what} in `{line}`"));
    let parse_opt = |s: &str, line: &str| -> Result<Option<f64>> {
        if s == "NA" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(line, "float"))
        }
    };
    let mut rows = Vec::new();
    let mut g_choice = None;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != CORR_COLUMNS.len() {
            return Err(bad(line, "column count"));
        }
        let measure = MeasureId::from_name(parts[0]).ok_or_else(|| bad(line, "measure name"))?;
        let g = GChoice::from_str_opt(parts[1]).ok_or_else(|| bad(line, "g choice"))?;
        if *g_choice.get_or_insert(g) != g {
            return Err(bad(line, "mixed g choices"));
        }
        let band = match parts[7] {
            "NA" => None,
            "low" => Some(Band::Low),
            "moderate" => Some(Band::Moderate),
            "high" => Some(Band::High),
            _ => return Err(bad(line, "band")),
        };
        rows.push(ParsedCorrelationRow {
            measure,
            tau: parse_opt(parts[2], line)?,
            psi: parse_opt(parts[3], line)?,
            robust_mean: parse_opt(parts[4], line)?,
            robust_max: parse_opt(parts[5], line)?,
            robust_p90: parse_opt(parts[6], line)?,
            band,
            n_used: parts[8].parse().map_err(|_| bad(line, "n_used"))?,
            n_excluded: parts[9].parse().map_err(|_| bad(line, "n_excluded"))?,
            robust_discarded_pairs: parts[10].parse().map_err(|_| bad(line, "discarded pairs"))?,
        });
    }
    Ok(ParsedCorrelation {
        g_choice: g_choice.ok_or_else(|| CliError::Runtime("correlation csv has no rows".into()))?,
        rows,
    })
}

/// Fixed-width text table, one coefficient column block per report.
pub fn correlation_text(reports: &[&CorrelationReport]) -> String {
    let name_w = MeasureId::ALL.iter().map(|m| m.name().len()).max().unwrap_or(10) + 2;
    let mut s = String::new();
    write!(s, "{:<name_w$}", "measure").expect("write");
    for r in reports {
        write!(s, "| {:^33} ", format!("g = {}", r.g_choice.as_str())).expect("write");
    }
    s.push('\n');
    write!(s, "{:<name_w$}", "").expect("write");
    for _ in reports {
        write!(s, "| {:>7} {:>7} {:>7} {:>9} ", "tau", "psi", "robust", "band").expect("write");
    }
    s.push('\n');
    s.push_str(&"-".repeat(name_w + reports.len() * 36));
    s.push('\n');
    for id in MeasureId::ALL {
        write!(s, "{:<name_w$}", id.name()).expect("write");
        for r in reports {
            let row = &r.rows[id.index()];
            let f = |v: Option<f64>| v.map(|x| format!("{x:+.3}")).unwrap_or_else(|| "NA".into());
            write!(
                s,
                "| {:>7} {:>7} {:>7} {:>9} ",
                f(row.tau),
                f(row.psi),
                f(row.robust_mean),
                row.band.map(|b| b.as_str()).unwrap_or("NA"),
            )
            .expect("write");
        }
        s.push('\n');
    }
    s
}

/// CDF samples of the robust sign-errors: one row per surviving group pair
/// per measure, sorted ascending, with the empirical CDF fraction.
pub fn cdf_csv(report: &CorrelationReport) -> String {
    let mut s = String::from("measure,g_choice,idx,phi,cdf_fraction\n");
    for row in &report.rows {
        let k = row.robust_cdf.len();
        for (i, &phi) in row.robust_cdf.iter().enumerate() {
            writeln!(
                s,
                "{},{},{},{},{}",
                row.measure.name(),
                report.g_choice.as_str(),
                i,
                phi,
                (i + 1) as f64 / k as f64
            )
            .expect("string write");
        }
    }
    s
}

/// Train/test error means and standard deviations per depth (the error-vs-
/// depth curve data). Standard deviation is the sample form (n - 1).
pub fn curves_csv(rows: &[FamilyRow]) -> String {
    let mut depths: Vec<u32> = rows.iter().map(|r| r.group_id).collect();
    depths.sort_unstable();
    depths.dedup();
    let mut s = String::from(
        "depth,n_models,train_error_mean,train_error_std,test_error_mean,test_error_std\n",
    );
    for d in depths {
        let members: Vec<&FamilyRow> = rows.iter().filter(|r| r.group_id == d).collect();
        let stat = |get: &dyn Fn(&FamilyRow) -> f64| -> (f64, f64) {
            let n = members.len() as f64;
            let mean = members.iter().map(|r| get(r)).sum::<f64>() / n;
            let var = if members.len() > 1 {
                members.iter().map(|r| (get(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (tr_m, tr_s) = stat(&|r| r.train_error);
        let (te_m, te_s) = stat(&|r| r.test_error);
        writeln!(s, "{},{},{},{},{},{}", d, members.len(), tr_m, tr_s, te_m, te_s).expect("write");
    }
    s
}

/// Self-contained SVG bar chart of the robust aggregates (mean, max, p90 per
/// measure; values in [0, 1], lower is better).
pub fn fig4a_svg(report: &CorrelationReport) -> String {
    let bar_w = 7.0;
    let group_w = 3.0 * bar_w + 10.0;
    let chart_h = 220.0;
    let left = 40.0;
    let bottom = 150.0;
    let width = left + MeasureId::ALL.len() as f64 * group_w + 20.0;
    let height = chart_h + bottom;
    let mut s = String::new();
    write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n"
    )
    .expect("write");
    s.push_str("<style>text{font-family:monospace;font-size:9px;}</style>\n");
    writeln!(
        s,
        "<text x=\"{left}\" y=\"14\">robust sign-error (mean / max / p90) per measure, g = {}; lower is better</text>",
        report.g_choice.as_str()
    )
    .expect("write");
    // Axis with 0/0.5/1 gridlines.
    for (frac, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let y = 20.0 + chart_h * (1.0 - frac);
        writeln!(
            s,
            "<line x1=\"{left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ccc\"/><text x=\"8\" y=\"{:.1}\">{label}</text>",
            width - 10.0,
            y + 3.0
        )
        .expect("write");
    }
    for (i, id) in MeasureId::ALL.iter().enumerate() {
        let row = &report.rows[id.index()];
        let x0 = left + i as f64 * group_w;
        let bars = [
            (row.robust_mean, "#4878a8"),
            (row.robust_max, "#a84848"),
            (row.robust_p90, "#78a848"),
        ];
        for (b, (v, color)) in bars.iter().enumerate() {
            if let Some(v) = v {
                let h = chart_h * v.clamp(0.0, 1.0);
                let x = x0 + b as f64 * bar_w;
                let y = 20.0 + chart_h - h;
                writeln!(
                    s,
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>",
                    bar_w - 1.0
                )
                .expect("write");
            }
        }
        let lx = x0 + group_w / 2.0;
        let ly = 20.0 + chart_h + 6.0;
        writeln!(
            s,
            "<text x=\"{lx:.1}\" y=\"{ly:.1}\" transform=\"rotate(60 {lx:.1} {ly:.1})\">{}</text>",
            id.name()
        )
        .expect("write");
    }
    s.push_str("</svg>\n");
    s
}

/// Emit every report artifact for the family table at `rows`.
pub fn emit_reports(
    rows: &[FamilyRow],
    out_dir: &Path,
    g_choices: &[GChoice],
    robust: &RobustConfig,
    svg: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let family = to_family_results(rows);
    let mut written = Vec::new();
    let mut reports = Vec::new();
    for &g in g_choices {
        let report = correlation_table(&family, g, robust)?;
        let base = out_dir.join(format!("correlation_{}", g.as_str()));
        let csv_path = base.with_extension("csv");
        std::fs::write(&csv_path, correlation_csv(&report))?;
        written.push(csv_path);
        let cdf_path = out_dir.join(format!("robust_cdf_{}.csv", g.as_str()));
        std::fs::write(&cdf_path, cdf_csv(&report))?;
        written.push(cdf_path);
        if svg {
            let svg_path = out_dir.join(format!("robust_bars_{}.svg", g.as_str()));
            std::fs::write(&svg_path, fig4a_svg(&report))?;
            written.push(svg_path);
        }
        reports.push(report);
    }
    let text_path = out_dir.join("correlation.txt");
    let refs: Vec<&CorrelationReport> = reports.iter().collect();
    std::fs::write(&text_path, correlation_text(&refs))?;
    written.push(text_path);
    let curves_path = out_dir.join("curves.csv");
    std::fs::write(&curves_path, curves_csv(rows))?;
    written.push(curves_path);
    let meta = serde_json::json!({
        "experiment": family.experiment_id,
        "g_choices": g_choices.iter().map(|g| g.as_str()).collect::<Vec<_>>(),
        "robust": robust,
        "n_models": rows.len(),
    });
    let meta_path = out_dir.join("report_meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?)?;
    written.push(meta_path);
    Ok(written)
}
