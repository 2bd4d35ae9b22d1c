//! `genmeter`: train families of small convolutional classifiers on synthetic
//! image data, compute complexity measures per model, and correlate the
//! measures with generalization.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use genmeter_cli::config::{load_config, resolve};
use genmeter_cli::{crosseval, experiment, family, report, CliError};
use genmeter_core::correlation::{GChoice, RobustConfig};
use genmeter_core::measures::{compute_all, MeasureConfig};
use genmeter_core::synthdata;
use genmeter_core::trainer::{read_trace, TrainingTrace};

#[derive(Parser)]
#[command(name = "genmeter", version, about = "Generalization-measure experiment harness")]
struct Cli {
    /// Print progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic datasets: the i.i.d. set plus three shifted
    /// variants with identical geometry.
    GenData {
        /// Output directory for the .gmds1 files.
        #[arg(long)]
        out: PathBuf,
        /// Generator seed.
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        /// Optional config whose [datagen] section overrides the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the (depth x run) family, evaluate, measure, and write
    /// family.csv plus one directory per model.
    TrainFamily {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel training jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compute the 25-measure report for one saved checkpoint.
    Measure {
        /// Checkpoint directory (manifest.json + weights).
        #[arg(long)]
        model: PathBuf,
        /// GMDS1 dataset the model was trained on.
        #[arg(long)]
        data: PathBuf,
        /// Training trace (for the steps measure); omitted = flagged.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Fold rotation used for this model's partition.
        #[arg(long, default_value_t = 0)]
        rotation: usize,
        #[arg(long, default_value_t = 0.01)]
        steps_threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlation table for one g-choice from a family.csv.
    Correlate {
        #[arg(long)]
        family: PathBuf,
        /// Which generalization quantity to correlate against.
        #[arg(long, value_parser = parse_g)]
        g: GChoice,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        robust_t: f64,
        #[arg(long, default_value_t = 5)]
        robust_min_pairs: usize,
    },
    /// Evaluate every model of a finished run on shifted dataset variants.
    CrossEval {
        /// The run directory written by train-family.
        #[arg(long)]
        run: PathBuf,
        /// Shifted .gmds1 files.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the full report set (correlation tables, CDF data, curves) from a
    /// family.csv.
    Report {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the robust-aggregate bar chart as SVG.
        #[arg(long)]
        svg: bool,
        #[arg(long, default_value_t = 0.5)]
        robust_t: f64,
        #[arg(long, default_value_t = 5)]
        robust_min_pairs: usize,
    },
}

fn parse_g(s: &str) -> Result<GChoice, String> {
    GChoice::from_str_opt(s).ok_or_else(|| format!("expected `gap` or `test-risk`, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> genmeter_cli::Result<()> {
    match cli.cmd {
        Cmd::GenData { out, seed, config } => {
            let spec = match config {
                Some(path) => load_config(&path)?.datagen.to_spec(),
                None => genmeter_core::synthdata::DatasetSpec::desk_default(),
            };
            std::fs::create_dir_all(&out)?;
            let variants = [
                spec.clone(),
                spec.shift_noise(),
                spec.shift_background(),
                spec.shift_intensity(),
            ];
            let mut files = Vec::new();
            for v in &variants {
                let ds = synthdata::generate(v, seed)?;
                let path = out.join(format!("{}.gmds1", v.shift_tag));
                synthdata::write(&ds, &path)?;
                if cli.verbose {
                    eprintln!("[genmeter] wrote {} ({} samples)", path.display(), ds.len());
                }
                files.push(serde_json::json!({
                    "path": path,
                    "tag": v.shift_tag,
                    "n": ds.len(),
                    "seed": seed,
                }));
            }
            let manifest = serde_json::json!({ "seed": seed, "spec": spec, "files": files });
            std::fs::write(
                out.join("datagen_manifest.json"),
                serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Runtime(e.to_string()))?,
            )?;
            println!("wrote {} dataset files to {}", variants.len(), out.display());
            Ok(())
        }
        Cmd::TrainFamily { config, seed, out, jobs } => {
            let file = load_config(&config)?;
            let resolved = resolve(&file, seed, out)?;
            let summary = experiment::run_experiment(&resolved, jobs, cli.verbose)?;
            println!(
                "trained {} models ({} failed) in {:.1}s; family table at {}",
                summary.rows.len(),
                summary.failures.len(),
                summary.wall_secs,
                summary.family_csv.display()
            );
            Ok(())
        }
        Cmd::Measure { model, data, trace, rotation, steps_threshold, seed, out } => {
            let ckpt = genmeter_core::model::load(&model)?;
            let ds = synthdata::read(&data)?;
            let trace = match trace {
                Some(p) => read_trace(&p)?,
                None => TrainingTrace::default(),
            };
            let partition = ds.split.partition(rotation);
            let cfg = MeasureConfig { steps_threshold, seed, ..MeasureConfig::default() };
            let report = compute_all(&ckpt, &ds, &partition.train, &trace, &cfg)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            match out {
                Some(path) => {
                    std::fs::write(&path, json)?;
                    println!("wrote {}", path.display());
                }
                None => println!("{json}"),
            }
            Ok(())
        }
        Cmd::Correlate { family, g, out, robust_t, robust_min_pairs } => {
            let rows = family::read_family(&family)?;
            let robust = RobustConfig {
                t: robust_t,
                min_weighted_pairs: robust_min_pairs,
                ..RobustConfig::default()
            };
            let written = report::emit_reports(&rows, &out, &[g], &robust, false)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Cmd::CrossEval { run, data, out } => {
            let result = crosseval::cross_eval(&run, &data, &out)?;
            println!(
                "evaluated {} (model, variant) pairs; tables at {} and {}",
                result.rows.len(),
                result.models_csv.display(),
                result.summary_csv.display()
            );
            Ok(())
        }
        Cmd::Report { family, out, svg, robust_t, robust_min_pairs } => {
            let rows = family::read_family(&family)?;
            let g_choices: Vec<GChoice> = match rows.first().map(|r| r.kind.as_str()) {
                Some("e2") | Some("e3") => vec![GChoice::Gap, GChoice::TestRisk],
                _ => vec![GChoice::Gap],
            };
            let robust = RobustConfig {
                t: robust_t,
                min_weighted_pairs: robust_min_pairs,
                ..RobustConfig::default()
            };
            let written = report::emit_reports(&rows, &out, &g_choices, &robust, svg)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
