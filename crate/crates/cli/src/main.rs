//! `macopp`: run conformal off-policy prediction experiments.
//!
//! The staged subcommands share one output directory:
//!
//! ```text
//! <out>/data/           gen-data
//! <out>/model/          train
//! <out>/calibration/    calibrate   (<mode>.csv: score,weight)
//! <out>/outcomes/       evaluate    (<mode>.csv, one row per test prefix)
//! <out>/coverage.csv    evaluate
//! <out>/sweep.csv       sweep
//! <out>/report.csv      report
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use macopp_core::harness::data::Datasets;
use macopp_core::harness::{
    calibrate, evaluate, generate_datasets, plot_rows, read_calibration, read_csv, sweep, train,
    write_calibration, write_csv, CoverageReport, ExperimentConfig, Mode, Trained,
};

#[derive(Parser)]
#[command(
    name = "macopp",
    version,
    about = "Conformal off-policy prediction for multi-agent trajectories"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train, calibration and test trajectories.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Ego target bias (defaults to `target.eps_bias` in the config).
        #[arg(long)]
        eps_bias: Option<f64>,
    },
    /// Fit the predictor and dynamics models on the training split.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score and weight the calibration split for each configured mode.
    Calibrate {
        #[command(flatten)]
        common: Common,
    },
    /// Build regions for the test prefixes and measure coverage.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Turn a coverage CSV into the long-format plotting CSV.
    Report {
        #[command(flatten)]
        common: Common,
        /// Coverage CSV to read (defaults to `<out>/sweep.csv`, then `<out>/coverage.csv`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run every mode over the eps_bias grid and write `<out>/sweep.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid overriding `eps_bias_grid`.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn model_dir(out: &Path) -> PathBuf {
    out.join("model")
}

fn calibration_path(out: &Path, mode: Mode) -> PathBuf {
    out.join("calibration").join(format!("{mode}.csv"))
}

fn read_data(out: &Path) -> Result<Datasets> {
    let dir = data_dir(out);
    Datasets::read(&dir).with_context(|| {
        format!(
            "reading datasets from {} (run gen-data first)",
            dir.display()
        )
    })
}

fn read_model(out: &Path) -> Result<Trained> {
    let dir = model_dir(out);
    Trained::load(&dir)
        .with_context(|| format!("reading model from {} (run train first)", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, eps_bias } => {
            let cfg = load_config(&common)?;
            let eps_bias = eps_bias.unwrap_or(cfg.target.eps_bias);
            let data = generate_datasets(&cfg, eps_bias)?;
            data.write(&data_dir(&common.out))?;
            println!(
                "wrote {} train, {} calibration, {} test prefixes (eps_bias = {eps_bias}) to {}",
                data.train.len(),
                data.calib_behavioural.len(),
                data.test_prefixes.len(),
                data_dir(&common.out).display()
            );
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            let data = read_data(&common.out)?;
            let trained = train(&cfg, &data)?;
            trained.save(&model_dir(&common.out))?;
            println!("wrote model to {}", model_dir(&common.out).display());
        }
        Command::Calibrate { common } => {
            let cfg = load_config(&common)?;
            let data = read_data(&common.out)?;
            let trained = read_model(&common.out)?;
            for &mode in &cfg.modes {
                let calib = calibrate(&cfg, mode, &data, &trained.predictor)?;
                let path = calibration_path(&common.out, mode);
                write_calibration(&path, &calib)?;
                println!(
                    "{mode}: {} calibration records -> {}",
                    calib.len(),
                    path.display()
                );
            }
        }
        Command::Evaluate { common } => {
            let cfg = load_config(&common)?;
            let data = read_data(&common.out)?;
            let trained = read_model(&common.out)?;
            let mut reports = Vec::new();
            for &mode in &cfg.modes {
                let calib = read_calibration(&calibration_path(&common.out, mode))
                    .with_context(|| format!("reading {mode} calibration (run calibrate first)"))?;
                let (report, outcomes) = evaluate(&cfg, mode, &data, &trained, &calib)?;
                write_csv(
                    &common.out.join("outcomes").join(format!("{mode}.csv")),
                    &outcomes,
                )?;
                println!(
                    "{mode}: coverage {:.4}, mean finite cv {:.4}, unbounded {:.4}",
                    report.marginal_coverage,
                    report.mean_finite_critical_value,
                    report.proportion_unbounded
                );
                reports.push(report);
            }
            write_csv(&common.out.join("coverage.csv"), &reports)?;
        }
        Command::Report { common, input } => {
            let input = match input {
                Some(p) => p,
                None => {
                    let sweep = common.out.join("sweep.csv");
                    if sweep.exists() {
                        sweep
                    } else {
                        common.out.join("coverage.csv")
                    }
                }
            };
            let reports: Vec<CoverageReport> = read_csv(&input)?;
            let path = common.out.join("report.csv");
            write_csv(&path, &plot_rows(&reports))?;
            println!("wrote {} rows to {}", reports.len(), path.display());
        }
        Command::Sweep { common, grid } => {
            let cfg = load_config(&common)?;
            let grid = grid.unwrap_or_else(|| cfg.eps_bias_grid.clone());
            if grid.is_empty() {
                bail!("eps_bias grid is empty");
            }
            let result = sweep(&cfg, &grid)?;
            result.trained.save(&model_dir(&common.out))?;
            let reports = result.reports();
            let path = common.out.join("sweep.csv");
            write_csv(&path, &reports)?;
            for r in &reports {
                println!(
                    "{:>13} eps_bias={:<5} coverage {:.4}  mean cv {:.4}  unbounded {:.4}",
                    r.mode.name(),
                    r.eps_bias,
                    r.marginal_coverage,
                    r.mean_finite_critical_value,
                    r.proportion_unbounded
                );
            }
            println!("wrote {} rows to {}", reports.len(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
