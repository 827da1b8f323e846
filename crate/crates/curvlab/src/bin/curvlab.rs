//! Command-line front end: train, sweep, curvature, calibrate,
//! geometry, and bound subcommands with JSON configs in and
//! CSV/JSON/JSONL out.
//!
//! Exit codes: 0 success, 2 configuration/validation error,
//! 3 numerical failure. Set `CURVLAB_THREADS` to cap worker
//! parallelism.

use clap::{Args, Parser, Subcommand};
use curvlab::cli::{self, GeometryRequest};
use curvlab::error::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "curvlab", version, about = "Loss-landscape curvature and calibration toolkit")]
struct Cli {
    /// Suppress stdout reports (files are still written).
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON config with dataset, model, and train sections.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for run.jsonl, summary.json, resolved_config.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON config with dataset, model, template, axis, and seeds.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for sweep.csv, aggregate.csv, resolved_config.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the dataset seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CurvatureArgs {
    /// JSON config naming the matrix and estimator budgets.
    #[arg(long)]
    config: PathBuf,
    /// Optional directory for curvature.json and resolved_config.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Predictions CSV with header p0,...,p{C-1},label.
    predictions: PathBuf,
    /// Reliability bin count.
    #[arg(long, default_value_t = 15)]
    bins: usize,
    /// Optional directory for calibration_bins.csv and calibration_summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GeometryArgs {
    /// One of: euclidean, sphere, bernoulli, gaussian, nn-manifold.
    id: String,
    /// Chart point, comma-separated (missing coordinates default to 0).
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    /// Family parameters, comma-separated.
    #[arg(long, value_delimiter = ',')]
    xi: Vec<f64>,
    /// Dimension for the euclidean metric.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Input dimension for nn-manifold.
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Finite-difference step for metric derivatives.
    #[arg(long, default_value_t = curvlab::geometry::DEFAULT_METRIC_STEP)]
    step: f64,
    /// Seed for the nn-manifold random draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    christoffel: bool,
    #[arg(long)]
    riemann: bool,
    #[arg(long)]
    volume: bool,
    #[arg(long)]
    fisher: bool,
    #[arg(long)]
    rank: bool,
    /// Optional directory for geometry.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundArgs {
    /// JSON config with n, epsilon, lambda, kl, emp_risk.
    #[arg(long)]
    config: PathBuf,
    /// Also minimize over a dense lambda grid and report the gap.
    #[arg(long)]
    grid_check: bool,
    /// Optional directory for bound.json and resolved_config.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one classifier and record loss/calibration/curvature rows.
    Train(TrainArgs),
    /// Run a gamma/tau/rho/batch sweep and emit CSV tables.
    Sweep(SweepArgs),
    /// Estimate curvature contractions of an explicit matrix.
    Curvature(CurvatureArgs),
    /// Compute the calibration report of a predictions file.
    Calibrate(CalibrateArgs),
    /// Evaluate differential-geometry quantities for a built-in space.
    Geometry(GeometryArgs),
    /// Evaluate the PAC-Bayes bound and its optimal rate.
    Bound(BoundArgs),
}

fn run(command: Command, quiet: bool) -> Result<()> {
    match command {
        Command::Train(a) => cli::cmd_train(&a.config, &a.out, a.seed),
        Command::Sweep(a) => cli::cmd_sweep(&a.config, &a.out, a.seed),
        Command::Curvature(a) => {
            let report = cli::cmd_curvature(&a.config, a.out.as_deref())?;
            if !quiet {
                print!("{report}");
            }
            Ok(())
        }
        Command::Calibrate(a) => {
            let summary = cli::cmd_calibrate(&a.predictions, a.bins, a.out.as_deref())?;
            if !quiet {
                print!("{summary}");
            }
            Ok(())
        }
        Command::Geometry(a) => {
            let req = GeometryRequest {
                id: a.id,
                theta: a.theta,
                xi: a.xi,
                dim: a.dim,
                input_dim: a.d,
                step: a.step,
                seed: a.seed,
                want_christoffel: a.christoffel,
                want_riemann: a.riemann,
                want_volume: a.volume,
                want_fisher: a.fisher,
                want_rank: a.rank,
            };
            let report = cli::cmd_geometry(&req, a.out.as_deref())?;
            if !quiet {
                print!("{report}");
            }
            Ok(())
        }
        Command::Bound(a) => {
            let report = cli::cmd_bound(&a.config, a.grid_check, a.out.as_deref())?;
            if !quiet {
                print!("{report}");
            }
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "warn"
    }))
    .init();

    if let Ok(threads) = std::env::var("CURVLAB_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }

    match run(cli.command, cli.quiet) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(cli::exit_code_for(&e));
        }
    }
}
