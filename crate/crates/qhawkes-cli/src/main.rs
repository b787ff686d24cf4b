//! `qhawkes`: calibration pipeline for quadratic Hawkes models of
//! order-book event flow.
//!
//! Each subcommand is one pipeline stage. Stages exchange data only
//! through files under the output directory, tracked in `manifest.json`,
//! so a pipeline can be resumed, partially re-run, or inspected at any
//! point. Exit codes: 0 on success, 2 for configuration errors, 3 for
//! data errors, 4 for numerical failures.

mod config;
mod manifest;
mod report;
mod stages;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use qhawkes::error::{Error, Result};

#[derive(Parser)]
#[command(name = "qhawkes", version, about = "Quadratic Hawkes calibration pipeline")]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory; overrides the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Kernel integration cut-off in seconds; overrides the config.
    #[arg(long, global = true, value_name = "SECONDS")]
    cutoff: Option<f64>,

    /// Calibrate on the raw moment curves, skipping the smoothing fits.
    #[arg(long, global = true)]
    no_smoothing: bool,

    /// Which calibration routes to run: full, effective or both.
    #[arg(long, global = true, value_name = "ROUTE")]
    route: Option<String>,

    /// Simulator seed; overrides the config.
    #[arg(long, global = true, value_name = "SEED")]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic sessions from the [simulate] config section.
    Simulate,
    /// Clean raw sessions and build the surprise-price increments.
    Preprocess,
    /// Estimate the moment curves feeding both calibration routes.
    Moments,
    /// Solve for the bare kernels phi, L, K and the base rates.
    Calibrate,
    /// Solve for the dressed kernels with the event feedback folded in.
    Effective,
    /// Factorize the dressed quadratic kernel into volatility and trend parts.
    Zumbach,
    /// Spread reconstruction, response curves, survival tail and share flux.
    Liquidity,
    /// Summary tables, figure data and cross-route consistency checks.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Numerical(_) => 4,
        Error::Data(_) | Error::Parse { .. } | Error::Io(_) => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let route = match cli.route {
        Some(raw) => Some(raw.parse()?),
        None => None,
    };
    let over = config::Overrides {
        out: cli.out,
        cutoff_s: cli.cutoff,
        no_smoothing: cli.no_smoothing,
        route,
        seed: cli.seed,
    };
    let path = cli
        .config
        .ok_or_else(|| Error::config("no configuration file; pass --config <FILE>"))?;
    let r = config::load(&path, &over)?;
    std::fs::create_dir_all(&r.out)
        .map_err(|e| Error::data(format!("cannot create {}: {e}", r.out.display())))?;

    match cli.cmd {
        Cmd::Simulate => stages::cmd_simulate(&r),
        Cmd::Preprocess => stages::cmd_preprocess(&r),
        Cmd::Moments => stages::cmd_moments(&r),
        Cmd::Calibrate => stages::cmd_calibrate(&r),
        Cmd::Effective => stages::cmd_effective(&r),
        Cmd::Zumbach => stages::cmd_zumbach(&r),
        Cmd::Liquidity => stages::cmd_liquidity(&r),
        Cmd::Report => report::cmd_report(&r),
    }
}
