use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lbl_cli::commands::{self, DecomposeArgs, DiagnoseArgs, GenerateArgs};
use lbl_cli::config::{parse_seeds, ExperimentConfig, Overrides};
use lbl_cli::{harness, CliError};
use lbl_core::env::GeneratorSpec;
use lbl_core::rtp::RtpConfig;

#[derive(Parser)]
#[command(name = "lbl", version, about = "Latent-mixture bandit experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (policy, seed) cell of an experiment config.
    Simulate(SimulateOpts),
    /// Recover class features from moments, records or a model.
    Decompose(DecomposeOpts),
    /// Print the model constants and per-user thresholds of a model file.
    Diagnose(DiagnoseOpts),
    /// Draw a random model and write it as JSON.
    Generate(GenerateOpts),
}

#[derive(Args)]
struct SimulateOpts {
    /// Experiment config, TOML or JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, replacing the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seed list replacing the config's seeds.
    #[arg(long)]
    seeds: Option<String>,
    /// Explore when the gate draw is 0 instead of 1, for every policy.
    #[arg(long)]
    literal_gate: bool,
    /// Rebuild every user's OFUL statistics on each new feature estimate.
    #[arg(long)]
    rebuild_on_refresh: bool,
    /// Worker threads (default: available cores).
    #[arg(long)]
    parallelism: Option<usize>,
}

#[derive(Args)]
struct DecomposeOpts {
    /// Model file: ground truth for alignment, and the input (via its exact
    /// moments) when no other input is given.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Moments JSON (`m2` rows, dense `m3`).
    #[arg(long, conflicts_with = "records")]
    moments: Option<PathBuf>,
    /// Interaction records CSV as written by `simulate`.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Number of classes C (defaults to the model's).
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 100)]
    restarts: usize,
    #[arg(long, default_value_t = 100)]
    power_iters: usize,
    #[arg(long, default_value_t = 0)]
    rtp_seed: u64,
    /// Write the feature estimate JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also print the recovery bound, alpha and the per-user thresholds.
    #[arg(long)]
    report_bounds: bool,
    /// JSON model constants for --report-bounds.
    #[arg(long)]
    constants: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    /// Sessions assumed for the bound when the input carries none (default 1000).
    #[arg(long)]
    sessions: Option<usize>,
}

#[derive(Args)]
struct DiagnoseOpts {
    #[arg(long)]
    model: PathBuf,
    /// Report only this user (0-based).
    #[arg(long)]
    user: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
}

#[derive(Args)]
struct GenerateOpts {
    #[arg(long)]
    arms: usize,
    #[arg(long)]
    users: usize,
    #[arg(long)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    v_min: f64,
    #[arg(long, default_value_t = 0.1)]
    r_noise: f64,
    #[arg(long, default_value_t = 3)]
    ell: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also write the model's exact moments as JSON.
    #[arg(long)]
    moments_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LBL_LOG", "warn")).init();
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Simulate(o) => simulate(o, &mut out),
        Command::Decompose(o) => {
            let args = DecomposeArgs {
                model: o.model,
                moments: o.moments,
                records: o.records,
                classes: o.classes,
                rtp: RtpConfig {
                    restarts: o.restarts,
                    power_iters: o.power_iters,
                    seed: o.rtp_seed,
                    ..RtpConfig::default()
                },
                out: o.out,
                report_bounds: o.report_bounds,
                constants: o.constants,
                delta: o.delta,
                c1: o.c1,
                sessions: o.sessions,
            };
            commands::cmd_decompose(&args, &mut out)
        }
        Command::Diagnose(o) => {
            let args = DiagnoseArgs { model: o.model, user: o.user, delta: o.delta, c1: o.c1 };
            commands::cmd_diagnose(&args, &mut out)
        }
        Command::Generate(o) => {
            let generator =
                GeneratorSpec { v_min: o.v_min, r_noise: o.r_noise, ell: o.ell, ..GeneratorSpec::default() };
            let args = GenerateArgs {
                arms: o.arms,
                users: o.users,
                classes: o.classes,
                seed: o.seed,
                generator,
                out: o.out,
                moments_out: o.moments_out,
            };
            commands::cmd_generate(&args, &mut out)
        }
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lbl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn simulate(o: SimulateOpts, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&o.config)?;
    cfg.apply(&Overrides {
        output_dir: o.out,
        seeds: o.seeds.as_deref().map(parse_seeds).transpose().map_err(CliError::Config)?,
        literal_gate: o.literal_gate,
        rebuild_on_refresh: o.rebuild_on_refresh,
        parallelism: o.parallelism,
    })?;
    let report = harness::run_experiment(&cfg)?;
    writeln!(out, "cells = {}", report.cells)?;
    writeln!(out, "output_dir = {}", report.output_dir.display())?;
    for f in &report.failures {
        writeln!(out, "failed = {} seed {}: {}", f.label, f.seed, f.error)?;
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::CellsFailed(report.failures.len(), report.cells))
    }
}
