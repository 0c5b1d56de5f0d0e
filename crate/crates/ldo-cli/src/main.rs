//! `ldo` command-line driver. Every subcommand reads one JSON run
//! configuration and writes its results into the output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O error.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ConfigError, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "ldo", version, about = "Learn, constrain, reduce and calibrate local discrete operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON run configuration. Omitted blocks take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the initial-condition seed and seeds the sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the RSW equations or an operator and write snapshots.
    Simulate(Common),
    /// Fit operator coefficients to snapshot data.
    Regress(Common),
    /// Fit coordinates in the energy-conserving perturbation subspace.
    ConstrainFit(Common),
    /// Build a POD-DEIM reduced model from snapshots.
    BuildRom(Common),
    /// Sample perturbation coordinates with Metropolis MCMC.
    Infer(Common),
    /// Space-time average one variable of a snapshot file.
    Coarsen(Common),
    /// Time-step refinement study of the RSW integrator.
    Converge(Common),
}

enum Failure {
    Config(ConfigError),
    Run(ldo::Error),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(e) if e.is_numerical() => 3,
            Failure::Run(ldo::Error::Io { .. } | ldo::Error::Format { .. } | ldo::Error::LengthMismatch { .. } | ldo::Error::Json(_)) => 4,
            Failure::Run(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(e) => e.fmt(f),
            Failure::Run(e) => e.fmt(f),
        }
    }
}

fn load(common: &Common, stage: Stage) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Run(ldo::Error::Io { path: path.clone(), source: e })
            })?;
            let mut cfg = RunConfig::from_json(&text).map_err(Failure::Config)?;
            cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    cfg.validate(stage).map_err(Failure::Config)?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let (common, stage, f): (&Common, Stage, fn(&RunConfig, &Path) -> commands::CmdResult) = match &cli.command {
        Command::Simulate(c) => (c, Stage::Simulate, commands::simulate),
        Command::Regress(c) => (c, Stage::Regress, commands::regress),
        Command::ConstrainFit(c) => (c, Stage::ConstrainFit, commands::constrain_fit),
        Command::BuildRom(c) => (c, Stage::BuildRom, commands::build_rom_cmd),
        Command::Infer(c) => (c, Stage::Infer, commands::infer),
        Command::Coarsen(c) => (c, Stage::Coarsen, commands::coarsen),
        Command::Converge(c) => (c, Stage::Converge, commands::converge),
    };
    let cfg = load(common, stage)?;
    std::fs::create_dir_all(&common.out)
        .map_err(|e| Failure::Run(ldo::Error::Io { path: common.out.clone(), source: e }))?;
    f(&cfg, &common.out).map_err(Failure::Run)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
