//! Batch front end for gridloc: configuration, run manifests and the
//! command implementations behind the `gridloc` binary.

use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod commands;
pub mod config;
pub mod manifest;
mod output;

pub use commands::{execute, replay};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Log(#[from] gridloc::log::LogError),
    #[error(transparent)]
    Grid(#[from] gridloc::grid::GridError),
    #[error(transparent)]
    Sim(#[from] gridloc::sim::SimError),
    #[error(transparent)]
    Sync(#[from] gridloc::sync::SyncError),
    #[error(transparent)]
    Experiment(#[from] gridloc::experiment::ExperimentError),
    #[error(transparent)]
    Verify(#[from] gridloc::verify::VerifyError),
    #[error("input {0} changed since the manifest was written")]
    InputChanged(PathBuf),
    #[error("replay produced different outputs: {}", .0.join(", "))]
    ReplayMismatch(Vec<String>),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Config(_) => "config",
            Self::Manifest(_) => "manifest",
            Self::Input(_) => "input",
            Self::Log(_) => "log",
            Self::Grid(_) => "grid",
            Self::Sim(_) => "simulation",
            Self::Sync(_) => "sync",
            Self::Experiment(_) => "experiment",
            Self::Verify(_) => "verify",
            Self::InputChanged(_) => "input_changed",
            Self::ReplayMismatch(_) => "replay_mismatch",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gridloc", version, about = "Grid-based TDoA aircraft localization")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training grid container.
    #[arg(long, global = true)]
    pub grid: Option<PathBuf>,
    /// Output directory (default `out`; for replay, `<manifest dir>/replay`).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub square_side_m: Option<f64>,
    #[arg(long, global = true)]
    pub min_receivers: Option<usize>,
    #[arg(long, global = true)]
    pub threshold_m: Option<f64>,
    #[arg(long, global = true)]
    pub window_len: Option<usize>,
    #[arg(long, global = true)]
    pub noise_std_s: Option<f64>,
}

impl GlobalArgs {
    pub fn overrides(&self) -> config::Overrides {
        config::Overrides {
            seed: self.seed,
            k: self.k,
            square_side_m: self.square_side_m,
            min_receivers: self.min_receivers,
            threshold_m: self.threshold_m,
            window_len: self.window_len,
            noise_std_s: self.noise_std_s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Knn,
    Mlat,
    #[default]
    Both,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name", deny_unknown_fields)]
pub enum Command {
    /// Build and save a training grid for the configured deployment.
    TrainGrid,
    /// Generate sensors, flights and optional attacker tracks as a message log.
    Simulate,
    /// Fit per-sensor clock models from a message log.
    SyncClocks {
        #[arg(long)]
        log: PathBuf,
        /// Sensor list (JSON); defaults to the configured deployment.
        #[arg(long)]
        sensors: Option<PathBuf>,
    },
    /// Localize every message of a log against `--grid`.
    Localize {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        clocks: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        method: MethodChoice,
    },
    /// Accuracy against k for each configured square size.
    SweepK,
    /// Accuracy of k-NN and multilateration against timing noise.
    SweepNoise,
    /// GDOP at every cell of the configured grid.
    GdopMap {
        /// Also write a GeoJSON cell map.
        #[arg(long)]
        geojson: bool,
    },
    /// Receiver-coverage and MLAT-usable area fractions.
    Coverage,
    /// Run the verification state machine over a log.
    Verify {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        clocks: Option<PathBuf>,
        /// Ground-level grid for origin search; trained on the fly if absent.
        #[arg(long)]
        ground_grid: Option<PathBuf>,
    },
    /// Re-run a command from its manifest and check the outputs match.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

/// Parses flags, runs the command and returns a one-line summary.
pub fn run(cli: Cli) -> Result<String, CliError> {
    if let Command::Replay { manifest } = &cli.command {
        let out = cli.global.out_dir.clone().unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
        return replay(manifest, &out);
    }
    let mut cfg = config::Config::load(cli.global.config.as_deref())?;
    cfg.apply(&cli.global.overrides())?;
    let out = cli.global.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let (m, summary) = execute(&cli.command, cli.global.grid.as_deref(), &cfg, &out)?;
    Ok(format!("{summary}; {} outputs in {}", m.outputs.len(), out.display()))
}
