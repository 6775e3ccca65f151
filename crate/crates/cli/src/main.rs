//! `simtpr`: generate datasets, pretrain, diagnose, probe and sweep.
//!
//! stdout carries only machine-readable output (paths or JSON); progress
//! and errors go to stderr. Exit codes: 0 ok, 2 usage or config, 3 I/O,
//! 4 numeric failure.

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "simtpr", version, about = "Temporally predictive representation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a moving-dot trajectory dataset and its manifest.
    GenData(GenDataArgs),
    /// Pretrain a model; writes metrics.csv, final.ckpt and config.json.
    Pretrain(PretrainArgs),
    /// Feature rank, temporal cosine curve and correlation statistics.
    Diagnose(DiagnoseArgs),
    /// Linear action and reward probes on the frozen encoder.
    Probe(ProbeArgs),
    /// Pretrain once per (value, seed) cell and aggregate the finals.
    Sweep(SweepArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of trajectories.
    #[arg(long, default_value_t = 64)]
    pub traj: usize,
    /// States per trajectory (at least 2).
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    /// Grid side length.
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    /// Goal cell as `row,col`; defaults to the grid centre.
    #[arg(long, value_parser = parse_cell)]
    pub goal: Option<(usize, usize)>,
    /// Probability of a random action.
    #[arg(long, default_value_t = 0.3)]
    pub epsilon: f64,
    /// Dataset path; the manifest is written next to it with `.manifest.json` appended.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Flat-key JSON config file; unspecified keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Parent directory; the run goes to `<out>/<config hash>/`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct DiagnoseArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Seed for state sampling; defaults to the checkpoint's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sampled states for the rank; defaults to the checkpoint's setting.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Singular value threshold; defaults to the checkpoint's setting.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Largest lag of the cosine curve, capped by the trajectory length.
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    /// Start states for the cosine curve; defaults to the checkpoint's setting.
    #[arg(long)]
    pub pairs: Option<usize>,
    /// Write the rank-sample projections as CSV, labelled by action.
    #[arg(long)]
    pub export: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long, alias = "checkpoint")]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Probe shuffling seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Probe a freshly initialized encoder with the checkpoint's architecture and seed instead.
    #[arg(long)]
    pub random_init: bool,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Config key to vary, e.g. `lambda_d`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values for the parameter.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Seeds per value: the configured seed, seed + 1, ...
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Parent directory for the per-cell runs.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Aggregated CSV path; defaults to `<out>/sweep.csv`.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_cell(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s.split_once(',').ok_or_else(|| format!("expected row,col, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(r)?, parse(c)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::Sweep(a) => commands::sweep(&a),
    };
    match result {
        Ok(stdout) => {
            // A closed pipe downstream is not a failure of the command.
            let _ = writeln!(std::io::stdout().lock(), "{stdout}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
