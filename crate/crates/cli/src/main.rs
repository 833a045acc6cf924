mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cloudsched_core::scheduler::PolicyKind;

/// Hourly cloud data-centre simulator with heuristic and graph-network VM schedulers.
#[derive(Debug, Parser)]
#[command(name = "cloudsched", version)]
pub struct Cli {
    /// TOML configuration file; flags override its values
    #[arg(long, global = true, help_heading = "Global options", value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Directory receiving all output files
    #[arg(long, global = true, help_heading = "Global options", value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Seed for workload, prices, policy randomness and training
    #[arg(long, global = true, help_heading = "Global options", value_name = "N")]
    pub seed: Option<u64>,
    /// Placement policy: first_fit, best_fit_energy, random, counter or hunter
    #[arg(long, global = true, help_heading = "Global options", value_name = "NAME", value_parser = parse_policy)]
    pub policy: Option<PolicyKind>,
    /// Include per-PM model scores in the decision log
    #[arg(long, global = true, help_heading = "Global options")]
    pub log_scores: bool,
    /// Print only errors
    #[arg(long, short, global = true, help_heading = "Global options", conflicts_with = "verbose")]
    pub quiet: bool,
    /// Print progress details
    #[arg(long, short, global = true, help_heading = "Global options")]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a workload JSON file from the synthetic generator or a trace directory
    GenWorkload(GenWorkloadArgs),
    /// Collect teacher episodes and train a counter or hunter scorer
    Train(TrainArgs),
    /// Run one simulation and write its result, QoS report and CSV series
    Simulate(SimulateArgs),
    /// Run several policies on the same scenario and tabulate their QoS
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GenWorkloadArgs {
    /// Number of requests
    #[arg(long, value_name = "N")]
    pub count: Option<usize>,
    /// Arrivals are drawn from hours 0..H
    #[arg(long, value_name = "H")]
    pub horizon: Option<u32>,
    /// Derive one request per trace file in this directory instead
    #[arg(long, value_name = "DIR")]
    pub trace_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Teacher episodes used to collect samples
    #[arg(long, value_name = "N")]
    pub episodes: Option<usize>,
    /// Passes over the collected samples
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// SGD step size
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    /// Clusters per state graph for the GCN scorer
    #[arg(long, value_name = "K")]
    pub clusters: Option<usize>,
    /// Clusters per mini-batch
    #[arg(long, value_name = "B")]
    pub batch_clusters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Model checkpoint for counter or hunter
    #[arg(long, value_name = "PATH")]
    pub model: Option<PathBuf>,
    /// Workload JSON file to replay
    #[arg(long, value_name = "PATH")]
    pub workload: Option<PathBuf>,
    /// Price CSV with columns hour,loc-0,...
    #[arg(long, value_name = "PATH")]
    pub prices: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated policies to run on the configured scenario
    #[arg(long, value_delimiter = ',', value_name = "LIST", value_parser = parse_policy)]
    pub policies: Vec<PolicyKind>,
    /// Checkpoint used by counter
    #[arg(long, value_name = "PATH")]
    pub counter_model: Option<PathBuf>,
    /// Checkpoint used by hunter
    #[arg(long, value_name = "PATH")]
    pub hunter_model: Option<PathBuf>,
    /// Comma-separated config files, one row each; they must agree on everything but the policy
    #[arg(long, value_delimiter = ',', value_name = "PATHS", conflicts_with = "policies")]
    pub configs: Vec<PathBuf>,
    /// Workload JSON file to replay
    #[arg(long, value_name = "PATH")]
    pub workload: Option<PathBuf>,
    /// Price CSV with columns hour,loc-0,...
    #[arg(long, value_name = "PATH")]
    pub prices: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<PolicyKind, String> {
    s.parse().map_err(|e: cloudsched_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
