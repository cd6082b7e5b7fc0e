//! Argument handling for the `hirl-lab` binary.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hirl_core::experiment::{
    export_results, median_cost_to_success, median_success_at, obtain_low_level, run_benchmark, BenchmarkConfig,
    ExperimentError,
};
use hirl_core::low_level::{pretrain_low_level, LowLevelConfig};
use hirl_core::Algorithm;
use hirl_session::SessionStore;

#[derive(Debug, Parser)]
#[command(name = "hirl-lab", version, about = "Hierarchical imitation learning in a continuous maze")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the oracle benchmark and write per-episode metrics as CSV.
    Bench(BenchArgs),
    /// Pretrain the low-level controller and save a checkpoint.
    Pretrain(PretrainArgs),
    /// Serve live demonstration sessions over HTTP and WebSocket.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// JSON benchmark config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated algorithms (dagger, noise, multipolicy, reward).
    #[arg(long, value_delimiter = ',')]
    pub algos: Option<Vec<String>>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Number of seeds, counted up from --first-seed.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub first_seed: u64,
    /// Low-level checkpoint directory (pretrained and saved there when missing).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Frozen-policy evaluation tasks per run after training.
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fail instead of pretraining when the checkpoint is missing.
    #[arg(long)]
    pub no_pretrain: bool,
    /// Seconds before an unanswered query aborts its episode.
    #[arg(long, default_value_t = 120)]
    pub query_timeout: u64,
}

/// Process exit status for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<ExperimentError>() {
        Some(e) if e.is_config() => 2,
        _ => 1,
    }
}

pub fn bench_config(args: &BenchArgs) -> Result<BenchmarkConfig, ExperimentError> {
    let mut config = match &args.config {
        Some(path) => BenchmarkConfig::load(path)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(names) = &args.algos {
        config.algorithms = names
            .iter()
            .map(|n| Algorithm::from_str(n).map_err(|e| ExperimentError::Config(e.to_string())))
            .collect::<Result<_, _>>()?;
    }
    if let Some(n) = args.episodes {
        config.episodes = n;
    }
    if let Some(n) = args.seeds {
        config.seeds = (args.first_seed..args.first_seed + n).collect();
    }
    if args.checkpoint.is_some() {
        config.checkpoint.clone_from(&args.checkpoint);
    }
    if let Some(n) = args.holdout {
        config.holdout = n;
    }
    if args.out.is_some() {
        config.output.clone_from(&args.out);
    }
    config.validate()?;
    Ok(config)
}

fn bench(args: &BenchArgs) -> anyhow::Result<()> {
    let config = bench_config(args)?;
    let started = std::time::Instant::now();
    let output = run_benchmark(&config)?;
    match &config.output {
        Some(path) => export_results(&output.rows, path)?,
        None => print!("{}", hirl_core::experiment::results_to_csv(&output.rows)),
    }
    let mut algorithms = config.algorithms.clone();
    algorithms.sort();
    algorithms.dedup();
    let from = 2 * config.window;
    for a in algorithms {
        let success = median_success_at(&output.rows, a, config.episodes).unwrap_or(0.0);
        let cost = median_cost_to_success(&output.rows, a, 0.5, from).unwrap_or(f64::INFINITY);
        eprintln!("{a:>12}: median trailing success {success:.3}, median queries to 50% {cost}");
    }
    for h in &output.holdout {
        eprintln!("{:>12} seed {}: frozen success {:.3} on {} tasks", h.algorithm, h.seed, h.success_rate, h.tasks);
    }
    eprintln!("finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> anyhow::Result<()> {
    let report = pretrain_low_level(&LowLevelConfig::default(), args.seed)?;
    report.policy.save(&args.out, report.heldout_reach_rate)?;
    eprintln!(
        "held-out reach rate {:.3} (untrained {:.3}) after {} episodes; saved to {}",
        report.heldout_reach_rate,
        report.untrained_reach_rate,
        report.episodes_run,
        args.out.display()
    );
    Ok(())
}

fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let config = BenchmarkConfig {
        checkpoint: args.checkpoint.clone(),
        allow_pretrain: !args.no_pretrain,
        ..Default::default()
    };
    let (low, rate) = obtain_low_level(&config)?;
    log::info!("low-level reach rate {rate:.3}");
    let store = Arc::new(SessionStore::new(low).with_timeout(Duration::from_secs(args.query_timeout)));
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(async {
        let listener =
            tokio::net::TcpListener::bind(args.addr).await.with_context(|| format!("binding {}", args.addr))?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        hirl_session::serve(listener, store).await?;
        Ok(())
    })
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Bench(a) => bench(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Serve(a) => serve(a),
    }
}
