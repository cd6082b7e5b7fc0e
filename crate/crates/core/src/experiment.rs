//! Oracle benchmark harness: one training run per `(algorithm, seed)` cell,
//! per-episode metrics, CSV export and frozen-policy holdout evaluation.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ActiveConfig, Algorithm, EnvConfig, HirlConfig};
use crate::hirl::{
    configured_oracle, max_attempts, train, EpisodeResult, HighLevelPolicy, HirlRun, TrainError, TRAILING_WINDOW,
};
use crate::low_level::{execute_low_level, pretrain_low_level, LowLevelConfig, LowLevelError, LowLevelPolicy};
use crate::maze::{is_success, reset_episode, Maze, MazeError};

pub const CSV_HEADER: &str =
    "algorithm,seed,episode,success,env_steps,attempts,expert_queries,cumulative_expert_cost,trailing_success_rate";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    LowLevel(#[from] LowLevelError),
    #[error("{algorithm} seed {seed}: {source}")]
    Training {
        algorithm: Algorithm,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed results CSV: {0}")]
    Csv(String),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

/// A benchmark description, usually read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub algorithms: Vec<Algorithm>,
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub env: EnvConfig,
    pub hirl: HirlConfig,
    pub active: ActiveConfig,
    pub low_level: LowLevelConfig,
    /// Low-level checkpoint directory; loaded when present.
    pub checkpoint: Option<PathBuf>,
    /// Pretrain when the checkpoint is missing (and save it if a path is set).
    pub allow_pretrain: bool,
    pub pretrain_seed: u64,
    /// Fresh tasks for frozen-policy evaluation after training; 0 skips it.
    pub holdout: usize,
    pub window: usize,
    pub output: Option<PathBuf>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            algorithms: Algorithm::ALL.to_vec(),
            episodes: 100,
            seeds: (0..5).collect(),
            env: EnvConfig::default(),
            hirl: HirlConfig::default(),
            active: ActiveConfig::default(),
            low_level: LowLevelConfig::default(),
            checkpoint: None,
            allow_pretrain: true,
            pretrain_seed: 0,
            holdout: 0,
            window: TRAILING_WINDOW,
            output: None,
        }
    }
}

impl BenchmarkConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text =
            fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.algorithms.is_empty() {
            return Err(ExperimentError::Config("no algorithms selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("no seeds selected".into()));
        }
        if self.window == 0 {
            return Err(ExperimentError::Config("window must be at least 1".into()));
        }
        Ok(())
    }

    /// The learner configuration with the benchmark's episode count applied.
    pub fn hirl_config(&self) -> HirlConfig {
        HirlConfig { episodes: self.episodes, ..self.hirl.clone() }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    /// 1-based.
    pub episode: usize,
    pub success: bool,
    pub env_steps: usize,
    pub attempts: usize,
    pub expert_queries: usize,
    pub cumulative_expert_cost: usize,
    pub trailing_success_rate: f64,
}

pub fn compute_metrics(algorithm: Algorithm, seed: u64, results: &[EpisodeResult], window: usize) -> Vec<MetricsRow> {
    let window = window.max(1);
    let mut cost = 0;
    results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            cost += r.expert_queries;
            let tail = &results[(i + 1).saturating_sub(window)..=i];
            let rate = tail.iter().filter(|x| x.success).count() as f64 / tail.len() as f64;
            MetricsRow {
                algorithm,
                seed,
                episode: i + 1,
                success: r.success,
                env_steps: r.env_steps,
                attempts: r.attempts,
                expert_queries: r.expert_queries,
                cumulative_expert_cost: cost,
                trailing_success_rate: rate,
            }
        })
        .collect()
}

pub fn results_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6}",
            r.algorithm,
            r.seed,
            r.episode,
            u8::from(r.success),
            r.env_steps,
            r.attempts,
            r.expert_queries,
            r.cumulative_expert_cost,
            r.trailing_success_rate
        );
    }
    out
}

pub fn export_results(rows: &[MetricsRow], path: &Path) -> Result<(), ExperimentError> {
    fs::write(path, results_to_csv(rows)).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })
}

pub fn parse_results(text: &str) -> Result<Vec<MetricsRow>, ExperimentError> {
    let bad = |m: String| ExperimentError::Csv(m);
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(bad(format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let field = |i: usize| record.get(i).unwrap_or_default();
        let int = |i: usize| -> Result<usize, ExperimentError> {
            field(i).parse().map_err(|_| bad(format!("row {}: bad integer {:?}", line + 1, field(i))))
        };
        let algorithm = field(0).parse::<Algorithm>().map_err(|e| bad(e.to_string()))?;
        let seed = field(1).parse::<u64>().map_err(|_| bad(format!("row {}: bad seed {:?}", line + 1, field(1))))?;
        let success = match field(3) {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("row {}: success must be 0 or 1, got {other:?}", line + 1))),
        };
        let rate: f64 = field(8).parse().map_err(|_| bad(format!("row {}: bad rate {:?}", line + 1, field(8))))?;
        if !(0.0..=1.0).contains(&rate) {
            return Err(bad(format!("row {}: rate {rate} outside [0, 1]", line + 1)));
        }
        rows.push(MetricsRow {
            algorithm,
            seed,
            episode: int(2)?,
            success,
            env_steps: int(4)?,
            attempts: int(5)?,
            expert_queries: int(6)?,
            cumulative_expert_cost: int(7)?,
            trailing_success_rate: rate,
        });
    }
    Ok(rows)
}

/// Loads the checkpoint named by the config, or pretrains one.
pub fn obtain_low_level(config: &BenchmarkConfig) -> Result<(Arc<LowLevelPolicy>, f64), ExperimentError> {
    if let Some(dir) = &config.checkpoint {
        if dir.join("manifest.json").exists() {
            let (policy, rate) = LowLevelPolicy::load(dir)?;
            return Ok((Arc::new(policy), rate));
        }
    }
    if !config.allow_pretrain {
        let what = config.checkpoint.as_ref().map_or("none given".to_string(), |p| p.display().to_string());
        return Err(ExperimentError::Config(format!(
            "low-level checkpoint missing ({what}) and pretraining is disabled"
        )));
    }
    let low_config = LowLevelConfig { dynamics: config.env.dynamics, ..config.low_level.clone() };
    log::info!("pretraining low-level controller (seed {})", config.pretrain_seed);
    let report = pretrain_low_level(&low_config, config.pretrain_seed)?;
    if let Some(dir) = &config.checkpoint {
        report.policy.save(dir, report.heldout_reach_rate)?;
    }
    Ok((Arc::new(report.policy), report.heldout_reach_rate))
}

/// Frozen-policy success rate on one cell's holdout tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRow {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub tasks: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkOutput {
    /// Sorted by `(algorithm, seed, episode)`.
    pub rows: Vec<MetricsRow>,
    pub holdout: Vec<HoldoutRow>,
}

const HOLDOUT_STREAM: u64 = 0x401d_0017;

/// The learner alone (no expert, no blending) on `n` fresh tasks.
pub fn evaluate_frozen(
    policy: &HighLevelPolicy,
    low: &LowLevelPolicy,
    env: &EnvConfig,
    hirl: &HirlConfig,
    n: usize,
    seed: u64,
) -> Result<f64, ExperimentError> {
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(HOLDOUT_STREAM);
    let mut successes = 0;
    for _ in 0..n {
        let maze = Maze::generate(rng.random(), env.width, env.height, env.wall_density)?;
        let start = reset_episode(&maze, rng.random(), env.goal_epsilon);
        let mut state = start.state;
        let mut steps = 0;
        for _ in 0..max_attempts(env, hirl) {
            if is_success(&state, &start.goal) || steps >= env.max_env_steps {
                break;
            }
            let offset = policy.predict_state(&maze, &state, &start.goal);
            let exec = execute_low_level(
                &maze,
                &state,
                state.position + offset,
                low,
                hirl.horizon,
                env.max_env_steps - steps,
                &env.dynamics,
            )?;
            state = exec.final_state;
            steps += exec.steps_used;
        }
        successes += usize::from(is_success(&state, &start.goal));
    }
    Ok(successes as f64 / n as f64)
}

struct Cell {
    rows: Vec<MetricsRow>,
    holdout: Option<HoldoutRow>,
}

fn run_cell(
    config: &BenchmarkConfig,
    low: &Arc<LowLevelPolicy>,
    algorithm: Algorithm,
    seed: u64,
) -> Result<Cell, ExperimentError> {
    let hirl = config.hirl_config();
    let wrap = |source: TrainError| ExperimentError::Training { algorithm, seed, source };
    let mut run = HirlRun::new(algorithm, config.env, hirl.clone(), config.active, low.clone(), seed)
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let results = train(&mut run, &mut configured_oracle(&hirl, seed)).map_err(wrap)?;
    let holdout = if config.holdout > 0 {
        let rate = evaluate_frozen(run.policy(), low, &config.env, &hirl, config.holdout, seed)?;
        Some(HoldoutRow { algorithm, seed, tasks: config.holdout, success_rate: rate })
    } else {
        None
    };
    Ok(Cell { rows: compute_metrics(algorithm, seed, &results, config.window), holdout })
}

/// Runs every cell in parallel against a given low-level controller.
pub fn run_benchmark_with(
    config: &BenchmarkConfig,
    low: Arc<LowLevelPolicy>,
) -> Result<BenchmarkOutput, ExperimentError> {
    config.validate()?;
    let mut algorithms = config.algorithms.clone();
    algorithms.sort();
    algorithms.dedup();
    let mut seeds = config.seeds.clone();
    seeds.sort();
    seeds.dedup();
    let cells: Vec<(Algorithm, u64)> = algorithms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    let done = cells.par_iter().map(|&(a, s)| run_cell(config, &low, a, s)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    let mut holdout = Vec::new();
    for cell in done {
        rows.extend(cell.rows);
        holdout.extend(cell.holdout);
    }
    rows.sort_by_key(|r| (r.algorithm, r.seed, r.episode));
    holdout.sort_by_key(|h| (h.algorithm, h.seed));
    Ok(BenchmarkOutput { rows, holdout })
}

/// Obtains the low level (see [`obtain_low_level`]) and runs the benchmark.
pub fn run_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkOutput, ExperimentError> {
    config.validate()?;
    let (low, rate) = obtain_low_level(config)?;
    log::info!("low-level reach rate {rate:.3}");
    run_benchmark_with(config, low)
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { (xs[n / 2 - 1] + xs[n / 2]) / 2.0 })
}

/// Trailing success at `episode` for each seed of `algorithm`.
pub fn success_at(rows: &[MetricsRow], algorithm: Algorithm, episode: usize) -> Vec<(u64, f64)> {
    rows.iter()
        .filter(|r| r.algorithm == algorithm && r.episode == episode)
        .map(|r| (r.seed, r.trailing_success_rate))
        .collect()
}

pub fn median_success_at(rows: &[MetricsRow], algorithm: Algorithm, episode: usize) -> Option<f64> {
    median(success_at(rows, algorithm, episode).into_iter().map(|(_, r)| r).collect())
}

/// Cumulative expert cost at the first episode numbered `from_episode` or
/// later whose trailing success rate reaches `level`; `None` if none does.
pub fn cost_to_success(
    rows: &[MetricsRow],
    algorithm: Algorithm,
    seed: u64,
    level: f64,
    from_episode: usize,
) -> Option<usize> {
    rows.iter()
        .filter(|r| r.algorithm == algorithm && r.seed == seed && r.episode >= from_episode)
        .find(|r| r.trailing_success_rate >= level)
        .map(|r| r.cumulative_expert_cost)
}

/// Median over seeds of [`cost_to_success`]; runs that never get there count
/// as infinitely expensive.
pub fn median_cost_to_success(
    rows: &[MetricsRow],
    algorithm: Algorithm,
    level: f64,
    from_episode: usize,
) -> Option<f64> {
    let mut seeds: Vec<u64> = rows.iter().filter(|r| r.algorithm == algorithm).map(|r| r.seed).collect();
    seeds.sort();
    seeds.dedup();
    median(
        seeds
            .into_iter()
            .map(|s| cost_to_success(rows, algorithm, s, level, from_episode).map_or(f64::INFINITY, |c| c as f64))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(success: bool, queries: usize) -> EpisodeResult {
        EpisodeResult {
            episode_id: 0,
            success,
            env_steps: 10,
            attempts: queries,
            expert_queries: queries,
            aborted: false,
        }
    }

    #[test]
    fn metrics_windows_and_costs() {
        let all: Vec<EpisodeResult> = (0..5).map(|_| result(true, 2)).collect();
        assert!(compute_metrics(Algorithm::Dagger, 0, &all, 20).iter().all(|r| r.trailing_success_rate == 1.0));
        let alt: Vec<EpisodeResult> = (0..6).map(|i| result(i % 2 == 0, i)).collect();
        let rows = compute_metrics(Algorithm::Reward, 3, &alt, 2);
        assert!(rows[1..].iter().all(|r| r.trailing_success_rate == 0.5));
        assert_eq!(rows.iter().map(|r| r.cumulative_expert_cost).collect::<Vec<_>>(), vec![0, 1, 3, 6, 10, 15]);
        assert_eq!(rows[5].episode, 6);
        assert!(compute_metrics(Algorithm::Reward, 0, &[], 3).is_empty());
    }

    #[test]
    fn csv_round_trip_and_header() {
        assert_eq!(results_to_csv(&[]), format!("{CSV_HEADER}\n"));
        let rows = compute_metrics(Algorithm::Noise, 7, &[result(true, 3), result(false, 4), result(false, 1)], 20);
        let text = results_to_csv(&rows);
        assert_eq!(text.lines().count() - 1, rows.len());
        assert!(text.lines().nth(3).unwrap().ends_with(",0.333333"));
        let back = parse_results(&text).unwrap();
        for (a, b) in rows.iter().zip(&back) {
            assert!((a.trailing_success_rate - b.trailing_success_rate).abs() < 1e-6);
            assert_eq!(
                (a.algorithm, a.seed, a.episode, a.cumulative_expert_cost),
                (b.algorithm, b.seed, b.episode, b.cumulative_expert_cost)
            );
        }
        assert!(parse_results("a,b\n1,2\n").is_err());
        assert!(parse_results(&format!("{CSV_HEADER}\ndagger,0,1,2,0,0,0,0,0.0\n")).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BenchmarkConfig::from_json(r#"{"algorithms": []}"#).unwrap_err().is_config());
        assert!(BenchmarkConfig::from_json(r#"{"bogus": 1}"#).unwrap_err().is_config());
        let c = BenchmarkConfig::from_json(r#"{"algorithms": ["reward"], "seeds": [3], "episodes": 7}"#).unwrap();
        assert_eq!(c.hirl_config().episodes, 7);
    }

    #[test]
    fn missing_checkpoint_without_pretraining_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let config = BenchmarkConfig {
            checkpoint: Some(dir.path().join("absent")),
            allow_pretrain: false,
            ..Default::default()
        };
        assert!(obtain_low_level(&config).unwrap_err().is_config());
    }

    #[test]
    fn cost_at_matched_success() {
        let mut rs = vec![result(true, 1), result(false, 2), result(false, 1), result(false, 1)];
        rs.extend((0..3).map(|_| result(true, 3)));
        let rows = compute_metrics(Algorithm::Reward, 0, &rs, 2);
        assert_eq!(cost_to_success(&rows, Algorithm::Reward, 0, 0.5, 1), Some(1));
        assert_eq!(cost_to_success(&rows, Algorithm::Reward, 0, 0.5, 3), Some(8));
        assert_eq!(cost_to_success(&rows, Algorithm::Reward, 0, 0.5, 99), None);
        assert_eq!(median_cost_to_success(&rows, Algorithm::Reward, 0.5, 99), Some(f64::INFINITY));
        assert_eq!(median_cost_to_success(&rows, Algorithm::Dagger, 0.5, 1), None);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(vec![]), None);
    }
}
