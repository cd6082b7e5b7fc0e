use std::sync::{Arc, OnceLock};

use hirl_core::config::{ActiveConfig, EnvConfig};
use hirl_core::experiment::{
    compute_metrics, evaluate_frozen, obtain_low_level, parse_results, results_to_csv, run_benchmark_with,
    BenchmarkConfig,
};
use hirl_core::hirl::{
    configured_oracle, max_attempts, train, train_dagger, train_reward_based, write_training_log, HirlRun,
    TrainingLogEntry,
};
use hirl_core::low_level::{pretrain_low_level, LowLevelConfig, LowLevelPolicy};
use hirl_core::{Algorithm, HirlConfig};

fn low() -> Arc<LowLevelPolicy> {
    static LOW: OnceLock<Arc<LowLevelPolicy>> = OnceLock::new();
    LOW.get_or_init(|| Arc::new(pretrain_low_level(&LowLevelConfig::default(), 0).unwrap().policy)).clone()
}

fn hirl(episodes: usize) -> HirlConfig {
    HirlConfig { episodes, ..HirlConfig::default() }
}

fn run(algorithm: Algorithm, episodes: usize, seed: u64) -> HirlRun {
    let h = hirl(episodes);
    let mut r = HirlRun::new(algorithm, EnvConfig::default(), h.clone(), ActiveConfig::default(), low(), seed).unwrap();
    train(&mut r, &mut configured_oracle(&h, seed)).unwrap();
    r
}

#[test]
fn episode_results_respect_budgets() {
    let env = EnvConfig::default();
    let cap = max_attempts(&env, &hirl(1));
    for algorithm in Algorithm::ALL {
        let r = run(algorithm, 10, 3);
        assert_eq!(r.results().len(), 10);
        for (i, e) in r.results().iter().enumerate() {
            assert_eq!(e.episode_id, i);
            assert!(e.attempts <= cap && e.env_steps <= env.max_env_steps, "{algorithm}: {e:?}");
            assert_eq!(e.expert_queries, e.attempts);
            assert!(!e.aborted);
        }
    }
}

#[test]
fn dataset_grows_by_answered_queries() {
    let r = run(Algorithm::Dagger, 10, 4);
    let mut size = 0;
    for (entry, result) in r.training_log().iter().zip(r.results()) {
        size += result.expert_queries;
        assert_eq!(entry.dataset_size, size);
    }
    assert_eq!(r.pruned_total(), 0);
}

#[test]
fn reward_pruning_accounts_for_every_demonstration() {
    let r = run(Algorithm::Reward, 15, 5);
    let answered: usize = r.results().iter().map(|e| e.expert_queries).sum();
    assert_eq!(r.dataset().len() + r.pruned_total(), answered);
    let mut prev = 0;
    for (entry, result) in r.training_log().iter().zip(r.results()) {
        if result.success {
            assert_eq!(entry.dataset_size, prev + result.expert_queries);
        } else {
            assert!(entry.dataset_size <= prev + result.expert_queries);
        }
        prev = entry.dataset_size;
    }
}

#[test]
fn beta_follows_update_rounds() {
    let r = run(Algorithm::Dagger, 10, 6);
    assert_eq!(r.update_rounds(), 2);
    assert_eq!(r.schedule().beta, 1.0 / 1.5f64.powi(2));
    let r = run(Algorithm::Reward, 6, 6);
    assert_eq!(r.schedule().beta, 1.0 / 1.5f64.powi(6));
}

#[test]
fn training_is_deterministic_per_seed() {
    let env = EnvConfig::default();
    let h = hirl(8);
    let (p1, r1) = train_reward_based(&env, &mut configured_oracle(&h, 9), &h, low(), 9).unwrap();
    let (p2, r2) = train_reward_based(&env, &mut configured_oracle(&h, 9), &h, low(), 9).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(p1.net.to_json(), p2.net.to_json());
    let (p3, _) = train_dagger(&env, &mut configured_oracle(&h, 10), &h, low(), 10).unwrap();
    assert_ne!(p1.net.to_json(), p3.net.to_json());
}

#[test]
fn training_log_is_json_lines() {
    let r = run(Algorithm::Noise, 5, 2);
    let mut buf = Vec::new();
    write_training_log(r.training_log(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let parsed: Vec<TrainingLogEntry> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, r.training_log());
}

#[test]
fn csv_round_trips_through_the_parser() {
    let r = run(Algorithm::Multipolicy, 12, 1);
    assert!(r.bag().is_some());
    let rows = compute_metrics(Algorithm::Multipolicy, 1, r.results(), 20);
    let parsed = parse_results(&results_to_csv(&rows)).unwrap();
    assert_eq!(parsed.len(), rows.len());
    for (a, b) in parsed.iter().zip(&rows) {
        assert_eq!((a.algorithm, a.seed, a.episode, a.success), (b.algorithm, b.seed, b.episode, b.success));
        assert_eq!(a.cumulative_expert_cost, b.cumulative_expert_cost);
        assert!((a.trailing_success_rate - b.trailing_success_rate).abs() <= 5e-7);
    }
}

#[test]
fn small_benchmark_is_sorted_and_repeatable() {
    let config = BenchmarkConfig {
        algorithms: vec![Algorithm::Reward, Algorithm::Dagger],
        episodes: 6,
        seeds: vec![3, 1],
        holdout: 4,
        ..BenchmarkConfig::default()
    };
    let a = run_benchmark_with(&config, low()).unwrap();
    let b = run_benchmark_with(&config, low()).unwrap();
    assert_eq!(results_to_csv(&a.rows), results_to_csv(&b.rows));
    assert_eq!(a.holdout, b.holdout);
    assert_eq!(a.rows.len(), 2 * 2 * 6);
    let keys: Vec<_> = a.rows.iter().map(|r| (r.algorithm, r.seed, r.episode)).collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(a.holdout.iter().all(|h| (0.0..=1.0).contains(&h.success_rate) && h.tasks == 4));
}

#[test]
fn frozen_evaluation_is_seeded() {
    let r = run(Algorithm::Dagger, 5, 8);
    let h = hirl(5);
    let env = EnvConfig::default();
    let x = evaluate_frozen(r.policy(), &low(), &env, &h, 10, 8).unwrap();
    assert_eq!(x, evaluate_frozen(r.policy(), &low(), &env, &h, 10, 8).unwrap());
    assert!((0.0..=1.0).contains(&x));
}

#[test]
fn checkpoint_is_saved_then_reused() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("low");
    low().save(&ckpt, 0.97).unwrap();
    let config = BenchmarkConfig { checkpoint: Some(ckpt), allow_pretrain: false, ..BenchmarkConfig::default() };
    let (loaded, rate) = obtain_low_level(&config).unwrap();
    assert_eq!(rate, 0.97);
    let obs = [0.3, -1.2, 0.1, 0.4];
    assert_eq!(loaded.act(&obs), low().act(&obs));

    let missing = BenchmarkConfig { checkpoint: Some(dir.path().join("none")), allow_pretrain: false, ..config };
    assert!(obtain_low_level(&missing).unwrap_err().is_config());
}
