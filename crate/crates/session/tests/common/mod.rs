#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use hirl_core::config::{ActiveConfig, EnvConfig};
use hirl_core::hirl::{configured_oracle, train, EpisodeResult, HirlRun};
use hirl_core::low_level::{pretrain_low_level, LowLevelConfig, LowLevelPolicy};
use hirl_core::maze::{AgentState, Goal, Maze};
use hirl_core::oracle::{Expert, ExpertError};
use hirl_core::{Algorithm, HirlConfig, Vec2};
use hirl_session::store::{CreateSession, ExpertKind};

pub fn low_level() -> Arc<LowLevelPolicy> {
    static LOW: OnceLock<Arc<LowLevelPolicy>> = OnceLock::new();
    LOW.get_or_init(|| {
        let report = pretrain_low_level(&LowLevelConfig::default(), 0).expect("pretraining succeeds");
        Arc::new(report.policy)
    })
    .clone()
}

pub fn short_config(episodes: usize) -> HirlConfig {
    HirlConfig { episodes, ..HirlConfig::default() }
}

pub fn request(algorithm: Algorithm, expert: ExpertKind, seed: u64, episodes: usize) -> CreateSession {
    CreateSession { hirl: short_config(episodes), ..CreateSession::new(algorithm, expert, seed) }
}

/// Oracle that records every (queried position, answer) pair.
pub struct Recording<E> {
    pub inner: E,
    pub answers: Vec<(Vec2, Vec2)>,
}

impl<E: Expert> Expert for Recording<E> {
    fn demonstrate(&mut self, maze: &Maze, state: &AgentState, goal: &Goal) -> Result<Vec2, ExpertError> {
        let a = self.inner.demonstrate(maze, state, goal)?;
        self.answers.push((state.position, a));
        Ok(a)
    }
}

/// Headless run of `req` with the configured oracle, recording its answers.
pub fn headless(req: &CreateSession) -> (Vec<EpisodeResult>, Vec<(Vec2, Vec2)>) {
    let algorithm: Algorithm = req.algorithm.parse().unwrap();
    let mut run = HirlRun::new(algorithm, req.env, req.hirl.clone(), req.active, low_level(), req.seed).unwrap();
    let mut expert = Recording { inner: configured_oracle(&req.hirl, req.seed), answers: Vec::new() };
    let results = train(&mut run, &mut expert).unwrap();
    (results, expert.answers)
}

pub fn default_env() -> EnvConfig {
    EnvConfig::default()
}

pub fn default_active() -> ActiveConfig {
    ActiveConfig::default()
}
