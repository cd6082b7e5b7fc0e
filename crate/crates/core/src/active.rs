//! Active-learning strategies: start selection by noise-induced variance or
//! committee disagreement, and probabilistic pruning of failed episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ActiveConfig;
use crate::geom::Vec2;
use crate::hirl::{state_features, update_high_level, AggregatedDataset, HighLevelPolicy, HirlError, PolicySpec};
use crate::maze::{AgentState, Goal, Maze};

/// Anything that maps state features to a subgoal offset.
pub trait SubgoalModel {
    fn features(&self, maze: &Maze, state: &AgentState, goal: &Goal) -> Vec<f64>;
    fn predict(&self, features: &[f64]) -> Vec2;
}

impl SubgoalModel for HighLevelPolicy {
    fn features(&self, maze: &Maze, state: &AgentState, goal: &Goal) -> Vec<f64> {
        state_features(maze, state, goal, &self.features)
    }

    fn predict(&self, features: &[f64]) -> Vec2 {
        HighLevelPolicy::predict(self, features)
    }
}

/// Sum of squared distances from the sample mean.
pub fn variance_about_mean(points: &[Vec2]) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // Shifting by the first point keeps constant inputs at exactly zero.
    let origin = points[0];
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec2::ZERO, |acc, &p| acc + (p - origin)) * (1.0 / n);
    points.iter().map(|&p| (p - origin - mean).norm_sq()).sum()
}

/// Velocity perturbations, each uniform in `[-σ, σ]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSet {
    pub velocities: Vec<Vec2>,
}

impl NoiseSet {
    pub fn sample(n: usize, sigma: f64, rng: &mut impl Rng) -> Self {
        let mut draw = || if sigma > 0.0 { rng.random_range(-sigma..=sigma) } else { 0.0 };
        let velocities = (0..n).map(|_| Vec2::new(draw(), draw())).collect();
        Self { velocities }
    }
}

/// Start positions under consideration, each the center of a free cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub candidates: Vec<Vec2>,
}

impl CandidatePool {
    /// `k` free-cell centers drawn uniformly with replacement. The goal's own
    /// cell is excluded unless it is the only free cell.
    pub fn sample(maze: &Maze, goal: &Goal, k: usize, rng: &mut impl Rng) -> Self {
        let goal_cell = maze.cell_of(goal.position);
        let mut cells = maze.free_cells();
        if cells.len() > 1 {
            cells.retain(|&c| Some(c) != goal_cell);
        }
        let candidates = (0..k).map(|_| maze.cell_center(cells[rng.random_range(0..cells.len())])).collect();
        Self { candidates }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Result of a start selection, with every score kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub pool: CandidatePool,
    pub scores: Vec<f64>,
    pub chosen: usize,
}

impl Selection {
    pub fn chosen_position(&self) -> Vec2 {
        self.pool.candidates[self.chosen]
    }
}

/// First index of the maximum; NaN scores never win.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    best
}

pub fn noise_variance_score(model: &impl SubgoalModel, maze: &Maze, s_g: Vec2, goal: &Goal, noises: &NoiseSet) -> f64 {
    let outputs: Vec<Vec2> = noises
        .velocities
        .iter()
        .map(|&v| model.predict(&model.features(maze, &AgentState { position: s_g, velocity: v }, goal)))
        .collect();
    variance_about_mean(&outputs)
}

pub fn select_start_noise_based(
    model: &impl SubgoalModel,
    maze: &Maze,
    goal: &Goal,
    config: &ActiveConfig,
    rng: &mut impl Rng,
) -> Selection {
    let pool = CandidatePool::sample(maze, goal, config.candidates.max(1), rng);
    let shared = NoiseSet::sample(config.noises, config.noise_sigma, rng);
    let scores: Vec<f64> = pool
        .candidates
        .iter()
        .map(|&c| {
            if config.resample_noise_per_candidate {
                let own = NoiseSet::sample(config.noises, config.noise_sigma, rng);
                noise_variance_score(model, maze, c, goal, &own)
            } else {
                noise_variance_score(model, maze, c, goal, &shared)
            }
        })
        .collect();
    let chosen = argmax_first(&scores);
    Selection { pool, scores, chosen }
}

pub fn ensemble_variance_score<M: SubgoalModel>(members: &[M], maze: &Maze, s_g: Vec2, goal: &Goal) -> f64 {
    let state = AgentState::at_rest(s_g);
    let outputs: Vec<Vec2> = members.iter().map(|m| m.predict(&m.features(maze, &state, goal))).collect();
    variance_about_mean(&outputs)
}

pub fn select_start_multi_policy<M: SubgoalModel>(
    members: &[M],
    maze: &Maze,
    goal: &Goal,
    k: usize,
    rng: &mut impl Rng,
) -> Selection {
    let pool = CandidatePool::sample(maze, goal, k.max(1), rng);
    let scores: Vec<f64> = pool.candidates.iter().map(|&c| ensemble_variance_score(members, maze, c, goal)).collect();
    let chosen = argmax_first(&scores);
    Selection { pool, scores, chosen }
}

/// Committee of policies trained on one dataset with distinct seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBag {
    pub members: Vec<HighLevelPolicy>,
}

/// Trains one member per seed; members run in parallel and the result is
/// identical to training them one after another.
pub fn train_policy_bag(
    dataset: &AggregatedDataset,
    spec: &PolicySpec,
    steps: usize,
    seeds: &[u64],
) -> Result<PolicyBag, HirlError> {
    if dataset.is_empty() {
        return Err(HirlError::EmptyDataset);
    }
    if seeds.len() < 2 {
        return Err(HirlError::InvalidConfig(format!("a bag needs at least 2 members, got {}", seeds.len())));
    }
    let members = seeds
        .par_iter()
        .map(|&seed| {
            let mut policy = spec.build(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(7);
            update_high_level(&mut policy, dataset, spec.minibatch, steps, &mut rng)?;
            Ok(policy)
        })
        .collect::<Result<Vec<_>, HirlError>>()?;
    Ok(PolicyBag { members })
}

/// Removes the demonstration `t_d` decisions before the end of a failed
/// episode with probability `e^{-t_d}`. Returns the number removed; an
/// unknown episode removes nothing.
pub fn prune_failed_episode(dataset: &mut AggregatedDataset, episode_id: usize, rng: &mut impl Rng) -> usize {
    let mut positions = dataset.episode_positions(episode_id);
    positions.sort_by_key(|&p| dataset.get(p).map(|d| d.step_index));
    let len = positions.len();
    let removed: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|&(i, _)| {
            let t_d = (len - 1 - i) as f64;
            rng.random::<f64>() < (-t_d).exp()
        })
        .map(|(_, &p)| p)
        .collect();
    dataset.remove_positions(&removed);
    removed.len()
}
