//! Shared configuration for environments, the high-level learner and the
//! active-learning strategies. Every struct deserializes with defaults for
//! missing fields so JSON config files only need to name what they change.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::maze::DynamicsParams;
use crate::neural::AdamConfig;

/// High-level training strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Dagger,
    Noise,
    Multipolicy,
    Reward,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Dagger, Algorithm::Noise, Algorithm::Multipolicy, Algorithm::Reward];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Dagger => "dagger",
            Algorithm::Noise => "noise",
            Algorithm::Multipolicy => "multipolicy",
            Algorithm::Reward => "reward",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown algorithm {0:?} (expected dagger, noise, multipolicy or reward)")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for Algorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL.into_iter().find(|a| a.name() == s.trim()).ok_or_else(|| UnknownAlgorithm(s.to_string()))
    }
}

/// Which side of the blend `β` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendConvention {
    /// `β·expert + (1−β)·learner`: the expert dominates early training.
    #[default]
    ExpertWeighted,
    /// `β·learner + (1−β)·expert`, the reversed weighting.
    Literal,
}

/// Maze-world parameters shared by every episode of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    pub goal_epsilon: f64,
    /// Hard cap on low-level steps per episode.
    pub max_env_steps: usize,
    pub dynamics: DynamicsParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            width: 10,
            height: 10,
            wall_density: 0.2,
            goal_epsilon: 0.5,
            max_env_steps: 500,
            dynamics: DynamicsParams::default(),
        }
    }
}

/// Hyperparameters of the high-level learner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HirlConfig {
    pub episodes: usize,
    /// Low-level steps per subgoal.
    pub horizon: usize,
    pub subgoal_radius: f64,
    /// Side of the global context grid fed to the learner; 0 leaves it out.
    pub context_size: usize,
    /// Radius in cells of the agent-centred wall patch; 0 leaves it out.
    pub local_view: usize,
    pub hidden_layers: Vec<usize>,
    pub minibatch: usize,
    /// Episodes between DAgger update rounds.
    pub update_period: usize,
    pub updates_per_round: usize,
    /// Gradient steps after every decision (reward-based strategy).
    pub steps_per_decision: usize,
    pub initial_beta: f64,
    pub beta_decay: f64,
    pub blend: BlendConvention,
    pub optimizer: AdamConfig,
    /// Oracle lookahead along the planned path, in cells.
    pub expert_lookahead: usize,
    /// Standard deviation of optional Gaussian label noise on oracle subgoals.
    pub expert_label_noise: Option<f64>,
}

impl Default for HirlConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            horizon: 25,
            subgoal_radius: 2.0,
            context_size: 0,
            local_view: 1,
            hidden_layers: vec![64, 64],
            minibatch: 64,
            update_period: 5,
            updates_per_round: 200,
            steps_per_decision: 5,
            initial_beta: 1.0,
            beta_decay: 1.5,
            blend: BlendConvention::ExpertWeighted,
            optimizer: AdamConfig::default(),
            expert_lookahead: 3,
            expert_label_noise: None,
        }
    }
}

/// Active start-selection parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveConfig {
    pub candidates: usize,
    pub noises: usize,
    pub noise_sigma: f64,
    pub bag_size: usize,
    /// Draw a fresh noise set for every candidate instead of sharing one.
    pub resample_noise_per_candidate: bool,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self { candidates: 16, noises: 8, noise_sigma: 0.3, bag_size: 5, resample_noise_per_candidate: false }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("aggrevated".parse::<Algorithm>().is_err());
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c: HirlConfig = serde_json::from_str(r#"{"episodes": 10}"#).unwrap();
        assert_eq!(c.episodes, 10);
        assert_eq!(c.horizon, 25);
        assert!(serde_json::from_str::<HirlConfig>(r#"{"episodez": 10}"#).is_err());
    }
}
