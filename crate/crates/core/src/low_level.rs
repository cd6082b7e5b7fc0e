//! Goal-conditioned low-level controller trained with DDPG.
//!
//! Observations are `[Δx, Δy, vx, vy]` with `Δ = subgoal − position`; the
//! reward is the negative distance to the subgoal after the step and the
//! transition terminates once the subgoal is within `rho`. Pretraining runs
//! in open field; obstacle avoidance is left to the high level.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::maze::{integrate_free, step_dynamics, AgentState, DynamicsParams, Maze, MazeError};
use crate::neural::{Activation, Adam, AdamConfig, Gradients, Mlp, NeuralError};

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Error)]
pub enum LowLevelError {
    #[error("replay buffer holds {have} transitions, need {need}")]
    NotReady { have: usize, need: usize },
    #[error("pretraining reached only {rate:.3} subgoal reach rate (required {required:.3})")]
    TrainingFailed { rate: f64, required: f64 },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
}

pub fn observe(state: &AgentState, subgoal: Vec2) -> [f64; OBS_DIM] {
    let d = subgoal - state.position;
    [d.x, d.y, state.velocity.x, state.velocity.y]
}

/// Negative post-step distance to the subgoal, and whether it is within `rho`.
pub fn intrinsic_reward(_observation: &[f64], next_observation: &[f64], rho: f64) -> (f64, bool) {
    let dist = next_observation[0].hypot(next_observation[1]);
    (-dist, dist <= rho)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_observation: [f64; OBS_DIM],
    pub done: bool,
}

/// Bounded FIFO replay memory with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    capacity: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: VecDeque::with_capacity(capacity.min(1 << 16)), capacity, inserted: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Live and target actor/critic pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LowLevelPolicy {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_target: Mlp,
    pub critic_target: Mlp,
    pub noise_scale: f64,
    pub a_max: f64,
    /// Subgoal reach radius.
    pub rho: f64,
}

impl LowLevelPolicy {
    pub fn new(hidden: usize, a_max: f64, rho: f64, noise_scale: f64, seed: u64) -> Result<Self, NeuralError> {
        let actor = Mlp::new(&[OBS_DIM, hidden, hidden, ACTION_DIM], Activation::Relu, Activation::Tanh, seed)?;
        let critic = Mlp::new(
            &[OBS_DIM + ACTION_DIM, hidden, hidden, 1],
            Activation::Relu,
            Activation::Identity,
            seed.wrapping_add(1),
        )?;
        Ok(Self { actor_target: actor.clone(), critic_target: critic.clone(), actor, critic, noise_scale, a_max, rho })
    }

    /// Deterministic action.
    pub fn act(&self, observation: &[f64]) -> Vec2 {
        let out = self.actor.forward(observation).expect("observation has fixed length");
        Vec2::new(out[0] * self.a_max, out[1] * self.a_max)
    }

    fn q_input(obs: &[f64], action: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(OBS_DIM + ACTION_DIM);
        v.extend_from_slice(obs);
        v.extend_from_slice(action);
        v
    }

    pub fn q_value(&self, obs: &[f64], action: Vec2) -> f64 {
        self.critic.forward(&Self::q_input(obs, &[action.x, action.y])).expect("fixed length")[0]
    }
}

/// Optimizer state for one DDPG learner.
#[derive(Debug, Clone)]
pub struct DdpgOptimizers {
    pub actor: Adam,
    pub critic: Adam,
}

impl DdpgOptimizers {
    pub fn new(policy: &LowLevelPolicy, actor: AdamConfig, critic: AdamConfig) -> Self {
        Self { actor: Adam::new(&policy.actor, actor), critic: Adam::new(&policy.critic, critic) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub mean_q: f64,
}

/// One DDPG step on a uniformly sampled minibatch: critic regression to
/// `r + γ(1−done)·Q'(s', μ'(s'))`, actor ascent on `Q(s, μ(s))`, then soft
/// target updates with rate `tau`.
pub fn ddpg_update(
    policy: &mut LowLevelPolicy,
    opt: &mut DdpgOptimizers,
    buffer: &ReplayBuffer,
    batch_size: usize,
    gamma: f64,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<UpdateStats, LowLevelError> {
    if buffer.len() < batch_size || batch_size == 0 {
        return Err(LowLevelError::NotReady { have: buffer.len(), need: batch_size.max(1) });
    }
    let batch = buffer.sample(batch_size, rng);
    ddpg_update_on(policy, opt, &batch, gamma, tau)
}

/// [`ddpg_update`] on an explicit batch.
pub fn ddpg_update_on(
    policy: &mut LowLevelPolicy,
    opt: &mut DdpgOptimizers,
    batch: &[&Transition],
    gamma: f64,
    tau: f64,
) -> Result<UpdateStats, LowLevelError> {
    let inputs: Vec<Vec<f64>> = batch.iter().map(|t| LowLevelPolicy::q_input(&t.observation, &t.action)).collect();
    let targets = critic_targets(policy, batch, gamma)?;
    let (critic_loss, grads) = policy.critic.mse_gradients(&inputs, &targets)?;
    opt.critic.step(&mut policy.critic, &grads)?;

    let n = batch.len() as f64;
    let mut actor_grads = Gradients::zeros_like(&policy.actor);
    let mut scratch = Gradients::zeros_like(&policy.critic);
    let mut mean_q = 0.0;
    for t in batch {
        let a_trace = policy.actor.forward_trace(&t.observation)?;
        let action: Vec<f64> = a_trace.output().iter().map(|v| v * policy.a_max).collect();
        let q_trace = policy.critic.forward_trace(&LowLevelPolicy::q_input(&t.observation, &action))?;
        mean_q += q_trace.output()[0] / n;
        // Minimise -Q: gradient of -(1/N)·Q w.r.t. the critic input.
        let d_in = policy.critic.backward(&q_trace, &[-1.0 / n], &mut scratch, true).expect("input gradient requested");
        let d_act: Vec<f64> = d_in[OBS_DIM..].iter().map(|g| g * policy.a_max).collect();
        policy.actor.backward(&a_trace, &d_act, &mut actor_grads, false);
    }
    opt.actor.step(&mut policy.actor, &actor_grads)?;

    policy.actor_target.soft_update_from(&policy.actor, tau);
    policy.critic_target.soft_update_from(&policy.critic, tau);
    Ok(UpdateStats { critic_loss, mean_q })
}

/// Bootstrapped critic targets from the target networks.
pub fn critic_targets(
    policy: &LowLevelPolicy,
    batch: &[&Transition],
    gamma: f64,
) -> Result<Vec<Vec<f64>>, NeuralError> {
    batch
        .iter()
        .map(|t| {
            if t.done || gamma == 0.0 {
                return Ok(vec![t.reward]);
            }
            let a = policy.actor_target.forward(&t.next_observation)?;
            let a: Vec<f64> = a.iter().map(|v| v * policy.a_max).collect();
            let q = policy.critic_target.forward(&LowLevelPolicy::q_input(&t.next_observation, &a))?[0];
            Ok(vec![t.reward + gamma * q])
        })
        .collect()
}

/// Something the point mass can move in.
pub trait World {
    fn step(&self, state: &AgentState, action: Vec2, params: &DynamicsParams) -> Result<AgentState, MazeError>;
}

impl World for Maze {
    fn step(&self, state: &AgentState, action: Vec2, params: &DynamicsParams) -> Result<AgentState, MazeError> {
        step_dynamics(self, state, action, params)
    }
}

/// Obstacle-free plane used for pretraining.
#[derive(Debug, Clone, Copy, Default)]
pub struct OpenField;

impl World for OpenField {
    fn step(&self, state: &AgentState, action: Vec2, params: &DynamicsParams) -> Result<AgentState, MazeError> {
        integrate_free(state, action, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Execution {
    pub final_state: AgentState,
    pub steps_used: usize,
    pub reached: bool,
}

/// Runs the noise-free actor toward `subgoal` for at most `min(horizon, budget)`
/// steps, stopping as soon as the subgoal is within `rho`.
pub fn execute_low_level(
    world: &impl World,
    state: &AgentState,
    subgoal: Vec2,
    policy: &LowLevelPolicy,
    horizon: usize,
    budget_remaining: usize,
    params: &DynamicsParams,
) -> Result<Execution, MazeError> {
    let limit = horizon.min(budget_remaining);
    let mut state = *state;
    let mut steps = 0;
    loop {
        if state.position.distance(subgoal) <= policy.rho {
            return Ok(Execution { final_state: state, steps_used: steps, reached: true });
        }
        if steps == limit {
            return Ok(Execution { final_state: state, steps_used: steps, reached: false });
        }
        let action = policy.act(&observe(&state, subgoal));
        state = world.step(&state, action, params)?;
        steps += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowLevelConfig {
    pub episodes: usize,
    pub horizon: usize,
    pub exploration_sigma: f64,
    pub subgoal_radius: f64,
    pub rho: f64,
    pub hidden: usize,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Uniform-random action steps before learning starts.
    pub warmup_steps: usize,
    pub actor_optimizer: AdamConfig,
    pub critic_optimizer: AdamConfig,
    /// Probability that a training task starts with a random velocity.
    pub moving_start_prob: f64,
    pub eval_every: usize,
    pub eval_tasks: usize,
    /// Validation reach rate at which training stops early.
    pub early_stop_rate: f64,
    pub heldout_tasks: usize,
    pub required_reach_rate: f64,
    pub dynamics: DynamicsParams,
}

impl Default for LowLevelConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            horizon: 25,
            exploration_sigma: 0.2,
            subgoal_radius: 2.0,
            rho: 0.5,
            hidden: 64,
            gamma: 0.95,
            tau: 0.01,
            batch_size: 64,
            replay_capacity: 100_000,
            warmup_steps: 1000,
            actor_optimizer: AdamConfig { learning_rate: 5e-4, ..AdamConfig::default() },
            critic_optimizer: AdamConfig::default(),
            moving_start_prob: 0.5,
            eval_every: 50,
            eval_tasks: 100,
            early_stop_rate: 0.98,
            heldout_tasks: 200,
            required_reach_rate: 0.9,
            dynamics: DynamicsParams::default(),
        }
    }
}

/// An open-field subgoal-reaching task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachTask {
    pub start: AgentState,
    pub offset: Vec2,
}

pub fn sample_disc(radius: f64, rng: &mut impl Rng) -> Vec2 {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    Vec2::new(r * theta.cos(), r * theta.sin())
}

/// Held-out tasks: offsets uniform in the subgoal disc, agent at rest.
pub fn heldout_tasks(n: usize, radius: f64, seed: u64) -> Vec<ReachTask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| ReachTask { start: AgentState::default(), offset: sample_disc(radius, &mut rng) }).collect()
}

/// Fraction of tasks on which the subgoal is reached within `horizon` steps.
pub fn reach_rate(policy: &LowLevelPolicy, tasks: &[ReachTask], horizon: usize, params: &DynamicsParams) -> f64 {
    let reached = tasks
        .iter()
        .filter(|t| {
            let goal = t.start.position + t.offset;
            execute_low_level(&OpenField, &t.start, goal, policy, horizon, horizon, params)
                .map(|e| e.reached)
                .unwrap_or(false)
        })
        .count();
    reached as f64 / tasks.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub policy: LowLevelPolicy,
    /// `(episode, validation reach rate)` at each evaluation.
    pub curve: Vec<(usize, f64)>,
    pub untrained_reach_rate: f64,
    pub heldout_reach_rate: f64,
    pub episodes_run: usize,
}

const HELDOUT_STREAM: u64 = 0x005e_ed0f_4e1d;
const VALIDATION_STREAM: u64 = 0x7a1_1da7e;

/// Pretrains the controller on random open-field reaching tasks. The best
/// validation snapshot is kept; it must reach `required_reach_rate` on the
/// held-out tasks.
pub fn pretrain_low_level(config: &LowLevelConfig, seed: u64) -> Result<PretrainReport, LowLevelError> {
    let params = config.dynamics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = LowLevelPolicy::new(config.hidden, params.a_max, config.rho, config.exploration_sigma, seed)?;
    let mut opt = DdpgOptimizers::new(&policy, config.actor_optimizer, config.critic_optimizer);
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let noise = Normal::new(0.0, config.exploration_sigma * params.a_max).expect("finite sigma");

    let heldout = heldout_tasks(config.heldout_tasks, config.subgoal_radius, seed ^ HELDOUT_STREAM);
    let validation = heldout_tasks(config.eval_tasks, config.subgoal_radius, seed ^ VALIDATION_STREAM);
    let untrained_reach_rate = reach_rate(&policy, &heldout, config.horizon, &params);

    let mut best = (reach_rate(&policy, &validation, config.horizon, &params), policy.clone());
    let mut curve = vec![(0, best.0)];
    let mut total_steps = 0usize;
    let mut episodes_run = 0;
    for episode in 1..=config.episodes {
        episodes_run = episode;
        let velocity = if rng.random::<f64>() < config.moving_start_prob {
            Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * (0.5 * params.v_max)
        } else {
            Vec2::ZERO
        };
        let mut state = AgentState { position: Vec2::ZERO, velocity };
        let subgoal = sample_disc(config.subgoal_radius, &mut rng);
        for _ in 0..config.horizon {
            let obs = observe(&state, subgoal);
            if subgoal.distance(state.position) <= config.rho {
                break;
            }
            let action = if total_steps < config.warmup_steps {
                Vec2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)) * params.a_max
            } else {
                let a = policy.act(&obs);
                Vec2::new(a.x + noise.sample(&mut rng), a.y + noise.sample(&mut rng)).clamp_components(params.a_max)
            };
            let next = integrate_free(&state, action, &params)?;
            let next_obs = observe(&next, subgoal);
            let (reward, done) = intrinsic_reward(&obs, &next_obs, config.rho);
            buffer.push(Transition {
                observation: obs,
                action: [action.x, action.y],
                reward,
                next_observation: next_obs,
                done,
            });
            total_steps += 1;
            if total_steps >= config.warmup_steps && buffer.len() >= config.batch_size {
                ddpg_update(&mut policy, &mut opt, &buffer, config.batch_size, config.gamma, config.tau, &mut rng)?;
            }
            state = next;
            if done {
                break;
            }
        }
        if episode % config.eval_every.max(1) == 0 {
            let rate = reach_rate(&policy, &validation, config.horizon, &params);
            log::debug!("pretrain episode {episode}: validation reach rate {rate:.3}");
            curve.push((episode, rate));
            if rate > best.0 {
                best = (rate, policy.clone());
            }
            if rate >= config.early_stop_rate {
                break;
            }
        }
    }
    let policy = best.1;
    let heldout_reach_rate = reach_rate(&policy, &heldout, config.horizon, &params);
    if heldout_reach_rate < config.required_reach_rate {
        return Err(LowLevelError::TrainingFailed { rate: heldout_reach_rate, required: config.required_reach_rate });
    }
    Ok(PretrainReport { policy, curve, untrained_reach_rate, heldout_reach_rate, episodes_run })
}

/// Checkpoint manifest written next to the four network files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub reach_rate: f64,
    pub a_max: f64,
    pub rho: f64,
    pub noise_scale: f64,
    pub actor: String,
    pub critic: String,
    pub actor_target: String,
    pub critic_target: String,
}

impl LowLevelPolicy {
    /// Writes one JSON file per network plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path, reach_rate: f64) -> Result<(), LowLevelError> {
        let err =
            |e: std::io::Error| LowLevelError::Checkpoint { path: dir.display().to_string(), message: e.to_string() };
        fs::create_dir_all(dir).map_err(err)?;
        let manifest = CheckpointManifest {
            reach_rate,
            a_max: self.a_max,
            rho: self.rho,
            noise_scale: self.noise_scale,
            actor: "actor.json".into(),
            critic: "critic.json".into(),
            actor_target: "actor_target.json".into(),
            critic_target: "critic_target.json".into(),
        };
        for (name, net) in [
            (&manifest.actor, &self.actor),
            (&manifest.critic, &self.critic),
            (&manifest.actor_target, &self.actor_target),
            (&manifest.critic_target, &self.critic_target),
        ] {
            fs::write(dir.join(name), net.to_json()).map_err(err)?;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), text).map_err(err)?;
        Ok(())
    }

    /// Loads a checkpoint directory, returning the policy and its recorded reach rate.
    pub fn load(dir: &Path) -> Result<(LowLevelPolicy, f64), LowLevelError> {
        let fail =
            |path: &Path, message: String| LowLevelError::Checkpoint { path: path.display().to_string(), message };
        let read = |name: &str| {
            let path = dir.join(name);
            fs::read_to_string(&path).map_err(|e| fail(&path, e.to_string()))
        };
        let manifest = parse_manifest(&read("manifest.json")?).map_err(|m| fail(&dir.join("manifest.json"), m))?;
        let net = |name: &str| -> Result<Mlp, LowLevelError> {
            Mlp::from_json(&read(name)?).map_err(|e| fail(&dir.join(name), e.to_string()))
        };
        let policy = LowLevelPolicy {
            actor: net(&manifest.actor)?,
            critic: net(&manifest.critic)?,
            actor_target: net(&manifest.actor_target)?,
            critic_target: net(&manifest.critic_target)?,
            noise_scale: manifest.noise_scale,
            a_max: manifest.a_max,
            rho: manifest.rho,
        };
        let shapes = [
            (&policy.actor, OBS_DIM, ACTION_DIM),
            (&policy.critic, OBS_DIM + ACTION_DIM, 1),
            (&policy.actor_target, OBS_DIM, ACTION_DIM),
            (&policy.critic_target, OBS_DIM + ACTION_DIM, 1),
        ];
        for (net, din, dout) in shapes {
            if net.input_dim() != din || net.output_dim() != dout {
                return Err(fail(dir, format!("network shape {:?} does not fit the controller", net.layer_sizes())));
            }
        }
        if policy.actor.layer_sizes() != policy.actor_target.layer_sizes()
            || policy.critic.layer_sizes() != policy.critic_target.layer_sizes()
        {
            return Err(fail(dir, "target networks do not mirror live networks".into()));
        }
        Ok((policy, manifest.reach_rate))
    }
}

/// Parses and sanity-checks a checkpoint manifest.
pub fn parse_manifest(text: &str) -> Result<CheckpointManifest, String> {
    let m: CheckpointManifest = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let finite_positive = |v: f64| v.is_finite() && v > 0.0;
    if !finite_positive(m.a_max) || !finite_positive(m.rho) || !m.noise_scale.is_finite() || !m.reach_rate.is_finite() {
        return Err("manifest values must be finite (a_max, rho positive)".into());
    }
    for name in [&m.actor, &m.critic, &m.actor_target, &m.critic_target] {
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(format!("network file name {name:?} must be a plain file name"));
        }
    }
    Ok(m)
}
