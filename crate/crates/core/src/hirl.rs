//! The high-level DAgger loop.
//!
//! A [`HirlRun`] is a step-wise state machine so that the same trajectory can
//! be driven headlessly by the oracle ([`train`]) or one decision at a time by
//! a live demonstrator. Each high-level decision: the demonstrator labels the
//! current state, the label is blended with the learner's subgoal by `β`, the
//! labelled pair is aggregated, and the low level runs for up to `H` steps
//! toward the blended subgoal. Policy updates, `β` decay and pruning happen
//! between episodes in [`HirlRun::advance`], except for the reward-based
//! strategy's per-decision gradient steps.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::active::{self, PolicyBag};
use crate::config::{ActiveConfig, Algorithm, BlendConvention, EnvConfig, HirlConfig};
use crate::geom::Vec2;
use crate::low_level::{execute_low_level, LowLevelPolicy};
use crate::maze::{encode_context, is_success, reset_episode, AgentState, Goal, Maze, MazeError};
use crate::neural::{Activation, Adam, AdamConfig, Mlp, NeuralError};
use crate::oracle::{Expert, ExpertError};

#[derive(Debug, Error)]
pub enum HirlError {
    #[error("mixing factor {0} outside [0, 1]")]
    InvalidMixing(f64),
    #[error("operation needs phase {expected:?}, run is in {actual:?}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Maze(#[from] MazeError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

/// How the state is presented to the high-level network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// Side of the global context grid; 0 leaves it out.
    pub context_size: usize,
    pub v_max: f64,
    /// Radius in cells of the agent-centred occupancy patch; 0 disables it.
    #[serde(default)]
    pub local_view: usize,
}

impl FeatureSpec {
    pub fn len(&self) -> usize {
        let local = if self.local_view > 0 { (2 * self.local_view + 1).pow(2) + 6 } else { 0 };
        3 * self.context_size * self.context_size + 6 + local
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Context grid channels (when `context_size > 0`), position and goal
/// normalized to `[0, 1]`, velocity normalized to `[-1, 1]`, then the local
/// patch, the goal offset and the agent's offset from its cell center.
pub fn state_features(maze: &Maze, state: &AgentState, goal: &Goal, spec: &FeatureSpec) -> Vec<f64> {
    let mut f = Vec::with_capacity(spec.len());
    if spec.context_size > 0 {
        encode_context(maze, state, goal, spec.context_size).write_features(&mut f);
    }
    let (w, h) = (maze.world_width(), maze.world_height());
    f.extend([
        state.position.x / w,
        state.position.y / h,
        state.velocity.x / spec.v_max,
        state.velocity.y / spec.v_max,
        goal.position.x / w,
        goal.position.y / h,
    ]);
    if spec.local_view > 0 {
        write_local_view(maze, state.position, spec.local_view, &mut f);
        let d = goal.position - state.position;
        let c = maze.cell_size();
        let in_cell = maze
            .cell_of(state.position)
            .map_or(Vec2::ZERO, |cell| (state.position - maze.cell_center(cell)) * (2.0 / c));
        let dir = if d.norm() > 0.0 { d * (1.0 / d.norm()) } else { Vec2::ZERO };
        f.extend([d.x / w, d.y / h, dir.x, dir.y, in_cell.x, in_cell.y]);
    }
    f
}

/// Agent-centred wall patch over maze cells; outside the maze counts as wall.
fn write_local_view(maze: &Maze, p: Vec2, r: usize, out: &mut Vec<f64>) {
    let here = maze.cell_of(p);
    let (row, col) = here.map_or((-1, -1), |c| (c.row as isize, c.col as isize));
    let r = r as isize;
    for dr in -r..=r {
        for dc in -r..=r {
            let (rr, cc) = (row + dr, col + dc);
            let inside = rr >= 0 && cc >= 0 && (rr as usize) < maze.height() && (cc as usize) < maze.width();
            let wall = !inside || maze.is_wall(crate::maze::Cell { row: rr as usize, col: cc as usize });
            out.push(if wall { 1.0 } else { 0.0 });
        }
    }
}

/// One labelled state.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub state_features: Vec<f64>,
    /// Expert subgoal relative to the agent, `‖·‖ ≤ R`.
    pub expert_subgoal_offset: Vec2,
    pub episode_id: usize,
    /// Index of the high-level decision within its episode.
    pub step_index: usize,
}

/// The DAgger dataset: an ordered multiset of demonstrations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregatedDataset {
    demos: Vec<Demonstration>,
}

impl AggregatedDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Demonstration> {
        self.demos.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Demonstration> {
        self.demos.get(i)
    }

    pub fn push(&mut self, demo: Demonstration) {
        self.demos.push(demo);
    }

    /// Dataset positions of one episode's demonstrations, in insertion order.
    pub fn episode_positions(&self, episode_id: usize) -> Vec<usize> {
        self.demos.iter().enumerate().filter(|(_, d)| d.episode_id == episode_id).map(|(i, _)| i).collect()
    }

    /// Removes the demonstrations at the given positions.
    pub(crate) fn remove_positions(&mut self, positions: &[usize]) {
        if positions.is_empty() {
            return;
        }
        let mut drop = vec![false; self.demos.len()];
        positions.iter().for_each(|&p| drop[p] = true);
        let mut i = 0;
        self.demos.retain(|_| {
            let keep = !drop[i];
            i += 1;
            keep
        });
    }
}

/// Appends one demonstration.
pub fn aggregate_demonstration(
    dataset: &mut AggregatedDataset,
    state_features: Vec<f64>,
    expert_offset: Vec2,
    episode_id: usize,
    step_index: usize,
) {
    dataset.push(Demonstration { state_features, expert_subgoal_offset: expert_offset, episode_id, step_index });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingSchedule {
    pub initial_beta: f64,
    pub decay: f64,
    /// Decays applied so far.
    pub rounds: u32,
    pub beta: f64,
    pub update_period: usize,
    pub updates_per_round: usize,
}

impl MixingSchedule {
    pub fn new(initial_beta: f64, decay: f64, update_period: usize, updates_per_round: usize) -> Self {
        Self { initial_beta, decay, rounds: 0, beta: initial_beta, update_period, updates_per_round }
    }

    /// One more decay: `β = β₀ / d^k`.
    pub fn decayed(self) -> Self {
        let rounds = self.rounds + 1;
        Self { rounds, beta: self.initial_beta / self.decay.powi(rounds as i32), ..self }
    }
}

/// `β·expert + (1−β)·learner`.
pub fn mix_subgoal(beta: f64, expert_offset: Vec2, learner_offset: Vec2) -> Result<Vec2, HirlError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(HirlError::InvalidMixing(beta));
    }
    if beta == 1.0 {
        return Ok(expert_offset);
    }
    if beta == 0.0 {
        return Ok(learner_offset);
    }
    Ok(expert_offset * beta + learner_offset * (1.0 - beta))
}

pub fn blend(
    convention: BlendConvention,
    beta: f64,
    expert_offset: Vec2,
    learner_offset: Vec2,
) -> Result<Vec2, HirlError> {
    match convention {
        BlendConvention::ExpertWeighted => mix_subgoal(beta, expert_offset, learner_offset),
        BlendConvention::Literal => mix_subgoal(beta, learner_offset, expert_offset),
    }
}

/// Everything needed to build a fresh high-level network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub features: FeatureSpec,
    pub hidden_layers: Vec<usize>,
    pub radius: f64,
    pub optimizer: AdamConfig,
    pub minibatch: usize,
}

impl PolicySpec {
    pub fn from_config(env: &EnvConfig, hirl: &HirlConfig) -> Self {
        Self {
            features: FeatureSpec {
                context_size: hirl.context_size,
                v_max: env.dynamics.v_max,
                local_view: hirl.local_view,
            },
            hidden_layers: hirl.hidden_layers.clone(),
            radius: hirl.subgoal_radius,
            optimizer: hirl.optimizer,
            minibatch: hirl.minibatch,
        }
    }

    pub fn build(&self, seed: u64) -> Result<HighLevelPolicy, NeuralError> {
        let mut sizes = vec![self.features.len()];
        sizes.extend(&self.hidden_layers);
        sizes.push(2);
        let net = Mlp::new(&sizes, Activation::Relu, Activation::Tanh, seed)?;
        Ok(HighLevelPolicy {
            optimizer: Adam::new(&net, self.optimizer),
            net,
            radius: self.radius,
            features: self.features,
        })
    }
}

/// Subgoal regressor: `R · tanh(net(features))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HighLevelPolicy {
    pub net: Mlp,
    pub radius: f64,
    pub features: FeatureSpec,
    pub optimizer: Adam,
}

impl HighLevelPolicy {
    pub fn predict(&self, features: &[f64]) -> Vec2 {
        let out = self.net.forward(features).expect("feature length matches the network input");
        Vec2::new(out[0] * self.radius, out[1] * self.radius)
    }

    pub fn predict_state(&self, maze: &Maze, state: &AgentState, goal: &Goal) -> Vec2 {
        self.predict(&state_features(maze, state, goal, &self.features))
    }

    /// Mean squared error over the dataset in normalized subgoal coordinates.
    pub fn dataset_loss(&self, dataset: &AggregatedDataset) -> Result<f64, HirlError> {
        if dataset.is_empty() {
            return Err(HirlError::EmptyDataset);
        }
        let (xs, ys) = training_pairs(dataset.iter(), self.radius);
        Ok(self.net.mse(&xs, &ys)?)
    }
}

fn training_pairs<'a>(demos: impl Iterator<Item = &'a Demonstration>, radius: f64) -> (Vec<&'a [f64]>, Vec<[f64; 2]>) {
    demos
        .map(|d| {
            let o = d.expert_subgoal_offset;
            (d.state_features.as_slice(), [o.x / radius, o.y / radius])
        })
        .unzip()
}

/// `steps` Adam steps on minibatches drawn uniformly with replacement from
/// the dataset. Returns the last minibatch loss, or `None` when nothing ran.
pub fn update_high_level(
    policy: &mut HighLevelPolicy,
    dataset: &AggregatedDataset,
    minibatch: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<Option<f64>, HirlError> {
    if dataset.is_empty() {
        if steps > 0 {
            log::debug!("high-level update skipped: empty dataset");
        }
        return Ok(None);
    }
    let mut last = None;
    for _ in 0..steps {
        let picks = (0..minibatch.max(1)).map(|_| &dataset.demos[rng.random_range(0..dataset.len())]);
        let (xs, ys) = training_pairs(picks, policy.radius);
        let (loss, grads) = policy.net.mse_gradients(&xs, &ys)?;
        policy.optimizer.step(&mut policy.net, &grads)?;
        last = Some(loss);
    }
    Ok(last)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub success: bool,
    pub env_steps: usize,
    /// Subgoals issued.
    pub attempts: usize,
    pub expert_queries: usize,
    /// Ended by a demonstrator failure or timeout rather than by the task.
    #[serde(default)]
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    AwaitingDemo,
    EpisodeDone,
    Finished,
}

/// The state shown to the demonstrator.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub episode: usize,
    pub step: usize,
    pub maze: &'a Maze,
    pub state: AgentState,
    pub goal: Goal,
    pub beta: f64,
}

/// Outcome of one answered query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub expert_offset: Vec2,
    pub learner_offset: Vec2,
    pub executed_offset: Vec2,
    pub steps_used: usize,
    pub ended: Option<EpisodeResult>,
}

/// Counters reported after between-episode bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    /// Completed episodes.
    pub episode: usize,
    pub trailing_success_rate: f64,
    pub dataset_size: usize,
    pub beta: f64,
}

/// One JSON line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogEntry {
    pub episode: usize,
    pub success: bool,
    pub env_steps: usize,
    pub attempts: usize,
    pub expert_queries: usize,
    pub beta: f64,
    pub dataset_size: usize,
}

#[derive(Debug, Clone)]
struct EpisodeState {
    episode_id: usize,
    maze: Maze,
    goal: Goal,
    state: AgentState,
    env_steps: usize,
    attempts: usize,
    expert_queries: usize,
    result: Option<EpisodeResult>,
}

/// Decisions allowed per episode: one slot of `H` steps each, so decisions
/// that barely move cannot stall an episode.
pub fn max_attempts(env: &EnvConfig, hirl: &HirlConfig) -> usize {
    env.max_env_steps.div_ceil(hirl.horizon)
}

/// Window of the in-training success curve.
pub const TRAILING_WINDOW: usize = 20;

/// Full training state of one run.
#[derive(Debug, Clone)]
pub struct HirlRun {
    algorithm: Algorithm,
    env: EnvConfig,
    hirl: HirlConfig,
    active: ActiveConfig,
    spec: PolicySpec,
    low: Arc<LowLevelPolicy>,
    policy: HighLevelPolicy,
    bag: Option<PolicyBag>,
    dataset: AggregatedDataset,
    schedule: MixingSchedule,
    update_rounds: usize,
    task_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    active_rng: ChaCha8Rng,
    prune_rng: ChaCha8Rng,
    seed: u64,
    current: Option<EpisodeState>,
    phase: Phase,
    results: Vec<EpisodeResult>,
    log: Vec<TrainingLogEntry>,
    pruned_total: usize,
}

fn stream(seed: u64, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rng
}

fn validate(env: &EnvConfig, hirl: &HirlConfig, active: &ActiveConfig, algorithm: Algorithm) -> Result<(), HirlError> {
    let bad = |m: &str| Err(HirlError::InvalidConfig(m.to_string()));
    if env.width < 3 || env.height < 3 {
        return bad("maze dimensions must be at least 3");
    }
    if !(0.0..0.5).contains(&env.wall_density) {
        return bad("wall_density must lie in [0, 0.5)");
    }
    if !(env.goal_epsilon > 0.0 && env.goal_epsilon < 1.0) {
        return bad("goal_epsilon must lie in (0, cell_size)");
    }
    let d = env.dynamics;
    if !(d.dt > 0.0 && d.v_max > 0.0 && d.a_max > 0.0 && d.dt.is_finite() && d.v_max.is_finite() && d.a_max.is_finite())
    {
        return bad("dynamics parameters must be positive and finite");
    }
    if hirl.horizon == 0 || hirl.update_period == 0 || hirl.minibatch == 0 {
        return bad("horizon, update_period and minibatch must be at least 1");
    }
    if !(hirl.subgoal_radius > 0.0 && hirl.subgoal_radius.is_finite()) {
        return bad("subgoal_radius must be positive");
    }
    if !(hirl.beta_decay > 1.0 && hirl.beta_decay.is_finite()) {
        return bad("beta_decay must exceed 1");
    }
    if !(0.0..=1.0).contains(&hirl.initial_beta) {
        return bad("initial_beta must lie in [0, 1]");
    }
    if hirl.hidden_layers.contains(&0) {
        return bad("hidden layer sizes must be at least 1");
    }
    match algorithm {
        Algorithm::Noise if active.candidates == 0 || active.noises < 2 => {
            bad("noise-based selection needs candidates >= 1 and noises >= 2")
        }
        Algorithm::Noise if !(active.noise_sigma >= 0.0 && active.noise_sigma.is_finite()) => {
            bad("noise_sigma must be finite and non-negative")
        }
        Algorithm::Multipolicy if active.candidates == 0 || active.bag_size < 2 => {
            bad("multi-policy selection needs candidates >= 1 and bag_size >= 2")
        }
        _ => Ok(()),
    }
}

impl HirlRun {
    pub fn new(
        algorithm: Algorithm,
        env: EnvConfig,
        hirl: HirlConfig,
        active: ActiveConfig,
        low: Arc<LowLevelPolicy>,
        seed: u64,
    ) -> Result<Self, HirlError> {
        validate(&env, &hirl, &active, algorithm)?;
        let spec = PolicySpec::from_config(&env, &hirl);
        let policy = spec.build(seed)?;
        let schedule =
            MixingSchedule::new(hirl.initial_beta, hirl.beta_decay, hirl.update_period, hirl.updates_per_round);
        let mut run = Self {
            algorithm,
            env,
            spec,
            low,
            policy,
            bag: None,
            dataset: AggregatedDataset::new(),
            schedule,
            update_rounds: 0,
            task_rng: stream(seed, 1),
            train_rng: stream(seed, 2),
            active_rng: stream(seed, 3),
            prune_rng: stream(seed, 4),
            seed,
            current: None,
            phase: Phase::Finished,
            results: Vec::new(),
            log: Vec::new(),
            pruned_total: 0,
            hirl,
            active,
        };
        if run.hirl.episodes > 0 {
            run.begin_episode()?;
        }
        Ok(run)
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn policy(&self) -> &HighLevelPolicy {
        &self.policy
    }

    pub fn into_policy(self) -> HighLevelPolicy {
        self.policy
    }

    pub fn bag(&self) -> Option<&PolicyBag> {
        self.bag.as_ref()
    }

    pub fn dataset(&self) -> &AggregatedDataset {
        &self.dataset
    }

    pub fn schedule(&self) -> MixingSchedule {
        self.schedule
    }

    pub fn update_rounds(&self) -> usize {
        self.update_rounds
    }

    pub fn results(&self) -> &[EpisodeResult] {
        &self.results
    }

    pub fn training_log(&self) -> &[TrainingLogEntry] {
        &self.log
    }

    /// Demonstrations removed by reward-based pruning so far.
    pub fn pruned_total(&self) -> usize {
        self.pruned_total
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env
    }

    pub fn hirl_config(&self) -> &HirlConfig {
        &self.hirl
    }

    pub fn policy_spec(&self) -> &PolicySpec {
        &self.spec
    }

    fn expect_phase(&self, expected: Phase) -> Result<(), HirlError> {
        if self.phase != expected {
            return Err(HirlError::WrongPhase { expected, actual: self.phase });
        }
        Ok(())
    }

    fn begin_episode(&mut self) -> Result<(), HirlError> {
        let episode_id = self.results.len();
        let maze_seed: u64 = self.task_rng.random();
        let reset_seed: u64 = self.task_rng.random();
        let maze = Maze::generate(maze_seed, self.env.width, self.env.height, self.env.wall_density)?;
        let mut start = reset_episode(&maze, reset_seed, self.env.goal_epsilon);
        let selected = match self.algorithm {
            Algorithm::Noise => Some(active::select_start_noise_based(
                &self.policy,
                &maze,
                &start.goal,
                &self.active,
                &mut self.active_rng,
            )),
            Algorithm::Multipolicy => self.bag.as_ref().map(|bag| {
                active::select_start_multi_policy(
                    &bag.members,
                    &maze,
                    &start.goal,
                    self.active.candidates,
                    &mut self.active_rng,
                )
            }),
            _ => None,
        };
        if let Some(sel) = selected {
            start.state = AgentState::at_rest(sel.chosen_position());
        }
        let mut ep = EpisodeState {
            episode_id,
            maze,
            goal: start.goal,
            state: start.state,
            env_steps: 0,
            attempts: 0,
            expert_queries: 0,
            result: None,
        };
        self.phase = Phase::AwaitingDemo;
        if is_success(&ep.state, &ep.goal) {
            ep.result = Some(EpisodeResult {
                episode_id,
                success: true,
                env_steps: 0,
                attempts: 0,
                expert_queries: 0,
                aborted: false,
            });
            self.phase = Phase::EpisodeDone;
        }
        self.current = Some(ep);
        Ok(())
    }

    /// The pending query, when awaiting a demonstration.
    pub fn query(&self) -> Option<Query<'_>> {
        if self.phase != Phase::AwaitingDemo {
            return None;
        }
        let ep = self.current.as_ref()?;
        Some(Query {
            episode: ep.episode_id,
            step: ep.attempts,
            maze: &ep.maze,
            state: ep.state,
            goal: ep.goal,
            beta: self.schedule.beta,
        })
    }

    /// Answers the pending query with a world-space subgoal and advances one
    /// high-level decision. The demonstration is clamped to the subgoal radius.
    pub fn submit(&mut self, subgoal: Vec2) -> Result<Decision, HirlError> {
        self.expect_phase(Phase::AwaitingDemo)?;
        if !subgoal.is_finite() {
            return Err(HirlError::Maze(MazeError::InvalidAction(subgoal.x, subgoal.y)));
        }
        let radius = self.hirl.subgoal_radius;
        let ep = self.current.as_mut().expect("awaiting a demo implies an episode");
        let features = state_features(&ep.maze, &ep.state, &ep.goal, &self.spec.features);
        let expert_offset = (subgoal - ep.state.position).clamp_norm(radius);
        let learner_offset = self.policy.predict(&features);
        let executed_offset = blend(self.hirl.blend, self.schedule.beta, expert_offset, learner_offset)?;
        aggregate_demonstration(&mut self.dataset, features, expert_offset, ep.episode_id, ep.attempts);
        ep.expert_queries += 1;
        ep.attempts += 1;

        let budget = self.env.max_env_steps - ep.env_steps;
        let exec = execute_low_level(
            &ep.maze,
            &ep.state,
            ep.state.position + executed_offset,
            &self.low,
            self.hirl.horizon,
            budget,
            &self.env.dynamics,
        )?;
        ep.state = exec.final_state;
        ep.env_steps += exec.steps_used;

        if self.algorithm == Algorithm::Reward {
            update_high_level(
                &mut self.policy,
                &self.dataset,
                self.hirl.minibatch,
                self.hirl.steps_per_decision,
                &mut self.train_rng,
            )?;
        }

        let success = is_success(&ep.state, &ep.goal);
        let out_of_time = ep.env_steps >= self.env.max_env_steps || ep.attempts >= max_attempts(&self.env, &self.hirl);
        let ended = (success || out_of_time).then_some(EpisodeResult {
            episode_id: ep.episode_id,
            success,
            env_steps: ep.env_steps,
            attempts: ep.attempts,
            expert_queries: ep.expert_queries,
            aborted: false,
        });
        if let Some(r) = ended {
            ep.result = Some(r);
            self.phase = Phase::EpisodeDone;
        }
        Ok(Decision { expert_offset, learner_offset, executed_offset, steps_used: exec.steps_used, ended })
    }

    /// Ends the current episode as a failure (demonstrator error or timeout).
    pub fn abort_episode(&mut self) -> Result<EpisodeResult, HirlError> {
        self.expect_phase(Phase::AwaitingDemo)?;
        let ep = self.current.as_mut().expect("awaiting a demo implies an episode");
        let r = EpisodeResult {
            episode_id: ep.episode_id,
            success: false,
            env_steps: ep.env_steps,
            attempts: ep.attempts,
            expert_queries: ep.expert_queries,
            aborted: true,
        };
        ep.result = Some(r);
        self.phase = Phase::EpisodeDone;
        Ok(r)
    }

    /// Runs between-episode work that is due (pruning, update rounds, `β`
    /// decay) and starts the next episode. A no-op unless an episode just ended.
    pub fn advance(&mut self) -> Result<Progress, HirlError> {
        if self.phase == Phase::EpisodeDone {
            let ep = self.current.take().expect("episode done implies an episode");
            let result = ep.result.expect("episode done implies a result");
            self.results.push(result);
            self.end_of_episode(&result)?;
            self.log.push(TrainingLogEntry {
                episode: result.episode_id,
                success: result.success,
                env_steps: result.env_steps,
                attempts: result.attempts,
                expert_queries: result.expert_queries,
                beta: self.schedule.beta,
                dataset_size: self.dataset.len(),
            });
            if self.results.len() < self.hirl.episodes {
                self.begin_episode()?;
            } else {
                self.phase = Phase::Finished;
            }
        }
        Ok(self.progress())
    }

    fn end_of_episode(&mut self, result: &EpisodeResult) -> Result<(), HirlError> {
        match self.algorithm {
            Algorithm::Reward => {
                if !result.success {
                    self.pruned_total +=
                        active::prune_failed_episode(&mut self.dataset, result.episode_id, &mut self.prune_rng);
                }
                self.schedule = self.schedule.decayed();
            }
            Algorithm::Dagger | Algorithm::Noise | Algorithm::Multipolicy => {
                if self.results.len().is_multiple_of(self.schedule.update_period) {
                    update_high_level(
                        &mut self.policy,
                        &self.dataset,
                        self.hirl.minibatch,
                        self.schedule.updates_per_round,
                        &mut self.train_rng,
                    )?;
                    self.schedule = self.schedule.decayed();
                    self.update_rounds += 1;
                    if self.algorithm == Algorithm::Multipolicy && !self.dataset.is_empty() {
                        let base: u64 = self.train_rng.random();
                        let seeds: Vec<u64> = (0..self.active.bag_size as u64).map(|i| base.wrapping_add(i)).collect();
                        self.bag = Some(active::train_policy_bag(
                            &self.dataset,
                            &self.spec,
                            self.schedule.updates_per_round,
                            &seeds,
                        )?);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn progress(&self) -> Progress {
        Progress {
            episode: self.results.len(),
            trailing_success_rate: trailing_success(&self.results, TRAILING_WINDOW),
            dataset_size: self.dataset.len(),
            beta: self.schedule.beta,
        }
    }
}

/// Mean success over the last `window` results (0 when there are none).
pub fn trailing_success(results: &[EpisodeResult], window: usize) -> f64 {
    let tail = &results[results.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().filter(|r| r.success).count() as f64 / tail.len() as f64
}

/// A run that stopped on an error; completed episodes are preserved.
#[derive(Debug, Error)]
#[error("training stopped after {} episodes: {error}", partial.len())]
pub struct TrainError {
    #[source]
    pub error: HirlError,
    pub partial: Vec<EpisodeResult>,
}

/// Drives a run to completion with an in-process demonstrator. A
/// demonstrator failure aborts the episode and stops training.
pub fn train(run: &mut HirlRun, expert: &mut dyn Expert) -> Result<Vec<EpisodeResult>, TrainError> {
    let fail = |run: &HirlRun, error: HirlError| TrainError { error, partial: run.results().to_vec() };
    loop {
        match run.phase() {
            Phase::AwaitingDemo => {
                let q = run.query().expect("awaiting phase has a query");
                let answer = expert.demonstrate(q.maze, &q.state, &q.goal);
                match answer {
                    Ok(subgoal) => {
                        run.submit(subgoal).map_err(|e| fail(run, e))?;
                    }
                    Err(e) => {
                        log::warn!("episode {} aborted: {e}", q.episode);
                        run.abort_episode().map_err(|e| fail(run, e))?;
                        run.advance().map_err(|e| fail(run, e))?;
                        return Err(fail(run, HirlError::Expert(e)));
                    }
                }
            }
            Phase::EpisodeDone => {
                run.advance().map_err(|e| fail(run, e))?;
            }
            Phase::Finished => return Ok(run.results().to_vec()),
        }
    }
}

fn oracle_for(hirl: &HirlConfig, seed: u64) -> crate::oracle::OracleExpert {
    let oracle = crate::oracle::OracleExpert::new(hirl.expert_lookahead, hirl.subgoal_radius);
    match hirl.expert_label_noise {
        Some(sigma) => oracle.with_label_noise(sigma, seed ^ 0xa11ce),
        None => oracle,
    }
}

/// Oracle demonstrator as configured by `hirl`.
pub fn configured_oracle(hirl: &HirlConfig, seed: u64) -> crate::oracle::OracleExpert {
    oracle_for(hirl, seed)
}

/// Vanilla hierarchical DAgger.
pub fn train_dagger(
    env: &EnvConfig,
    expert: &mut dyn Expert,
    hirl: &HirlConfig,
    low: Arc<LowLevelPolicy>,
    seed: u64,
) -> Result<(HighLevelPolicy, Vec<EpisodeResult>), TrainError> {
    let mut run = HirlRun::new(Algorithm::Dagger, *env, hirl.clone(), ActiveConfig::default(), low, seed)
        .map_err(|error| TrainError { error, partial: Vec::new() })?;
    let results = train(&mut run, expert)?;
    Ok((run.into_policy(), results))
}

/// Reward-based active learning: per-decision updates, per-episode `β`
/// decay and pruning of failed episodes.
pub fn train_reward_based(
    env: &EnvConfig,
    expert: &mut dyn Expert,
    hirl: &HirlConfig,
    low: Arc<LowLevelPolicy>,
    seed: u64,
) -> Result<(HighLevelPolicy, Vec<EpisodeResult>), TrainError> {
    let mut run = HirlRun::new(Algorithm::Reward, *env, hirl.clone(), ActiveConfig::default(), low, seed)
        .map_err(|error| TrainError { error, partial: Vec::new() })?;
    let results = train(&mut run, expert)?;
    Ok((run.into_policy(), results))
}

/// Writes one JSON object per line.
pub fn write_training_log<W: std::io::Write>(entries: &[TrainingLogEntry], mut out: W) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_low() -> Arc<LowLevelPolicy> {
        Arc::new(LowLevelPolicy::new(8, 1.0, 0.5, 0.2, 0).unwrap())
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let e = Vec2::new(2.0, 0.0);
        let l = Vec2::new(0.0, 2.0);
        assert_eq!(mix_subgoal(1.0, e, l).unwrap(), e);
        assert_eq!(mix_subgoal(0.0, e, l).unwrap(), l);
        assert_eq!(mix_subgoal(0.5, e, l).unwrap(), Vec2::new(1.0, 1.0));
        assert!(matches!(mix_subgoal(1.5, e, l), Err(HirlError::InvalidMixing(_))));
        assert!(matches!(mix_subgoal(-0.1, e, l), Err(HirlError::InvalidMixing(_))));
        assert_eq!(blend(BlendConvention::Literal, 1.0, e, l).unwrap(), l);
    }

    #[test]
    fn aggregation_is_ordered_multiset() {
        let mut d = AggregatedDataset::new();
        aggregate_demonstration(&mut d, vec![1.0], Vec2::new(0.5, 0.0), 0, 0);
        assert_eq!(d.len(), 1);
        aggregate_demonstration(&mut d, vec![1.0], Vec2::new(0.5, 0.0), 0, 0);
        aggregate_demonstration(&mut d, vec![2.0], Vec2::new(0.0, 0.5), 1, 0);
        assert_eq!(d.len(), 3);
        assert_eq!(d.get(0), d.get(1));
        let order: Vec<f64> = d.iter().map(|x| x.state_features[0]).collect();
        assert_eq!(order, vec![1.0, 1.0, 2.0]);
        assert_eq!(d.episode_positions(0), vec![0, 1]);
    }

    #[test]
    fn decay_closed_form() {
        let s = MixingSchedule::new(1.0, 2.0, 5, 1);
        assert_eq!(s.beta, 1.0);
        assert_eq!(s.decayed().beta, 0.5);
        assert_eq!(s.decayed().decayed().decayed().beta, 0.125);
        let mut t = MixingSchedule::new(1.0, 1.5, 5, 1);
        let mut d_k = 1.0f64;
        for k in 1..=20 {
            t = t.decayed();
            d_k *= 1.5;
            assert_eq!(t.rounds, k);
            assert!((t.beta * d_k - 1.0).abs() < 1e-15);
        }
    }

    fn spec_small() -> PolicySpec {
        PolicySpec {
            features: FeatureSpec { context_size: 4, v_max: 1.0, local_view: 0 },
            hidden_layers: vec![16, 16],
            radius: 2.0,
            optimizer: AdamConfig::default(),
            minibatch: 8,
        }
    }

    #[test]
    fn single_pair_is_fit_within_tolerance() {
        let spec = spec_small();
        let mut p = spec.build(3).unwrap();
        let mut d = AggregatedDataset::new();
        let x: Vec<f64> = (0..spec.features.len()).map(|i| (i % 3) as f64 * 0.5).collect();
        let label = Vec2::new(1.2, -0.7);
        aggregate_demonstration(&mut d, x.clone(), label, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        update_high_level(&mut p, &d, 8, 500, &mut rng).unwrap();
        assert!(p.predict(&x).distance(label) < 0.05);
    }

    #[test]
    fn zero_steps_and_empty_dataset_are_no_ops() {
        let spec = spec_small();
        let mut p = spec.build(3).unwrap();
        let before = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(update_high_level(&mut p, &AggregatedDataset::new(), 8, 10, &mut rng).unwrap(), None);
        let mut d = AggregatedDataset::new();
        aggregate_demonstration(&mut d, vec![0.1; spec.features.len()], Vec2::new(1.0, 0.0), 0, 0);
        update_high_level(&mut p, &d, 8, 0, &mut rng).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn updates_are_deterministic() {
        let spec = spec_small();
        let mut d = AggregatedDataset::new();
        for i in 0..10 {
            aggregate_demonstration(&mut d, vec![i as f64 * 0.1; spec.features.len()], Vec2::new(1.0, -0.5), 0, i);
        }
        let run = || {
            let mut p = spec.build(5).unwrap();
            update_high_level(&mut p, &d, 4, 25, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_episodes_returns_initial_policy() {
        let hirl = HirlConfig { episodes: 0, ..HirlConfig::default() };
        let env = EnvConfig::default();
        let mut oracle = configured_oracle(&hirl, 0);
        let (policy, results) = train_dagger(&env, &mut oracle, &hirl, quick_low(), 4).unwrap();
        assert!(results.is_empty());
        assert_eq!(policy, PolicySpec::from_config(&env, &hirl).build(4).unwrap());
    }

    #[test]
    fn start_inside_goal_ends_without_queries() {
        // The 3x3 maze forces start == goal.
        let env = EnvConfig { width: 3, height: 3, wall_density: 0.0, ..EnvConfig::default() };
        let hirl = HirlConfig { episodes: 2, ..HirlConfig::default() };
        let mut run =
            HirlRun::new(Algorithm::Dagger, env, hirl.clone(), ActiveConfig::default(), quick_low(), 1).unwrap();
        assert_eq!(run.phase(), Phase::EpisodeDone);
        let results = train(&mut run, &mut configured_oracle(&hirl, 0)).unwrap();
        assert!(results.iter().all(|r| r.success && r.attempts == 0 && r.expert_queries == 0));
    }

    #[test]
    fn wrong_phase_is_rejected() {
        let env = EnvConfig { width: 3, height: 3, wall_density: 0.0, ..EnvConfig::default() };
        let mut run =
            HirlRun::new(Algorithm::Dagger, env, HirlConfig::default(), ActiveConfig::default(), quick_low(), 1)
                .unwrap();
        assert!(run.query().is_none());
        assert!(matches!(run.submit(Vec2::new(1.5, 1.5)), Err(HirlError::WrongPhase { .. })));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = HirlConfig { beta_decay: 1.0, ..HirlConfig::default() };
        let r = HirlRun::new(Algorithm::Dagger, EnvConfig::default(), bad, ActiveConfig::default(), quick_low(), 0);
        assert!(matches!(r, Err(HirlError::InvalidConfig(_))));
        let active = ActiveConfig { bag_size: 1, ..ActiveConfig::default() };
        let r =
            HirlRun::new(Algorithm::Multipolicy, EnvConfig::default(), HirlConfig::default(), active, quick_low(), 0);
        assert!(matches!(r, Err(HirlError::InvalidConfig(_))));
    }

    #[test]
    fn trailing_success_window() {
        let r = |s| EpisodeResult {
            episode_id: 0,
            success: s,
            env_steps: 0,
            attempts: 1,
            expert_queries: 1,
            aborted: false,
        };
        let rs: Vec<EpisodeResult> = (0..6).map(|i| r(i % 2 == 0)).collect();
        assert_eq!(trailing_success(&rs, 2), 0.5);
        assert_eq!(trailing_success(&rs[..1], 20), 1.0);
        assert_eq!(trailing_success(&[], 20), 0.0);
    }
}
