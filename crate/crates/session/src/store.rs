//! Session lifecycle over [`HirlRun`]: query pairing, demonstration intake,
//! timeouts and metrics. Every operation on one session runs under that
//! session's lock; sessions share only the low-level controller.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use hirl_core::config::{ActiveConfig, EnvConfig};
use hirl_core::experiment::{compute_metrics, MetricsRow};
use hirl_core::hirl::{configured_oracle, EpisodeResult, HirlError, HirlRun, Phase, Progress, TRAILING_WINDOW};
use hirl_core::low_level::LowLevelPolicy;
use hirl_core::maze::encode_context;
use hirl_core::oracle::{Expert, OracleExpert};
use hirl_core::{Algorithm, HirlConfig, Vec2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ErrorPayload, QueryPayload, SessionInfo};

/// Unanswered queries older than this abort their episode.
pub const DEFAULT_QUERY_TIMEOUT: Duration = Duration::from_secs(120);

/// Side of the context grid shipped with each query.
pub const QUERY_GRID: usize = 16;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session {0:?}")]
    NotFound(String),
    #[error(transparent)]
    UnknownAlgorithm(#[from] hirl_core::config::UnknownAlgorithm),
    #[error("invalid session config: {0}")]
    InvalidConfig(String),
    #[error("session is {0:?}, not awaiting a demonstration")]
    NotAwaiting(SessionPhase),
    #[error("query {submitted} is not the pending query")]
    StaleQuery { submitted: u64, current: Option<u64> },
    #[error("subgoal ({0}, {1}) lies outside the maze")]
    OutOfBounds(f64, f64),
    #[error("session has finished")]
    Finished,
    #[error("operation needs a {0:?} session")]
    WrongExpert(ExpertKind),
    #[error("training failed: {0}")]
    Training(#[from] HirlError),
}

impl SessionError {
    /// Stable identifier sent in protocol error messages.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::NotFound(_) => "not_found",
            SessionError::UnknownAlgorithm(_) => "unknown_algorithm",
            SessionError::InvalidConfig(_) => "invalid_config",
            SessionError::NotAwaiting(_) => "not_awaiting",
            SessionError::StaleQuery { .. } => "stale_query",
            SessionError::OutOfBounds(..) => "out_of_bounds",
            SessionError::Finished => "finished",
            SessionError::WrongExpert(_) => "wrong_expert",
            SessionError::Training(_) => "training_error",
        }
    }

    pub fn to_payload(&self, session_id: Option<&str>) -> ErrorPayload {
        ErrorPayload {
            session_id: session_id.map(str::to_string),
            code: self.code().to_string(),
            message: self.to_string(),
            current_query_id: match self {
                SessionError::StaleQuery { current, .. } => *current,
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    /// Built-in shortest-path demonstrator; the session trains without messages.
    Oracle,
    #[default]
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionPhase {
    AwaitingDemo,
    EpisodeDone,
    Finished,
}

impl From<Phase> for SessionPhase {
    fn from(p: Phase) -> Self {
        match p {
            Phase::AwaitingDemo => SessionPhase::AwaitingDemo,
            Phase::EpisodeDone => SessionPhase::EpisodeDone,
            Phase::Finished => SessionPhase::Finished,
        }
    }
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub algorithm: String,
    #[serde(default)]
    pub expert: ExpertKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub hirl: HirlConfig,
    #[serde(default)]
    pub active: ActiveConfig,
}

impl CreateSession {
    pub fn new(algorithm: Algorithm, expert: ExpertKind, seed: u64) -> Self {
        Self {
            algorithm: algorithm.name().to_string(),
            expert,
            seed,
            env: EnvConfig::default(),
            hirl: HirlConfig::default(),
            active: ActiveConfig::default(),
        }
    }
}

/// One accepted demonstration, as stored.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoRecord {
    pub query_id: u64,
    pub episode: usize,
    pub step: usize,
    pub agent: [f64; 2],
    pub subgoal: [f64; 2],
    /// Aggregated offset, clamped to the subgoal radius.
    pub offset: [f64; 2],
}

/// Result of an accepted demonstration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemoAck {
    pub query_id: u64,
    pub offset: [f64; 2],
    pub ended: Option<EpisodeResult>,
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    query_id: u64,
    issued_at: Instant,
}

#[derive(Debug)]
pub struct Session {
    id: String,
    expert: ExpertKind,
    run: HirlRun,
    oracle: Option<OracleExpert>,
    created_at: SystemTime,
    next_query_id: u64,
    pending: Option<Pending>,
    demos: Vec<DemoRecord>,
}

impl Session {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn expert(&self) -> ExpertKind {
        self.expert
    }

    pub fn run(&self) -> &HirlRun {
        &self.run
    }

    pub fn phase(&self) -> SessionPhase {
        self.run.phase().into()
    }

    pub fn created_at(&self) -> SystemTime {
        self.created_at
    }

    /// Accepted demonstrations in arrival order.
    pub fn demo_log(&self) -> &[DemoRecord] {
        &self.demos
    }

    pub fn pending_query_id(&self) -> Option<u64> {
        self.pending.map(|p| p.query_id)
    }

    pub fn info(&self) -> SessionInfo {
        SessionInfo {
            session_id: self.id.clone(),
            algorithm: self.run.algorithm(),
            expert: self.expert,
            seed: self.run.seed(),
            phase: self.phase(),
            episodes: self.run.hirl_config().episodes,
            subgoal_radius: self.run.hirl_config().subgoal_radius,
            created_at_ms: self.created_at.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
        }
    }

    /// Keeps exactly one pending query while awaiting a demonstration.
    fn sync_pending(&mut self) {
        if self.expert == ExpertKind::Human && self.run.phase() == Phase::AwaitingDemo {
            if self.pending.is_none() {
                self.pending = Some(Pending { query_id: self.next_query_id, issued_at: Instant::now() });
                self.next_query_id += 1;
            }
        } else {
            self.pending = None;
        }
    }

    fn query(&self) -> Result<QueryPayload, SessionError> {
        if self.expert != ExpertKind::Human {
            return Err(SessionError::WrongExpert(ExpertKind::Human));
        }
        let (Some(q), Some(p)) = (self.run.query(), self.pending) else {
            return Err(SessionError::NotAwaiting(self.phase()));
        };
        Ok(QueryPayload {
            session_id: self.id.clone(),
            query_id: p.query_id,
            episode: q.episode,
            step: q.step,
            agent: q.state.position.into(),
            velocity: q.state.velocity.into(),
            goal: q.goal.position.into(),
            grid: encode_context(q.maze, &q.state, &q.goal, QUERY_GRID),
            beta: q.beta,
            maze: q.maze.to_file(),
        })
    }

    fn submit(&mut self, query_id: u64, subgoal: [f64; 2]) -> Result<DemoAck, SessionError> {
        if self.expert != ExpertKind::Human {
            return Err(SessionError::WrongExpert(ExpertKind::Human));
        }
        let Some(pending) = self.pending else {
            return Err(match self.phase() {
                SessionPhase::Finished => SessionError::Finished,
                phase => SessionError::NotAwaiting(phase),
            });
        };
        if pending.query_id != query_id {
            return Err(SessionError::StaleQuery { submitted: query_id, current: Some(pending.query_id) });
        }
        let q = self.run.query().expect("pending implies an open query");
        let (w, h) = (q.maze.world_width(), q.maze.world_height());
        let [x, y] = subgoal;
        if !(x.is_finite() && y.is_finite() && (0.0..=w).contains(&x) && (0.0..=h).contains(&y)) {
            return Err(SessionError::OutOfBounds(x, y));
        }
        let (episode, step, agent) = (q.episode, q.step, q.state.position);
        let decision = self.run.submit(Vec2::new(x, y))?;
        self.pending = None;
        let offset: [f64; 2] = decision.expert_offset.into();
        self.demos.push(DemoRecord { query_id, episode, step, agent: agent.into(), subgoal, offset });
        self.sync_pending();
        Ok(DemoAck { query_id, offset, ended: decision.ended })
    }

    fn advance(&mut self) -> Result<Progress, SessionError> {
        if self.run.phase() == Phase::Finished {
            return Err(SessionError::Finished);
        }
        let progress = self.run.advance()?;
        self.sync_pending();
        Ok(progress)
    }

    fn expire(&mut self, timeout: Duration) -> Result<Option<EpisodeResult>, SessionError> {
        match self.pending {
            Some(p) if self.expert == ExpertKind::Human && p.issued_at.elapsed() >= timeout => {
                let r = self.run.abort_episode()?;
                log::warn!("session {}: query {} timed out, episode {} aborted", self.id, p.query_id, r.episode_id);
                self.pending = None;
                Ok(Some(r))
            }
            _ => Ok(None),
        }
    }

    /// One oracle decision or one `advance`; false once finished.
    fn oracle_step(&mut self) -> Result<bool, SessionError> {
        match self.run.phase() {
            Phase::Finished => Ok(false),
            Phase::EpisodeDone => {
                self.advance()?;
                Ok(true)
            }
            Phase::AwaitingDemo => {
                let q = self.run.query().expect("awaiting phase has a query");
                let oracle = self.oracle.as_mut().expect("oracle sessions carry an oracle");
                match oracle.demonstrate(q.maze, &q.state, &q.goal) {
                    Ok(subgoal) => {
                        self.run.submit(subgoal)?;
                    }
                    Err(e) => {
                        self.run.abort_episode()?;
                        self.advance()?;
                        return Err(SessionError::Training(HirlError::Expert(e)));
                    }
                }
                self.sync_pending();
                Ok(true)
            }
        }
    }
}

/// All live sessions.
#[derive(Debug)]
pub struct SessionStore {
    low: Arc<LowLevelPolicy>,
    timeout: Duration,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl SessionStore {
    pub fn new(low: Arc<LowLevelPolicy>) -> Self {
        Self { low, timeout: DEFAULT_QUERY_TIMEOUT, sessions: RwLock::new(HashMap::new()) }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, id: &str) -> Result<Arc<Mutex<Session>>, SessionError> {
        self.sessions.read().expect("store lock").get(id).cloned().ok_or_else(|| SessionError::NotFound(id.to_string()))
    }

    /// Runs `f` under the session's lock.
    pub fn with_session<R>(&self, id: &str, f: impl FnOnce(&Session) -> R) -> Result<R, SessionError> {
        let s = self.get(id)?;
        let guard = s.lock().expect("session lock");
        Ok(f(&guard))
    }

    fn with_session_mut<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Session) -> Result<R, SessionError>,
    ) -> Result<R, SessionError> {
        let s = self.get(id)?;
        let mut guard = s.lock().expect("session lock");
        f(&mut guard)
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<String, SessionError> {
        let algorithm: Algorithm = req.algorithm.parse()?;
        let run = HirlRun::new(algorithm, req.env, req.hirl.clone(), req.active, self.low.clone(), req.seed).map_err(
            |e| match e {
                HirlError::InvalidConfig(msg) => SessionError::InvalidConfig(msg),
                other => SessionError::Training(other),
            },
        )?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut session = Session {
            id: id.clone(),
            expert: req.expert,
            oracle: (req.expert == ExpertKind::Oracle).then(|| configured_oracle(&req.hirl, req.seed)),
            run,
            created_at: SystemTime::now(),
            next_query_id: 1,
            pending: None,
            demos: Vec::new(),
        };
        session.sync_pending();
        log::info!("session {id}: {algorithm} with {:?} expert, seed {}", req.expert, req.seed);
        self.sessions.write().expect("store lock").insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    pub fn remove(&self, id: &str) -> bool {
        self.sessions.write().expect("store lock").remove(id).is_some()
    }

    pub fn info(&self, id: &str) -> Result<SessionInfo, SessionError> {
        self.with_session(id, Session::info)
    }

    pub fn phase(&self, id: &str) -> Result<SessionPhase, SessionError> {
        self.with_session(id, Session::phase)
    }

    /// The pending query; repeated calls return the same `query_id`.
    pub fn next_query(&self, id: &str) -> Result<QueryPayload, SessionError> {
        self.with_session(id, Session::query)?
    }

    /// Answers the pending query with a world-space subgoal.
    pub fn submit_demonstration(&self, id: &str, query_id: u64, subgoal: [f64; 2]) -> Result<DemoAck, SessionError> {
        self.with_session_mut(id, |s| s.submit(query_id, subgoal))
    }

    /// Between-episode bookkeeping; a no-op while an episode is running.
    pub fn advance_training(&self, id: &str) -> Result<Progress, SessionError> {
        self.with_session_mut(id, Session::advance)
    }

    pub fn progress(&self, id: &str) -> Result<Progress, SessionError> {
        self.with_session(id, |s| s.run.progress())
    }

    pub fn results(&self, id: &str) -> Result<Vec<EpisodeResult>, SessionError> {
        self.with_session(id, |s| s.run.results().to_vec())
    }

    pub fn session_metrics(&self, id: &str) -> Result<Vec<MetricsRow>, SessionError> {
        self.with_session(id, |s| compute_metrics(s.run.algorithm(), s.run.seed(), s.run.results(), TRAILING_WINDOW))
    }

    pub fn demo_log(&self, id: &str) -> Result<Vec<DemoRecord>, SessionError> {
        self.with_session(id, |s| s.demos.clone())
    }

    /// Aborts the episode when its pending query has outlived the timeout.
    pub fn expire_stale(&self, id: &str) -> Result<Option<EpisodeResult>, SessionError> {
        let timeout = self.timeout;
        self.with_session_mut(id, |s| s.expire(timeout))
    }

    /// Trains an oracle session to completion, releasing the lock between
    /// decisions so the session stays observable.
    pub fn run_oracle(&self, id: &str) -> Result<Vec<EpisodeResult>, SessionError> {
        let s = self.get(id)?;
        if s.lock().expect("session lock").expert != ExpertKind::Oracle {
            return Err(SessionError::WrongExpert(ExpertKind::Oracle));
        }
        while s.lock().expect("session lock").oracle_step()? {}
        let results = s.lock().expect("session lock").run.results().to_vec();
        Ok(results)
    }
}
