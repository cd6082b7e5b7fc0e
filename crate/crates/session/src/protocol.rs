//! JSON messages exchanged over the session socket, one object per frame.

use hirl_core::hirl::{EpisodeResult, Progress};
use hirl_core::maze::{ContextGrid, MazeFile};
use hirl_core::Algorithm;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{ExpertKind, SessionPhase};

/// Frames longer than this are rejected before parsing.
pub const MAX_FRAME_BYTES: usize = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")]
    TooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProtocolMessage {
    /// Client greeting; binds the connection to a session (also used to resume).
    Hello {
        session_id: String,
    },
    Ack(Ack),
    Query(QueryPayload),
    Demo(Demo),
    Progress(ProgressPayload),
    EpisodeEnd(EpisodeEnd),
    Error(ErrorPayload),
}

impl ProtocolMessage {
    pub fn from_json(text: &str) -> Result<Self, ProtocolError> {
        if text.len() > MAX_FRAME_BYTES {
            return Err(ProtocolError::TooLarge(text.len()));
        }
        serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() > MAX_FRAME_BYTES {
            return Err(ProtocolError::TooLarge(bytes.len()));
        }
        serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

/// Static description of a session, sent in answer to `hello`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub algorithm: Algorithm,
    pub expert: ExpertKind,
    pub seed: u64,
    pub phase: SessionPhase,
    pub episodes: usize,
    /// Clamp radius applied to demonstrations.
    pub subgoal_radius: f64,
    /// Milliseconds since the Unix epoch.
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    /// Set when acknowledging a demonstration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<u64>,
    /// Stored offset of the acknowledged demonstration, after clamping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 2]>,
    /// Set when acknowledging `hello`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<SessionInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPayload {
    pub session_id: String,
    pub query_id: u64,
    pub episode: usize,
    pub step: usize,
    pub agent: [f64; 2],
    pub velocity: [f64; 2],
    pub goal: [f64; 2],
    pub grid: ContextGrid,
    pub beta: f64,
    /// Full-resolution layout for rendering.
    pub maze: MazeFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub session_id: String,
    pub query_id: u64,
    pub subgoal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPayload {
    pub session_id: String,
    pub episode: usize,
    pub trailing_success_rate: f64,
    pub dataset_size: usize,
    pub beta: f64,
    pub finished: bool,
}

impl ProgressPayload {
    pub fn new(session_id: &str, p: Progress, finished: bool) -> Self {
        Self {
            session_id: session_id.to_string(),
            episode: p.episode,
            trailing_success_rate: p.trailing_success_rate,
            dataset_size: p.dataset_size,
            beta: p.beta,
            finished,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEnd {
    pub session_id: String,
    pub episode: usize,
    pub success: bool,
    pub attempts: usize,
    pub env_steps: usize,
    pub expert_queries: usize,
    pub aborted: bool,
}

impl EpisodeEnd {
    pub fn new(session_id: &str, r: &EpisodeResult) -> Self {
        Self {
            session_id: session_id.to_string(),
            episode: r.episode_id,
            success: r.success,
            attempts: r.attempts,
            env_steps: r.env_steps,
            expert_queries: r.expert_queries,
            aborted: r.aborted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorPayload {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    pub code: String,
    pub message: String,
    /// The query awaiting an answer, attached to stale-query rejections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub current_query_id: Option<u64>,
}
