//! Live demonstration sessions: the high-level training loop driven by a
//! remote demonstrator over WebSocket, or by the built-in oracle.

pub mod protocol;
pub mod server;
pub mod store;

pub use protocol::{ProtocolError, ProtocolMessage};
pub use server::{router, serve};
pub use store::{CreateSession, ExpertKind, SessionError, SessionPhase, SessionStore};
