//! Hierarchical imitation and reinforcement learning in a continuous 2D maze.
//!
//! The crate is organised bottom-up:
//!
//! - [`maze`]: procedurally generated maze, point-mass dynamics, context grids.
//! - [`neural`]: dense MLPs with reverse-mode gradients and an Adam optimizer.
//! - [`low_level`]: goal-conditioned DDPG controller, pretrained in open field.
//! - [`oracle`]: shortest-path demonstrator standing in for a human expert.
//! - [`hirl`]: the high-level DAgger loop (mixing, aggregation, scheduled updates).
//! - [`active`]: noise-based, multi-policy and reward-based active learning.
//! - [`experiment`]: seeded benchmark harness, metrics and CSV export.

pub mod active;
pub mod config;
pub mod experiment;
pub mod geom;
pub mod hirl;
pub mod low_level;
pub mod maze;
pub mod neural;
pub mod oracle;

pub use config::{Algorithm, BlendConvention, HirlConfig};
pub use geom::Vec2;
