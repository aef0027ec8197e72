//! Frequency-based multi-agent patrolling on intersecting circle graphs.
//!
//! Agents learn visitation policies with tabular Q-learning over a small
//! observed state: binned deficits between required and estimated visitation
//! frequency around their position. Estimates combine an agent's own history
//! with beliefs about peers, which are corrected only when agents meet.

pub mod comms;
pub mod engine;
pub mod experiment;
pub mod history;
pub mod learner;
pub mod metrics;
pub mod policy;
pub mod view;
pub mod world;

pub use engine::{replay_mutated, run, Checkpoint, EngineError, SimParams, Simulation};
pub use world::{build_world, AgentId, CircleId, NodeId, PatrolWorld, WorldConfig, WorldMutation};
