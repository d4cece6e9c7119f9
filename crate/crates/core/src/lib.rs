//! Closed-loop tabletop manipulation agent.
//!
//! A deterministic pick-and-place simulator, pinhole perception, planar arm
//! kinematics, a planner/converter/evaluator agent loop with pluggable model
//! backends, speech capture, and the benchmark harness that scores it all.

pub mod agent;
pub mod bench;
pub mod config;
pub mod events;
pub mod kinematics;
pub mod perception;
pub mod rng;
pub mod scene;
pub mod skills;
pub mod speech;
