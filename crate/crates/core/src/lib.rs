//! Desk-scale software stack for a dual-arm omnidirectional mobile
//! manipulator.

pub mod model;
pub mod orchestrator;
pub mod plan;
pub mod session;
pub mod sim;
pub mod skills;
pub mod spatial;
pub mod types;
pub mod wbc;
