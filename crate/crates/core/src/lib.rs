//! Closed-loop mechanism discovery against budgeted simulated oracles.

pub mod chem;
pub mod engine;
pub mod ensemble;
pub mod exprlang;
pub mod fitkit;
pub mod grn;
pub mod metrics;
pub mod oracle;
pub mod proposer;
pub mod seeding;
