//! Command-line harness for nirvana-core: synthetic tasks, toy training and
//! verification drivers.

pub mod config;
pub mod tasks;
pub mod train;
pub mod ablate;
pub mod gradcheck;
pub mod rule_diff;
