//! Experiment harness: invariant and gradient suites, the convolution
//! benchmark, training tasks, datasets, checkpoints and metrics.

pub mod alloc;
pub mod bench;
pub mod checkpoint;
pub mod classify;
pub mod cli;
pub mod config;
pub mod data;
pub mod embed;
pub mod gradcheck;
pub mod metric;
pub mod metrics;
pub mod suite;
pub mod train;
