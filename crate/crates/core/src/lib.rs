//! In-transit statistics for ensembles of simulation runs.
//!
//! Simulation clients stream per-timestep field values to a partitioned
//! statistics server, which folds each value into one-pass moment
//! accumulators and Robbins-Monro quantile estimators. Raw ensemble data is
//! never stored (except on request, for oracle comparisons at desk scale).

pub mod stats;
pub mod field_stats;
pub mod protocol;

mod wire;
pub mod launcher;
pub mod sim_dye;
pub mod server;
pub mod client;
pub mod export;
pub mod validation;
pub mod cli;
