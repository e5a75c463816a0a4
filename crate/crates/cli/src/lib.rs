//! Command-line driver: one TOML config wires ingestion, fitting,
//! diagnostics, simulation and benchmarks.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;
pub mod report;

pub use commands::{bench_grad, bench_scaling, diagnose, fit, simulate, summarize, time_gradient};
pub use config::RunConfig;

/// Process exit status for a convergence-gate failure.
pub const EXIT_GATE_FAILED: u8 = 2;
/// Process exit status for usage and stage errors.
pub const EXIT_ERROR: u8 = 1;
