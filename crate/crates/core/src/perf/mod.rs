//! Roofline and overlap model of one training iteration.

mod latency;
mod sweep;

pub use latency::{
    achieved_bw, component_latencies, effective_performance, exposed_breakdown, iteration_latency, worker_latencies,
    ComponentLatencies, PerfEstimate, PerfOptions, WorkerLatencies,
};
pub use sweep::{scaling_sweep, shrink_rows, SweepEntry};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("plan does not match cluster: {0}")]
    Mismatch(String),
}
