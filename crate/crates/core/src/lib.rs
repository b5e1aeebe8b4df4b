//! Sharding planner, roofline performance model and executable reference
//! semantics for training embedding-dominated recommendation models.
//!
//! The crate is split into:
//!
//! - [`model`]: model/cluster specs, their JSON schema, and the combined
//!   (lengths + concatenated indices) sparse batch format.
//! - [`planner`]: per-table 4D sharding (table/row/column/data parallel),
//!   the greedy and largest-differencing partitioners, and memory accounting.
//! - [`engine`]: pooled embedding lookup, sorted/aggregated backward fused
//!   with sparse optimizers, and FP16 storage emulation.
//! - [`comms`]: input redistribution, collective volume accounting, and a
//!   simulated multi-worker training step.
//! - [`cache`]: set-associative row cache simulator.
//! - [`perf`]: component latencies, overlap-aware iteration latency, sweeps.
//!
//! Numerical code is generic over [`Scalar`] (`f32`/`f64`); the partitioners
//! accept any [`PartitionCost`], including integers and exact rationals.

#![allow(clippy::single_range_in_vec_init)]

pub mod cache;
pub mod comms;
pub mod engine;
pub mod model;
pub mod perf;
pub mod planner;
mod scalar;

#[cfg(test)]
mod fixtures;

pub use scalar::{PartitionCost, Scalar};

/// Double-precision embedding table, the type used by the verification paths.
pub type Table = engine::EmbeddingTable<f64>;
/// Single-precision embedding table.
pub type Table32 = engine::EmbeddingTable<f32>;
/// Row gradients in double precision.
pub type Gradients = engine::RowGradients<f64>;
/// Row-major dense matrix of doubles.
pub type Matrix = ndarray::Array2<f64>;
