use rayon::prelude::*;

use super::latency::{component_latencies, iteration_latency, PerfEstimate, PerfOptions};
use crate::model::{ClusterSpec, ModelSpec};
use crate::planner::{plan_4d, CandidatePolicy, CostWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    pub nodes: usize,
    pub workers: usize,
    pub global_batch: usize,
    /// Planning or memory failures stay on their own entry.
    pub estimate: Result<PerfEstimate, String>,
    /// `qps_n / ((n / n_0) × qps_0)` against the first node count.
    pub efficiency: Option<f64>,
}

/// Weak scaling: local batch fixed, the plan rebuilt at each node count.
/// Table cardinality shrinks by `n / max(node_counts)` so a model sized for
/// the largest scale still fits the small ones; pooling and dims, and hence
/// the traffic per sample, are untouched. Entries come back in the order of
/// `node_counts`.
pub fn scaling_sweep(
    model: &ModelSpec,
    cluster: &ClusterSpec,
    node_counts: &[usize],
    weights: &CostWeights,
    policy: &CandidatePolicy,
    opts: &PerfOptions,
) -> Vec<SweepEntry> {
    let largest = node_counts.iter().copied().max().unwrap_or(1);
    let estimates: Vec<Result<PerfEstimate, String>> = node_counts
        .par_iter()
        .map(|&n| {
            let c = cluster.with_nodes(n);
            let m = shrink_rows(model, n, largest);
            let plan = plan_4d(&m, &c, weights, policy).map_err(|e| e.to_string())?;
            let comps = component_latencies(&m, &plan, &c, opts).map_err(|e| e.to_string())?;
            Ok(iteration_latency(&comps, plan.global_batch()))
        })
        .collect();
    let base = node_counts.first().copied().zip(estimates.first().and_then(|e| e.as_ref().ok()).map(|e| e.qps));
    node_counts
        .iter()
        .zip(estimates)
        .map(|(&n, estimate)| {
            let efficiency = match (&estimate, base) {
                (Ok(e), Some((n0, q0))) => Some(e.qps / (n as f64 / n0 as f64 * q0)),
                _ => None,
            };
            SweepEntry {
                nodes: n,
                workers: n * cluster.gpus_per_node,
                global_batch: n * cluster.gpus_per_node * model.local_batch,
                estimate,
                efficiency,
            }
        })
        .collect()
}

/// Scales every table's row count by `n / of`, rounding up.
pub fn shrink_rows(model: &ModelSpec, n: usize, of: usize) -> ModelSpec {
    let mut m = model.clone();
    if n < of {
        for t in &mut m.tables {
            t.num_rows = (t.num_rows as u128 * n as u128).div_ceil(of as u128).max(1) as u64;
        }
    }
    m
}
