use serde_json::{json, Value};

use crate::model::{ModelSpec, NumericFormat};
use crate::planner::{Scheme, ShardingPlan};

const LENGTH_BYTES: f64 = 4.0;
const INDEX_BYTES: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectiveKind {
    AlltoAll,
    AllReduce,
    ReduceScatter,
    OneToMany,
    ManyToMany,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AlltoAll => "alltoall",
            CollectiveKind::AllReduce => "allreduce",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::OneToMany => "one_to_many",
            CollectiveKind::ManyToMany => "many_to_many",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Forward,
    Backward,
}

/// Bytes each worker sends for one collective.
#[derive(Debug, Clone, PartialEq)]
pub struct CollectiveVolume {
    pub kind: CollectiveKind,
    pub label: &'static str,
    pub direction: Direction,
    pub per_worker_bytes: Vec<f64>,
    /// Point-to-point messages each worker sends.
    pub messages: usize,
    /// Width of one communicated element when the payload is activations or
    /// their gradients. `None` for metadata and parameter gradients, which
    /// quantized communication leaves alone.
    pub elem_bytes: Option<u64>,
}

impl CollectiveVolume {
    pub fn max_bytes(&self) -> f64 {
        self.per_worker_bytes.iter().copied().fold(0.0, f64::max)
    }

    pub fn total_bytes(&self) -> f64 {
        self.per_worker_bytes.iter().sum()
    }
}

fn remote_samples(plan: &ShardingPlan) -> f64 {
    (plan.global_batch() - plan.local_batch) as f64
}

/// Pooled columns each worker holds for table- and column-wise shards, and
/// separately for row-split shards.
fn shard_columns(plan: &ShardingPlan) -> (Vec<f64>, Vec<f64>) {
    let mut whole = vec![0.0; plan.num_workers];
    let mut split = vec![0.0; plan.num_workers];
    for tp in &plan.tables {
        for s in &tp.shards {
            let d = (s.cols.end - s.cols.start) as f64;
            match tp.scheme {
                Scheme::TableWise | Scheme::ColumnWise(_) => whole[s.worker] += d,
                Scheme::RowWise(_) | Scheme::Hierarchical(_) => split[s.worker] += d,
                Scheme::DataParallel => {}
            }
        }
    }
    (whole, split)
}

fn p2p_messages(w: usize) -> usize {
    w.saturating_sub(1)
}

/// Pooled embeddings sent to the workers that own the samples. A worker's
/// own samples stay local and are not counted.
pub fn volume_forward_alltoall(plan: &ShardingPlan, _model: &ModelSpec, elem_bytes: u64) -> CollectiveVolume {
    let remote = remote_samples(plan);
    let (whole, _) = shard_columns(plan);
    CollectiveVolume {
        kind: CollectiveKind::AlltoAll,
        label: "pooled_alltoall",
        direction: Direction::Forward,
        per_worker_bytes: whole.iter().map(|d| d * remote * elem_bytes as f64).collect(),
        messages: p2p_messages(plan.num_workers),
        elem_bytes: Some(elem_bytes),
    }
}

/// Sparse input exchange: per-sample lengths then indices, both metadata.
/// Row shards are assumed to receive indices in proportion to their rows.
pub fn volume_input_alltoall(plan: &ShardingPlan, model: &ModelSpec) -> CollectiveVolume {
    let remote = remote_samples(plan);
    let mut bytes = vec![0.0; plan.num_workers];
    for (tp, spec) in plan.tables.iter().zip(&model.tables) {
        if tp.scheme == Scheme::DataParallel {
            continue;
        }
        for s in &tp.shards {
            let frac = (s.rows.end - s.rows.start) as f64 / spec.num_rows as f64;
            bytes[s.worker] += remote * (LENGTH_BYTES + spec.avg_pooling * frac * INDEX_BYTES);
        }
    }
    CollectiveVolume {
        kind: CollectiveKind::AlltoAll,
        label: "input_alltoall",
        direction: Direction::Forward,
        per_worker_bytes: bytes,
        messages: 2 * p2p_messages(plan.num_workers),
        elem_bytes: None,
    }
}

fn ring_factor(w: usize) -> f64 {
    if w <= 1 {
        0.0
    } else {
        2.0 * (w - 1) as f64 / w as f64
    }
}

/// Dense parameter bytes synchronized after the top and bottom MLPs. Models
/// without layer lists count all dense bytes as top.
pub fn dense_split(model: &ModelSpec) -> (u64, u64) {
    if model.top_mlp.is_empty() && model.bottom_mlp.is_empty() {
        (model.dense_param_bytes, 0)
    } else {
        (model.top_param_bytes(), model.bottom_param_bytes())
    }
}

fn allreduce(label: &'static str, w: usize, bytes: f64) -> CollectiveVolume {
    CollectiveVolume {
        kind: CollectiveKind::AllReduce,
        label,
        direction: Direction::Backward,
        per_worker_bytes: vec![ring_factor(w) * bytes; w],
        messages: 2 * p2p_messages(w),
        elem_bytes: None,
    }
}

/// Backward AlltoAll mirroring the forward one, the row-wise reduce-scatter
/// and its backward gather, and ring AllReduce for data-parallel tables and
/// dense parameters.
pub fn volume_gradient_collectives(plan: &ShardingPlan, model: &ModelSpec, elem_bytes: u64) -> Vec<CollectiveVolume> {
    let w = plan.num_workers;
    let remote = remote_samples(plan);
    let mut out = Vec::new();
    let fwd = volume_forward_alltoall(plan, model, elem_bytes);
    out.push(CollectiveVolume { label: "pooled_grad_alltoall", direction: Direction::Backward, ..fwd });

    let has_rw = plan.tables.iter().any(|t| t.scheme.is_row_split());
    if has_rw {
        let (_, split) = shard_columns(plan);
        let bytes: Vec<f64> = split.iter().map(|d| d * remote * elem_bytes as f64).collect();
        out.push(CollectiveVolume {
            kind: CollectiveKind::ReduceScatter,
            label: "rw_reduce_scatter",
            direction: Direction::Forward,
            per_worker_bytes: bytes.clone(),
            messages: p2p_messages(w),
            elem_bytes: Some(elem_bytes),
        });
        out.push(CollectiveVolume {
            kind: CollectiveKind::ManyToMany,
            label: "rw_grad_gather",
            direction: Direction::Backward,
            per_worker_bytes: bytes,
            messages: p2p_messages(w),
            elem_bytes: Some(elem_bytes),
        });
    }

    let dp: f64 = plan
        .tables
        .iter()
        .zip(&model.tables)
        .filter(|(tp, _)| tp.scheme == Scheme::DataParallel)
        .map(|(_, t)| (t.num_rows * t.dim as u64 * t.precision.bytes()) as f64)
        .sum();
    if plan.tables.iter().any(|t| t.scheme == Scheme::DataParallel) {
        out.push(allreduce("dp_allreduce", w, dp));
    }
    let (top, bottom) = dense_split(model);
    if top > 0 {
        out.push(allreduce("dense_allreduce_top", w, top as f64));
    }
    if bottom > 0 {
        out.push(allreduce("dense_allreduce_bottom", w, bottom as f64));
    }
    out
}

/// Rescales activation payloads to the forward or backward wire format.
pub fn quantized_volume(v: &CollectiveVolume, fwd: NumericFormat, bwd: NumericFormat) -> CollectiveVolume {
    let Some(from) = v.elem_bytes else { return v.clone() };
    let to = match v.direction {
        Direction::Forward => fwd.bytes(),
        Direction::Backward => bwd.bytes(),
    };
    CollectiveVolume {
        per_worker_bytes: v.per_worker_bytes.iter().map(|b| b * to as f64 / from as f64).collect(),
        elem_bytes: Some(to),
        ..v.clone()
    }
}

pub fn volume_report_json(volumes: &[CollectiveVolume]) -> Value {
    Value::Array(
        volumes
            .iter()
            .map(|v| {
                json!({
                    "label": v.label,
                    "kind": v.kind.name(),
                    "direction": match v.direction { Direction::Forward => "forward", Direction::Backward => "backward" },
                    "per_worker_bytes": v.per_worker_bytes,
                    "max_bytes": v.max_bytes(),
                    "messages": v.messages,
                    "elem_bytes": v.elem_bytes,
                })
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::cluster;
    use crate::model::TableSpec;
    use crate::planner::{plan_4d, plan_with_schemes, CandidatePolicy, CompressionFlags, CostWeights};

    fn plan(m: &ModelSpec, nodes: usize, gpus: usize, schemes: &[Scheme]) -> ShardingPlan {
        plan_with_schemes(m, &cluster(nodes, gpus), &CostWeights::default(), &CompressionFlags::default(), schemes)
            .unwrap()
    }

    #[test]
    fn forward_alltoall_example() {
        let m = ModelSpec::with_tables(
            "m",
            512,
            vec![TableSpec::new("a", 100, 64, 1.0), TableSpec::new("b", 100, 128, 1.0)],
        );
        let mut p = plan(&m, 1, 2, &[Scheme::TableWise, Scheme::TableWise]);
        for t in &mut p.tables {
            t.shards[0].worker = 0;
        }
        let v = volume_forward_alltoall(&p, &m, 2);
        assert_eq!(v.per_worker_bytes, vec![196_608.0, 0.0]);
        let v32 = volume_forward_alltoall(&p, &m, 4);
        assert_eq!(v32.total_bytes(), 2.0 * v.total_bytes());
    }

    #[test]
    fn single_worker_sends_nothing() {
        let m = ModelSpec::with_tables("m", 64, vec![TableSpec::new("a", 100, 16, 1.0)]);
        let p = plan(&m, 1, 1, &[Scheme::TableWise]);
        assert_eq!(volume_forward_alltoall(&p, &m, 4).total_bytes(), 0.0);
    }

    #[test]
    fn dense_allreduce_ring() {
        let mut m = ModelSpec::empty("m", 8);
        m.dense_param_bytes = 1_000_000;
        let p = plan(&m, 1, 2, &[]);
        let v = volume_gradient_collectives(&p, &m, 4);
        let ar: Vec<_> = v.iter().filter(|c| c.kind == CollectiveKind::AllReduce).collect();
        assert_eq!(ar.len(), 1);
        assert_eq!(ar[0].per_worker_bytes, vec![1_000_000.0, 1_000_000.0]);
        assert!(v.iter().all(|c| c.kind != CollectiveKind::ReduceScatter));
    }

    #[test]
    fn rowwise_adds_reduce_scatter() {
        let m =
            ModelSpec::with_tables("m", 8, vec![TableSpec::new("a", 100, 16, 1.0), TableSpec::new("b", 10, 4, 1.0)]);
        let p = plan(&m, 1, 4, &[Scheme::RowWise(4), Scheme::DataParallel]);
        let v = volume_gradient_collectives(&p, &m, 4);
        let rs = v.iter().find(|c| c.kind == CollectiveKind::ReduceScatter).unwrap();
        assert_eq!(rs.per_worker_bytes, vec![16.0 * 24.0 * 4.0; 4]);
        let dp = v.iter().find(|c| c.label == "dp_allreduce").unwrap();
        assert_eq!(dp.per_worker_bytes, vec![1.5 * 160.0; 4]);
    }

    #[test]
    fn backward_mirrors_forward() {
        let tables = (0..40)
            .map(|i| TableSpec::new(format!("t{i}"), 100_000 + 1000 * i, 32 + 32 * (i as usize % 4), 20.0))
            .collect();
        let m = ModelSpec::with_tables("a", 256, tables);
        let p = plan_4d(&m, &cluster(2, 4), &CostWeights::default(), &CandidatePolicy::default()).unwrap();
        let fwd = volume_forward_alltoall(&p, &m, 4);
        let bwd = volume_gradient_collectives(&p, &m, 4);
        let mirror = bwd.iter().find(|c| c.label == "pooled_grad_alltoall").unwrap();
        assert_eq!(mirror.per_worker_bytes, fwd.per_worker_bytes);
        assert!(fwd.total_bytes() > 0.0);
    }

    #[test]
    fn quantization_widths() {
        let v = CollectiveVolume {
            kind: CollectiveKind::AlltoAll,
            label: "x",
            direction: Direction::Forward,
            per_worker_bytes: vec![4_000_000.0],
            messages: 1,
            elem_bytes: Some(4),
        };
        let h = quantized_volume(&v, NumericFormat::Fp16, NumericFormat::Bf16);
        assert_eq!(h.per_worker_bytes, vec![2_000_000.0]);
        assert_eq!(quantized_volume(&v, NumericFormat::Bf16, NumericFormat::Fp32), h);
        assert_eq!(quantized_volume(&v, NumericFormat::Tf32, NumericFormat::Fp16).per_worker_bytes, v.per_worker_bytes);
        let back = CollectiveVolume { direction: Direction::Backward, ..v.clone() };
        assert_eq!(
            quantized_volume(&back, NumericFormat::Fp16, NumericFormat::Bf16).per_worker_bytes,
            vec![2_000_000.0]
        );
        let meta = CollectiveVolume { elem_bytes: None, ..v };
        assert_eq!(quantized_volume(&meta, NumericFormat::Fp16, NumericFormat::Fp16), meta);
    }
}
