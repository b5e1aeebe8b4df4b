use super::{CostWeights, PlanError, Scheme};
use crate::model::{ClusterSpec, Precision, TableSpec};

/// Pooled embeddings travel as 4-byte floats unless the simulator applies
/// quantized communication.
const POOLED_BYTES: f64 = 4.0;
const INDEX_BYTES: f64 = 8.0;
const LENGTH_BYTES: f64 = 4.0;
const STATE_BYTES: u64 = 4;

/// Storage options that change table memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CompressionFlags {
    /// Overrides every table's value precision when set.
    pub table_precision: Option<Precision>,
    /// One optimizer accumulator per row instead of one per element.
    pub rowwise_state: bool,
}

impl Default for CompressionFlags {
    fn default() -> Self {
        Self { table_precision: None, rowwise_state: true }
    }
}

impl CompressionFlags {
    pub fn naive_fp32() -> Self {
        Self { table_precision: Some(Precision::Fp32), rowwise_state: false }
    }

    pub fn compressed() -> Self {
        Self { table_precision: Some(Precision::Fp16), rowwise_state: true }
    }

    pub fn elem_bytes(&self, table: &TableSpec) -> u64 {
        self.table_precision.unwrap_or(table.precision).bytes()
    }

    /// Values plus optimizer state for a block of `rows × cols`.
    pub fn block_bytes(&self, table: &TableSpec, rows: u64, cols: usize) -> u64 {
        let values = rows * cols as u64 * self.elem_bytes(table);
        let state = if self.rowwise_state { rows * STATE_BYTES } else { rows * cols as u64 * STATE_BYTES };
        values + state
    }
}

/// Whole-table bytes including optimizer state.
pub fn table_bytes(table: &TableSpec, flags: &CompressionFlags) -> u64 {
    flags.block_bytes(table, table.num_rows, table.dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShardCost {
    /// All bytes per iteration: `pooled_bytes + index_bytes`.
    pub comm_bytes: f64,
    /// Pooled outputs sent (TW/CW), partial sums reduced (RW), or gradients
    /// all-reduced (DP).
    pub pooled_bytes: f64,
    /// Sparse input indices plus per-sample lengths received.
    pub index_bytes: f64,
    /// Part of `comm_bytes` that crosses node boundaries.
    pub inter_node_bytes: f64,
    /// Embedding elements accessed per iteration.
    pub load: f64,
    pub memory_bytes: u64,
    pub fixed_latency: f64,
}

impl ShardCost {
    pub fn add(&mut self, o: &ShardCost) {
        self.comm_bytes += o.comm_bytes;
        self.pooled_bytes += o.pooled_bytes;
        self.index_bytes += o.index_bytes;
        self.inter_node_bytes += o.inter_node_bytes;
        self.load += o.load;
        self.memory_bytes += o.memory_bytes;
        self.fixed_latency += o.fixed_latency;
    }
}

/// Cost of each shard of `table` under `scheme`. Data-parallel tables yield a
/// single entry describing one replica.
///
/// Row shards are assumed to receive indices in proportion to their rows.
pub fn shard_costs(
    table: &TableSpec,
    scheme: Scheme,
    cluster: &ClusterSpec,
    global_batch: usize,
    flags: &CompressionFlags,
) -> Result<Vec<ShardCost>, PlanError> {
    let w = cluster.num_workers();
    let g = cluster.gpus_per_node.min(w);
    let gb = global_batch as f64;
    let lb = gb / w as f64;
    // Samples that live on other nodes.
    let remote = (gb - lb * g as f64).max(0.0);
    let remote_frac = if gb > 0.0 { remote / gb } else { 0.0 };
    let lat = cluster.fixed_latency_per_collective;
    let l = table.avg_pooling;
    let d = table.dim as f64;
    let h = table.num_rows as f64;

    if let Scheme::Hierarchical(n) = scheme {
        if n != g {
            return Err(PlanError::InvalidScheme {
                table: table.id.clone(),
                reason: format!("hierarchical split must use all {g} GPUs of a node, got {n}"),
            });
        }
    }
    if scheme == Scheme::DataParallel {
        let elem = flags.elem_bytes(table) as f64;
        let ar = if w > 1 { 2.0 * (w - 1) as f64 / w as f64 * h * d * elem } else { 0.0 };
        let inter = if w > 1 { ar * (w - g) as f64 / (w - 1) as f64 } else { 0.0 };
        return Ok(vec![ShardCost {
            comm_bytes: ar,
            pooled_bytes: ar,
            index_bytes: 0.0,
            inter_node_bytes: inter,
            load: lb * l * d,
            memory_bytes: table_bytes(table, flags),
            fixed_latency: lat,
        }]);
    }

    let ranges = scheme.shard_ranges(table)?;
    Ok(ranges
        .into_iter()
        .map(|(rows, cols)| {
            let frac = (rows.end - rows.start) as f64 / h;
            let ds = (cols.end - cols.start) as f64;
            let ls = l * frac;
            let index = gb * (ls * INDEX_BYTES + LENGTH_BYTES);
            let (pooled, inter, collectives) = match scheme {
                Scheme::TableWise | Scheme::ColumnWise(_) => {
                    let pooled = ds * gb * POOLED_BYTES;
                    (pooled, remote_frac * (pooled + index), 1.0)
                }
                Scheme::RowWise(_) => {
                    // Each shard reduces a full G × D partial result.
                    let pooled = ds * gb * POOLED_BYTES;
                    (pooled, remote_frac * (pooled + index), 2.0)
                }
                Scheme::Hierarchical(n) => {
                    let n = n as f64;
                    let intra = ds * gb * POOLED_BYTES * (n - 1.0) / n;
                    let outbound = ds * remote / n * POOLED_BYTES;
                    (intra + outbound, outbound + remote_frac * index, 2.0)
                }
                Scheme::DataParallel => unreachable!(),
            };
            ShardCost {
                comm_bytes: pooled + index,
                pooled_bytes: pooled,
                index_bytes: index,
                inter_node_bytes: inter,
                load: gb * ls * ds,
                memory_bytes: flags.block_bytes(table, rows.end - rows.start, cols.end - cols.start),
                fixed_latency: collectives * lat,
            }
        })
        .collect())
}

/// Sum over shards (one replica for data-parallel tables).
pub fn shard_cost(
    table: &TableSpec,
    scheme: Scheme,
    cluster: &ClusterSpec,
    global_batch: usize,
) -> Result<ShardCost, PlanError> {
    let mut total = ShardCost::default();
    for c in shard_costs(table, scheme, cluster, global_batch, &CompressionFlags::default())? {
        total.add(&c);
    }
    Ok(total)
}

/// Scales each cost term by its mean over a set of candidates so the three
/// terms become commensurable before weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub comm: f64,
    pub load: f64,
    pub latency: f64,
}

impl Normalizer {
    pub fn from_costs<'a>(costs: impl IntoIterator<Item = &'a ShardCost>) -> Self {
        let mut n = 0usize;
        let mut s = ShardCost::default();
        for c in costs {
            s.add(c);
            n += 1;
        }
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        Self { comm: mean(s.comm_bytes), load: mean(s.load), latency: mean(s.fixed_latency) }
    }

    pub fn scalar(&self, c: &ShardCost, w: &CostWeights) -> f64 {
        let term = |x: f64, mean: f64| if mean > 0.0 { x / mean } else { 0.0 };
        w.comm * term(c.comm_bytes, self.comm)
            + w.load * term(c.load, self.load)
            + w.latency * term(c.fixed_latency, self.latency)
    }
}
