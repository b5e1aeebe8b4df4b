use super::PerfError;
use crate::cache::effective_row_bandwidth;
use crate::comms::{
    quantized_volume, volume_forward_alltoall, volume_gradient_collectives, volume_input_alltoall, CollectiveKind,
    CollectiveVolume,
};
use crate::model::{BandwidthPoint, ClusterSpec, ModelSpec, NumericFormat};
use crate::planner::{memory_check, CompressionFlags, MemoryTier, Scheme, ShardingPlan};

const INDEX_BYTES: f64 = 8.0;
const LENGTH_BYTES: f64 = 4.0;
const DENSE_FEATURE_BYTES: f64 = 4.0;

/// Achieved bandwidth for a message of `message_bytes`, interpolated
/// linearly in log(size) vs log(bandwidth) and clamped to the end points.
pub fn achieved_bw(points: &[BandwidthPoint], message_bytes: f64) -> f64 {
    assert!(!points.is_empty(), "bandwidth curve needs at least one point");
    let first = &points[0];
    let last = &points[points.len() - 1];
    if message_bytes <= first.message_bytes as f64 {
        return first.bytes_per_sec;
    }
    if message_bytes >= last.message_bytes as f64 {
        return last.bytes_per_sec;
    }
    let k = points.partition_point(|p| (p.message_bytes as f64) <= message_bytes);
    let (a, b) = (&points[k - 1], &points[k]);
    let t = (message_bytes.ln() - (a.message_bytes as f64).ln())
        / ((b.message_bytes as f64).ln() - (a.message_bytes as f64).ln());
    (a.bytes_per_sec.ln() + t * (b.bytes_per_sec.ln() - a.bytes_per_sec.ln())).exp()
}

/// Seconds per iteration for each node of the dependency graph.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentLatencies {
    pub botmlp_fwd: f64,
    pub emb_lookup: f64,
    pub a2a_fwd: f64,
    pub interaction_fwd: f64,
    pub topmlp_fwd: f64,
    pub topmlp_bwd: f64,
    pub interaction_bwd: f64,
    pub a2a_bwd: f64,
    pub emb_update: f64,
    pub botmlp_bwd: f64,
    pub allreduce_top: f64,
    pub allreduce_bot: f64,
    pub input_a2a: f64,
    pub h2d: f64,
}

impl ComponentLatencies {
    pub const NAMES: [&'static str; 14] = [
        "botmlp_fwd",
        "emb_lookup",
        "a2a_fwd",
        "interaction_fwd",
        "topmlp_fwd",
        "topmlp_bwd",
        "interaction_bwd",
        "a2a_bwd",
        "emb_update",
        "botmlp_bwd",
        "allreduce_top",
        "allreduce_bot",
        "input_a2a",
        "h2d",
    ];

    pub fn to_array(&self) -> [f64; 14] {
        [
            self.botmlp_fwd,
            self.emb_lookup,
            self.a2a_fwd,
            self.interaction_fwd,
            self.topmlp_fwd,
            self.topmlp_bwd,
            self.interaction_bwd,
            self.a2a_bwd,
            self.emb_update,
            self.botmlp_bwd,
            self.allreduce_top,
            self.allreduce_bot,
            self.input_a2a,
            self.h2d,
        ]
    }

    pub fn from_array(a: [f64; 14]) -> Self {
        Self {
            botmlp_fwd: a[0],
            emb_lookup: a[1],
            a2a_fwd: a[2],
            interaction_fwd: a[3],
            topmlp_fwd: a[4],
            topmlp_bwd: a[5],
            interaction_bwd: a[6],
            a2a_bwd: a[7],
            emb_update: a[8],
            botmlp_bwd: a[9],
            allreduce_top: a[10],
            allreduce_bot: a[11],
            input_a2a: a[12],
            h2d: a[13],
        }
    }

    pub fn is_comm(name: &str) -> bool {
        matches!(name, "a2a_fwd" | "a2a_bwd" | "allreduce_top" | "allreduce_bot" | "input_a2a" | "h2d")
    }

    /// Same values with every communication term zeroed.
    pub fn compute_only(&self) -> Self {
        let mut a = self.to_array();
        for (v, name) in a.iter_mut().zip(Self::NAMES) {
            if Self::is_comm(name) {
                *v = 0.0;
            }
        }
        Self::from_array(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfEstimate {
    pub components: ComponentLatencies,
    pub t_fwd: f64,
    pub t_bwd: f64,
    pub t_total: f64,
    pub global_batch: usize,
    pub qps: f64,
    pub serialized_total: f64,
    pub exposed_comm: f64,
}

fn overlapped(c: &ComponentLatencies) -> (f64, f64, f64) {
    let t_fwd = c.botmlp_fwd.max(c.emb_lookup + c.a2a_fwd) + c.interaction_fwd + c.topmlp_fwd;
    let compute = c.topmlp_bwd + c.interaction_bwd + (c.a2a_bwd + c.emb_update).max(c.botmlp_bwd);
    let t_bwd = compute.max(c.allreduce_top + c.allreduce_bot);
    // Next batch's input exchange runs under the top MLP, its host copy
    // under the bottom MLP; only the excess shows.
    let spill = (c.input_a2a - c.topmlp_fwd).max(0.0) + (c.h2d - c.botmlp_fwd).max(0.0);
    (t_fwd, t_bwd, t_fwd + t_bwd + spill)
}

pub fn iteration_latency(c: &ComponentLatencies, global_batch: usize) -> PerfEstimate {
    let (t_fwd, t_bwd, t_total) = overlapped(c);
    let (_, _, compute_path) = overlapped(&c.compute_only());
    PerfEstimate {
        components: *c,
        t_fwd,
        t_bwd,
        t_total,
        global_batch,
        qps: if t_total > 0.0 { global_batch as f64 / t_total } else { f64::INFINITY },
        serialized_total: c.to_array().iter().sum(),
        exposed_comm: t_total - compute_path,
    }
}

/// How much `t_total` would shrink if each component took no time.
pub fn exposed_breakdown(c: &ComponentLatencies) -> ComponentLatencies {
    let (_, _, total) = overlapped(c);
    let base = c.to_array();
    let mut out = [0.0; 14];
    for (i, o) in out.iter_mut().enumerate() {
        let mut a = base;
        a[i] = 0.0;
        *o = total - overlapped(&ComponentLatencies::from_array(a)).2;
    }
    ComponentLatencies::from_array(out)
}

/// FLOP/s delivered: `mflops_per_sample × 10⁶ × qps`.
pub fn effective_performance(mflops_per_sample: f64, qps: f64) -> f64 {
    mflops_per_sample * 1e6 * qps
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerfOptions {
    /// Row cache hit rate for workers whose shards spill past HBM.
    pub hit_rate: f64,
    pub flags: CompressionFlags,
    /// Wire format of forward pooled embeddings; `None` keeps the dense
    /// format's width.
    pub fwd_comm: Option<NumericFormat>,
    pub bwd_comm: Option<NumericFormat>,
}

impl Default for PerfOptions {
    fn default() -> Self {
        Self { hit_rate: 1.0, flags: CompressionFlags::default(), fwd_comm: None, bwd_comm: None }
    }
}

/// Model-parallel latencies of one worker.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorkerLatencies {
    pub emb_lookup: f64,
    pub emb_update: f64,
    pub a2a_fwd: f64,
    pub a2a_bwd: f64,
    pub input_a2a: f64,
}

fn collective_time(v: &CollectiveVolume, worker: usize, cluster: &ClusterSpec) -> f64 {
    let w = v.per_worker_bytes.len();
    let bytes = v.per_worker_bytes[worker];
    if w <= 1 || bytes <= 0.0 {
        return 0.0;
    }
    let g = cluster.gpus_per_node.min(w);
    let local = cluster.scaleup_bw * cluster.scaleup_efficiency;
    let t = match v.kind {
        CollectiveKind::AllReduce => {
            if w <= g {
                bytes / local
            } else {
                // The calibration curve is algorithm bandwidth: gradient
                // bytes over wall time, not ring traffic.
                let payload = bytes * w as f64 / (2.0 * (w - 1) as f64);
                payload / achieved_bw(&cluster.allreduce_bw_points, payload)
            }
        }
        _ => {
            let inter = (w - g) as f64 / (w - 1) as f64;
            let intra = (g - 1) as f64 / (w - 1) as f64;
            let remote =
                if inter > 0.0 { inter * bytes / achieved_bw(&cluster.alltoall_bw_points, bytes) } else { 0.0 };
            remote + intra * bytes / local
        }
    };
    t + cluster.fixed_latency_per_collective
}

struct Volumes {
    fwd: Vec<CollectiveVolume>,
    bwd: Vec<CollectiveVolume>,
    input: CollectiveVolume,
    top: Vec<CollectiveVolume>,
    bot: Vec<CollectiveVolume>,
}

fn volumes(model: &ModelSpec, plan: &ShardingPlan, opts: &PerfOptions) -> Volumes {
    let elem = model.dense_precision.bytes();
    let fwd_fmt = opts.fwd_comm.unwrap_or(model.dense_precision);
    let bwd_fmt = opts.bwd_comm.unwrap_or(model.dense_precision);
    let q = |v: &CollectiveVolume| quantized_volume(v, fwd_fmt, bwd_fmt);
    let mut out = Volumes {
        fwd: vec![q(&volume_forward_alltoall(plan, model, elem))],
        bwd: Vec::new(),
        input: volume_input_alltoall(plan, model),
        top: Vec::new(),
        bot: Vec::new(),
    };
    for v in volume_gradient_collectives(plan, model, elem) {
        match v.label {
            "pooled_grad_alltoall" | "rw_grad_gather" => out.bwd.push(q(&v)),
            "rw_reduce_scatter" => out.fwd.push(q(&v)),
            "dense_allreduce_top" => out.top.push(v),
            _ => out.bot.push(v),
        }
    }
    out
}

fn check(plan: &ShardingPlan, model: &ModelSpec, cluster: &ClusterSpec) -> Result<(), PerfError> {
    if plan.num_workers != cluster.num_workers() || plan.gpus_per_node != cluster.gpus_per_node {
        return Err(PerfError::Mismatch(format!(
            "plan is for {} workers ({} per node), cluster has {} ({} per node)",
            plan.num_workers,
            plan.gpus_per_node,
            cluster.num_workers(),
            cluster.gpus_per_node
        )));
    }
    if plan.tables.len() != model.tables.len() {
        return Err(PerfError::Mismatch(format!(
            "plan has {} tables, model {}",
            plan.tables.len(),
            model.tables.len()
        )));
    }
    Ok(())
}

/// Per-worker embedding and collective latencies.
///
/// Lookup reads `G × L_shard × D_shard` elements per shard (data-parallel
/// replicas read only the local batch); the update reads and writes the same
/// rows. Workers whose memory spills into host DRAM see the cache-blended
/// row bandwidth, the rest full HBM bandwidth.
pub fn worker_latencies(
    model: &ModelSpec,
    plan: &ShardingPlan,
    cluster: &ClusterSpec,
    opts: &PerfOptions,
) -> Result<Vec<WorkerLatencies>, PerfError> {
    check(plan, model, cluster)?;
    let mem = memory_check(plan, model, cluster, &opts.flags);
    if !mem.feasible {
        let bad = mem.workers.iter().position(|m| m.tier == MemoryTier::Infeasible).unwrap_or(0);
        return Err(PerfError::Infeasible(format!(
            "worker {bad} needs {} bytes, capacity {}",
            mem.workers[bad].total_bytes,
            cluster.worker_capacity()
        )));
    }
    let w = plan.num_workers;
    let gb = plan.global_batch() as f64;
    let lb = plan.local_batch as f64;
    let mut lookup = vec![0.0; w];
    let mut update = vec![0.0; w];
    for (tp, spec) in plan.tables.iter().zip(&model.tables) {
        let elem = opts.flags.elem_bytes(spec) as f64;
        if tp.scheme == Scheme::DataParallel {
            let bytes = spec.avg_pooling * spec.dim as f64 * elem;
            for k in 0..w {
                lookup[k] += lb * bytes;
                update[k] += 2.0 * gb * bytes;
            }
            continue;
        }
        for s in &tp.shards {
            let frac = (s.rows.end - s.rows.start) as f64 / spec.num_rows as f64;
            let bytes = gb * spec.avg_pooling * frac * (s.cols.end - s.cols.start) as f64 * elem;
            lookup[s.worker] += bytes;
            update[s.worker] += 2.0 * bytes;
        }
    }
    let vols = volumes(model, plan, opts);
    Ok((0..w)
        .map(|k| {
            let bw = match mem.workers[k].tier {
                MemoryTier::Hbm => cluster.hbm_bw,
                _ => effective_row_bandwidth(opts.hit_rate, cluster.hbm_bw, cluster.dram_to_gpu_bw),
            };
            WorkerLatencies {
                emb_lookup: lookup[k] / bw,
                emb_update: update[k] / bw,
                a2a_fwd: vols.fwd.iter().map(|v| collective_time(v, k, cluster)).sum(),
                a2a_bwd: vols.bwd.iter().map(|v| collective_time(v, k, cluster)).sum(),
                input_a2a: collective_time(&vols.input, k, cluster)
                    + if w > 1 && vols.input.per_worker_bytes[k] > 0.0 {
                        cluster.fixed_latency_per_collective
                    } else {
                        0.0
                    },
            }
        })
        .collect())
}

/// Dense FLOPs per sample of the bottom MLP, top MLP and interaction. A
/// model without layer lists puts its declared complexity, less the
/// interaction, in the top MLP.
fn dense_flops(model: &ModelSpec) -> (f64, f64, f64) {
    let inter = model.interaction_flops_per_sample;
    if model.bottom_mlp.is_empty() && model.top_mlp.is_empty() {
        return (0.0, (model.mflops_per_sample * 1e6 - inter).max(0.0), inter);
    }
    let sum = |ls: &[crate::model::MlpLayer]| ls.iter().map(|l| l.forward_flops()).sum::<f64>();
    (sum(&model.bottom_mlp), sum(&model.top_mlp), inter)
}

/// Straggler latencies: model-parallel terms take the slowest worker.
pub fn component_latencies(
    model: &ModelSpec,
    plan: &ShardingPlan,
    cluster: &ClusterSpec,
    opts: &PerfOptions,
) -> Result<ComponentLatencies, PerfError> {
    let per = worker_latencies(model, plan, cluster, opts)?;
    let max = |f: fn(&WorkerLatencies) -> f64| per.iter().map(f).fold(0.0, f64::max);
    let rate = cluster.peak_flops.get(model.dense_precision) * cluster.mlp_efficiency;
    let b = plan.local_batch as f64;
    let (bot, top, inter) = dense_flops(model);
    let vols = volumes(model, plan, opts);
    let ar = |vs: &[CollectiveVolume]| -> f64 { vs.iter().map(|v| collective_time(v, 0, cluster)).sum() };
    let sparse_in: f64 = model.tables.iter().map(|t| t.avg_pooling * INDEX_BYTES + LENGTH_BYTES).sum();
    let dense_in = model.bottom_mlp.first().map_or(0.0, |l| l.input as f64 * DENSE_FEATURE_BYTES);
    Ok(ComponentLatencies {
        botmlp_fwd: b * bot / rate,
        emb_lookup: max(|w| w.emb_lookup),
        a2a_fwd: max(|w| w.a2a_fwd),
        interaction_fwd: b * inter / rate,
        topmlp_fwd: b * top / rate,
        topmlp_bwd: 2.0 * b * top / rate,
        interaction_bwd: 2.0 * b * inter / rate,
        a2a_bwd: max(|w| w.a2a_bwd),
        emb_update: max(|w| w.emb_update),
        botmlp_bwd: 2.0 * b * bot / rate,
        allreduce_top: ar(&vols.top),
        allreduce_bot: ar(&vols.bot),
        input_a2a: max(|w| w.input_a2a),
        h2d: b * (sparse_in + dense_in) / cluster.dram_to_gpu_bw,
    })
}
