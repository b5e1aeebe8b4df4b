use std::collections::BTreeMap;
use std::path::Path;

use neosim::cache::{effective_row_bandwidth, parse_trace, simulate_trace, CacheConfig, Policy};
use neosim::comms::{
    quantized_volume, reference_state, train_step_sharded, volume_forward_alltoall, volume_gradient_collectives,
    volume_input_alltoall, volume_report_json, CollectiveVolume,
};
use neosim::engine::{train_step_reference, EmbeddingTable, Loss, OptimizerConfig, OptimizerKind};
use neosim::model::{
    gen_synthetic_batch, parse_cluster_spec, parse_model_spec, BandwidthPoint, ClusterSpec, GlobalBatch, ModelSpec,
    NumericFormat, PeakFlops, Precision,
};
use neosim::perf::{
    component_latencies, effective_performance, exposed_breakdown, iteration_latency, scaling_sweep,
    ComponentLatencies, PerfError, PerfEstimate, PerfOptions,
};
use neosim::planner::{
    memory_check, plan_4d, plan_from_json, plan_to_json, CandidatePolicy, CompressionFlags, CostWeights, Heuristic,
    MemoryReport, PlanError, ShardingPlan,
};
use neosim::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::manifest::Manifest;
use crate::output::{emit, ms, write_file, Report};
use crate::{CliError, Common, PerfKnobs, PlanKnobs};

/// Largest model `verify` will run, counting embedding and dense parameters.
const VERIFY_PARAM_LIMIT: u64 = 1_000_000;
const VERIFY_TOLERANCE: f64 = 1e-9;

fn plan_err(e: PlanError) -> CliError {
    match e {
        PlanError::Infeasible(m) => CliError::Infeasible(m),
        PlanError::NoFeasibleScheme(_) => CliError::Infeasible(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn perf_err(e: PerfError) -> CliError {
    match e {
        PerfError::Infeasible(m) => CliError::Infeasible(m),
        PerfError::Mismatch(m) => CliError::Input(m),
    }
}

fn load_model(m: &mut Manifest, path: &Path) -> Result<ModelSpec, CliError> {
    let text = m.read("model", path)?;
    parse_model_spec(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_cluster(m: &mut Manifest, path: &Path) -> Result<ClusterSpec, CliError> {
    let text = m.read("cluster", path)?;
    parse_cluster_spec(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn load_plan(m: &mut Manifest, path: &Path, model: &ModelSpec) -> Result<ShardingPlan, CliError> {
    let text = m.read("plan", path)?;
    let plan = plan_from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    plan.validate(model).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(plan)
}

fn flags(k: &PlanKnobs) -> Result<CompressionFlags, CliError> {
    let table_precision = match k.table_precision.as_deref() {
        None => None,
        Some("fp32") => Some(Precision::Fp32),
        Some("fp16") => Some(Precision::Fp16),
        Some(other) => return Err(CliError::Input(format!("--table-precision: unknown precision {other:?}"))),
    };
    Ok(CompressionFlags { table_precision, rowwise_state: !k.elementwise_state })
}

fn policy(k: &PlanKnobs) -> Result<(CostWeights, CandidatePolicy), CliError> {
    let parts: Vec<f64> = k
        .weights
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Input(format!("--weights {:?}: expected comm,load,latency", k.weights)))?;
    let [comm, load, latency] = parts[..] else {
        return Err(CliError::Input(format!("--weights {:?}: expected three numbers", k.weights)));
    };
    let weights = CostWeights::new(comm, load, latency).map_err(|e| CliError::Input(format!("--weights: {e}")))?;
    let heuristic = Heuristic::parse(&k.heuristic)
        .ok_or_else(|| CliError::Input(format!("--heuristic: unknown heuristic {:?}", k.heuristic)))?;
    if k.max_col_shards == 0 {
        return Err(CliError::Input("--max-col-shards must be >= 1".into()));
    }
    let policy = CandidatePolicy {
        dp_threshold_bytes: k.dp_threshold_bytes,
        finer_grain: k.finer_grain,
        max_col_shards: k.max_col_shards,
        flags: flags(k)?,
        heuristic,
    };
    Ok((weights, policy))
}

fn perf_options(p: &PerfKnobs, k: &PlanKnobs) -> Result<PerfOptions, CliError> {
    if !(0.0..=1.0).contains(&p.hit_rate) {
        return Err(CliError::Input(format!("--hit-rate {} outside [0, 1]", p.hit_rate)));
    }
    let fmt = |flag: &str, v: &Option<String>| -> Result<Option<NumericFormat>, CliError> {
        v.as_deref()
            .map(|s| NumericFormat::parse(s).ok_or_else(|| CliError::Input(format!("{flag}: unknown format {s:?}"))))
            .transpose()
    };
    Ok(PerfOptions {
        hit_rate: p.hit_rate,
        flags: flags(k)?,
        fwd_comm: fmt("--fwd-comm", &p.fwd_comm)?,
        bwd_comm: fmt("--bwd-comm", &p.bwd_comm)?,
    })
}

fn plan_or_load(
    m: &mut Manifest,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    plan: Option<&Path>,
    knobs: &PlanKnobs,
) -> Result<ShardingPlan, CliError> {
    match plan {
        Some(p) => load_plan(m, p, model),
        None => {
            let (w, pol) = policy(knobs)?;
            plan_4d(model, cluster, &w, &pol).map_err(plan_err)
        }
    }
}

fn scheme_counts(plan: &ShardingPlan) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for t in &plan.tables {
        *out.entry(t.scheme.to_string()).or_insert(0) += 1;
    }
    out
}

fn memory_json(mem: &MemoryReport) -> Value {
    json!({
        "feasible": mem.feasible,
        "embedding_bytes_total": mem.embedding_bytes_total,
        "dense_bytes": mem.dense_bytes,
        "workers": mem.workers.iter().enumerate().map(|(i, w)| json!({
            "worker": i,
            "embedding_bytes": w.embedding_bytes,
            "total_bytes": w.total_bytes,
            "tier": w.tier.name(),
        })).collect::<Vec<_>>(),
    })
}

pub fn plan(model: &Path, cluster: &Path, knobs: &PlanKnobs, common: &Common) -> Result<(), CliError> {
    let mut man = Manifest::new("plan", common.seed);
    let model = load_model(&mut man, model)?;
    let cluster = load_cluster(&mut man, cluster)?;
    let (weights, pol) = policy(knobs)?;
    let plan = plan_4d(&model, &cluster, &weights, &pol).map_err(plan_err)?;
    let mem = memory_check(&plan, &model, &cluster, &pol.flags);
    let mut shards = vec![0usize; plan.num_workers];
    for t in &plan.tables {
        for s in &t.shards {
            shards[s.worker] += 1;
        }
    }
    let header = ["worker", "node", "shards", "load", "comm_bytes", "inter_node_bytes", "memory_bytes", "tier"];
    let mut csv = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut workers = Vec::new();
    let mut summary = format!(
        "{} tables on {} workers ({} per node), global batch {}\n",
        plan.tables.len(),
        plan.num_workers,
        plan.gpus_per_node,
        plan.global_batch()
    );
    for (s, n) in scheme_counts(&plan) {
        summary += &format!("  {s:>8}: {n}\n");
    }
    summary += &format!(
        "{:>6} {:>4} {:>6} {:>12} {:>14} {:>14} {:>14}  tier\n",
        "worker", "node", "shards", "load", "comm_bytes", "inter_bytes", "memory_bytes"
    );
    for (i, w) in plan.workers.iter().enumerate() {
        let tier = mem.workers[i].tier.name();
        let node = i / plan.gpus_per_node;
        workers.push(json!({
            "worker": i,
            "node": node,
            "shards": shards[i],
            "load": w.load,
            "comm_bytes": w.comm_bytes,
            "inter_node_bytes": w.inter_node_bytes,
            "memory_bytes": mem.workers[i].total_bytes,
            "tier": tier,
        }));
        csv.push(vec![
            i.to_string(),
            node.to_string(),
            shards[i].to_string(),
            w.load.to_string(),
            w.comm_bytes.to_string(),
            w.inter_node_bytes.to_string(),
            mem.workers[i].total_bytes.to_string(),
            tier.to_string(),
        ]);
        summary += &format!(
            "{i:>6} {node:>4} {:>6} {:>12.4e} {:>14.4e} {:>14.4e} {:>14}  {tier}\n",
            shards[i], w.load, w.comm_bytes, w.inter_node_bytes, mem.workers[i].total_bytes
        );
    }
    let plan_json = plan_to_json(&plan);
    let report = Report {
        name: "plan_report",
        body: json!({
            "model": model.name,
            "cluster": cluster.name,
            "workers": plan.num_workers,
            "global_batch": plan.global_batch(),
            "schemes": scheme_counts(&plan),
            "memory_feasible": mem.feasible,
            "worker_summary": workers,
            "plan": plan_json,
        }),
        csv,
        summary,
    };
    if let Some(dir) = &common.out {
        let text = serde_json::to_string_pretty(&plan_json).expect("json values serialize") + "\n";
        write_file(&dir.join("plan.json"), &text)?;
    }
    emit(&report, &man, common.format, &common.out)
}

/// Every collective of one step, with quantization applied.
fn all_volumes(model: &ModelSpec, plan: &ShardingPlan, opts: &PerfOptions) -> Vec<CollectiveVolume> {
    let elem = model.dense_precision.bytes();
    let f = opts.fwd_comm.unwrap_or(model.dense_precision);
    let b = opts.bwd_comm.unwrap_or(model.dense_precision);
    let mut v = vec![volume_input_alltoall(plan, model), volume_forward_alltoall(plan, model, elem)];
    v.extend(volume_gradient_collectives(plan, model, elem));
    v.iter().map(|x| quantized_volume(x, f, b)).collect()
}

fn components_json(e: &PerfEstimate) -> Value {
    let exposed = exposed_breakdown(&e.components).to_array();
    Value::Array(
        ComponentLatencies::NAMES
            .iter()
            .zip(e.components.to_array())
            .zip(exposed)
            .map(|((n, s), x)| json!({"name": n, "serialized_ms": ms(s), "exposed_ms": ms(x)}))
            .collect(),
    )
}

fn options_json(o: &PerfOptions) -> Value {
    json!({
        "hit_rate": o.hit_rate,
        "fwd_comm": o.fwd_comm.map(|f| f.name()),
        "bwd_comm": o.bwd_comm.map(|f| f.name()),
        "table_precision": o.flags.table_precision.map(|p| p.name()),
        "rowwise_state": o.flags.rowwise_state,
    })
}

fn row(kind: &str, name: &str, value: f64, unit: &str) -> Vec<String> {
    vec![kind.to_string(), name.to_string(), value.to_string(), unit.to_string()]
}

pub fn simulate(
    model: &Path,
    cluster: &Path,
    plan: Option<&Path>,
    knobs: &PlanKnobs,
    perf: &PerfKnobs,
    common: &Common,
) -> Result<(), CliError> {
    let mut man = Manifest::new("simulate", common.seed);
    let model = load_model(&mut man, model)?;
    let cluster = load_cluster(&mut man, cluster)?;
    let opts = perf_options(perf, knobs)?;
    let plan = plan_or_load(&mut man, &model, &cluster, plan, knobs)?;
    let comps = component_latencies(&model, &plan, &cluster, &opts).map_err(perf_err)?;
    let e = iteration_latency(&comps, plan.global_batch());
    let vols = all_volumes(&model, &plan, &opts);
    let tflops = effective_performance(model.mflops_per_sample, e.qps) / 1e12;

    let mut csv = vec![vec!["kind".to_string(), "name".into(), "value".into(), "unit".into()]];
    let exposed = exposed_breakdown(&comps).to_array();
    for ((n, s), x) in ComponentLatencies::NAMES.iter().zip(comps.to_array()).zip(exposed) {
        csv.push(row("serialized", n, ms(s), "ms"));
        csv.push(row("exposed", n, ms(x), "ms"));
    }
    for v in &vols {
        csv.push(row("volume_max", v.label, v.max_bytes(), "bytes"));
        csv.push(row("volume_total", v.label, v.total_bytes(), "bytes"));
    }
    for (n, s) in [
        ("t_fwd", e.t_fwd),
        ("t_bwd", e.t_bwd),
        ("t_total", e.t_total),
        ("serialized_total", e.serialized_total),
        ("exposed_comm", e.exposed_comm),
    ] {
        csv.push(row("total", n, ms(s), "ms"));
    }
    csv.push(row("throughput", "qps", e.qps, "samples/s"));
    csv.push(row("throughput", "effective_tflops", tflops, "TFLOP/s"));

    let summary = format!(
        "{} on {} workers, global batch {}\n  t_fwd {:.3} ms, t_bwd {:.3} ms, t_total {:.3} ms\n  {:.4e} samples/s, {:.1} TFLOP/s effective\n  exposed communication {:.3} ms of {:.3} ms serialized\n",
        model.name,
        plan.num_workers,
        plan.global_batch(),
        ms(e.t_fwd),
        ms(e.t_bwd),
        ms(e.t_total),
        e.qps,
        tflops,
        ms(e.exposed_comm),
        ms(e.serialized_total)
    );
    let report = Report {
        name: "simulate",
        body: json!({
            "model": model.name,
            "cluster": cluster.name,
            "workers": plan.num_workers,
            "global_batch": plan.global_batch(),
            "options": options_json(&opts),
            "components": components_json(&e),
            "t_fwd_ms": ms(e.t_fwd),
            "t_bwd_ms": ms(e.t_bwd),
            "t_total_ms": ms(e.t_total),
            "serialized_total_ms": ms(e.serialized_total),
            "exposed_comm_ms": ms(e.exposed_comm),
            "qps": e.qps,
            "effective_tflops": tflops,
            "volumes": volume_report_json(&vols),
        }),
        csv,
        summary,
    };
    emit(&report, &man, common.format, &common.out)
}

pub fn sweep(
    model: &Path,
    cluster: &Path,
    nodes: &[usize],
    knobs: &PlanKnobs,
    perf: &PerfKnobs,
    common: &Common,
) -> Result<(), CliError> {
    let mut man = Manifest::new("sweep", common.seed);
    let model = load_model(&mut man, model)?;
    let cluster = load_cluster(&mut man, cluster)?;
    if nodes.is_empty() || nodes.contains(&0) || nodes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::Input(format!("--nodes {nodes:?}: expected ascending positive counts")));
    }
    let (weights, pol) = policy(knobs)?;
    let opts = perf_options(perf, knobs)?;
    let entries = scaling_sweep(&model, &cluster, nodes, &weights, &pol, &opts);

    let header = ["nodes", "workers", "global_batch", "qps", "efficiency", "t_total_ms", "exposed_comm_ms", "status"];
    let mut csv = vec![header.iter().map(|s| s.to_string()).collect::<Vec<_>>()];
    let mut summary = format!("{:>6} {:>8} {:>12} {:>14} {:>10}\n", "nodes", "workers", "batch", "qps", "efficiency");
    let mut body = Vec::new();
    for s in &entries {
        match &s.estimate {
            Ok(e) => {
                let eff = s.efficiency.unwrap_or(f64::NAN);
                csv.push(vec![
                    s.nodes.to_string(),
                    s.workers.to_string(),
                    s.global_batch.to_string(),
                    e.qps.to_string(),
                    s.efficiency.map_or(String::new(), |x| x.to_string()),
                    ms(e.t_total).to_string(),
                    ms(e.exposed_comm).to_string(),
                    "ok".into(),
                ]);
                summary +=
                    &format!("{:>6} {:>8} {:>12} {:>14.4e} {:>10.4}\n", s.nodes, s.workers, s.global_batch, e.qps, eff);
                body.push(json!({
                    "nodes": s.nodes,
                    "workers": s.workers,
                    "global_batch": s.global_batch,
                    "qps": e.qps,
                    "efficiency": s.efficiency,
                    "t_fwd_ms": ms(e.t_fwd),
                    "t_bwd_ms": ms(e.t_bwd),
                    "t_total_ms": ms(e.t_total),
                    "serialized_total_ms": ms(e.serialized_total),
                    "exposed_comm_ms": ms(e.exposed_comm),
                    "components": components_json(e),
                }));
            }
            Err(reason) => {
                csv.push(vec![
                    s.nodes.to_string(),
                    s.workers.to_string(),
                    s.global_batch.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    format!("infeasible: {reason}"),
                ]);
                summary += &format!("{:>6} {:>8} {:>12}  infeasible: {reason}\n", s.nodes, s.workers, s.global_batch);
                body.push(json!({
                    "nodes": s.nodes,
                    "workers": s.workers,
                    "global_batch": s.global_batch,
                    "error": reason,
                }));
            }
        }
    }
    let report = Report {
        name: "sweep",
        body: json!({ "model": model.name, "cluster": cluster.name, "options": options_json(&opts), "entries": body }),
        csv,
        summary,
    };
    emit(&report, &man, common.format, &common.out)
}

/// One node holding `workers` roomy devices, for verification runs that
/// only need a shape.
fn desk_cluster(workers: usize) -> ClusterSpec {
    ClusterSpec {
        name: format!("desk-1x{workers}"),
        num_nodes: 1,
        gpus_per_node: workers,
        hbm_capacity_per_gpu: 1 << 30,
        hbm_bw: 1e11,
        dram_capacity_per_node: 1 << 32,
        dram_to_gpu_bw: 1e10,
        scaleup_bw: 5e10,
        scaleup_efficiency: 1.0,
        scaleout_bw_per_gpu: 1e10,
        peak_flops: PeakFlops { fp32: 1e12, tf32: 1e12, fp16: 2e12, bf16: 2e12 },
        mlp_efficiency: 0.5,
        alltoall_bw_points: vec![BandwidthPoint::new(1 << 28, 5e9)],
        allreduce_bw_points: vec![BandwidthPoint::new(1 << 28, 1e10)],
        fixed_latency_per_collective: 20e-6,
    }
}

fn max_abs(a: impl IntoIterator<Item = f64>, b: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
pub fn verify(
    model: &Path,
    plan: Option<&Path>,
    cluster: Option<&Path>,
    workers: Option<usize>,
    optimizer: &str,
    lr: f64,
    eps: f64,
    common: &Common,
) -> Result<(), CliError> {
    let mut man = Manifest::new("verify", common.seed);
    let model = load_model(&mut man, model)?;
    let params =
        model.embedding_params() + model.bottom_mlp.iter().chain(&model.top_mlp).map(|l| l.params()).sum::<u64>();
    if params > VERIFY_PARAM_LIMIT {
        return Err(CliError::Input(format!(
            "{} has {params} parameters; verify runs desk-scale models of at most {VERIFY_PARAM_LIMIT}",
            model.name
        )));
    }
    let kind = OptimizerKind::parse(optimizer)
        .ok_or_else(|| CliError::Input(format!("--optimizer: unknown optimizer {optimizer:?}")))?;
    let cfg = OptimizerConfig { kind, lr, eps };
    cfg.validate().map_err(|e| CliError::Input(format!("optimizer: {e}")))?;
    let plan = match (plan, cluster) {
        (Some(p), _) => load_plan(&mut man, p, &model)?,
        (None, c) => {
            let cluster = match c {
                Some(c) => load_cluster(&mut man, c)?,
                None => desk_cluster(workers.unwrap_or(1)),
            };
            plan_4d(&model, &cluster, &CostWeights::default(), &CandidatePolicy::default()).map_err(plan_err)?
        }
    };
    let w = plan.num_workers;
    let seed = common.seed;
    let tables: Vec<EmbeddingTable<f64>> = model
        .tables
        .iter()
        .enumerate()
        .map(|(i, s)| EmbeddingTable::random(s.clone(), kind, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect();
    let samples = w * model.local_batch;
    let batch = GlobalBatch::split(&gen_synthetic_batch(&model, samples, seed), w)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1055);
    let loss = Loss::Weighted(
        model
            .tables
            .iter()
            .map(|t| Matrix::from_shape_simple_fn((samples, t.dim), || rng.random::<f64>() - 0.5))
            .collect(),
    );
    let got = train_step_sharded(&tables, &plan, &batch, &cfg, &loss).map_err(|e| CliError::Input(e.to_string()))?;
    let start = reference_state(&tables, &plan).map_err(|e| CliError::Input(e.to_string()))?;
    let want =
        train_step_reference(&start, &batch.to_combined(), &cfg, &loss).map_err(|e| CliError::Input(e.to_string()))?;

    let bitwise = w == 1 || kind == OptimizerKind::Sgd;
    let (mut worst_weights, mut worst_pooled) = (0.0f64, 0.0f64);
    let mut rows = Vec::new();
    let mut csv =
        vec![["table", "scheme", "value_deviation", "moment_deviation", "pooled_deviation"].map(String::from).to_vec()];
    for (i, tp) in plan.tables.iter().enumerate() {
        let v = max_abs(got.tables[i].values.iter().copied(), want.tables[i].values.iter().copied());
        let m = max_abs(got.tables[i].moment.values(), want.tables[i].moment.values());
        let p = max_abs(got.pooled[i].iter().copied(), want.pooled[i].iter().copied());
        worst_weights = worst_weights.max(v).max(m);
        worst_pooled = worst_pooled.max(p);
        rows.push(json!({
            "table": tp.table_id,
            "scheme": tp.scheme.to_string(),
            "value_deviation": v,
            "moment_deviation": m,
            "pooled_deviation": p,
        }));
        csv.push(vec![tp.table_id.clone(), tp.scheme.to_string(), v.to_string(), m.to_string(), p.to_string()]);
    }
    // Row-split partial sums reach the pooled output in a different order, so
    // only weights are held to bitwise equality.
    let worst = worst_weights.max(worst_pooled);
    let pass = worst_pooled <= VERIFY_TOLERANCE
        && if bitwise { worst_weights == 0.0 } else { worst_weights <= VERIFY_TOLERANCE };
    let mode = if bitwise { "bitwise" } else { "tolerance" };
    let summary = format!(
        "{} tables on {w} workers, {optimizer}, {mode} mode: max abs deviation {worst:e} -> {}\n",
        plan.tables.len(),
        if pass { "pass" } else { "FAIL" }
    );
    let report = Report {
        name: "verify",
        body: json!({
            "model": model.name,
            "workers": w,
            "samples": samples,
            "optimizer": optimizer,
            "lr": lr,
            "mode": mode,
            "weight_tolerance": if bitwise { 0.0 } else { VERIFY_TOLERANCE },
            "pooled_tolerance": VERIFY_TOLERANCE,
            "max_abs_deviation": worst,
            "max_weight_deviation": worst_weights,
            "max_pooled_deviation": worst_pooled,
            "tables": rows,
            "pass": pass,
        }),
        csv,
        summary,
    };
    emit(&report, &man, common.format, &common.out)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(format!(
            "weight deviation {worst_weights:e}, pooled deviation {worst_pooled:e} in {mode} mode"
        )))
    }
}

pub fn cache(
    trace: &Path,
    sets: usize,
    ways: usize,
    policies: &[String],
    bandwidth: Option<(f64, f64)>,
    common: &Common,
) -> Result<(), CliError> {
    let mut man = Manifest::new("cache", common.seed);
    let text = man.read("trace", trace)?;
    let ids = parse_trace(&text).map_err(|e| CliError::Input(format!("{}: {e}", trace.display())))?;
    if let Some((h, d)) = bandwidth {
        if !(h > 0.0 && d > 0.0 && d <= h) {
            return Err(CliError::Input("--hbm-bw and --dram-bw must be positive with dram <= hbm".into()));
        }
    }
    let mut csv =
        vec![["policy", "sets", "ways", "capacity_rows", "accesses", "hits", "misses", "evictions", "hit_rate"]
            .map(String::from)
            .to_vec()];
    let mut runs = Vec::new();
    let mut summary = String::new();
    for p in policies {
        let policy = Policy::parse(p).ok_or_else(|| CliError::Input(format!("--policy: unknown policy {p:?}")))?;
        let cfg = CacheConfig::new(sets, ways, policy).map_err(|e| CliError::Input(e.to_string()))?;
        let s = simulate_trace(cfg, &ids).map_err(|e| CliError::Input(e.to_string()))?;
        let bw = bandwidth.map(|(h, d)| effective_row_bandwidth(s.hit_rate, h, d));
        csv.push(vec![
            policy.name().to_string(),
            sets.to_string(),
            ways.to_string(),
            cfg.capacity().to_string(),
            s.accesses.to_string(),
            s.hits.to_string(),
            s.misses.to_string(),
            s.evictions.to_string(),
            s.hit_rate.to_string(),
        ]);
        summary += &format!(
            "{}: {} accesses, {} hits, {} misses, {} evictions, hit rate {:.4}\n",
            policy.name(),
            s.accesses,
            s.hits,
            s.misses,
            s.evictions,
            s.hit_rate
        );
        runs.push(json!({
            "policy": policy.name(),
            "sets": sets,
            "ways": ways,
            "capacity_rows": cfg.capacity(),
            "accesses": s.accesses,
            "hits": s.hits,
            "misses": s.misses,
            "evictions": s.evictions,
            "hit_rate": s.hit_rate,
            "effective_row_bandwidth": bw,
        }));
    }
    let report = Report { name: "cache", body: json!({ "runs": runs }), csv, summary };
    emit(&report, &man, common.format, &common.out)
}

pub fn report(
    model: &Path,
    cluster: &Path,
    plan: Option<&Path>,
    knobs: &PlanKnobs,
    perf: &PerfKnobs,
    common: &Common,
) -> Result<(), CliError> {
    let mut man = Manifest::new("report", common.seed);
    let model = load_model(&mut man, model)?;
    let cluster = load_cluster(&mut man, cluster)?;
    let opts = perf_options(perf, knobs)?;
    let plan = plan_or_load(&mut man, &model, &cluster, plan, knobs)?;
    let mem = memory_check(&plan, &model, &cluster, &opts.flags);
    let vols = all_volumes(&model, &plan, &opts);
    let mut csv = vec![vec!["kind".to_string(), "name".into(), "value".into(), "unit".into()]];
    for (i, w) in mem.workers.iter().enumerate() {
        csv.push(row("memory", &format!("worker{i}"), w.total_bytes as f64, "bytes"));
    }
    for v in &vols {
        csv.push(row("volume_max", v.label, v.max_bytes(), "bytes"));
        csv.push(row("volume_total", v.label, v.total_bytes(), "bytes"));
    }
    let mut summary = format!(
        "{} on {} workers: embeddings {:.4e} bytes, memory {}\n",
        model.name,
        plan.num_workers,
        mem.embedding_bytes_total as f64,
        if mem.feasible { "feasible" } else { "infeasible" }
    );
    for v in &vols {
        summary += &format!("  {:<24} {:>14} max {:>12.4e} B/worker\n", v.label, v.kind.name(), v.max_bytes());
    }
    let report = Report {
        name: "report",
        body: json!({
            "model": model.name,
            "cluster": cluster.name,
            "workers": plan.num_workers,
            "options": options_json(&opts),
            "memory": memory_json(&mem),
            "volumes": volume_report_json(&vols),
        }),
        csv,
        summary,
    };
    emit(&report, &man, common.format, &common.out)
}
