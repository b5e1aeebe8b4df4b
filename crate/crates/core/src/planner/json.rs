use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{CostWeights, Heuristic, PlanError, Scheme, ShardPlacement, ShardingPlan, TablePlan, WorkerSummary};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanDoc {
    spec_version: u32,
    num_workers: usize,
    gpus_per_node: usize,
    local_batch: usize,
    heuristic: String,
    weights: WeightsDoc,
    tables: Vec<TableDoc>,
    #[serde(default)]
    workers: Vec<WorkerDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsDoc {
    comm: f64,
    load: f64,
    latency: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    table_id: String,
    scheme: String,
    shards: Vec<ShardDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ShardDoc {
    rows: [u64; 2],
    cols: [usize; 2],
    worker: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkerDoc {
    worker: usize,
    load: f64,
    comm_bytes: f64,
    inter_node_bytes: f64,
    fixed_latency: f64,
    memory_bytes: u64,
    objective: f64,
}

pub fn plan_to_json(plan: &ShardingPlan) -> Value {
    let doc = PlanDoc {
        spec_version: 1,
        num_workers: plan.num_workers,
        gpus_per_node: plan.gpus_per_node,
        local_batch: plan.local_batch,
        heuristic: plan.heuristic.name().into(),
        weights: WeightsDoc { comm: plan.weights.comm, load: plan.weights.load, latency: plan.weights.latency },
        tables: plan
            .tables
            .iter()
            .map(|t| TableDoc {
                table_id: t.table_id.clone(),
                scheme: t.scheme.to_string(),
                shards: t
                    .shards
                    .iter()
                    .map(|s| ShardDoc {
                        rows: [s.rows.start, s.rows.end],
                        cols: [s.cols.start, s.cols.end],
                        worker: s.worker,
                    })
                    .collect(),
            })
            .collect(),
        workers: plan
            .workers
            .iter()
            .enumerate()
            .map(|(i, w)| WorkerDoc {
                worker: i,
                load: w.load,
                comm_bytes: w.comm_bytes,
                inter_node_bytes: w.inter_node_bytes,
                fixed_latency: w.fixed_latency,
                memory_bytes: w.memory_bytes,
                objective: w.objective,
            })
            .collect(),
    };
    serde_json::to_value(doc).expect("plan documents serialize")
}

/// Parses a plan document. Structural checks against a model are left to
/// [`ShardingPlan::validate`].
pub fn plan_from_json(text: &str) -> Result<ShardingPlan, PlanError> {
    let doc: PlanDoc = serde_json::from_str(text).map_err(|e| PlanError::InvalidPlan(e.to_string()))?;
    if doc.spec_version != 1 {
        return Err(PlanError::InvalidPlan(format!("unsupported spec_version {}", doc.spec_version)));
    }
    let heuristic = Heuristic::parse(&doc.heuristic)
        .ok_or_else(|| PlanError::InvalidPlan(format!("unknown heuristic {:?}", doc.heuristic)))?;
    let weights =
        CostWeights::new(doc.weights.comm, doc.weights.load, doc.weights.latency).map_err(PlanError::InvalidPlan)?;
    let tables = doc
        .tables
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let scheme = Scheme::parse(&t.scheme).ok_or_else(|| {
                PlanError::InvalidPlan(format!("$.tables[{i}].scheme: unknown scheme {:?}", t.scheme))
            })?;
            Ok(TablePlan {
                table_id: t.table_id,
                scheme,
                shards: t
                    .shards
                    .into_iter()
                    .map(|s| ShardPlacement {
                        rows: s.rows[0]..s.rows[1],
                        cols: s.cols[0]..s.cols[1],
                        worker: s.worker,
                    })
                    .collect(),
            })
        })
        .collect::<Result<_, PlanError>>()?;
    let mut workers = vec![WorkerSummary::default(); doc.num_workers];
    for w in doc.workers {
        let slot = workers
            .get_mut(w.worker)
            .ok_or_else(|| PlanError::InvalidPlan(format!("worker summary {} out of range", w.worker)))?;
        *slot = WorkerSummary {
            load: w.load,
            comm_bytes: w.comm_bytes,
            inter_node_bytes: w.inter_node_bytes,
            fixed_latency: w.fixed_latency,
            memory_bytes: w.memory_bytes,
            objective: w.objective,
        };
    }
    Ok(ShardingPlan {
        num_workers: doc.num_workers,
        gpus_per_node: doc.gpus_per_node,
        local_batch: doc.local_batch,
        heuristic,
        weights,
        tables,
        workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::cluster;
    use crate::model::{ModelSpec, TableSpec};
    use crate::planner::{plan_4d, CandidatePolicy};

    #[test]
    fn roundtrip() {
        let tables = (0..6).map(|i| TableSpec::new(format!("t{i}"), 1000 * (i + 1), 16, 3.0)).collect();
        let m = ModelSpec::with_tables("m", 32, tables);
        let pol = CandidatePolicy { finer_grain: true, ..Default::default() };
        let p = plan_4d(&m, &cluster(1, 4), &CostWeights::default(), &pol).unwrap();
        let text = serde_json::to_string_pretty(&plan_to_json(&p)).unwrap();
        let back = plan_from_json(&text).unwrap();
        assert_eq!(back, p);
        back.validate(&m).unwrap();
    }

    #[test]
    fn gaps_are_caught() {
        let m = ModelSpec::with_tables("m", 4, vec![TableSpec::new("t", 100, 8, 1.0)]);
        let text = r#"{"spec_version":1,"num_workers":2,"gpus_per_node":2,"local_batch":4,"heuristic":"kk",
            "weights":{"comm":1,"load":1,"latency":1},
            "tables":[{"table_id":"t","scheme":"RW:2","shards":[
                {"rows":[0,40],"cols":[0,8],"worker":0},{"rows":[50,100],"cols":[0,8],"worker":1}]}]}"#;
        let p = plan_from_json(text).unwrap();
        let err = p.validate(&m).unwrap_err().to_string();
        assert!(err.contains("gap"), "{err}");
        assert!(plan_from_json(&text.replace("RW:2", "ZZ")).is_err());
        assert!(plan_from_json(&text.replace("\"heuristic\"", "\"bogus\":1,\"heuristic\"")).is_err());
    }
}
