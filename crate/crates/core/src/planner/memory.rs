use super::cost::{table_bytes, CompressionFlags};
use super::{Scheme, ShardingPlan};
use crate::model::{ClusterSpec, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryTier {
    Hbm,
    /// Spills into host DRAM behind the software row cache.
    HbmDramCache,
    Infeasible,
}

impl MemoryTier {
    pub fn name(self) -> &'static str {
        match self {
            MemoryTier::Hbm => "hbm",
            MemoryTier::HbmDramCache => "hbm+dram",
            MemoryTier::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerMemory {
    /// Table values plus optimizer state.
    pub embedding_bytes: u64,
    pub dense_bytes: u64,
    pub total_bytes: u64,
    pub tier: MemoryTier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub workers: Vec<WorkerMemory>,
    /// Every table counted once (replicas not multiplied), values plus state.
    pub embedding_bytes_total: u64,
    /// Dense parameters of one replica.
    pub dense_bytes: u64,
    pub feasible: bool,
}

/// Bytes each worker needs under `flags`, and which memory tier that puts it
/// in.
pub fn memory_check(
    plan: &ShardingPlan,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    flags: &CompressionFlags,
) -> MemoryReport {
    let w = plan.num_workers;
    let mut emb = vec![0u64; w];
    for (tp, spec) in plan.tables.iter().zip(&model.tables) {
        if tp.scheme == Scheme::DataParallel {
            let b = table_bytes(spec, flags);
            emb.iter_mut().for_each(|e| *e += b);
        } else {
            for s in &tp.shards {
                emb[s.worker] += flags.block_bytes(spec, s.rows.end - s.rows.start, s.cols.end - s.cols.start);
            }
        }
    }
    let dense = model.dense_param_bytes;
    let hbm = cluster.hbm_capacity_per_gpu;
    let all = cluster.worker_capacity();
    let workers: Vec<WorkerMemory> = emb
        .into_iter()
        .map(|e| {
            let total = e + dense;
            let tier = if total <= hbm {
                MemoryTier::Hbm
            } else if total <= all {
                MemoryTier::HbmDramCache
            } else {
                MemoryTier::Infeasible
            };
            WorkerMemory { embedding_bytes: e, dense_bytes: dense, total_bytes: total, tier }
        })
        .collect();
    MemoryReport {
        feasible: workers.iter().all(|m| m.tier != MemoryTier::Infeasible),
        embedding_bytes_total: model.tables.iter().map(|t| table_bytes(t, flags)).sum(),
        dense_bytes: dense,
        workers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::cluster;
    use crate::model::TableSpec;
    use crate::planner::{plan_with_schemes, CostWeights};

    #[test]
    fn trillion_parameter_accounting() {
        // 12e12 parameters of dim 256.
        let mut tables: Vec<TableSpec> =
            (0..4).map(|i| TableSpec::new(format!("big{i}"), 11_500_000_000, 256, 20.0)).collect();
        tables.extend((0..8).map(|i| TableSpec::new(format!("small{i}"), 109_375_000, 256, 20.0)));
        let m = ModelSpec::with_tables("f", 512, tables);
        assert_eq!(m.embedding_params(), 12_000_000_000_000);
        let c = cluster(16, 8);
        let schemes: Vec<Scheme> = m
            .tables
            .iter()
            .map(|t| if t.num_rows > 1_000_000_000 { Scheme::RowWise(27) } else { Scheme::TableWise })
            .collect();
        let p = plan_with_schemes(&m, &c, &CostWeights::default(), &CompressionFlags::compressed(), &schemes).unwrap();
        let naive = memory_check(&p, &m, &c, &CompressionFlags::naive_fp32());
        assert_eq!(naive.embedding_bytes_total, 96_000_000_000_000);
        assert!(!naive.feasible);
        let packed = memory_check(&p, &m, &c, &CompressionFlags::compressed());
        assert_eq!(packed.embedding_bytes_total, 24_000_000_000_000 + 12_000_000_000_000 / 256 * 4);
        assert!(packed.feasible);
    }

    #[test]
    fn empty_model_is_zero() {
        let m = ModelSpec::empty("e", 8);
        let c = cluster(1, 2);
        let p = plan_with_schemes(&m, &c, &CostWeights::default(), &CompressionFlags::default(), &[]).unwrap();
        let r = memory_check(&p, &m, &c, &CompressionFlags::default());
        assert_eq!(r.embedding_bytes_total, 0);
        assert!(r.workers.iter().all(|w| w.total_bytes == 0 && w.tier == MemoryTier::Hbm));
    }

    #[test]
    fn replicas_count_on_every_worker() {
        let m = ModelSpec::with_tables("m", 8, vec![TableSpec::new("t", 10, 4, 1.0)]);
        let c = cluster(1, 3);
        let p =
            plan_with_schemes(&m, &c, &CostWeights::default(), &CompressionFlags::default(), &[Scheme::DataParallel])
                .unwrap();
        let r = memory_check(&p, &m, &c, &CompressionFlags::default());
        assert!(r.workers.iter().all(|w| w.embedding_bytes == 10 * 4 * 4 + 40));
        assert_eq!(r.embedding_bytes_total, 200);
    }

    #[test]
    fn tiers() {
        let c = cluster(1, 1);
        let m = ModelSpec::with_tables("m", 8, vec![TableSpec::new("t", 5_000_000_000, 4, 1.0)]);
        let p = plan_with_schemes(&m, &c, &CostWeights::default(), &CompressionFlags::default(), &[Scheme::TableWise])
            .unwrap();
        // 5e9 × (16 + 4) = 100 GB: past HBM, inside HBM + DRAM.
        assert_eq!(memory_check(&p, &m, &c, &CompressionFlags::default()).workers[0].tier, MemoryTier::HbmDramCache);
    }
}
