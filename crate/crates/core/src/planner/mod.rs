//! Embedding sharding: per-table scheme choice, shard costs, and placement
//! of shards onto workers.

mod cost;
mod json;
mod memory;
mod partition;
mod plan;

pub use cost::{shard_cost, shard_costs, table_bytes, CompressionFlags, Normalizer, ShardCost};
pub use json::{plan_from_json, plan_to_json};
pub use memory::{memory_check, MemoryReport, MemoryTier, WorkerMemory};
pub use partition::{bin_sums, greedy_partition, imbalance, karmarkar_karp_partition};
pub use plan::{enumerate_candidates, evaluate_plan, hierarchical_plan, plan_4d, plan_with_schemes, CandidatePolicy};

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::model::{ClusterSpec, ModelSpec, TableSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid scheme for table {table}: {reason}")]
    InvalidScheme { table: String, reason: String },
    #[error("no feasible scheme for table {0}: it exceeds total cluster memory")]
    NoFeasibleScheme(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// Rows and columns one shard covers.
pub type ShardRange = (Range<u64>, Range<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scheme {
    TableWise,
    RowWise(usize),
    /// Equal-width column slices.
    ColumnWise(usize),
    DataParallel,
    /// Table-wise onto one node, then row-wise across that node's GPUs.
    Hierarchical(usize),
}

impl Scheme {
    pub fn num_shards(self) -> usize {
        match self {
            Scheme::TableWise => 1,
            Scheme::RowWise(n) | Scheme::ColumnWise(n) | Scheme::Hierarchical(n) => n,
            Scheme::DataParallel => 0,
        }
    }

    pub fn is_row_split(self) -> bool {
        matches!(self, Scheme::RowWise(_) | Scheme::Hierarchical(_))
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        let (head, n) = match s.split_once(':') {
            Some((h, n)) => (h, Some(n.parse().ok()?)),
            None => (s, None),
        };
        match (head, n) {
            ("TW", None) => Some(Scheme::TableWise),
            ("DP", None) => Some(Scheme::DataParallel),
            ("RW", Some(n)) if n >= 1 => Some(Scheme::RowWise(n)),
            ("CW", Some(n)) if n >= 1 => Some(Scheme::ColumnWise(n)),
            ("TWRW", Some(n)) if n >= 1 => Some(Scheme::Hierarchical(n)),
            _ => None,
        }
    }

    /// Row and column ranges of each shard, in shard order.
    pub fn shard_ranges(self, table: &TableSpec) -> Result<Vec<ShardRange>, PlanError> {
        let bad = |reason: String| PlanError::InvalidScheme { table: table.id.clone(), reason };
        let h = table.num_rows;
        let d = table.dim;
        match self {
            Scheme::TableWise => Ok(vec![(0..h, 0..d)]),
            Scheme::DataParallel => Ok(Vec::new()),
            Scheme::RowWise(n) | Scheme::Hierarchical(n) => {
                if n == 0 || n as u64 > h {
                    return Err(bad(format!("{n} row shards for {h} rows")));
                }
                Ok(row_bounds(h, n).into_iter().map(|r| (r, 0..d)).collect())
            }
            Scheme::ColumnWise(k) => {
                if k == 0 || !d.is_multiple_of(k) || d / k < 4 {
                    return Err(bad(format!("{k} column shards of dim {d} (need equal slices of width >= 4)")));
                }
                let w = d / k;
                Ok((0..k).map(|j| (0..h, j * w..(j + 1) * w)).collect())
            }
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::TableWise => write!(f, "TW"),
            Scheme::DataParallel => write!(f, "DP"),
            Scheme::RowWise(n) => write!(f, "RW:{n}"),
            Scheme::ColumnWise(n) => write!(f, "CW:{n}"),
            Scheme::Hierarchical(n) => write!(f, "TWRW:{n}"),
        }
    }
}

/// `n` contiguous row ranges covering `[0, h)`, sizes differing by at most one.
pub fn row_bounds(h: u64, n: usize) -> Vec<Range<u64>> {
    let n64 = n as u64;
    let at = |j: u64| ((h as u128 * j as u128) / n64 as u128) as u64;
    (0..n64).map(|j| at(j)..at(j + 1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub comm: f64,
    pub load: f64,
    pub latency: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { comm: 1.0, load: 1.0, latency: 1.0 }
    }
}

impl CostWeights {
    pub fn new(comm: f64, load: f64, latency: f64) -> Result<Self, String> {
        let w = Self { comm, load, latency };
        w.validate()?;
        Ok(w)
    }

    /// `"w_comm,w_load,w_lat"`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad weight {p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [c, l, t] => Self::new(c, l, t),
            _ => Err(format!("expected three comma-separated weights, got {}", parts.len())),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.comm, self.load, self.latency];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err("weights must be finite and >= 0".into());
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err("weights must not all be zero".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Heuristic {
    Greedy,
    KarmarkarKarp,
}

impl Heuristic {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Some(Heuristic::Greedy),
            "kk" | "karmarkar-karp" | "karmarkar_karp" => Some(Heuristic::KarmarkarKarp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Heuristic::Greedy => "greedy",
            Heuristic::KarmarkarKarp => "kk",
        }
    }

    pub fn partition(self, items: &[(usize, f64)], k: usize) -> Vec<usize> {
        match self {
            Heuristic::Greedy => greedy_partition(items, k),
            Heuristic::KarmarkarKarp => karmarkar_karp_partition(items, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlacement {
    pub rows: Range<u64>,
    pub cols: Range<usize>,
    pub worker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TablePlan {
    pub table_id: String,
    pub scheme: Scheme,
    /// Empty for data-parallel tables, which live on every worker.
    pub shards: Vec<ShardPlacement>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WorkerSummary {
    pub load: f64,
    pub comm_bytes: f64,
    pub inter_node_bytes: f64,
    pub fixed_latency: f64,
    pub memory_bytes: u64,
    /// Weighted, normalized cost the planner balanced.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardingPlan {
    pub num_workers: usize,
    pub gpus_per_node: usize,
    pub local_batch: usize,
    pub heuristic: Heuristic,
    pub weights: CostWeights,
    pub tables: Vec<TablePlan>,
    pub workers: Vec<WorkerSummary>,
}

impl ShardingPlan {
    pub fn global_batch(&self) -> usize {
        self.local_batch * self.num_workers
    }

    pub fn table(&self, id: &str) -> Option<&TablePlan> {
        self.tables.iter().find(|t| t.table_id == id)
    }

    /// Largest worker objective.
    pub fn objective(&self) -> f64 {
        self.workers.iter().map(|w| w.objective).fold(0.0, f64::max)
    }

    pub fn inter_node_bytes(&self) -> f64 {
        self.workers.iter().map(|w| w.inter_node_bytes).sum()
    }

    /// Checks that the plan names every table of `model` once, in order, and
    /// that each table's shards tile `[0, H) × [0, D)` exactly.
    pub fn validate(&self, model: &ModelSpec) -> Result<(), PlanError> {
        let bad = |s: String| Err(PlanError::InvalidPlan(s));
        if self.tables.len() != model.tables.len() {
            return bad(format!("plan has {} tables, model has {}", self.tables.len(), model.tables.len()));
        }
        if self.num_workers == 0 || self.gpus_per_node == 0 || !self.num_workers.is_multiple_of(self.gpus_per_node) {
            return bad(format!("{} workers in nodes of {}", self.num_workers, self.gpus_per_node));
        }
        for (tp, spec) in self.tables.iter().zip(&model.tables) {
            if tp.table_id != spec.id {
                return bad(format!("plan table {} where model has {}", tp.table_id, spec.id));
            }
            if tp.shards.len() != tp.scheme.num_shards() {
                return bad(format!("table {}: {} shards for scheme {}", spec.id, tp.shards.len(), tp.scheme));
            }
            if let Some(s) = tp.shards.iter().find(|s| s.worker >= self.num_workers) {
                return bad(format!("table {}: worker {} out of range", spec.id, s.worker));
            }
            check_tiling(spec, tp).map_err(PlanError::InvalidPlan)?;
            if let Scheme::Hierarchical(_) = tp.scheme {
                let node = tp.shards[0].worker / self.gpus_per_node;
                if tp.shards.iter().any(|s| s.worker / self.gpus_per_node != node) {
                    return bad(format!("table {}: hierarchical shards span nodes", spec.id));
                }
            }
        }
        Ok(())
    }
}

fn check_tiling(spec: &TableSpec, tp: &TablePlan) -> Result<(), String> {
    let id = &spec.id;
    match tp.scheme {
        Scheme::DataParallel => Ok(()),
        Scheme::TableWise | Scheme::RowWise(_) | Scheme::Hierarchical(_) => {
            let mut next = 0;
            for s in &tp.shards {
                if s.cols != (0..spec.dim) {
                    return Err(format!("table {id}: row shard with columns {:?}", s.cols));
                }
                if s.rows.start != next || s.rows.end <= s.rows.start {
                    return Err(format!("table {id}: row shard {:?} leaves a gap or overlap at {next}", s.rows));
                }
                next = s.rows.end;
            }
            if next != spec.num_rows {
                return Err(format!("table {id}: row shards end at {next}, table has {} rows", spec.num_rows));
            }
            Ok(())
        }
        Scheme::ColumnWise(_) => {
            let mut next = 0;
            for s in &tp.shards {
                if s.rows != (0..spec.num_rows) {
                    return Err(format!("table {id}: column shard with rows {:?}", s.rows));
                }
                if s.cols.start != next || s.cols.end <= s.cols.start {
                    return Err(format!("table {id}: column shard {:?} leaves a gap or overlap at {next}", s.cols));
                }
                next = s.cols.end;
            }
            if next != spec.dim {
                return Err(format!("table {id}: column shards end at {next}, dim is {}", spec.dim));
            }
            Ok(())
        }
    }
}

pub(crate) fn global_batch(model: &ModelSpec, cluster: &ClusterSpec) -> usize {
    model.local_batch * cluster.num_workers()
}
