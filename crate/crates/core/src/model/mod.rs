//! Model and cluster descriptions plus the combined sparse batch format.

mod batch;
mod config;
mod generate;

pub use batch::{
    gen_synthetic_batch, lengths_to_offsets, offsets_to_lengths, read_batch_dump, write_batch_dump, BatchError,
    BatchOrder, CombinedBatch, GlobalBatch, GlobalBatchLayout,
};
pub use config::{cluster_to_json, model_to_json, parse_cluster_spec, parse_model_spec, SpecError};
pub use generate::truncated_exponential_dims;

use serde::{Deserialize, Serialize};

/// Storage precision of embedding table values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Fp32,
    Fp16,
}

impl Precision {
    pub fn bytes(self) -> u64 {
        match self {
            Precision::Fp32 => 4,
            Precision::Fp16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Fp32 => "fp32",
            Precision::Fp16 => "fp16",
        }
    }
}

/// Numeric format for dense compute and for communicated activations.
///
/// TF32 is a compute mode; in memory and on the wire it occupies 4 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NumericFormat {
    Fp32,
    Tf32,
    Fp16,
    Bf16,
}

impl NumericFormat {
    pub fn bytes(self) -> u64 {
        match self {
            NumericFormat::Fp32 | NumericFormat::Tf32 => 4,
            NumericFormat::Fp16 | NumericFormat::Bf16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NumericFormat::Fp32 => "fp32",
            NumericFormat::Tf32 => "tf32",
            NumericFormat::Fp16 => "fp16",
            NumericFormat::Bf16 => "bf16",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fp32" => Some(NumericFormat::Fp32),
            "tf32" => Some(NumericFormat::Tf32),
            "fp16" => Some(NumericFormat::Fp16),
            "bf16" => Some(NumericFormat::Bf16),
            _ => None,
        }
    }
}

/// Distribution of row ids used when generating synthetic lookups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IndexSkew {
    Uniform,
    /// Row `r` is drawn with probability proportional to `(r + 1)^-alpha`.
    Zipf {
        alpha: f64,
    },
}

/// One embedding table of shape `num_rows x dim` with average pooling size.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSpec {
    pub id: String,
    pub num_rows: u64,
    pub dim: usize,
    pub avg_pooling: f64,
    pub precision: Precision,
    pub skew: IndexSkew,
}

impl TableSpec {
    /// FP32 table with uniform index skew.
    pub fn new(id: impl Into<String>, num_rows: u64, dim: usize, avg_pooling: f64) -> Self {
        Self { id: id.into(), num_rows, dim, avg_pooling, precision: Precision::Fp32, skew: IndexSkew::Uniform }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn with_skew(mut self, skew: IndexSkew) -> Self {
        self.skew = skew;
        self
    }

    pub fn params(&self) -> u64 {
        self.num_rows * self.dim as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_rows == 0 {
            return Err("num_rows must be >= 1".into());
        }
        if self.dim == 0 {
            return Err("dim must be >= 1".into());
        }
        if !(self.avg_pooling.is_finite() && self.avg_pooling > 0.0) {
            return Err("avg_pooling must be a positive finite number".into());
        }
        if let IndexSkew::Zipf { alpha } = self.skew {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err("zipf alpha must be > 0".into());
            }
        }
        Ok(())
    }
}

/// Fully connected layer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpLayer {
    pub input: usize,
    pub output: usize,
}

impl MlpLayer {
    pub fn new(input: usize, output: usize) -> Self {
        Self { input, output }
    }

    /// Weights plus bias.
    pub fn params(&self) -> u64 {
        (self.input * self.output + self.output) as u64
    }

    /// Multiply-accumulate FLOPs of the forward pass for one sample.
    pub fn forward_flops(&self) -> f64 {
        2.0 * self.input as f64 * self.output as f64
    }
}

/// Everything the planner and performance model need to know about a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub tables: Vec<TableSpec>,
    pub bottom_mlp: Vec<MlpLayer>,
    pub top_mlp: Vec<MlpLayer>,
    /// Forward FLOPs of the feature interaction for one sample.
    pub interaction_flops_per_sample: f64,
    /// Declared forward model complexity, used for effective performance.
    pub mflops_per_sample: f64,
    /// Per-worker batch size.
    pub local_batch: usize,
    pub dense_param_bytes: u64,
    pub dense_precision: NumericFormat,
}

impl ModelSpec {
    pub fn empty(name: impl Into<String>, local_batch: usize) -> Self {
        Self {
            name: name.into(),
            tables: Vec::new(),
            bottom_mlp: Vec::new(),
            top_mlp: Vec::new(),
            interaction_flops_per_sample: 0.0,
            mflops_per_sample: 0.0,
            local_batch,
            dense_param_bytes: 0,
            dense_precision: NumericFormat::Fp32,
        }
    }

    /// Model with the given tables, no MLPs, and the default interaction cost.
    pub fn with_tables(name: impl Into<String>, local_batch: usize, tables: Vec<TableSpec>) -> Self {
        let mut m = Self::empty(name, local_batch);
        m.tables = tables;
        m.interaction_flops_per_sample = m.default_interaction_flops();
        m
    }

    pub fn embedding_params(&self) -> u64 {
        self.tables.iter().map(TableSpec::params).sum()
    }

    pub fn avg_dim(&self) -> f64 {
        if self.tables.is_empty() {
            return 0.0;
        }
        self.tables.iter().map(|t| t.dim as f64).sum::<f64>() / self.tables.len() as f64
    }

    pub fn mlp_param_bytes(&self) -> u64 {
        self.bottom_mlp.iter().chain(&self.top_mlp).map(|l| l.params() * 4).sum()
    }

    pub fn bottom_param_bytes(&self) -> u64 {
        self.bottom_mlp.iter().map(|l| l.params() * 4).sum()
    }

    pub fn top_param_bytes(&self) -> u64 {
        self.top_mlp.iter().map(|l| l.params() * 4).sum()
    }

    /// Pairwise dot products over the pooled embeddings plus the bottom MLP
    /// output, each of the average table dimension.
    pub fn default_interaction_flops(&self) -> f64 {
        let n = self.tables.len() as f64 + 1.0;
        if self.tables.is_empty() {
            return 0.0;
        }
        n * (n - 1.0) / 2.0 * 2.0 * self.avg_dim()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.local_batch == 0 {
            return Err("local_batch must be >= 1".into());
        }
        if !(self.mflops_per_sample.is_finite() && self.mflops_per_sample >= 0.0) {
            return Err("mflops_per_sample must be >= 0".into());
        }
        if !(self.interaction_flops_per_sample.is_finite() && self.interaction_flops_per_sample >= 0.0) {
            return Err("interaction_flops_per_sample must be >= 0".into());
        }
        let has_layers = !(self.bottom_mlp.is_empty() && self.top_mlp.is_empty());
        if has_layers && self.dense_param_bytes != self.mlp_param_bytes() {
            return Err(format!(
                "dense_param_bytes {} does not match MLP layers ({} bytes)",
                self.dense_param_bytes,
                self.mlp_param_bytes()
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            t.validate().map_err(|e| format!("table {}: {e}", t.id))?;
            if !seen.insert(t.id.as_str()) {
                return Err(format!("duplicate table id {}", t.id));
            }
        }
        Ok(())
    }
}

/// Peak dense throughput of one device per numeric format, in FLOP/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakFlops {
    pub fp32: f64,
    pub tf32: f64,
    pub fp16: f64,
    pub bf16: f64,
}

impl PeakFlops {
    pub fn get(&self, format: NumericFormat) -> f64 {
        match format {
            NumericFormat::Fp32 => self.fp32,
            NumericFormat::Tf32 => self.tf32,
            NumericFormat::Fp16 => self.fp16,
            NumericFormat::Bf16 => self.bf16,
        }
    }
}

/// A measured point of a collective's bandwidth curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthPoint {
    pub message_bytes: u64,
    pub bytes_per_sec: f64,
}

impl BandwidthPoint {
    pub fn new(message_bytes: u64, bytes_per_sec: f64) -> Self {
        Self { message_bytes, bytes_per_sec }
    }
}

/// Homogeneous cluster of `num_nodes` nodes with `gpus_per_node` devices each.
///
/// Bandwidths are per device unless the name says otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub name: String,
    pub num_nodes: usize,
    pub gpus_per_node: usize,
    pub hbm_capacity_per_gpu: u64,
    pub hbm_bw: f64,
    pub dram_capacity_per_node: u64,
    /// Host memory to device bandwidth (PCIe class).
    pub dram_to_gpu_bw: f64,
    pub scaleup_bw: f64,
    /// Fraction of `scaleup_bw` that collectives confined to one node achieve.
    pub scaleup_efficiency: f64,
    pub scaleout_bw_per_gpu: f64,
    pub peak_flops: PeakFlops,
    pub mlp_efficiency: f64,
    pub alltoall_bw_points: Vec<BandwidthPoint>,
    pub allreduce_bw_points: Vec<BandwidthPoint>,
    pub fixed_latency_per_collective: f64,
}

impl ClusterSpec {
    pub fn num_workers(&self) -> usize {
        self.num_nodes * self.gpus_per_node
    }

    pub fn node_of(&self, worker: usize) -> usize {
        worker / self.gpus_per_node
    }

    /// Host memory available to one device.
    pub fn dram_share_per_gpu(&self) -> u64 {
        self.dram_capacity_per_node / self.gpus_per_node as u64
    }

    /// HBM plus the device's share of host memory.
    pub fn worker_capacity(&self) -> u64 {
        self.hbm_capacity_per_gpu + self.dram_share_per_gpu()
    }

    pub fn total_capacity(&self) -> u64 {
        self.worker_capacity() * self.num_workers() as u64
    }

    /// Same hardware with a different node count.
    pub fn with_nodes(&self, num_nodes: usize) -> Self {
        let mut c = self.clone();
        c.num_nodes = num_nodes;
        c
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.num_nodes == 0 || self.gpus_per_node == 0 {
            return Err("num_nodes and gpus_per_node must be >= 1".into());
        }
        if self.hbm_capacity_per_gpu == 0 || self.dram_capacity_per_node == 0 {
            return Err("memory capacities must be > 0".into());
        }
        let rates = [
            ("hbm_bw", self.hbm_bw),
            ("dram_to_gpu_bw", self.dram_to_gpu_bw),
            ("scaleup_bw", self.scaleup_bw),
            ("scaleout_bw_per_gpu", self.scaleout_bw_per_gpu),
            ("peak_flops.fp32", self.peak_flops.fp32),
            ("peak_flops.tf32", self.peak_flops.tf32),
            ("peak_flops.fp16", self.peak_flops.fp16),
            ("peak_flops.bf16", self.peak_flops.bf16),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(format!("{name} must be > 0"));
            }
        }
        for (name, v) in [("mlp_efficiency", self.mlp_efficiency), ("scaleup_efficiency", self.scaleup_efficiency)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} must be in (0, 1]"));
            }
        }
        if !(self.fixed_latency_per_collective.is_finite() && self.fixed_latency_per_collective >= 0.0) {
            return Err("fixed_latency_per_collective must be >= 0".into());
        }
        let link_peak = self.scaleup_bw.max(self.scaleout_bw_per_gpu);
        for (name, points, peak) in [
            ("alltoall_bw_points", &self.alltoall_bw_points, link_peak),
            ("allreduce_bw_points", &self.allreduce_bw_points, self.scaleup_bw + self.scaleout_bw_per_gpu),
        ] {
            if points.is_empty() {
                return Err(format!("{name} needs at least one point"));
            }
            for w in points.windows(2) {
                if w[0].message_bytes >= w[1].message_bytes {
                    return Err(format!("{name} must be sorted by strictly increasing message size"));
                }
            }
            for p in points {
                if !(p.bytes_per_sec > 0.0 && p.bytes_per_sec <= peak) {
                    return Err(format!("{name}: achieved bandwidth {} must be in (0, {peak}]", p.bytes_per_sec));
                }
                if p.message_bytes == 0 {
                    return Err(format!("{name}: message size must be > 0"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_invariants() {
        assert!(TableSpec::new("t", 10, 4, 1.0).validate().is_ok());
        assert!(TableSpec::new("t", 0, 4, 1.0).validate().is_err());
        assert!(TableSpec::new("t", 10, 0, 1.0).validate().is_err());
        assert!(TableSpec::new("t", 10, 4, 0.0).validate().is_err());
        let z = TableSpec::new("t", 10, 4, 1.0).with_skew(IndexSkew::Zipf { alpha: 0.0 });
        assert!(z.validate().is_err());
    }

    #[test]
    fn interaction_default_counts_pairs() {
        let m = ModelSpec::with_tables("m", 8, vec![TableSpec::new("a", 10, 4, 1.0), TableSpec::new("b", 10, 8, 1.0)]);
        // 3 vectors -> 3 pairs, each 2 * avg_dim(6) flops
        assert_eq!(m.interaction_flops_per_sample, 36.0);
    }

    #[test]
    fn dense_bytes_must_match_layers() {
        let mut m = ModelSpec::empty("m", 4);
        m.bottom_mlp = vec![MlpLayer::new(3, 2)];
        m.dense_param_bytes = 40;
        assert!(m.validate().is_err());
        m.dense_param_bytes = 4 * (3 * 2 + 2);
        assert!(m.validate().is_ok());
    }
}
