use crate::model::{BandwidthPoint, ClusterSpec, PeakFlops};

/// ZionEX-like nodes with a configurable shape.
pub(crate) fn cluster(nodes: usize, gpus: usize) -> ClusterSpec {
    ClusterSpec {
        name: "t".into(),
        num_nodes: nodes,
        gpus_per_node: gpus,
        hbm_capacity_per_gpu: 40_000_000_000,
        hbm_bw: 1.3e12,
        dram_capacity_per_node: 1_500_000_000_000,
        dram_to_gpu_bw: 26e9,
        scaleup_bw: 300e9,
        scaleup_efficiency: 1.0,
        scaleout_bw_per_gpu: 25e9,
        peak_flops: PeakFlops { fp32: 19.5e12, tf32: 156e12, fp16: 312e12, bf16: 312e12 },
        mlp_efficiency: 0.705,
        alltoall_bw_points: vec![BandwidthPoint::new(1 << 28, 7e9)],
        allreduce_bw_points: vec![BandwidthPoint::new(1 << 28, 60e9)],
        fixed_latency_per_collective: 20e-6,
    }
}
