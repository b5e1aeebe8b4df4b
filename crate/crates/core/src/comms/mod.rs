//! Input redistribution, collective volume accounting, and an in-process
//! multi-worker training step.

mod redistribute;
mod sharded;
mod volume;

pub use redistribute::{
    alltoall_redistribute, bucketize_rowwise, permute_twb_to_wtb, permute_wtb_to_twb, replicate_columnwise,
    unbucketize_rowwise, Bucket, ExchangeLog, LocalShard, Redistribution, WorkerSlice,
};
pub use sharded::{reference_state, train_step_sharded, ShardedStepOutput};
pub use volume::{
    dense_split, quantized_volume, volume_forward_alltoall, volume_gradient_collectives, volume_input_alltoall,
    volume_report_json, CollectiveKind, CollectiveVolume, Direction,
};

use thiserror::Error;

use crate::engine::EngineError;
use crate::model::BatchError;
use crate::planner::PlanError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CommsError {
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: u64, rows: u64 },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}
