//! Executable reference of the embedding operator family.
//!
//! Pooling is a sum. Backward sorts occurrences by row and aggregates them
//! before any optimizer sees a gradient, so every touched row receives
//! exactly one update per step regardless of how many samples hit it.

mod backward;
mod checkpoint;
mod forward;
mod fp16;
mod optimizer;
mod reference;
mod table;

pub use backward::{backward_sort_aggregate, RowGradients};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointError};
pub use forward::{forward_pooled, fused_forward, split_columns};
pub use fp16::{fp16_round, quantize_fp16_roundtrip, Fp16Roundtrip};
pub use optimizer::{apply_optimizer, apply_rowwise_adagrad, fused_backward_update};
pub use reference::{train_step_reference, Loss, StepOutput};
pub use table::{EmbeddingTable, MomentState, OptimizerConfig, OptimizerKind};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("index {index} out of range for table {table}")]
    IndexOutOfRange { table: String, index: u64 },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("optimizer {kind:?} cannot run on table {table}: {reason}")]
    OptimizerState { kind: OptimizerKind, table: String, reason: String },
}
