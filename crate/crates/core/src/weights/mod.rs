//! Point-to-point weight transfer from training to inference ranks.
//!
//! A controller gathers [`ParamMeta`] from every rank and computes a static
//! [`TransferSchedule`]: which training rank sends which (possibly fused,
//! sliced and quantized) parameter to which inference ranks. Each step, every
//! training rank runs its tasks through four overlapping lanes (host to
//! device copy, preparation, write, barrier) while a watermark bounds the
//! temporary memory of tasks in flight. Inference ranks only register their
//! weight region; the writes are one-sided.

mod pipeline;
mod schedule;
pub mod tensor;

pub use pipeline::{
    prepare, simulate_pipeline, InferenceRank, LocalBarrier, StageTimes, StepBarrier, StepReport, SyntheticWeights, TensorSource, TrainRank,
};
pub use schedule::{build_schedule, inference_layout, DType, Dest, ParamMeta, Prepare, Sharding, Task, TransferSchedule};

use crate::error::TransferError;

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("parameter {0} not found in training metadata")]
    MissingParam(String),
    #[error("shape mismatch for {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },
    #[error("parameter {name} is missing shard {index}")]
    MissingShard { name: String, index: u32 },
    #[error("task {param} needs {need} bytes of temporary memory, watermark is {watermark}")]
    Watermark { param: String, need: u64, watermark: u64 },
    #[error("no weight region known for inference rank {0}")]
    UnknownRank(u32),
    #[error("barrier failed: {0}")]
    Barrier(String),
    #[error("step aborted")]
    Aborted,
    #[error(transparent)]
    Transfer(#[from] TransferError),
}
