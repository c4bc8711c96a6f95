//! Optimization, metrics, checkpoints and the train/evaluate loops.

mod ablation;
mod checkpoint;
mod gradsuite;
mod metrics;
mod optim;
mod trainer;

pub use ablation::{ablation_table, run_ablation, AblationRow, Variant};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradsuite::{grad_suite, GradCase, GradSuiteConfig};
pub use metrics::{compute_metrics, ClassMetrics, EarlyStopping, MetricsReport, StopDecision};
pub use optim::{cosine_warm_restart_lr, AdamW, OptimizerState, ScheduleState, ScheduleUnit};
pub use trainer::{evaluate, train, EpochRecord, TrainConfig, TrainData, TrainOutcome};

use crate::model::Meant;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGrad { param: String },
    #[error("loss diverged at epoch {epoch}, batch {batch}: {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        /// Best model seen before the divergence, or the initial one.
        last_good: Box<Meant>,
    },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("configuration mismatch: {0}")]
    Mismatch(String),
    #[error("unknown variant {name:?}; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
