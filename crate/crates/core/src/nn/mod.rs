//! Segmentation networks, their optimizer and on-disk checkpoints.

mod checkpoint;
mod layers;
mod model;
mod optim;
mod scalar;
mod tensor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta,
    CHECKPOINT_SCHEMA_VERSION,
};
pub use model::{
    bce_loss, Architecture, BatchStats, Gradients, ModelConfig, ParamKind, ParamSpec,
    PredictionTriple, SegModel, TrainPass, HEADS, LOSS_EPS,
};
pub use optim::Adam;
pub(crate) use scalar::gemm;
pub use scalar::Scalar;

/// Batch-normalization running-average momentum.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
