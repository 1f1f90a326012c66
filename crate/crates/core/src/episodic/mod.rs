//! Datasets, episode sampling, dual-branch meta-training, evaluation, and
//! all on-disk formats (tensor container, dataset manifest, checkpoints,
//! result files).

mod data;
mod eval;
mod sampler;
mod tensorfile;
mod train;

pub use data::{
    gen_synthetic, load_dataset, save_dataset, Dataset, DatasetBundle, DatasetClass, GenSpec, Split,
};
pub use eval::{evaluate, evaluate_with_scorer, report_from_accuracies, EvalOptions, EvalReport};
pub use sampler::{sample_episode, Episode, EpisodeItem};
pub use tensorfile::{
    atomic_write, load_tensor_map, read_tensor_map, save_tensor_map, write_tensor_map, TensorData,
    TensorMap, TensorPayload,
};
pub use train::{
    branch_loss, branch_probabilities, build_global_loss, build_local_loss, cosine_lr,
    load_checkpoint, meta_train, save_checkpoint, smoothed, train_adaptive_fusion, AdamConfig,
    EpisodeLogRow, EpochLogRow, RunConfig, TrainOutput, TrainingLog, PROBABILITY_CLAMP,
};

use crate::encoder::EncoderError;
use crate::fusion::FusionError;
use crate::metrics::MetricError;
use crate::numerics::NumericsError;
use thiserror::Error;

/// Errors from data handling and the on-disk formats.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("missing blob '{0}'")]
    MissingBlob(String),
    #[error("io error on '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors from training and evaluation.
#[derive(Debug, Error)]
pub enum EpisodicError {
    /// A loss or gradient went non-finite; the episode is carried along so
    /// the caller can serialize it for replay.
    #[error("non-finite loss in epoch {epoch}, episode {episode_index}")]
    NonFiniteLoss {
        epoch: usize,
        episode_index: usize,
        episode: Episode,
    },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl EpisodicError {
    /// True for failures of the numeric kind (as opposed to bad data or
    /// configuration), used by callers to pick exit codes.
    pub fn is_numerical(&self) -> bool {
        match self {
            Self::NonFiniteLoss { .. } => true,
            Self::Numerics(_) => true,
            Self::Encoder(EncoderError::NonFiniteLoss) => true,
            Self::Encoder(EncoderError::Numerics(_)) => true,
            Self::Metric(e) => metric_is_numerical(e),
            Self::Fusion(FusionError::NonFiniteInput(_)) => true,
            _ => false,
        }
    }
}

fn metric_is_numerical(e: &MetricError) -> bool {
    match e {
        MetricError::Numerics(_) | MetricError::ZeroVector => true,
        MetricError::AtClass { source, .. } => metric_is_numerical(source),
        _ => false,
    }
}
