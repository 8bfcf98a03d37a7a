//! Pixel-space conditional diffusion: noise schedule, sequence encoder,
//! cross-attention U-Net, training objective and samplers.

mod attention;
mod checkpoint;
mod encoder;
mod init;
mod layers;
mod model;
mod sampler;
mod schedule;
mod train;
mod unet;

pub use attention::{average_attention, AttentionRecord, BlockAttention, StepAttention};
pub use checkpoint::{bytes_hash, file_hash, CheckpointMeta, CHECKPOINT_FORMAT_VERSION};
pub use encoder::SequenceEncoder;
pub use init::SeededVarMap;
pub use layers::{attention as multi_head_attention, masked_softmax};
pub use model::{Autoencoder, DiffusionModel, IdentityAutoencoder, ModelConfig, Sample};
pub use sampler::{
    cfg_eps, ddim_step, sample_from, seeded_normal, timesteps, EpsModel, PlmsWarmup, SamplerConfig, SamplerKind,
};
pub use schedule::{make_schedule, NoiseSchedule, ScheduleConfig, ScheduleKind};
pub use train::{per_example_loss, training_loss, NoiseDraw, TrainConfig, Trainer};
pub use unet::{Capture, UNet, UNetConfig};

use thiserror::Error;

use crate::query::QueryError;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention: {0}")]
    Attention(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
