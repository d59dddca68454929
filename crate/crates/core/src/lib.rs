//! Multi-modal sequential recommendation with a time-aware hierarchical
//! mixture of experts, trained from scratch on the CPU.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
mod init;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod moe;
pub mod objectives;
pub mod repr;
pub mod tensor;
pub mod train;

pub use config::{Config, TimeVariant, Variant};
pub use model::Model;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {breakdown:?}")]
    NonFinite { epoch: usize, batch: usize, breakdown: objectives::LossBreakdown },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
