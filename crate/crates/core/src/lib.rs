//! Desk-scale mixture-of-experts sparsification laboratory.
//!
//! Train a small MoE transformer on synthetic tasks, accumulate per-expert
//! routing statistics, prune experts layer-wise or globally, fine-tune the
//! pruned model under a top-K schedule with an entropy regularizer, and
//! report analytical parameter/FLOPs reductions.

pub mod cost;
pub mod data;
pub mod finetune;
pub mod gradcheck;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod stats;
pub mod tape;
pub mod tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
