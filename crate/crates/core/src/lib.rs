//! Few-shot classification pipeline built around prototype classifiers:
//! self-supervised pre-training, episodic meta-training, and per-task
//! fine-tuning at meta-test time.

pub mod tensor;
pub mod backbone;
pub mod dataio;
pub mod episodes;
pub mod protonet;
pub mod pretrain;
pub mod finetune;
pub mod evalharness;

use thiserror::Error;

/// Failure of a pipeline stage. Wraps the per-module errors and adds the
/// conditions that only arise while training or evaluating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Backbone(#[from] backbone::BackboneError),
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Episode(#[from] episodes::EpisodeError),
    #[error("non-finite loss at step {step} ({context})")]
    NonFinite { step: usize, context: String },
    #[error("episode {index}: {source}")]
    AtEpisode {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
