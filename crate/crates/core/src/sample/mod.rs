//! Reverse-process samplers: unguided and guided (Langevin on hidden
//! states) chains over tokens or embeddings, infilling, left-to-right
//! decoding, and a Metropolis-Hastings baseline.

mod chains;
mod guidance;
mod mcmc;

pub use chains::{
    autoregressive_sample, pseudo_log_likelihood, sample_continuous, sample_discrete, Chain, Guided, SampleTrace, TraceRow,
};
pub use guidance::{nos_step, GuidanceConfig, InnerOptimizer, KlForm, LangevinObjective, StepStats};
pub use mcmc::{acceptance_probability, mh_mcmc, McmcResult};

use crate::model::ModelError;
use crate::noise::NoiseError;
use crate::seqcore::SeqError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SampleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("timesteps must decrease strictly from T to 0")]
    Timesteps,
}

impl From<TensorError> for SampleError {
    fn from(e: TensorError) -> Self {
        SampleError::Model(e.into())
    }
}
