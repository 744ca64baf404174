//! Maximum-entropy inverse RL over observed state changes: reward shaping,
//! the truncated-normal expert model with its Monte-Carlo estimators, and
//! the training loop. All of it runs in `f64`.

mod expert;
mod optim;
mod reward;
mod sample;
mod train;
mod truncnorm;

pub use expert::{grad_partition, grad_partition_with, partition_estimate, Draws, ExpertModel, ScoreFn};
pub use optim::Adam;
pub use reward::{regularized_reward, reward, reward_slope};
pub use sample::{
    beta_from_deltas, compute_beta, reward_terms, sample_loss_grad, sample_loss_grad_with,
    state_change_samples, DemonstrationTrace, Frame, RewardTerms, SampleContext, SampleOutcome,
    StateChangeSample,
};
pub use train::{
    init_state, plateaued, run_epoch, train, train_from, BetaSetting, EpochMetrics, TrainCheckpoint,
    TrainConfig, TrainState, TRAIN_CHECKPOINT_VERSION,
};
pub use truncnorm::{grad_log_truncnorm, std_normal_cdf, stratified_uniforms, TruncatedNormal};

use thiserror::Error;

use crate::kernelnet::KernelError;
use crate::numeric::NumericError;

#[derive(Debug, Error)]
pub enum IrlError {
    #[error("no samples")]
    NoSamples,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("reward {0} outside [-1, 1]")]
    OutOfDomain(f64),
    #[error("truncated normal with mean {mu} and sigma {sigma0} has no mass in [-1, 1]")]
    DegenerateTruncation { mu: f64, sigma0: f64 },
    #[error("training diverged in epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Last state whose parameters and loss were finite.
        state: Box<TrainState>,
    },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}
