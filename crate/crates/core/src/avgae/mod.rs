//! Graph variational autoencoder for matrix completion.
//!
//! Two GCN encoder stacks produce the latent mean and spread, a sampled code is
//! decoded by a further GCN layer, and training minimizes a masked MAE plus KL
//! and temporal smoothness regularizers.

mod checkpoint;
mod config;
mod loss;
mod model;
mod train;

pub use checkpoint::CHECKPOINT_FORMAT;
pub use config::{AvgaeConfig, Optimizer, Reduction};
pub use loss::{kl_divergence, loss, smoothness_penalty, smoothness_triples, LossBreakdown, LossWeights};
pub use model::{
    decode, encode, gcn_layer, reparameterize, sample_noise, Activation, AvgaeParams, DropoutMasks, InputScaling,
};
pub use train::{infer, loss_gradient_error, train, EpochLog, TrainedModel, TrainingLog};
