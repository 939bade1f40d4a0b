//! Deep-kernel Gaussian process: encoder, mean network, kernel and
//! closed-form adaptation to a support set.

mod checkpoint;
mod gp;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub(crate) use gp::check_dim;
pub use gp::{
    encode, encode_on_tape, gaussian_cdf_on_tape, gp_posterior, gp_posterior_batch, kernel,
    mean_on_tape, posterior_on_tape, prior_mean, uncalibrated_cdf, Episode, PosteriorPrediction,
    PosteriorVars,
};
pub use params::{
    Dense, Mlp, ModelOptions, ParamVars, SharedParams, ENCODER_LAYERS, HIDDEN, INITIAL_ALPHA,
    INITIAL_BETA, INITIAL_SIGMA, MEAN_LAYERS,
};
