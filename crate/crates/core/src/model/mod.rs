mod config;
mod draw;
mod likelihood;

pub use config::{parse_kv, Likelihood, ModelConfig};
pub use draw::{
    ConvDraw, DrawState, GaussianParams, LatentChoice, LatentPolicy, LatentRequest, LayerTrace,
    LossVars, Rollout, TimestepTrace, LOGVAR_LIMIT,
};
pub use likelihood::{
    bits_per_dim, elbo_loss, gaussian_kl, input_nll_bernoulli, input_nll_binned_gaussian,
    input_nll_gaussian,
};
