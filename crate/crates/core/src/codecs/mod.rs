//! Estimators shared by the world model and the policy.

mod categorical;
mod percentile;
mod symlog;
mod twohot;

pub use categorical::{
    argmax, free_nats, kl_clipped, kl_divergence, kl_var, mixed_probs, probs_var, sample_index,
    st_sample, st_sample_var, CategoricalCode, LatentMode, StopSide, UNIMIX,
};
pub use percentile::{percentile, PercentileEma};
pub use symlog::{symexp, symlog};
pub use twohot::{twohot_cross_entropy, TwohotSpec};
