//! LEG Gaussian processes: kernels, linear-time inference by cyclic
//! reduction, and maximum-likelihood fitting.

pub mod bench;
pub mod btd;
mod dense;
pub mod error;
pub mod inference;
pub mod kernel;
pub mod learn;
pub mod matexp;

pub use error::{Error, Result};
pub use inference::{
    dedup, log_likelihood, posterior, posterior_predictive, predict_latent, simulate, LatentMarginal,
    PosteriorSummary, Prediction, Simulation, TimeSeries,
};
pub use kernel::LegParams;
pub use learn::{fit, FitConfig, FitResult, FitStatus};
