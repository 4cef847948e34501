//! Linear mixed models with empirical-Bayes prior selection.
//!
//! The crate fits Gaussian linear mixed models with conjugate priors on all
//! parameters: a ridge-style Gaussian prior on the fixed effect, an
//! inverse-Gamma prior on the error variance and inverse-Wishart priors on
//! the random-effect covariance matrices. MAP estimates come from an EM
//! algorithm; the prior hyperparameters themselves can be selected by
//! maximizing a Laplace approximation of the marginal likelihood. On top of
//! the estimation core sit conditional prediction, evaluation metrics,
//! seeded simulation studies and a cross-validation harness.
//!
//! Everything is generic over the floating-point scalar through [`Real`];
//! `f64` aliases are exported at the crate root.

pub mod coords;
pub mod cv;
pub mod design;
pub mod eb;
pub mod em;
pub mod error;
pub mod hessian;
pub mod io;
pub mod laplace;
pub mod likelihood;
pub mod optimize;
pub mod params;
pub mod predict;
pub mod scalar;
pub mod sim;
mod special;

pub use design::{ModelDesign, RandomEffectSpec};
pub use error::{Error, Result};
pub use likelihood::{assemble_marginal_covariance, log_likelihood, log_posterior_unnormalized, log_prior};
pub use params::{
    ConditionalMoments, EffectPrior, FitFlags, FitResult, LevelMoments, ModelParams, PriorSpec,
    DEFAULT_ALPHA,
};
pub use scalar::Real;

/// `f64` aliases for the main entry types.
pub type ModelDesign64 = ModelDesign<f64>;
pub type RandomEffectSpec64 = RandomEffectSpec<f64>;
pub type ModelParams64 = ModelParams<f64>;
pub type PriorSpec64 = PriorSpec<f64>;
pub type FitResult64 = FitResult<f64>;

/// `f32` aliases, for callers that trade precision for footprint.
pub type ModelDesign32 = ModelDesign<f32>;
pub type ModelParams32 = ModelParams<f32>;
pub type PriorSpec32 = PriorSpec<f32>;
pub type FitResult32 = FitResult<f32>;
