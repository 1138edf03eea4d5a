//! Laplace-approximation inference for latent Gaussian models.
//!
//! For fixed hyperparameters θ the latent field is optimized by Newton's
//! method ([`newton`]), giving a Gaussian approximation whose normalizing
//! constant yields `ln p(θ | y)` ([`laplace`]). [`fit`] finds the θ mode,
//! explores a grid around it and mixes the Gaussian latent marginals.

pub mod fit;
pub mod laplace;
pub mod marginals;
pub mod newton;
pub mod predict;
pub mod system;

pub use fit::{fit, start_values, FitOptions, FitResult, GridPoint, HyperMarginal, ObsMoments};
pub use laplace::{log_posterior_hyper, log_prior_hyper, LaplaceEval};
pub use marginals::{mixture_cdf, mixture_marginal, mixture_moments, mixture_quantile, Marginal};
pub use newton::{inner_newton, log_likelihood, NewtonOptions, NewtonResult};
pub use predict::{exceedance_probability, predict, target_moments, PredictionRow, PredictionTarget, TargetMoments};
pub use system::{EffectParams, Entry, HyperState, LatentSystem, Layout};
