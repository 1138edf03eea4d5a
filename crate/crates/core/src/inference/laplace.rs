//! Laplace approximation of the hyperparameter posterior.

use crate::error::Result;

use super::newton::{inner_newton, NewtonOptions, NewtonResult};
use super::system::{HyperState, LatentSystem};

#[derive(Debug, Clone)]
pub struct LaplaceEval {
    /// `ln p(θ | y)` up to a constant (internal scale, Jacobians included).
    pub log_post: f64,
    /// Laplace approximation of `ln p(y | θ)`.
    pub log_marginal: f64,
    /// Log prior of the free hyperparameters on the internal scale.
    pub log_prior: f64,
    pub state: HyperState,
    pub newton: NewtonResult,
}

/// Log prior density of the free hyperparameters on the internal scale.
pub fn log_prior_hyper(sys: &LatentSystem, internal: &[f64]) -> f64 {
    sys.spec
        .hypers
        .iter()
        .zip(internal)
        .filter(|(h, _)| !h.fixed)
        .map(|(h, &t)| h.kind.log_prior_internal(t, &h.prior))
        .sum()
}

/// `ln p(y|x*,θ) − ½x*ᵀQx* + ½ log|Q| − ½ log|Q*| + ln p(θ)`.
pub fn log_posterior_hyper(
    sys: &LatentSystem,
    internal: &[f64],
    start: Option<&[f64]>,
    opts: &NewtonOptions,
) -> Result<LaplaceEval> {
    let state = sys.hyper_state(internal)?;
    let prior = sys.prior_values(&state)?;
    let newton = inner_newton(sys, &state, &prior, start, opts)?;
    let prior_logdet = sys.prior_log_determinant(&state)?;
    let log_marginal =
        newton.log_lik - 0.5 * newton.prior_quad + 0.5 * prior_logdet - 0.5 * newton.factor.log_determinant();
    let log_prior = log_prior_hyper(sys, internal);
    Ok(LaplaceEval { log_post: log_marginal + log_prior, log_marginal, log_prior, state, newton })
}
