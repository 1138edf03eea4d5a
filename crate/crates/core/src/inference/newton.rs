//! Inner optimization of the latent field for fixed hyperparameters.

use crate::error::{Error, Result};
use crate::likelihoods::{loglik_derivs, Family};
use crate::sparse::CholeskyFactor;

use super::system::{HyperState, LatentSystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Gradient ∞-norm tolerance, relative to `1 + ‖Aᵀ|g|‖∞`.
    pub grad_tol: f64,
    /// Step tolerance relative to `1 + ‖x‖∞`.
    pub step_tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-8, step_tol: 1e-12, max_iter: 50 }
    }
}

/// Gaussian approximation of the latent posterior at one θ.
#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: Vec<f64>,
    pub eta: Vec<f64>,
    /// `Σ ln p(yᵢ | ηᵢ*)`.
    pub log_lik: f64,
    /// `x*ᵀ Q_prior x*`.
    pub prior_quad: f64,
    /// Per-observation score and curvature `−∂²` at `η*`. Curvature is
    /// exact when the posterior precision stays positive definite with it,
    /// otherwise clamped at 0.
    pub grad: Vec<f64>,
    pub curv: Vec<f64>,
    pub factor: CholeskyFactor<f64>,
    pub iterations: usize,
    /// True when a non-concave likelihood forced curvature clamping at the mode.
    pub damped: bool,
    pub grad_trace: Vec<f64>,
}

fn family_of<'a>(sys: &LatentSystem, hs: &'a HyperState, i: usize) -> &'a Family<f64> {
    &hs.families[sys.obs_block[i]]
}

/// Total log-likelihood, `-inf` if any observation is outside its support.
pub fn log_likelihood(sys: &LatentSystem, hs: &HyperState, eta: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (i, (&y, &e)) in sys.y.iter().zip(eta).enumerate() {
        let lp = family_of(sys, hs, i).logpdf(y, e)?;
        if lp == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        total += lp;
    }
    Ok(total)
}

/// A latent vector inside the GEV support: zero except block intercepts,
/// placed at the response extreme that keeps `1 + ξ(y − μ)/σ ≥ 1`.
fn feasible_start(sys: &LatentSystem, hs: &HyperState) -> Result<Vec<f64>> {
    let mut x = vec![0.0; sys.dim()];
    for (b, fam) in hs.families.iter().enumerate() {
        let Family::Gev { shape, .. } = *fam else { continue };
        let ys = sys.y.iter().zip(&sys.obs_block).filter(|(_, &ob)| ob == b).map(|(&y, _)| y);
        let target = if shape > 0.0 { ys.fold(f64::INFINITY, f64::min) } else { ys.fold(f64::NEG_INFINITY, f64::max) };
        if !target.is_finite() {
            continue;
        }
        let col = sys.intercepts[b].ok_or_else(|| {
            Error::Convergence(format!(
                "GEV block `{}` needs an intercept to find a feasible start",
                sys.spec.blocks[b].name
            ))
        })?;
        x[col] = target;
    }
    Ok(x)
}

/// Refactors with the signed curvature `raw` when some observation is
/// locally convex. Keeps the clamped factor if that is not positive definite.
fn exact_curvature(
    sys: &LatentSystem,
    hs: &HyperState,
    prior: &[f64],
    clamped: CholeskyFactor<f64>,
    d: Vec<f64>,
    raw: &[f64],
) -> Result<(CholeskyFactor<f64>, Vec<f64>, bool)> {
    if raw.iter().all(|&c| c >= 0.0) {
        return Ok((clamped, d, false));
    }
    let mut values = prior.to_vec();
    sys.add_data_precision(&mut values, raw, hs);
    match sys.symbolic().factor_values(&values) {
        Ok(f) => Ok((f, raw.to_vec(), false)),
        Err(Error::Factorization(_)) => Ok((clamped, d, true)),
        Err(e) => Err(e),
    }
}

/// Newton–Raphson on `ln p(y|x,θ) + ln p(x|θ)` with halving line search.
pub fn inner_newton(
    sys: &LatentSystem,
    hs: &HyperState,
    prior: &[f64],
    start: Option<&[f64]>,
    opts: &NewtonOptions,
) -> Result<NewtonResult> {
    let n = sys.dim();
    let mut x = match start {
        Some(s) if s.len() == n => s.to_vec(),
        _ => vec![0.0; n],
    };
    let mut eta = sys.eta(&x, hs);
    let mut ll = log_likelihood(sys, hs, &eta)?;
    if ll == f64::NEG_INFINITY {
        x = feasible_start(sys, hs)?;
        eta = sys.eta(&x, hs);
        ll = log_likelihood(sys, hs, &eta)?;
        if ll == f64::NEG_INFINITY {
            return Err(Error::Convergence("no latent start inside the likelihood support".into()));
        }
    }
    let mut qx = sys.pattern_matvec(prior, &x);
    let mut quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
    let mut trace = Vec::new();
    let nobs = sys.num_obs();
    let mut g = vec![0.0; nobs];
    let mut d = vec![0.0; nobs];
    let mut raw = vec![0.0; nobs];
    for iter in 0..=opts.max_iter {
        for i in 0..nobs {
            let (g1, h2) = loglik_derivs(sys.y[i], family_of(sys, hs, i), eta[i])?;
            g[i] = g1;
            raw[i] = -h2;
            d[i] = if h2 > 0.0 { 0.0 } else { -h2 };
        }
        let atg = sys.transpose_apply(&g, hs);
        let abs_g: Vec<f64> = g.iter().map(|v| v.abs()).collect();
        let scale = sys.transpose_apply(&abs_g, hs).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let grad: Vec<f64> = atg.iter().zip(&qx).map(|(a, b)| a - b).collect();
        let gnorm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        trace.push(gnorm);
        let mut values = prior.to_vec();
        sys.add_data_precision(&mut values, &d, hs);
        let factor = sys.symbolic().factor_values(&values)?;
        let done = |x: Vec<f64>,
                    eta,
                    ll,
                    quad,
                    factor,
                    g: Vec<f64>,
                    d: Vec<f64>,
                    raw: &[f64],
                    trace|
         -> Result<NewtonResult> {
            let (factor, curv, damped) = exact_curvature(sys, hs, prior, factor, d, raw)?;
            Ok(NewtonResult {
                x,
                eta,
                log_lik: ll,
                prior_quad: quad,
                grad: g,
                curv,
                factor,
                iterations: iter,
                damped,
                grad_trace: trace,
            })
        };
        if gnorm <= opts.grad_tol * (1.0 + scale) {
            return done(x, eta, ll, quad, factor, g, d, &raw, trace);
        }
        if iter == opts.max_iter {
            break;
        }
        let dx = factor.solve(&grad);
        let obj = ll - 0.5 * quad;
        let xnorm = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
            let en = sys.eta(&xn, hs);
            let lln = log_likelihood(sys, hs, &en)?;
            if lln.is_finite() {
                let qxn = sys.pattern_matvec(prior, &xn);
                let quadn: f64 = xn.iter().zip(&qxn).map(|(a, b)| a * b).sum();
                let objn = lln - 0.5 * quadn;
                if objn >= obj - 1e-12 * obj.abs().max(1.0) {
                    x = xn;
                    eta = en;
                    ll = lln;
                    qx = qxn;
                    quad = quadn;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        let step = t * dx.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !accepted || step <= opts.step_tol * (1.0 + xnorm) {
            // No further ascent is possible at working precision; refresh
            // derivatives and factor at the final point.
            for i in 0..nobs {
                let (g1, h2) = loglik_derivs(sys.y[i], family_of(sys, hs, i), eta[i])?;
                g[i] = g1;
                raw[i] = -h2;
                d[i] = if h2 > 0.0 { 0.0 } else { -h2 };
            }
            let mut values = prior.to_vec();
            sys.add_data_precision(&mut values, &d, hs);
            let factor = sys.symbolic().factor_values(&values)?;
            return done(x, eta, ll, quad, factor, g, d, &raw, trace);
        }
    }
    Err(Error::Convergence(format!(
        "inner Newton did not converge in {} iterations; gradient norms {:?}",
        opts.max_iter, trace
    )))
}
