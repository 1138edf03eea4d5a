//! Predictive distributions at new sites and years.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::likelihoods::Family;
use crate::model::{EffectKind, Target, INTERCEPT};
use crate::numeric::{brent_root, GaussHermite};
use crate::sparse::CholeskyFactor;
use crate::spde::SparsePrecision;

use super::fit::FitResult;
use super::marginals::{mixture_moments, mixture_quantile};
use super::newton::inner_newton;
use super::system::{EffectParams, HyperState, LatentSystem};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTarget {
    pub block: usize,
    pub location: [f64; 2],
    /// Year index; `n_times` requests a one-step AR forecast.
    pub time: usize,
    pub covariates: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub eta_quantiles: Vec<f64>,
    pub response_mean: f64,
    pub response_sd: f64,
    pub response_quantiles: Vec<f64>,
}

/// Linear predictor of one target as a sparse latent combination plus
/// independent innovation variance (forecasts only).
fn target_combination(
    sys: &LatentSystem,
    hs: &HyperState,
    target: &PredictionTarget,
    proj: (&[usize], &[f64]),
) -> Result<(Vec<(usize, f64)>, f64, Vec<(usize, f64)>)> {
    let spec = &sys.spec;
    let Some(block) = spec.blocks.get(target.block) else {
        return Err(Error::InvalidArgument(format!("prediction block {} does not exist", target.block)));
    };
    let n_space = sys.n_space();
    let forecast = target.time == sys.n_times;
    let mut comb = Vec::new();
    let mut innovation = 0.0;
    // Spatial innovation terms (node, weight) for forecasts.
    let mut spatial_innov: Vec<(usize, f64)> = Vec::new();
    for term in &block.terms {
        let s = term.scale.as_deref().map(|h| hs.natural[spec.hyper_index(h).expect("validated")]).unwrap_or(1.0);
        match &term.target {
            Target::Coefficient { coefficient, covariate } => {
                let v = if covariate == INTERCEPT {
                    1.0
                } else {
                    *target
                        .covariates
                        .get(covariate)
                        .ok_or_else(|| Error::Config(format!("prediction target lacks covariate `{covariate}`")))?
                };
                comb.push((sys.coefficient_col(coefficient).expect("validated"), s * v));
            }
            Target::Effect(name) => {
                let e = spec.effect_index(name).expect("validated");
                let (off, _) = sys.layout.effects[e];
                match (&spec.effects[e].kind, hs.effects[e]) {
                    (EffectKind::SpaceTime { .. }, EffectParams::SpaceTime { a, .. }) => {
                        let (t, factor) = if forecast { (sys.n_times - 1, a) } else { (target.time, 1.0) };
                        for (&node, &w) in proj.0.iter().zip(proj.1) {
                            comb.push((off + t * n_space + node, s * factor * w));
                            if forecast {
                                spatial_innov.push((node, s * w));
                            }
                        }
                    }
                    (EffectKind::Temporal { .. }, EffectParams::Temporal { a, tau }) => {
                        if forecast {
                            comb.push((off + sys.n_times - 1, s * a));
                            innovation += s * s / tau;
                        } else {
                            comb.push((off + target.time, s));
                        }
                    }
                    (EffectKind::Spatial { .. }, _) => {
                        for (&node, &w) in proj.0.iter().zip(proj.1) {
                            comb.push((off + node, s * w));
                        }
                    }
                    _ => unreachable!("effect parameters follow the spec"),
                }
            }
        }
    }
    Ok((comb, innovation, spatial_innov))
}

/// Per-grid-point Gaussian moments of each target's linear predictor.
#[derive(Debug, Clone)]
pub struct TargetMoments {
    pub weights: Vec<f64>,
    /// `means[target][grid]`.
    pub means: Vec<Vec<f64>>,
    pub vars: Vec<Vec<f64>>,
    /// `families[grid][block]`.
    pub families: Vec<Vec<Family<f64>>>,
}

fn check_targets(sys: &LatentSystem, targets: &[PredictionTarget]) -> Result<()> {
    for t in targets {
        if t.time > sys.n_times {
            return Err(Error::InvalidArgument(format!(
                "year index {} is more than one step beyond the fitted range (0..{})",
                t.time, sys.n_times
            )));
        }
    }
    Ok(())
}

/// Latent combination of every target at one grid point, refitting the
/// Gaussian approximation there.
pub(crate) struct GridTargets {
    pub hs: HyperState,
    pub newton: super::newton::NewtonResult,
    pub combos: Vec<(Vec<(usize, f64)>, f64, Vec<(usize, f64)>)>,
    pub spatial: Option<CholeskyFactor<f64>>,
}

pub(crate) fn grid_targets(
    sys: &LatentSystem,
    theta: &[f64],
    x: &[f64],
    targets: &[PredictionTarget],
    proj: &crate::mesh::ProjectionMatrix<f64>,
) -> Result<GridTargets> {
    let hs = sys.hyper_state(theta)?;
    let prior = sys.prior_values(&hs)?;
    let newton = inner_newton(sys, &hs, &prior, Some(x), &super::newton::NewtonOptions::default())?;
    let combos = targets
        .iter()
        .enumerate()
        .map(|(i, t)| target_combination(sys, &hs, t, proj.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let spatial = if combos.iter().any(|c| !c.2.is_empty()) {
        // One-step forecasts need the spatial innovation precision.
        let e = sys
            .spec
            .effects
            .iter()
            .position(|e| matches!(e.kind, EffectKind::SpaceTime { .. }))
            .expect("forecast terms come from a space-time effect");
        let EffectParams::SpaceTime { matern, .. } = hs.effects[e] else { unreachable!() };
        Some(SparsePrecision::new(sys.spatial_precision(&matern)?)?.factor().clone())
    } else {
        None
    };
    Ok(GridTargets { hs, newton, combos, spatial })
}

pub fn target_moments(sys: &LatentSystem, fit: &FitResult, targets: &[PredictionTarget]) -> Result<TargetMoments> {
    check_targets(sys, targets)?;
    let locations: Vec<[f64; 2]> = targets.iter().map(|t| t.location).collect();
    let proj = sys.mesh.projection_matrix(&locations)?;
    let k = fit.grid.len();
    let n = targets.len();
    let mut means = vec![vec![0.0; k]; n];
    let mut vars = vec![vec![0.0; k]; n];
    let mut families = Vec::with_capacity(k);
    for (g, point) in fit.grid.iter().enumerate() {
        let gt = grid_targets(sys, &point.theta, &point.x, targets, &proj)?;
        for (i, (comb, innov, sp)) in gt.combos.iter().enumerate() {
            let mut dense = vec![0.0; sys.dim()];
            let mut m = 0.0;
            for &(j, c) in comb {
                dense[j] += c;
                m += c * gt.newton.x[j];
            }
            let mut v = gt.newton.factor.inverse_quadratic_form(&dense) + innov;
            if let Some(f) = &gt.spatial {
                if !sp.is_empty() {
                    let mut dv = vec![0.0; sys.n_space()];
                    for &(node, w) in sp {
                        dv[node] += w;
                    }
                    v += f.inverse_quadratic_form(&dv);
                }
            }
            means[i][g] = m;
            vars[i][g] = v.max(0.0);
        }
        families.push(gt.hs.families);
    }
    Ok(TargetMoments { weights: fit.weights(), means, vars, families })
}

/// `Prob(Y > y)` for `Y | η ~ family`, `η ~ N(mean, var)`, mixed over grid
/// points.
pub fn exceedance_probability(weights: &[f64], families: &[Family<f64>], means: &[f64], vars: &[f64], y: f64) -> f64 {
    let gh = GaussHermite::standard();
    weights
        .iter()
        .zip(families)
        .zip(means.iter().zip(vars))
        .map(|((&w, f), (&m, &v))| {
            let sf = |eta: f64| 1.0 - f.cdf(y, eta).unwrap_or(f64::NAN);
            w * if v > 0.0 { gh.expect(m, v, sf) } else { sf(m) }
        })
        .sum::<f64>()
        .clamp(0.0, 1.0)
}

/// Predictive summaries mixing over the fit's θ grid. `quantiles` are
/// probabilities in (0, 1) applied to both the linear predictor and the
/// response distribution.
pub fn predict(
    sys: &LatentSystem,
    fit: &FitResult,
    targets: &[PredictionTarget],
    quantiles: &[f64],
) -> Result<Vec<PredictionRow>> {
    if let Some(p) = quantiles.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::InvalidArgument(format!("quantile level {p} outside (0, 1)")));
    }
    let TargetMoments { weights, means, vars, families } = target_moments(sys, fit, targets)?;
    let gh = GaussHermite::standard();
    targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let (em, ev) = mixture_moments(&weights, &means[i], &vars[i]);
            let eta_quantiles = quantiles.iter().map(|&p| mixture_quantile(&weights, &means[i], &vars[i], p)).collect();
            let fams: Vec<Family<f64>> = families.iter().map(|f| f[t.block]).collect();
            let resp_means: Vec<f64> = fams.iter().zip(&means[i]).map(|(f, &m)| f.mean(m)).collect();
            let (rm, rv_between) = mixture_moments(&weights, &resp_means, &vars[i]);
            let within: f64 = weights.iter().zip(&fams).map(|(w, f)| w * f.variance()).sum();
            let cdf = |y: f64| -> f64 {
                weights
                    .iter()
                    .zip(&fams)
                    .zip(means[i].iter().zip(&vars[i]))
                    .map(|((&w, f), (&m, &v))| w * gh.expect(m, v, |eta| f.cdf(y, eta).unwrap_or(f64::NAN)))
                    .sum()
            };
            let lo = fams
                .iter()
                .zip(means[i].iter().zip(&vars[i]))
                .map(|(f, (&m, &v))| f.quantile(1e-10, m - 10.0 * v.sqrt()).unwrap_or(m))
                .fold(f64::INFINITY, f64::min);
            let hi = fams
                .iter()
                .zip(means[i].iter().zip(&vars[i]))
                .map(|(f, (&m, &v))| f.quantile(1.0 - 1e-10, m + 10.0 * v.sqrt()).unwrap_or(m))
                .fold(f64::NEG_INFINITY, f64::max);
            let response_quantiles = quantiles
                .iter()
                .map(|&p| brent_root(|y| cdf(y) - p, lo, hi, 1e-10 * (1.0 + hi.abs())))
                .collect::<Result<Vec<f64>>>()?;
            Ok(PredictionRow {
                eta_mean: em,
                eta_sd: ev.sqrt(),
                eta_quantiles,
                response_mean: rm,
                response_sd: (rv_between + within).sqrt(),
                response_quantiles,
            })
        })
        .collect()
}
