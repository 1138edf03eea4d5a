//! Outer hyperparameter search, grid exploration and marginal mixing.

use std::cell::RefCell;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::HyperKind;
use crate::numeric::{nelder_mead, normal_quantile, GaussHermite, NelderMeadOptions};

use super::laplace::{log_posterior_hyper, LaplaceEval};
use super::marginals::{mixture_marginal, mixture_moments, Marginal};
use super::newton::NewtonOptions;
use super::system::LatentSystem;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub newton: NewtonOptions,
    pub optimizer: NelderMeadOptions,
    /// Grid spacing in posterior sd units.
    pub grid_step: f64,
    /// Grid points more than this far below the mode's log density are dropped.
    pub drop_below: f64,
    /// Central-difference step for the Hessian, internal scale.
    pub fd_step: f64,
    /// Full `3^d` grid up to this dimension, axis design above.
    pub max_full_grid_dim: usize,
    /// Largest internal-scale sd used for grid construction and marginals.
    pub max_internal_sd: f64,
    pub threads: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            newton: NewtonOptions::default(),
            optimizer: NelderMeadOptions { f_tol: 1e-6, x_tol: 1e-4, max_evals: 3000, restarts: 1, step: Vec::new() },
            grid_step: 0.75,
            drop_below: 4.0,
            fd_step: 0.05,
            max_full_grid_dim: 6,
            max_internal_sd: 2.0,
            threads: 1,
        }
    }
}

/// Latent linear-predictor moments and likelihood derivatives of one
/// observation at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsMoments {
    pub mean: f64,
    pub var: f64,
    pub grad: f64,
    pub curv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    /// Internal-scale θ, all hyperparameters.
    pub theta: Vec<f64>,
    pub log_post: f64,
    pub weight: f64,
    pub x: Vec<f64>,
    pub latent_var: Vec<f64>,
    pub obs: Vec<ObsMoments>,
    pub damped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperMarginal {
    pub name: String,
    pub kind: HyperKind,
    pub fixed: bool,
    pub mode_internal: f64,
    pub sd_internal: f64,
    /// The posterior was near-flat along a direction dominated by this
    /// hyperparameter and its curvature was clamped.
    pub flat: bool,
    /// Natural-scale summary.
    pub summary: Marginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub label: String,
    pub hyper_names: Vec<String>,
    pub theta_mode: Vec<f64>,
    /// Free hyperparameter indices.
    pub free: Vec<usize>,
    /// Gaussian covariance of the free θ (internal scale).
    pub covariance: Vec<Vec<f64>>,
    pub grid: Vec<GridPoint>,
    pub hypers: Vec<HyperMarginal>,
    pub coefficients: Vec<Marginal>,
    pub latent_mean: Vec<f64>,
    pub latent_sd: Vec<f64>,
    pub eta_mean: Vec<f64>,
    pub eta_sd: Vec<f64>,
    pub log_marginal_mode: f64,
    pub evaluations: usize,
    pub diagnostics: Vec<String>,
}

impl FitResult {
    pub fn hyper(&self, name: &str) -> Option<&HyperMarginal> {
        self.hypers.iter().find(|h| h.name == name)
    }

    pub fn coefficient(&self, name: &str) -> Option<&Marginal> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.grid.iter().map(|g| g.weight).collect()
    }

    /// Grid point with the largest weight.
    pub fn modal_point(&self) -> &GridPoint {
        self.grid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.log_post.total_cmp(&b.1.log_post).then(b.0.cmp(&a.0)))
            .map(|(_, g)| g)
            .expect("fit has at least one grid point")
    }
}

fn default_step(kind: HyperKind) -> f64 {
    match kind {
        HyperKind::Shape => 0.1,
        HyperKind::Sharing => 0.3,
        _ => 0.5,
    }
}

fn sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    if v.len() < 2 {
        return 1.0;
    }
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Documented data-driven starting values on the internal scale.
pub fn start_values(sys: &LatentSystem) -> Result<Vec<f64>> {
    let spec = &sys.spec;
    let block_sd: Vec<f64> = (0..spec.blocks.len())
        .map(|b| {
            let ys: Vec<f64> = sys.y.iter().zip(&sys.obs_block).filter(|(_, &ob)| ob == b).map(|(&y, _)| y).collect();
            let s = sd(&ys);
            if s > 0.0 && s.is_finite() {
                s
            } else {
                1.0
            }
        })
        .collect();
    let bbox = if sys.obs_locations.is_empty() {
        sys.mesh.bbox()
    } else {
        crate::mesh::BoundingBox::of_points(&sys.obs_locations).unwrap_or_else(|| sys.mesh.bbox())
    };
    let diameter = if bbox.diagonal() > 0.0 { bbox.diagonal() } else { sys.mesh.bbox().diagonal() };
    let mut nat: Vec<Option<f64>> = spec.hypers.iter().map(|h| h.start).collect();
    let set = |name: &str, v: f64, nat: &mut Vec<Option<f64>>| {
        let i = spec.hyper_index(name).expect("validated");
        if nat[i].is_none() {
            nat[i] = Some(v);
        }
    };
    for (b, block) in spec.blocks.iter().enumerate() {
        let s = block_sd[b];
        set(&block.precision, 4.0 / (s * s), &mut nat);
        if let Some(xi) = &block.shape {
            set(xi, 0.05, &mut nat);
        }
        for t in &block.terms {
            if let crate::model::Target::Effect(e) = &t.target {
                let e = &spec.effects[spec.effect_index(e).expect("validated")];
                match &e.kind {
                    crate::model::EffectKind::SpaceTime { a, range, sigma } => {
                        set(a, 0.5, &mut nat);
                        set(range, 0.2 * diameter, &mut nat);
                        set(sigma, s, &mut nat);
                    }
                    crate::model::EffectKind::Temporal { a, precision } => {
                        set(a, 0.5, &mut nat);
                        set(precision, 4.0 / (s * s), &mut nat);
                    }
                    crate::model::EffectKind::Spatial { range, sigma } => {
                        set(range, 0.2 * diameter, &mut nat);
                        set(sigma, s, &mut nat);
                    }
                }
            }
        }
    }
    spec.hypers
        .iter()
        .zip(nat)
        .map(|(h, v)| {
            let v = v.unwrap_or(match h.kind {
                HyperKind::Sharing => 1.0,
                HyperKind::Correlation => 0.5,
                HyperKind::Shape => 0.05,
                _ => 1.0,
            });
            h.kind.to_internal(v).map_err(|e| Error::Config(format!("start value for `{}`: {e}", h.name)))
        })
        .collect()
}

fn embed(base: &[f64], free: &[usize], z: &[f64]) -> Vec<f64> {
    let mut t = base.to_vec();
    for (&i, &v) in free.iter().zip(z) {
        t[i] = v;
    }
    t
}

struct Explorer<'a> {
    sys: &'a LatentSystem,
    opts: &'a FitOptions,
}

impl Explorer<'_> {
    fn eval(&self, theta: &[f64], start: Option<&[f64]>) -> Result<LaplaceEval> {
        log_posterior_hyper(self.sys, theta, start, &self.opts.newton)
    }

    fn grid_point(&self, theta: Vec<f64>, start: &[f64]) -> Result<GridPoint> {
        let ev = self.eval(&theta, Some(start))?;
        let sel = ev.newton.factor.selected_inverse();
        let latent_var = sel.diagonal();
        let obs = (0..self.sys.num_obs())
            .map(|i| {
                let (idx, coef) = self.sys.row_coefficients(i, &ev.state);
                let var = sel
                    .quadratic_form(&idx, &coef)
                    .unwrap_or_else(|| {
                        let mut dense = vec![0.0; self.sys.dim()];
                        for (&j, &c) in idx.iter().zip(&coef) {
                            dense[j] += c;
                        }
                        ev.newton.factor.inverse_quadratic_form(&dense)
                    })
                    .max(0.0);
                ObsMoments { mean: ev.newton.eta[i], var, grad: ev.newton.grad[i], curv: ev.newton.curv[i] }
            })
            .collect();
        Ok(GridPoint {
            theta,
            log_post: ev.log_post,
            weight: 0.0,
            x: ev.newton.x,
            latent_var,
            obs,
            damped: ev.newton.damped,
        })
    }
}

fn run_parallel<T: Send, F: Fn(usize) -> T + Sync + Send>(threads: usize, n: usize, f: F) -> Result<Vec<T>> {
    if threads <= 1 {
        return Ok((0..n).map(f).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// Fits the model: simplex search for the θ mode, Hessian at the mode,
/// grid exploration and mixing of Gaussian latent marginals.
pub fn fit(sys: &LatentSystem, opts: &FitOptions) -> Result<FitResult> {
    if sys.num_obs() == 0 {
        return Err(Error::Data("cannot fit a model without observations".into()));
    }
    let spec = &sys.spec;
    let mut diagnostics: Vec<String> = sys.warnings().to_vec();
    let theta0 = start_values(sys)?;
    let free: Vec<usize> = (0..spec.hypers.len()).filter(|&i| !spec.hypers[i].fixed).collect();
    let d = free.len();
    let ex = Explorer { sys, opts };

    // Mode search.
    let warm: RefCell<Option<Vec<f64>>> = RefCell::new(None);
    let mut evaluations = 0usize;
    let objective = |z: &[f64]| -> f64 {
        let theta = embed(&theta0, &free, z);
        let start = warm.borrow().clone();
        match ex.eval(&theta, start.as_deref()) {
            Ok(ev) => {
                *warm.borrow_mut() = Some(ev.newton.x.clone());
                -ev.log_post
            }
            Err(e) => {
                log::debug!("objective failed at {theta:?}: {e}");
                f64::INFINITY
            }
        }
    };
    let z0: Vec<f64> = free.iter().map(|&i| theta0[i]).collect();
    let mut nm_opts = opts.optimizer.clone();
    if nm_opts.step.len() != d {
        nm_opts.step = free.iter().map(|&i| default_step(spec.hypers[i].kind)).collect();
    }
    let nm = nelder_mead(objective, &z0, &nm_opts);
    evaluations += nm.evals;
    if !nm.value.is_finite() {
        let start_err = ex.eval(&theta0, None).err().map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::Convergence(format!(
            "hyperparameter search found no finite posterior value (trace {:?}); at the start: {start_err}",
            nm.trace
        )));
    }
    if !nm.converged {
        diagnostics.push(format!("simplex search stopped after {} evaluations without meeting tolerances", nm.evals));
    }
    let theta_mode = embed(&theta0, &free, &nm.x);
    let mode = ex.eval(&theta_mode, warm.borrow().as_deref())?;
    let x_mode = mode.newton.x.clone();
    let f0 = -mode.log_post;

    // Hessian of −log posterior on the free internal coordinates.
    let mut hess = DMatrix::<f64>::zeros(d, d);
    if d > 0 {
        let h = opts.fd_step;
        let f_at = |z: &[f64]| -> f64 {
            let mut t = theta_mode.clone();
            for (&i, &dz) in free.iter().zip(z) {
                t[i] += dz;
            }
            ex.eval(&t, Some(&x_mode)).map(|e| -e.log_post).unwrap_or(f64::INFINITY)
        };
        let mut unit = vec![0.0; d];
        let mut fp = vec![0.0; d];
        let mut fm = vec![0.0; d];
        for i in 0..d {
            unit[i] = h;
            fp[i] = f_at(&unit);
            unit[i] = -h;
            fm[i] = f_at(&unit);
            unit[i] = 0.0;
            hess[(i, i)] = (fp[i] - 2.0 * f0 + fm[i]) / (h * h);
            evaluations += 2;
        }
        for i in 0..d {
            for j in i + 1..d {
                let mut v = vec![0.0; d];
                let mut quad = [0.0; 4];
                for (k, (si, sj)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].into_iter().enumerate() {
                    v[i] = si * h;
                    v[j] = sj * h;
                    quad[k] = f_at(&v);
                }
                evaluations += 4;
                let hij = (quad[0] - quad[1] - quad[2] + quad[3]) / (4.0 * h * h);
                hess[(i, j)] = hij;
                hess[(j, i)] = hij;
            }
        }
        if hess.iter().any(|v| !v.is_finite()) {
            diagnostics.push("Hessian has non-finite entries; using a diagonal fallback".into());
            for i in 0..d {
                for j in 0..d {
                    if i != j || !hess[(i, j)].is_finite() {
                        hess[(i, j)] = if i == j { 1.0 } else { 0.0 };
                    }
                }
            }
        }
    }

    // Eigen-standardization; clamp flat or negative directions.
    let min_eig = 1.0 / (opts.max_internal_sd * opts.max_internal_sd);
    let mut flat = vec![false; spec.hypers.len()];
    let (eigvals, eigvecs) = if d > 0 {
        let eig = SymmetricEigen::new(hess.clone());
        let mut vals = eig.eigenvalues.clone();
        for k in 0..d {
            if !(vals[k] >= min_eig) {
                let col = eig.eigenvectors.column(k);
                let (dominant, _) =
                    col.iter()
                        .enumerate()
                        .fold((0, 0.0), |acc, (i, &v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
                flat[free[dominant]] = true;
                let name = &spec.hypers[free[dominant]].name;
                let msg = format!(
                    "near-flat posterior direction (curvature {:.3e}) dominated by hyperparameter `{name}`",
                    vals[k]
                );
                log::warn!("{msg}");
                diagnostics.push(msg);
                vals[k] = min_eig;
            }
        }
        (vals, eig.eigenvectors)
    } else {
        (nalgebra::DVector::zeros(0), DMatrix::zeros(0, 0))
    };
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for k in 0..d {
        let v = eigvecs.column(k);
        cov += (v * v.transpose()) / eigvals[k];
    }

    // Grid design in standardized coordinates.
    let mut design: Vec<Vec<f64>> = Vec::new();
    if d == 0 {
        design.push(Vec::new());
    } else if d <= opts.max_full_grid_dim {
        let total = 3usize.pow(d as u32);
        for code in 0..total {
            let mut c = code;
            let mut z = vec![0.0; d];
            for zk in z.iter_mut() {
                *zk = (c % 3) as f64 - 1.0;
                c /= 3;
            }
            design.push(z);
        }
    } else {
        design.push(vec![0.0; d]);
        for k in 0..d {
            for s in [-1.0, 1.0] {
                let mut z = vec![0.0; d];
                z[k] = s;
                design.push(z);
            }
        }
    }
    let thetas: Vec<Vec<f64>> = design
        .iter()
        .map(|z| {
            let mut t = theta_mode.clone();
            for k in 0..d {
                let scale = opts.grid_step * z[k] / eigvals[k].sqrt();
                if scale == 0.0 {
                    continue;
                }
                for (r, &i) in free.iter().enumerate() {
                    t[i] += scale * eigvecs[(r, k)];
                }
            }
            t
        })
        .collect();

    // First pass: log posterior at every design point.
    let first: Vec<Option<(f64, Vec<f64>)>> = run_parallel(opts.threads, thetas.len(), |k| {
        ex.eval(&thetas[k], Some(&x_mode)).ok().map(|e| (e.log_post, e.newton.x))
    })?;
    evaluations += thetas.len();
    let best = first.iter().flatten().map(|(lp, _)| *lp).fold(mode.log_post, f64::max);
    let failed = first.iter().filter(|p| p.is_none()).count();
    if failed > 0 {
        diagnostics.push(format!("{failed} grid points failed to evaluate and were dropped"));
    }
    let kept: Vec<(Vec<f64>, Vec<f64>)> = thetas
        .into_iter()
        .zip(first)
        .filter_map(|(t, r)| r.and_then(|(lp, x)| (lp >= best - opts.drop_below).then_some((t, x))))
        .collect();
    if kept.is_empty() {
        return Err(Error::Convergence("no grid point could be evaluated".into()));
    }

    // Second pass: latent variances and observation moments.
    let details: Vec<Result<GridPoint>> =
        run_parallel(opts.threads, kept.len(), |k| ex.grid_point(kept[k].0.clone(), &kept[k].1))?;
    let mut grid = details.into_iter().collect::<Result<Vec<_>>>()?;
    let lp_max = grid.iter().map(|g| g.log_post).fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = grid.iter().map(|g| (g.log_post - lp_max).exp()).sum();
    for g in &mut grid {
        g.weight = (g.log_post - lp_max).exp() / total;
    }
    if grid.iter().any(|g| g.damped) {
        diagnostics
            .push("non-concave likelihood: curvature clamped (damped Newton fallback) at some grid points".into());
    }

    // Hyperparameter marginals from the Gaussian on the internal scale.
    let gh = GaussHermite::standard();
    let z975 = normal_quantile(0.975);
    let hypers = spec
        .hypers
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let mode_internal = theta_mode[i];
            let sd_internal = free.iter().position(|&f| f == i).map(|r| cov[(r, r)].sqrt()).unwrap_or(0.0);
            let tf = |t: f64| h.kind.from_internal(t);
            let mean = gh.expect(mode_internal, sd_internal * sd_internal, tf);
            let second = gh.expect(mode_internal, sd_internal * sd_internal, |t| tf(t).powi(2));
            HyperMarginal {
                name: h.name.clone(),
                kind: h.kind,
                fixed: h.fixed,
                mode_internal,
                sd_internal,
                flat: flat[i],
                summary: Marginal {
                    name: h.name.clone(),
                    mean,
                    sd: (second - mean * mean).max(0.0).sqrt(),
                    q025: tf(mode_internal - z975 * sd_internal),
                    q50: tf(mode_internal),
                    q975: tf(mode_internal + z975 * sd_internal),
                },
            }
        })
        .collect();

    // Latent mixtures.
    let weights: Vec<f64> = grid.iter().map(|g| g.weight).collect();
    let dim = sys.dim();
    let mut latent_mean = vec![0.0; dim];
    let mut latent_sd = vec![0.0; dim];
    for j in 0..dim {
        let m: Vec<f64> = grid.iter().map(|g| g.x[j]).collect();
        let v: Vec<f64> = grid.iter().map(|g| g.latent_var[j]).collect();
        let (mu, var) = mixture_moments(&weights, &m, &v);
        latent_mean[j] = mu;
        latent_sd[j] = var.sqrt();
    }
    let coefficients = spec
        .coefficients
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let j = sys.layout.coefficients + k;
            let m: Vec<f64> = grid.iter().map(|g| g.x[j]).collect();
            let v: Vec<f64> = grid.iter().map(|g| g.latent_var[j]).collect();
            mixture_marginal(&c.name, &weights, &m, &v)
        })
        .collect();
    let nobs = sys.num_obs();
    let mut eta_mean = vec![0.0; nobs];
    let mut eta_sd = vec![0.0; nobs];
    for i in 0..nobs {
        let m: Vec<f64> = grid.iter().map(|g| g.obs[i].mean).collect();
        let v: Vec<f64> = grid.iter().map(|g| g.obs[i].var).collect();
        let (mu, var) = mixture_moments(&weights, &m, &v);
        eta_mean[i] = mu;
        eta_sd[i] = var.sqrt();
    }

    boundary_check(sys, &mode, &mut diagnostics);
    for msg in &diagnostics {
        log::info!("{msg}");
    }
    Ok(FitResult {
        label: spec.label.clone(),
        hyper_names: spec.hypers.iter().map(|h| h.name.clone()).collect(),
        theta_mode,
        free,
        covariance: (0..d).map(|r| (0..d).map(|c| cov[(r, c)]).collect()).collect(),
        grid,
        hypers,
        coefficients,
        latent_mean,
        latent_sd,
        eta_mean,
        eta_sd,
        log_marginal_mode: mode.log_marginal,
        evaluations,
        diagnostics,
    })
}

/// Warns when observations sit within one fitted range of the mesh edge.
fn boundary_check(sys: &LatentSystem, mode: &LaplaceEval, diagnostics: &mut Vec<String>) {
    let range =
        mode.state
            .effects
            .iter()
            .filter_map(|e| match e {
                super::system::EffectParams::SpaceTime { matern, .. }
                | super::system::EffectParams::Spatial { matern } => Some(matern.range),
                _ => None,
            })
            .fold(0.0f64, f64::max);
    if range <= 0.0 {
        return;
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut close = 0;
    for loc in &sys.obs_locations {
        let key = (loc[0].to_bits(), loc[1].to_bits());
        if seen.insert(key) && sys.mesh.distance_to_boundary(*loc) < range {
            close += 1;
        }
    }
    if close > 0 {
        let msg = format!(
            "{close} observation sites lie within the fitted range ({range:.4}) of the mesh boundary; variance there is inflated"
        );
        log::warn!("{msg}");
        diagnostics.push(msg);
    }
}
