//! Model comparison and validation criteria.
//!
//! Expectations over the posterior mix the fit's θ grid points; within a
//! grid point each linear predictor `ηᵢ` is Gaussian with the Laplace
//! moments, integrated by Gauss–Hermite quadrature.

use std::io::Write;

use crate::error::{Error, Result};
use crate::inference::{FitResult, GridPoint, LatentSystem};
use crate::likelihoods::Family;
use crate::model::HyperKind;
use crate::numeric::{normal_cdf, normal_logpdf, GaussHermite};

/// Sample size above which CPO uses the importance-weighted shortcut.
pub const CPO_EXACT_MAX_N: usize = 500;
/// Importance-weight coefficient of variation above which the shortcut is
/// abandoned for an observation.
pub const CPO_WEIGHT_CV_MAX: f64 = 10.0;
/// WAIC pointwise variance above which a reliability warning is issued.
pub const WAIC_VARIANCE_WARN: f64 = 0.4;
/// Floor on log densities inside quadrature, so support boundaries of the
/// GEV do not turn negligible nodes into `-inf`.
const LOG_FLOOR: f64 = -745.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dic {
    pub dic: f64,
    /// Deviance at the posterior means of η and of the hyperparameters.
    pub deviance_at_mean: f64,
    pub mean_deviance: f64,
    pub p_d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waic {
    pub waic: f64,
    pub p_waic: f64,
    pub lppd: f64,
    pub max_pointwise_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpoMethod {
    /// Gaussian leave-one-out cavity at each grid point.
    Cavity,
    /// `1/E[1/p(yᵢ|x)]` under the full posterior.
    HarmonicMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpoPit {
    pub cpo: Vec<f64>,
    pub pit: Vec<f64>,
    /// `−Σ ln CPOᵢ` over observations that did not underflow.
    pub ls: f64,
    /// Observations whose CPO underflowed, excluded from `ls`.
    pub failed: Vec<usize>,
    pub method: CpoMethod,
    /// Observations for which the shortcut fell back to the cavity.
    pub fallbacks: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationMetrics {
    pub coverage: f64,
    pub correlation: f64,
    pub rmse: f64,
    pub n: usize,
}

/// One matched prediction/observation pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictedValue {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub label: String,
    pub dic: Dic,
    pub waic: Waic,
    pub cpo: CpoPit,
    /// RMSE of posterior mean fitted responses on the training data.
    pub rmse: f64,
    pub validation: Option<ValidationMetrics>,
    pub warnings: Vec<String>,
}

fn families(sys: &LatentSystem, g: &GridPoint) -> Result<Vec<Family<f64>>> {
    Ok(sys.hyper_state(&g.theta)?.families)
}

fn logpdf(f: &Family<f64>, y: f64, eta: f64) -> f64 {
    f.logpdf(y, eta).unwrap_or(f64::NEG_INFINITY).max(LOG_FLOOR)
}

/// `E f(η)` for `η ~ N(m, v)`, exact when `v = 0`.
fn expect(gh: &GaussHermite, m: f64, v: f64, f: impl FnMut(f64) -> f64) -> f64 {
    let mut f = f;
    if v > 0.0 {
        gh.expect(m, v, f)
    } else {
        f(m)
    }
}

/// Family parameters at the posterior means of the hyperparameters.
fn mean_families(sys: &LatentSystem, fit: &FitResult) -> Result<Vec<Family<f64>>> {
    let internal: Vec<f64> = fit
        .hypers
        .iter()
        .map(|h| if h.fixed { Ok(h.mode_internal) } else { h.kind.to_internal(h.summary.mean) })
        .collect::<Result<_>>()?;
    Ok(sys.hyper_state(&internal)?.families)
}

pub fn dic(sys: &LatentSystem, fit: &FitResult) -> Result<(Dic, Vec<String>)> {
    let gh = GaussHermite::standard();
    let mut warnings = Vec::new();
    let fam_hat = mean_families(sys, fit)?;
    let mut d_hat = 0.0;
    for i in 0..sys.num_obs() {
        d_hat -= 2.0 * logpdf(&fam_hat[sys.obs_block[i]], sys.y[i], fit.eta_mean[i]);
    }
    let degenerate = fit.grid.len() == 1 && fit.grid[0].obs.iter().all(|o| o.var == 0.0);
    let mean_dev = if degenerate {
        warnings.push("posterior is a point mass; p_D set to 0".to_string());
        d_hat
    } else {
        let mut total = 0.0;
        for g in &fit.grid {
            let fams = families(sys, g)?;
            let mut dev = 0.0;
            for (i, o) in g.obs.iter().enumerate() {
                let f = &fams[sys.obs_block[i]];
                dev -= 2.0 * expect(gh, o.mean, o.var, |e| logpdf(f, sys.y[i], e));
            }
            total += g.weight * dev;
        }
        total
    };
    let p_d = mean_dev - d_hat;
    Ok((Dic { dic: d_hat + 2.0 * p_d, deviance_at_mean: d_hat, mean_deviance: mean_dev, p_d }, warnings))
}

pub fn waic(sys: &LatentSystem, fit: &FitResult) -> Result<(Waic, Vec<String>)> {
    let gh = GaussHermite::standard();
    let fams: Vec<Vec<Family<f64>>> = fit.grid.iter().map(|g| families(sys, g)).collect::<Result<_>>()?;
    let mut lppd = 0.0;
    let mut p_waic = 0.0;
    let mut max_var = 0.0f64;
    let mut noisy = 0;
    for i in 0..sys.num_obs() {
        let y = sys.y[i];
        let b = sys.obs_block[i];
        // ln E[p] via a log-sum-exp over grid points of E_k[p].
        let mut log_terms = Vec::with_capacity(fit.grid.len());
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for (g, f) in fit.grid.iter().zip(&fams) {
            let o = &g.obs[i];
            let f = &f[b];
            let shift = logpdf(f, y, o.mean);
            let ep = expect(gh, o.mean, o.var, |e| (logpdf(f, y, e) - shift).exp());
            log_terms.push(g.weight.ln() + shift + ep.ln());
            m1 += g.weight * expect(gh, o.mean, o.var, |e| logpdf(f, y, e));
            m2 += g.weight * expect(gh, o.mean, o.var, |e| logpdf(f, y, e).powi(2));
        }
        let top = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lppd += top + log_terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        let var = (m2 - m1 * m1).max(0.0);
        if var > WAIC_VARIANCE_WARN {
            noisy += 1;
        }
        max_var = max_var.max(var);
        p_waic += var;
    }
    let mut warnings = Vec::new();
    if noisy > 0 {
        warnings.push(format!(
            "{noisy} observations have posterior log-density variance above {WAIC_VARIANCE_WARN}; WAIC may be unreliable"
        ));
    }
    Ok((Waic { waic: -2.0 * (lppd - p_waic), p_waic, lppd, max_pointwise_variance: max_var }, warnings))
}

/// Leave-one-out predictive density and PIT of `y` under the cavity
/// `η ~ N(mc, vc)`.
fn cavity_terms(gh: &GaussHermite, f: &Family<f64>, y: f64, mc: f64, vc: f64) -> (f64, f64) {
    if let Family::Gaussian { sd } = *f {
        let s = (vc + sd * sd).sqrt();
        return (normal_logpdf(y, mc, s).exp(), normal_cdf((y - mc) / s));
    }
    let shift = logpdf(f, y, mc);
    let dens = expect(gh, mc, vc, |e| (logpdf(f, y, e) - shift).exp()) * shift.exp();
    let pit = expect(gh, mc, vc, |e| f.cdf(y, e).unwrap_or(0.0));
    (dens, pit)
}

fn cavity(o: &crate::inference::ObsMoments) -> (f64, f64) {
    if o.var <= 0.0 {
        return (o.mean, 0.0);
    }
    let prec = 1.0 / o.var - o.curv;
    if prec <= 1e-12 / o.var {
        // The observation dominates its own posterior; keep the full
        // posterior as a conservative cavity.
        return (o.mean, o.var);
    }
    let vc = 1.0 / prec;
    (o.mean - o.grad * vc, vc)
}

/// CPO, PIT and the logarithmic score.
pub fn cpo_pit(sys: &LatentSystem, fit: &FitResult) -> Result<(CpoPit, Vec<String>)> {
    let gh = GaussHermite::standard();
    let n = sys.num_obs();
    let fams: Vec<Vec<Family<f64>>> = fit.grid.iter().map(|g| families(sys, g)).collect::<Result<_>>()?;
    let method = if n > CPO_EXACT_MAX_N { CpoMethod::HarmonicMean } else { CpoMethod::Cavity };
    let mut cpo = vec![0.0; n];
    let mut pit = vec![0.0; n];
    let mut failed = Vec::new();
    let mut fallbacks = Vec::new();
    for i in 0..n {
        let y = sys.y[i];
        let b = sys.obs_block[i];
        let mut use_cavity = method == CpoMethod::Cavity;
        if !use_cavity {
            // E[1/p] and E[1/p²] per grid point, relative to the density at
            // the posterior mean to stay in range.
            let mut inv = 0.0;
            let mut inv2 = 0.0;
            let mut pit_num = 0.0;
            let base = logpdf(&fams[0][b], y, fit.grid[0].obs[i].mean);
            for (g, f) in fit.grid.iter().zip(&fams) {
                let o = &g.obs[i];
                let f = &f[b];
                inv += g.weight * expect(gh, o.mean, o.var, |e| (base - logpdf(f, y, e)).exp());
                inv2 += g.weight * expect(gh, o.mean, o.var, |e| (2.0 * (base - logpdf(f, y, e))).exp());
                pit_num += g.weight
                    * expect(gh, o.mean, o.var, |e| (base - logpdf(f, y, e)).exp() * f.cdf(y, e).unwrap_or(0.0));
            }
            let cv = ((inv2 / (inv * inv)) - 1.0).max(0.0).sqrt();
            if cv.is_finite() && cv <= CPO_WEIGHT_CV_MAX && inv.is_finite() && inv > 0.0 {
                cpo[i] = base.exp() / inv;
                pit[i] = (pit_num / inv).clamp(0.0, 1.0);
            } else {
                fallbacks.push(i);
                use_cavity = true;
            }
        }
        if use_cavity {
            let mut inv = 0.0;
            let mut pit_num = 0.0;
            for (g, f) in fit.grid.iter().zip(&fams) {
                let (mc, vc) = cavity(&g.obs[i]);
                let (dens, p) = cavity_terms(gh, &f[b], y, mc, vc);
                if dens > 0.0 {
                    inv += g.weight / dens;
                    pit_num += g.weight / dens * p;
                } else {
                    inv = f64::INFINITY;
                }
            }
            if inv.is_finite() && inv > 0.0 {
                cpo[i] = 1.0 / inv;
                pit[i] = (pit_num / inv).clamp(0.0, 1.0);
            } else {
                cpo[i] = 0.0;
                pit[i] = f64::NAN;
            }
        }
        if !(cpo[i] > 0.0) || !cpo[i].is_finite() {
            failed.push(i);
        }
    }
    let ls = -(0..n).filter(|i| !failed.contains(i)).map(|i| cpo[i].ln()).sum::<f64>();
    let mut warnings = Vec::new();
    if !failed.is_empty() {
        warnings.push(format!("{} CPO values underflowed and were excluded from LS", failed.len()));
    }
    if !fallbacks.is_empty() {
        warnings.push(format!(
            "{} observations had importance-weight CV above {CPO_WEIGHT_CV_MAX}; used the leave-one-out cavity",
            fallbacks.len()
        ));
    }
    Ok((CpoPit { cpo, pit, ls, failed, method, fallbacks }, warnings))
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 && sbb == 0.0 {
        // Identical constant vectors agree perfectly.
        return if a == b { 1.0 } else { f64::NAN };
    }
    sab / (saa * sbb).sqrt()
}

pub fn rmse(pred: &[f64], obs: &[f64]) -> f64 {
    (pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum::<f64>() / pred.len() as f64).sqrt()
}

pub fn validation_metrics(pairs: &[PredictedValue]) -> Result<ValidationMetrics> {
    if pairs.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let inside = pairs.iter().filter(|p| p.lower <= p.observed && p.observed <= p.upper).count();
    let mean: Vec<f64> = pairs.iter().map(|p| p.mean).collect();
    let obs: Vec<f64> = pairs.iter().map(|p| p.observed).collect();
    Ok(ValidationMetrics {
        coverage: inside as f64 / pairs.len() as f64,
        correlation: pearson(&mean, &obs),
        rmse: rmse(&mean, &obs),
        n: pairs.len(),
    })
}

/// Posterior mean of `E[Y | η, θ]` per training observation.
pub fn fitted_response_means(sys: &LatentSystem, fit: &FitResult) -> Result<Vec<f64>> {
    let gh = GaussHermite::standard();
    let fams: Vec<Vec<Family<f64>>> = fit.grid.iter().map(|g| families(sys, g)).collect::<Result<_>>()?;
    Ok((0..sys.num_obs())
        .map(|i| {
            fit.grid
                .iter()
                .zip(&fams)
                .map(|(g, f)| {
                    let o = &g.obs[i];
                    g.weight * expect(gh, o.mean, o.var, |e| f[sys.obs_block[i]].mean(e))
                })
                .sum()
        })
        .collect())
}

pub fn evaluate(
    sys: &LatentSystem,
    fit: &FitResult,
    validation: Option<&[PredictedValue]>,
) -> Result<EvaluationReport> {
    let (dic, mut warnings) = dic(sys, fit)?;
    let (waic, w) = waic(sys, fit)?;
    warnings.extend(w);
    let (cpo, w) = cpo_pit(sys, fit)?;
    warnings.extend(w);
    let fitted = fitted_response_means(sys, fit)?;
    let rmse = rmse(&fitted, &sys.y);
    let validation = validation.map(validation_metrics).transpose()?;
    for w in &warnings {
        log::warn!("{}: {w}", fit.label);
    }
    Ok(EvaluationReport { label: fit.label.clone(), dic, waic, cpo, rmse, validation, warnings })
}

/// Kolmogorov–Smirnov test of uniformity on `[0, 1]`: statistic and
/// asymptotic p-value.
pub fn ks_uniform(values: &[f64]) -> (f64, f64) {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let nf = n as f64;
    let d = v.iter().enumerate().map(|(i, &x)| ((i + 1) as f64 / nf - x).max(x - i as f64 / nf)).fold(0.0f64, f64::max);
    let sn = nf.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    (d, p.clamp(0.0, 1.0))
}

/// Per-observation CSV: index, block, response, η moments, CPO, PIT.
pub fn write_observation_csv<W: Write>(
    out: W,
    sys: &LatentSystem,
    fit: &FitResult,
    report: &EvaluationReport,
    labels: Option<&[(String, i32)]>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    w.write_record(["obs", "station_id", "year", "block", "y_log", "eta_mean", "eta_sd", "cpo", "pit", "cpo_failed"])
        .map_err(e)?;
    for i in 0..sys.num_obs() {
        let (sid, year) = labels.map(|l| (l[i].0.clone(), l[i].1.to_string())).unwrap_or_default();
        w.write_record([
            i.to_string(),
            sid,
            year,
            sys.spec.blocks[sys.obs_block[i]].name.clone(),
            format!("{:.10e}", sys.y[i]),
            format!("{:.10e}", fit.eta_mean[i]),
            format!("{:.10e}", fit.eta_sd[i]),
            format!("{:.10e}", report.cpo.cpo[i]),
            format!("{:.10e}", report.cpo.pit[i]),
            report.cpo.failed.contains(&i).to_string(),
        ])
        .map_err(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Training-set criteria header in the column order `DIC, WAIC, LS, RMSE`,
/// then validation `coverage, correlation, RMSE`.
pub const CRITERIA_HEADER: [&str; 11] =
    ["model", "dic", "p_d", "waic", "p_waic", "ls", "rmse", "cpo_failed", "coverage", "correlation", "validation_rmse"];

pub fn criteria_row(r: &EvaluationReport) -> Vec<String> {
    let v = |x: Option<f64>| x.map(|x| format!("{x:.6}")).unwrap_or_default();
    vec![
        r.label.clone(),
        format!("{:.6}", r.dic.dic),
        format!("{:.6}", r.dic.p_d),
        format!("{:.6}", r.waic.waic),
        format!("{:.6}", r.waic.p_waic),
        format!("{:.6}", r.cpo.ls),
        format!("{:.6}", r.rmse),
        r.cpo.failed.len().to_string(),
        v(r.validation.map(|m| m.coverage)),
        v(r.validation.map(|m| m.correlation)),
        v(r.validation.map(|m| m.rmse)),
    ]
}

/// Plain-text tables: training criteria then validation criteria.
pub fn summary_text(reports: &[EvaluationReport]) -> String {
    let mut s = String::new();
    s.push_str("Training set (lower is better)\n");
    s.push_str(&format!("{:<12} {:>14} {:>14} {:>14} {:>10}\n", "Model", "DIC", "WAIC", "LS", "RMSE"));
    for r in reports {
        s.push_str(&format!(
            "{:<12} {:>14.2} {:>14.2} {:>14.2} {:>10.4}\n",
            r.label, r.dic.dic, r.waic.waic, r.cpo.ls, r.rmse
        ));
    }
    if reports.iter().any(|r| r.validation.is_some()) {
        s.push_str("\nValidation set (log scale)\n");
        s.push_str(&format!("{:<12} {:>22} {:>12} {:>10}\n", "Model", "Coverage Probability", "Correlation", "RMSE"));
        for r in reports {
            if let Some(m) = r.validation {
                s.push_str(&format!(
                    "{:<12} {:>21.2}% {:>12.4} {:>10.4}\n",
                    r.label,
                    100.0 * m.coverage,
                    m.correlation,
                    m.rmse
                ));
            }
        }
    }
    s
}

/// Hyperparameters of a kind, for reporting.
pub fn hypers_of_kind(fit: &FitResult, kind: HyperKind) -> Vec<&crate::inference::HyperMarginal> {
    fit.hypers.iter().filter(|h| h.kind == kind).collect()
}
