//! Excursion functions and exceedance maps.
//!
//! Locations are ordered by marginal exceedance probability; the joint
//! probability that every location in each prefix of the ordering exceeds
//! the level is estimated by direct Monte Carlo from the Gaussian
//! approximation of the target linear predictors.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::predict::grid_targets;
use crate::inference::{exceedance_probability, target_moments, FitResult, LatentSystem, PredictionTarget};
use crate::numeric::normal_cdf;

pub const MIN_SAMPLES: usize = 1000;
/// Largest acceptable Monte Carlo standard error of a reported value.
pub const MAX_MC_SE: f64 = 0.02;
const BATCH: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "+" | "positive" | "pos" => Ok(Direction::Positive),
            "-" | "negative" | "neg" => Ok(Direction::Negative),
            _ => Err(Error::Config(format!("unknown excursion direction `{s}` (expected + or -)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcursionRequest {
    /// Response-scale threshold; applied to the log-scale predictor.
    pub threshold: f64,
    pub direction: Direction,
    pub targets: Vec<PredictionTarget>,
    pub samples: usize,
    pub seed: u64,
    /// Mix draws over the θ grid instead of using the modal point only.
    pub mix_grid: bool,
    pub threads: usize,
}

impl ExcursionRequest {
    pub fn check(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::InvalidArgument(format!("threshold must be positive, got {}", self.threshold)));
        }
        if self.samples < MIN_SAMPLES {
            return Err(Error::InvalidArgument(format!(
                "at least {MIN_SAMPLES} Monte Carlo samples are required, got {}",
                self.samples
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidArgument("no target locations".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExcursionResult {
    pub threshold: f64,
    pub log_threshold: f64,
    pub direction: Direction,
    /// Construction order, most to least likely to be in the set.
    pub order: Vec<usize>,
    /// Gaussian marginal probability of being beyond the level.
    pub marginal: Vec<f64>,
    /// Excursion function value per location (input order).
    pub value: Vec<f64>,
    pub mc_se: Vec<f64>,
    pub samples: usize,
    pub warnings: Vec<String>,
}

/// Excursion function of a Gaussian vector with the given mean and marginal
/// sds, `draw` producing one joint sample from an RNG.
pub fn excursion_gaussian<F>(
    mean: &[f64],
    sd: &[f64],
    level: f64,
    direction: Direction,
    samples: usize,
    seed: u64,
    threads: usize,
    draw: F,
) -> Result<ExcursionResult>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    let marginal = mean.iter().zip(sd).map(|(&mu, &s)| beyond_probability(mu, s, level, direction)).collect();
    excursion_mc(marginal, level, direction, samples, seed, threads, draw)
}

fn beyond_probability(mu: f64, s: f64, level: f64, direction: Direction) -> f64 {
    let p_above = if s > 0.0 {
        1.0 - normal_cdf((level - mu) / s)
    } else if mu > level {
        1.0
    } else {
        0.0
    };
    match direction {
        Direction::Positive => p_above,
        Direction::Negative => 1.0 - p_above,
    }
}

/// Nested-set excursion values from exact marginals and joint draws.
///
/// `F` at rank 1 is the exact marginal `p₁`; at rank `k` it is `p₁` times
/// the Monte Carlo fraction of draws beyond the level at rank 1 whose
/// leading run reaches rank `k`.
fn excursion_mc<F>(
    marginal: Vec<f64>,
    level: f64,
    direction: Direction,
    samples: usize,
    seed: u64,
    threads: usize,
    draw: F,
) -> Result<ExcursionResult>
where
    F: Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
{
    let m = marginal.len();
    let beyond = |x: f64| match direction {
        Direction::Positive => x > level,
        Direction::Negative => x < level,
    };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| marginal[b].total_cmp(&marginal[a]).then(a.cmp(&b)));

    // Per batch, histogram of the length of the leading run of locations
    // beyond the level.
    let n_batches = samples.div_ceil(BATCH);
    let run_batch = |b: usize| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64 + 1);
        let n = BATCH.min(samples - b * BATCH);
        let mut hist = vec![0usize; m + 1];
        for _ in 0..n {
            let x = draw(&mut rng);
            let run = order.iter().take_while(|&&j| beyond(x[j])).count();
            hist[run] += 1;
        }
        hist
    };
    let hists: Vec<Vec<usize>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
        pool.install(|| (0..n_batches).into_par_iter().map(run_batch).collect())
    } else {
        (0..n_batches).map(run_batch).collect()
    };
    let mut hist = vec![0usize; m + 1];
    for h in &hists {
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    // Count of draws whose run reaches at least rank k (1-based).
    let mut at_least = vec![0usize; m + 2];
    for k in (0..=m).rev() {
        at_least[k] = at_least[k + 1] + hist[k];
    }
    let p1 = order.first().map(|&j| marginal[j]).unwrap_or(0.0);
    let lead = at_least[1] as f64;
    let mut value = vec![0.0; m];
    let mut mc_se = vec![0.0; m];
    for (rank, &j) in order.iter().enumerate() {
        if rank == 0 {
            value[j] = p1;
        } else if lead > 0.0 {
            let r = at_least[rank + 1] as f64 / lead;
            value[j] = p1 * r;
            mc_se[j] = p1 * (r * (1.0 - r) / lead).sqrt();
        } else {
            // No draw reached the first location; only the bound `F ≤ p₁` is known.
            mc_se[j] = p1;
        }
    }
    let mut warnings = Vec::new();
    let worst = mc_se.iter().cloned().fold(0.0f64, f64::max);
    if worst > MAX_MC_SE {
        let r_var = if lead > 0.0 {
            order.iter().map(|&j| value[j] / p1 * (1.0 - value[j] / p1)).fold(0.0f64, f64::max)
        } else {
            0.25
        };
        let needed = p1 * r_var / (MAX_MC_SE * MAX_MC_SE);
        warnings.push(format!(
            "Monte Carlo standard error {worst:.4} exceeds {MAX_MC_SE}; about {} samples are needed",
            (needed.ceil() as usize).max(samples + 1)
        ));
    }
    Ok(ExcursionResult {
        threshold: level.exp(),
        log_threshold: level,
        direction,
        order,
        marginal,
        value,
        mc_se,
        samples,
        warnings,
    })
}

/// Excursion function of the fitted linear predictor at the request's
/// targets.
pub fn excursion_function(sys: &LatentSystem, fit: &FitResult, req: &ExcursionRequest) -> Result<ExcursionResult> {
    req.check()?;
    let level = req.threshold.ln();
    let locations: Vec<[f64; 2]> = req.targets.iter().map(|t| t.location).collect();
    let proj = sys.mesh.projection_matrix(&locations)?;
    let points: Vec<usize> = if req.mix_grid {
        (0..fit.grid.len()).collect()
    } else {
        let modal = fit.modal_point();
        vec![fit.grid.iter().position(|g| std::ptr::eq(g, modal)).expect("modal point is in the grid")]
    };
    let prepared = points
        .iter()
        .map(|&k| grid_targets(sys, &fit.grid[k].theta, &fit.grid[k].x, &req.targets, &proj))
        .collect::<Result<Vec<_>>>()?;
    let mut weights: Vec<f64> = points.iter().map(|&k| fit.grid[k].weight).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    // Marginal probabilities under the (mixture of) Gaussian approximations.
    let m = req.targets.len();
    let mut marginal = vec![0.0; m];
    for (gt, &w) in prepared.iter().zip(&weights) {
        for (i, (comb, innov, sp)) in gt.combos.iter().enumerate() {
            let mut dense = vec![0.0; sys.dim()];
            let mut mu = 0.0;
            for &(j, c) in comb {
                dense[j] += c;
                mu += c * gt.newton.x[j];
            }
            let mut v = gt.newton.factor.inverse_quadratic_form(&dense) + innov;
            if let (Some(f), false) = (&gt.spatial, sp.is_empty()) {
                let mut dv = vec![0.0; sys.n_space()];
                for &(node, wv) in sp {
                    dv[node] += wv;
                }
                v += f.inverse_quadratic_form(&dv);
            }
            marginal[i] += w * beyond_probability(mu, v.max(0.0).sqrt(), level, req.direction);
        }
    }
    let dim = sys.dim();
    let n_space = sys.n_space();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let k = if prepared.len() == 1 {
            0
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            weights
                .iter()
                .position(|w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(weights.len() - 1)
        };
        let gt = &prepared[k];
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let dx = gt.newton.factor.sample_transform(&z);
        let spatial = gt.spatial.as_ref().map(|f| {
            let z: Vec<f64> = (0..n_space).map(|_| rng.sample(StandardNormal)).collect();
            f.sample_transform(&z)
        });
        let shock: f64 = rng.sample(StandardNormal);
        gt.combos
            .iter()
            .map(|(comb, innov, sp)| {
                let mut v: f64 = comb.iter().map(|&(j, c)| c * (gt.newton.x[j] + dx[j])).sum();
                v += innov.sqrt() * shock;
                if let Some(s) = &spatial {
                    v += sp.iter().map(|&(node, wv)| wv * s[node]).sum::<f64>();
                }
                v
            })
            .collect()
    };
    let mut res = excursion_mc(marginal, level, req.direction, req.samples, req.seed, req.threads, draw)?;
    res.threshold = req.threshold;
    if req.mix_grid {
        log::info!("excursion draws mixed over {} grid points", prepared.len());
    }
    Ok(res)
}

/// Marginal `Prob(Y > u)` on the response scale for each threshold (rows)
/// and target (columns).
pub fn exceedance_map(
    sys: &LatentSystem,
    fit: &FitResult,
    thresholds: &[f64],
    targets: &[PredictionTarget],
) -> Result<Vec<Vec<f64>>> {
    if let Some(u) = thresholds.iter().find(|u| !(**u > 0.0)) {
        return Err(Error::InvalidArgument(format!("thresholds must be positive, got {u}")));
    }
    let tm = target_moments(sys, fit, targets)?;
    Ok(thresholds
        .iter()
        .map(|&u| {
            (0..targets.len())
                .map(|i| {
                    let fams: Vec<_> = tm.families.iter().map(|f| f[targets[i].block]).collect();
                    exceedance_probability(&tm.weights, &fams, &tm.means[i], &tm.vars[i], u.ln())
                })
                .collect()
        })
        .collect())
}

/// CSV `location_id, lon, lat, marginal_prob, excursion_value, mc_se`.
pub fn write_csv<W: Write>(out: W, ids: &[String], targets: &[PredictionTarget], res: &ExcursionResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let e = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
    w.write_record(["location_id", "lon", "lat", "marginal_prob", "excursion_value", "mc_se"]).map_err(e)?;
    for (i, t) in targets.iter().enumerate() {
        w.write_record([
            ids[i].clone(),
            t.location[0].to_string(),
            t.location[1].to_string(),
            format!("{:.8}", res.marginal[i]),
            format!("{:.8}", res.value[i]),
            format!("{:.8}", res.mc_se[i]),
        ])
        .map_err(e)?;
    }
    w.flush()?;
    Ok(())
}

/// GeoJSON feature collection of point features carrying the same fields.
pub fn geojson(ids: &[String], targets: &[PredictionTarget], res: &ExcursionResult) -> String {
    let features: Vec<serde_json::Value> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            serde_json::json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [t.location[0], t.location[1]] },
                "properties": {
                    "location_id": ids[i],
                    "marginal_prob": res.marginal[i],
                    "excursion_value": res.value[i],
                    "mc_se": res.mc_se[i],
                },
            })
        })
        .collect();
    let doc = serde_json::json!({
        "type": "FeatureCollection",
        "metadata": {
            "threshold": res.threshold,
            "log_threshold": res.log_threshold,
            "direction": res.direction,
            "samples": res.samples,
        },
        "features": features,
    });
    serde_json::to_string_pretty(&doc).expect("JSON values serialize")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn independent(mean: Vec<f64>, samples: usize, seed: u64) -> ExcursionResult {
        let sd = vec![1.0; mean.len()];
        let mu = mean.clone();
        excursion_gaussian(&mean, &sd, 0.0, Direction::Positive, samples, seed, 1, move |rng| {
            mu.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect()
        })
        .unwrap()
    }

    #[test]
    fn product_rule_for_independent_locations() {
        let q = |p: f64| crate::numeric::normal_quantile(p);
        let r = independent(vec![q(0.9), q(0.8)], 200_000, 3);
        assert_eq!(r.order, vec![0, 1]);
        assert!((r.value[0] - 0.9).abs() < 1e-12);
        assert_eq!(r.mc_se[0], 0.0);
        assert!((r.value[1] - 0.72).abs() < 3.0 * r.mc_se[1]);
    }

    #[test]
    fn nested_values_are_monotone() {
        let r = independent(vec![0.5, -0.2, 1.0, 0.0, 0.3], 5000, 1);
        let vals: Vec<f64> = r.order.iter().map(|&j| r.value[j]).collect();
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mean = vec![0.2, 0.1, -0.3];
        let sd = vec![1.0; 3];
        let f = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..3).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let a = excursion_gaussian(&mean, &sd, 0.0, Direction::Negative, 3500, 9, 1, f).unwrap();
        let b = excursion_gaussian(&mean, &sd, 0.0, Direction::Negative, 3500, 9, 3, f).unwrap();
        assert_eq!(a, b);
    }
}
