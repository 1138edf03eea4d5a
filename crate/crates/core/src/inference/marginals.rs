//! Summaries of Gaussian mixtures.

use crate::numeric::{brent_root, normal_cdf};

/// Posterior summary of one scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl Marginal {
    /// `Prob(value < 0)` under a Gaussian with the reported moments.
    pub fn prob_negative(&self) -> f64 {
        if self.sd > 0.0 {
            normal_cdf(-self.mean / self.sd)
        } else if self.mean < 0.0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn covers(&self, value: f64) -> bool {
        self.q025 <= value && value <= self.q975
    }
}

pub fn mixture_cdf(weights: &[f64], means: &[f64], vars: &[f64], x: f64) -> f64 {
    weights
        .iter()
        .zip(means.iter().zip(vars))
        .map(|(&w, (&m, &v))| {
            if v > 0.0 {
                w * normal_cdf((x - m) / v.sqrt())
            } else if x >= m {
                w
            } else {
                0.0
            }
        })
        .sum()
}

pub fn mixture_moments(weights: &[f64], means: &[f64], vars: &[f64]) -> (f64, f64) {
    let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m).sum();
    let second: f64 = weights.iter().zip(means.iter().zip(vars)).map(|(w, (m, v))| w * (v + m * m)).sum();
    (mean, (second - mean * mean).max(0.0))
}

pub fn mixture_quantile(weights: &[f64], means: &[f64], vars: &[f64], p: f64) -> f64 {
    if weights.len() == 1 {
        return means[0] + vars[0].max(0.0).sqrt() * crate::numeric::normal_quantile(p);
    }
    let sd_max = vars.iter().fold(0.0f64, |m, &v| m.max(v)).sqrt();
    let lo = means.iter().fold(f64::INFINITY, |a, &b| a.min(b)) - 12.0 * sd_max - 1e-12;
    let hi = means.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) + 12.0 * sd_max + 1e-12;
    let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    brent_root(|x| mixture_cdf(weights, means, vars, x) - p, lo, hi, tol).unwrap_or(0.5 * (lo + hi))
}

pub fn mixture_marginal(name: &str, weights: &[f64], means: &[f64], vars: &[f64]) -> Marginal {
    let (mean, var) = mixture_moments(weights, means, vars);
    Marginal {
        name: name.to_string(),
        mean,
        sd: var.sqrt(),
        q025: mixture_quantile(weights, means, vars, 0.025),
        q50: mixture_quantile(weights, means, vars, 0.5),
        q975: mixture_quantile(weights, means, vars, 0.975),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_matches_normal() {
        let m = mixture_marginal("b", &[1.0], &[2.0], &[0.25]);
        assert!((m.q975 - (2.0 + 0.5 * 1.959963984540054)).abs() < 1e-10);
        let two = mixture_marginal("b", &[0.5, 0.5], &[2.0, 2.0], &[0.25, 0.25]);
        assert!((two.q025 - m.q025).abs() < 1e-9);
        assert!((two.sd - 0.5).abs() < 1e-12);
    }
}
