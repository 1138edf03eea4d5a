//! Prior log-densities for hyperparameters and coefficients.

use crate::error::{invalid, Result};
use crate::numeric::roots::brent_root;

/// Default prior sd of regression coefficients (precision 0.001).
pub const VAGUE_COEFFICIENT_SD: f64 = 31.622_776_601_683_793;

fn check_prob(name: &str, p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("{name} must lie in (0, 1), got {p}"));
    }
    Ok(())
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return invalid(format!("{name} must be positive, got {x}"));
    }
    Ok(())
}

/// PC prior on a standard deviation: `Prob(σ > u) = α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcSd {
    pub u: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl PcSd {
    pub fn new(u: f64, alpha: f64) -> Result<Self> {
        check_positive("pc_sd u", u)?;
        check_prob("pc_sd alpha", alpha)?;
        Ok(Self { u, alpha, lambda: -alpha.ln() / u })
    }

    pub fn log_density(&self, sigma: f64) -> f64 {
        if sigma > 0.0 {
            self.lambda.ln() - self.lambda * sigma
        } else {
            f64::NEG_INFINITY
        }
    }
}

pub fn pc_prior_sd_logdensity(sigma: f64, u: f64, alpha: f64) -> Result<f64> {
    Ok(PcSd::new(u, alpha)?.log_density(sigma))
}

/// Joint PC prior on Matérn range and sd in two dimensions:
/// `Prob(ρ < ρ₀) = α_ρ`, `Prob(σ > σ₀) = α_σ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcMatern {
    pub rho0: f64,
    pub alpha_rho: f64,
    pub sigma0: f64,
    pub alpha_sigma: f64,
    pub lambda_rho: f64,
    pub lambda_sigma: f64,
}

impl PcMatern {
    pub fn new(rho0: f64, alpha_rho: f64, sigma0: f64, alpha_sigma: f64) -> Result<Self> {
        check_positive("pc_matern range", rho0)?;
        check_positive("pc_matern sigma", sigma0)?;
        check_prob("pc_matern range alpha", alpha_rho)?;
        check_prob("pc_matern sigma alpha", alpha_sigma)?;
        // Prob(ρ < ρ₀) = exp(−λ_ρ/ρ₀) in closed form for d = 2.
        Ok(Self {
            rho0,
            alpha_rho,
            sigma0,
            alpha_sigma,
            lambda_rho: -alpha_rho.ln() * rho0,
            lambda_sigma: -alpha_sigma.ln() / sigma0,
        })
    }

    pub fn log_density(&self, rho: f64, sigma: f64) -> f64 {
        if !(rho > 0.0 && sigma > 0.0) {
            return f64::NEG_INFINITY;
        }
        self.lambda_rho.ln() + self.lambda_sigma.ln()
            - 2.0 * rho.ln()
            - self.lambda_rho / rho
            - self.lambda_sigma * sigma
    }

    /// Marginal log-density of the range alone.
    pub fn range_log_density(&self, rho: f64) -> f64 {
        if rho > 0.0 {
            self.lambda_rho.ln() - 2.0 * rho.ln() - self.lambda_rho / rho
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn sigma_log_density(&self, sigma: f64) -> f64 {
        if sigma > 0.0 {
            self.lambda_sigma.ln() - self.lambda_sigma * sigma
        } else {
            f64::NEG_INFINITY
        }
    }
}

pub fn pc_prior_matern_logdensity(rho: f64, sigma: f64, spec: &PcMatern) -> f64 {
    spec.log_density(rho, sigma)
}

/// PC prior on a correlation with base model `a = 1`, exponential in
/// `d(a) = √(1 − a)`, calibrated to `Prob(a > 0) = p₀`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcCor1 {
    pub p0: f64,
    pub lambda: f64,
}

impl PcCor1 {
    pub fn new(p0: f64) -> Result<Self> {
        check_prob("pc_cor1 probability", p0)?;
        // Prob(a > 0) = (1 − e^{−λ})/(1 − e^{−√2 λ}), which decreases from 1
        // towards 1/√2 as λ → 0 and rises to 1 as λ → ∞.
        let lower = std::f64::consts::FRAC_1_SQRT_2;
        if p0 <= lower {
            return invalid(format!("pc_cor1 requires Prob(a > 0) above {lower:.4}, got {p0}"));
        }
        let f = |l: f64| prob_positive(l) - p0;
        let lambda = brent_root(f, 1e-8, 200.0, 1e-14)?;
        Ok(Self { p0, lambda })
    }

    pub fn log_density(&self, a: f64) -> f64 {
        if !(a > -1.0 && a < 1.0) {
            return f64::NEG_INFINITY;
        }
        let l = self.lambda;
        let d = (1.0 - a).sqrt();
        let norm = -(-std::f64::consts::SQRT_2 * l).exp_m1();
        l.ln() - l * d - (2.0 * d).ln() - norm.ln()
    }
}

fn prob_positive(lambda: f64) -> f64 {
    (-lambda).exp_m1() / (-std::f64::consts::SQRT_2 * lambda).exp_m1()
}

pub fn pc_prior_cor1_logdensity(a: f64, spec: &PcCor1) -> f64 {
    spec.log_density(a)
}

pub fn gaussian_prior_logdensity(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * std::f64::consts::TAU.ln()
}

/// Normal density truncated to `(lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
    log_mass: f64,
}

impl TruncatedGaussian {
    pub fn new(mean: f64, sd: f64, lower: f64, upper: f64) -> Result<Self> {
        check_positive("truncated gaussian sd", sd)?;
        if !(lower < upper) {
            return invalid(format!("empty truncation interval ({lower}, {upper})"));
        }
        let phi = |x: f64| crate::numeric::normal_cdf((x - mean) / sd);
        let mass: f64 = phi(upper) - phi(lower);
        Ok(Self { mean, sd, lower, upper, log_mass: mass.ln() })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        if x > self.lower && x < self.upper {
            gaussian_prior_logdensity(x, self.mean, self.sd) - self.log_mass
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Prior attached to one scalar hyperparameter on its natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorSpec {
    PcSd(PcSd),
    /// Range half of a [`PcMatern`] pair.
    PcRange(PcMatern),
    PcCor1(PcCor1),
    Gaussian {
        mean: f64,
        sd: f64,
    },
    TruncatedGaussian(TruncatedGaussian),
}

impl PriorSpec {
    pub fn gaussian(mean: f64, sd: f64) -> Result<Self> {
        check_positive("gaussian prior sd", sd)?;
        Ok(PriorSpec::Gaussian { mean, sd })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        match self {
            PriorSpec::PcSd(p) => p.log_density(x),
            PriorSpec::PcRange(p) => p.range_log_density(x),
            PriorSpec::PcCor1(p) => p.log_density(x),
            PriorSpec::Gaussian { mean, sd } => gaussian_prior_logdensity(x, *mean, *sd),
            PriorSpec::TruncatedGaussian(p) => p.log_density(x),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            PriorSpec::PcSd(p) => format!("pc_sd(u={}, alpha={}; lambda={:.6})", p.u, p.alpha, p.lambda),
            PriorSpec::PcRange(p) => {
                format!("pc_range(rho0={}, alpha={}; lambda={:.6})", p.rho0, p.alpha_rho, p.lambda_rho)
            }
            PriorSpec::PcCor1(p) => format!("pc_cor1(p0={}; lambda={:.6})", p.p0, p.lambda),
            PriorSpec::Gaussian { mean, sd } => format!("gaussian(mean={mean}, sd={sd})"),
            PriorSpec::TruncatedGaussian(p) => {
                format!("gaussian(mean={}, sd={}) on ({}, {})", p.mean, p.sd, p.lower, p.upper)
            }
        }
    }
}

/// Default tail-parameter prior: N(0, 0.25²) on (−0.5, 0.5).
pub fn default_gev_shape_prior() -> PriorSpec {
    PriorSpec::TruncatedGaussian(TruncatedGaussian::new(0.0, 0.25, -0.5, 0.5).expect("valid constants"))
}

/// Default sharing-coefficient prior: N(0, 5²).
pub fn default_sharing_prior() -> PriorSpec {
    PriorSpec::Gaussian { mean: 0.0, sd: 5.0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rates() {
        assert!((PcSd::new(3.0, 0.01).unwrap().lambda - 1.5351).abs() < 1e-4);
        assert!((PcSd::new(5.0, 0.01).unwrap().lambda - 0.9210).abs() < 1e-4);
        assert!((VAGUE_COEFFICIENT_SD - 1.0 / 0.001f64.sqrt()).abs() < 1e-12);
        assert_eq!(PcSd::new(3.0, 0.01).unwrap().log_density(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn cor1_calibration() {
        let p = PcCor1::new(0.9).unwrap();
        assert!((prob_positive(p.lambda) - 0.9).abs() < 1e-12);
        assert_eq!(p.log_density(1.0), f64::NEG_INFINITY);
        assert!(PcCor1::new(0.5).is_err());
    }

    #[test]
    fn gaussian_symmetry() {
        let c = gaussian_prior_logdensity(2.0, 2.0, 3.0);
        assert!((c + (3.0 * (2.0 * std::f64::consts::PI).sqrt()).ln()).abs() < 1e-14);
        assert_eq!(gaussian_prior_logdensity(3.0, 2.0, 3.0), gaussian_prior_logdensity(1.0, 2.0, 3.0));
    }
}
