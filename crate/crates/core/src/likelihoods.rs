//! Observation densities with location derivatives.

use crate::error::{invalid, Error, Result};
use crate::numeric::special::{normal_cdf, normal_quantile};
use crate::real::Real;

/// Below this `|ξ|` the GEV is evaluated through its Gumbel limit.
pub const GEV_GUMBEL_SWITCH: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelParams<T> {
    pub location: T,
    pub scale: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GevParams<T> {
    pub location: T,
    pub scale: T,
    pub shape: T,
}

impl<T: Real> GumbelParams<T> {
    pub fn new(location: T, scale: T) -> Result<Self> {
        check_scale(scale)?;
        Ok(Self { location, scale })
    }

    /// Precision `τ_G = 1/σ²`.
    pub fn precision(&self) -> T {
        T::one() / (self.scale * self.scale)
    }
}

impl<T: Real> GevParams<T> {
    pub fn new(location: T, scale: T, shape: T) -> Result<Self> {
        check_scale(scale)?;
        if !shape.is_finite() {
            return invalid("GEV shape must be finite");
        }
        Ok(Self { location, scale, shape })
    }
}

fn check_scale<T: Real>(scale: T) -> Result<()> {
    if !(scale > T::zero()) || !scale.is_finite() {
        return invalid(format!("scale must be positive, got {scale}"));
    }
    Ok(())
}

pub fn gumbel_cdf<T: Real>(x: T, p: &GumbelParams<T>) -> Result<T> {
    check_scale(p.scale)?;
    let z = (x - p.location) / p.scale;
    Ok((-(-z).exp()).exp())
}

pub fn gumbel_logpdf<T: Real>(x: T, p: &GumbelParams<T>) -> Result<T> {
    check_scale(p.scale)?;
    let z = (x - p.location) / p.scale;
    Ok(-p.scale.ln() - z - (-z).exp())
}

fn gev_is_gumbel<T: Real>(shape: T) -> bool {
    shape.abs() < T::lit(GEV_GUMBEL_SWITCH)
}

/// `ln(1 + ξz)`, or `None` outside the support.
fn gev_log_s<T: Real>(z: T, shape: T) -> Option<T> {
    let xz = shape * z;
    if xz <= -T::one() {
        None
    } else {
        Some(xz.ln_1p())
    }
}

pub fn gev_cdf<T: Real>(x: T, p: &GevParams<T>) -> Result<T> {
    check_scale(p.scale)?;
    if gev_is_gumbel(p.shape) {
        return gumbel_cdf(x, &GumbelParams { location: p.location, scale: p.scale });
    }
    let z = (x - p.location) / p.scale;
    match gev_log_s(z, p.shape) {
        Some(ls) => Ok((-(-ls / p.shape).exp()).exp()),
        // Below the lower endpoint for ξ > 0, above the upper one for ξ < 0.
        None => Ok(if p.shape > T::zero() { T::zero() } else { T::one() }),
    }
}

/// Log-density; `-inf` outside the support.
pub fn gev_logpdf<T: Real>(x: T, p: &GevParams<T>) -> Result<T> {
    check_scale(p.scale)?;
    if gev_is_gumbel(p.shape) {
        return gumbel_logpdf(x, &GumbelParams { location: p.location, scale: p.scale });
    }
    let z = (x - p.location) / p.scale;
    Ok(match gev_log_s(z, p.shape) {
        Some(ls) => -p.scale.ln() - (T::one() + T::one() / p.shape) * ls - (-ls / p.shape).exp(),
        None => T::neg_infinity(),
    })
}

pub fn gaussian_cdf<T: Real>(x: T, mean: T, sd: T) -> Result<T> {
    check_scale(sd)?;
    Ok(T::lit(normal_cdf(((x - mean) / sd).as_f64())))
}

pub fn gaussian_logpdf<T: Real>(x: T, mean: T, sd: T) -> Result<T> {
    check_scale(sd)?;
    let z = (x - mean) / sd;
    Ok(-T::lit(0.5) * z * z - sd.ln() - T::lit(0.5) * (T::TAU()).ln())
}

/// Response family with its non-location parameters. The location is the
/// linear predictor, supplied per observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family<T> {
    Gaussian { sd: T },
    Gumbel { scale: T },
    Gev { scale: T, shape: T },
}

impl<T: Real> Family<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Gaussian { .. } => "gaussian",
            Family::Gumbel { .. } => "gumbel",
            Family::Gev { .. } => "gev",
        }
    }

    pub fn scale(&self) -> T {
        match *self {
            Family::Gaussian { sd } => sd,
            Family::Gumbel { scale } | Family::Gev { scale, .. } => scale,
        }
    }

    pub fn logpdf(&self, x: T, mu: T) -> Result<T> {
        match *self {
            Family::Gaussian { sd } => gaussian_logpdf(x, mu, sd),
            Family::Gumbel { scale } => gumbel_logpdf(x, &GumbelParams { location: mu, scale }),
            Family::Gev { scale, shape } => gev_logpdf(x, &GevParams { location: mu, scale, shape }),
        }
    }

    pub fn cdf(&self, x: T, mu: T) -> Result<T> {
        match *self {
            Family::Gaussian { sd } => gaussian_cdf(x, mu, sd),
            Family::Gumbel { scale } => gumbel_cdf(x, &GumbelParams { location: mu, scale }),
            Family::Gev { scale, shape } => gev_cdf(x, &GevParams { location: mu, scale, shape }),
        }
    }

    /// Inverse CDF for `p` in (0, 1).
    pub fn quantile(&self, p: T, mu: T) -> Result<T> {
        if !(p > T::zero() && p < T::one()) {
            return invalid(format!("probability must lie in (0, 1), got {p}"));
        }
        check_scale(self.scale())?;
        let mlp = -p.ln();
        Ok(match *self {
            Family::Gaussian { sd } => mu + sd * T::lit(normal_quantile(p.as_f64())),
            Family::Gumbel { scale } => mu - scale * mlp.ln(),
            Family::Gev { scale, shape } => {
                if gev_is_gumbel(shape) {
                    mu - scale * mlp.ln()
                } else {
                    mu + scale * ((-shape * mlp.ln()).exp_m1()) / shape
                }
            }
        })
    }

    /// Mean of the response given location `mu`; infinite for GEV with ξ ≥ 1.
    pub fn mean(&self, mu: T) -> T {
        let euler = T::lit(0.577_215_664_901_532_9);
        match *self {
            Family::Gaussian { .. } => mu,
            Family::Gumbel { scale } => mu + euler * scale,
            Family::Gev { scale, shape } => {
                if gev_is_gumbel(shape) {
                    mu + euler * scale
                } else if shape >= T::one() {
                    T::infinity()
                } else {
                    let g = T::lit(statrs::function::gamma::gamma((T::one() - shape).as_f64()));
                    mu + scale * (g - T::one()) / shape
                }
            }
        }
    }

    /// Variance of the response (independent of the location); infinite
    /// for GEV with ξ ≥ 1/2.
    pub fn variance(&self) -> T {
        match *self {
            Family::Gaussian { sd } => sd * sd,
            Family::Gumbel { scale } => T::PI() * T::PI() * scale * scale / T::lit(6.0),
            Family::Gev { scale, shape } => {
                if gev_is_gumbel(shape) {
                    T::PI() * T::PI() * scale * scale / T::lit(6.0)
                } else if shape >= T::lit(0.5) {
                    T::infinity()
                } else {
                    let gamma = |v: T| T::lit(statrs::function::gamma::gamma(v.as_f64()));
                    let g1 = gamma(T::one() - shape);
                    let g2 = gamma(T::one() - T::lit(2.0) * shape);
                    scale * scale * (g2 - g1 * g1) / (shape * shape)
                }
            }
        }
    }

    /// Whether `x` has positive density at location `mu`.
    pub fn in_support(&self, x: T, mu: T) -> bool {
        match *self {
            Family::Gev { scale, shape } if !gev_is_gumbel(shape) => T::one() + shape * (x - mu) / scale > T::zero(),
            _ => true,
        }
    }
}

/// First and second derivatives of the log-density with respect to the
/// location.
pub fn loglik_derivs<T: Real>(x: T, family: &Family<T>, mu: T) -> Result<(T, T)> {
    check_scale(family.scale())?;
    match *family {
        Family::Gaussian { sd } => {
            let v = sd * sd;
            Ok(((x - mu) / v, -T::one() / v))
        }
        Family::Gumbel { scale } => Ok(gumbel_derivs(x, mu, scale)),
        Family::Gev { scale, shape } => {
            if gev_is_gumbel(shape) {
                return Ok(gumbel_derivs(x, mu, scale));
            }
            let z = (x - mu) / scale;
            let s = T::one() + shape * z;
            if s <= T::zero() {
                return Err(Error::InvalidArgument(format!("observation {x} outside GEV support at location {mu}")));
            }
            let t = (-s.ln() / shape).exp();
            let ss = scale * s;
            let d1 = (T::one() + shape - t) / ss;
            let d2 = (-t + shape * (T::one() + shape - t)) / (ss * ss);
            Ok((d1, d2))
        }
    }
}

fn gumbel_derivs<T: Real>(x: T, mu: T, scale: T) -> (T, T) {
    let e = (-(x - mu) / scale).exp();
    ((T::one() - e) / scale, -e / (scale * scale))
}
