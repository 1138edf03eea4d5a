use crate::real::Real;

/// Modified Bessel function of the second kind, `K_ν(x)` for `x > 0`, from
/// the trapezoidal rule applied to `K_ν(x) = ∫₀^∞ exp(−x cosh t) cosh(νt) dt`.
/// The integrand is entire and decays doubly exponentially, so a fixed step
/// of 0.1 is accurate to machine precision.
pub fn bessel_k<T: Real>(nu: T, x: T) -> T {
    if x <= T::zero() {
        return T::infinity();
    }
    let h = T::lit(0.1);
    let nu = nu.abs();
    let cutoff = T::lit(45.0);
    // Summed with exp(x) factored out so large arguments stay representable.
    let mut sum = T::lit(0.5);
    let mut k = 1usize;
    loop {
        let t = h * T::from_count(k);
        let expo = x * (t.cosh() - T::one());
        sum += (nu * t - expo).exp() * T::lit(0.5) + (-nu * t - expo).exp() * T::lit(0.5);
        if expo - nu * t > cutoff {
            break;
        }
        k += 1;
    }
    sum * h * (-x).exp()
}

/// `K₁(x)`.
pub fn bessel_k1<T: Real>(x: T) -> T {
    bessel_k(T::one(), x)
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut x = -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p);
    // Newton polish; the inverse-erfc approximation is good to ~1e-9 only.
    for _ in 0..2 {
        let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if pdf <= 0.0 {
            break;
        }
        x -= (normal_cdf(x) - p) / pdf;
    }
    x
}

/// Log-density of `N(mean, sd²)` at `x`.
pub fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}
