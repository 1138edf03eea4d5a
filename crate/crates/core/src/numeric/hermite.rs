use std::sync::OnceLock;

use nalgebra::DMatrix;

/// Gauss–Hermite rule rescaled for expectations under a normal law.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    /// Standard-normal abscissae.
    pub nodes: Vec<f64>,
    /// Probability weights summing to one.
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds an `n`-point rule from the Golub–Welsch eigenproblem.
    pub fn new(n: usize) -> Self {
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jacobi[(i, i - 1)] = b;
            jacobi[(i - 1, i)] = b;
        }
        let eig = jacobi.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i] * std::f64::consts::SQRT_2, v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        Self { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1 / total).collect() }
    }

    /// Shared 40-point rule.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(40))
    }

    /// `E[f(X)]` for `X ~ N(mean, var)`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, var: f64, mut f: F) -> f64 {
        if var <= 0.0 {
            return f(mean);
        }
        let sd = var.sqrt();
        self.nodes.iter().zip(&self.weights).map(|(z, w)| w * f(mean + sd * z)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_moments() {
        let gh = GaussHermite::standard();
        assert!((gh.expect(1.0, 4.0, |x| x) - 1.0).abs() < 1e-12);
        assert!((gh.expect(1.0, 4.0, |x| (x - 1.0).powi(2)) - 4.0).abs() < 1e-11);
        assert!((gh.expect(0.0, 1.0, |x| x.powi(4)) - 3.0).abs() < 1e-11);
        assert!((gh.expect(0.0, 0.25, |x| x.exp()) - 0.125f64.exp()).abs() < 1e-12);
    }
}
