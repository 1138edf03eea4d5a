//! Stationary AR(1) precisions and separable space–time precisions.

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::sparse::{CscMatrix, Triplets};
use crate::spde::SparsePrecision;

/// Guard on Kronecker products: above this many stored entries the product
/// is refused rather than allocated.
pub const MAX_KRONECKER_NNZ: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Params<T> {
    /// Lag-one autocorrelation `a`.
    pub a: T,
    /// Innovation precision `τ`.
    pub tau: T,
}

impl<T: Real> Ar1Params<T> {
    pub fn new(a: T, tau: T) -> Result<Self> {
        if !(a.abs() < T::one()) {
            return invalid(format!("AR(1) autocorrelation must lie in (-1, 1), got {a}"));
        }
        if !(tau > T::zero()) || !tau.is_finite() {
            return invalid(format!("AR(1) precision must be positive, got {tau}"));
        }
        Ok(Self { a, tau })
    }

    /// Unit innovation precision, as used for space–time fields whose
    /// spatial innovations carry the variance.
    pub fn unit(a: T) -> Result<Self> {
        Self::new(a, T::one())
    }
}

/// The three fixed pieces of `Q/τ = D0 + a·Off + a²·Dint` for `T` times.
/// `D0` is the identity, `Off` has −1 on the first off-diagonals and `Dint`
/// is 1 on interior diagonal entries (or −1 for a single time point, where
/// the precision is `1 − a²`).
pub fn ar1_components<T: Real>(times: usize) -> Result<[CscMatrix<T>; 3]> {
    if times == 0 {
        return invalid("AR(1) needs at least one time point");
    }
    let d0 = CscMatrix::identity(times);
    let mut off = Triplets::new(times, times);
    for t in 1..times {
        off.push(t, t - 1, -T::one());
        off.push(t - 1, t, -T::one());
    }
    let dint: Vec<T> = if times == 1 {
        vec![-T::one()]
    } else {
        (0..times).map(|t| if t == 0 || t + 1 == times { T::zero() } else { T::one() }).collect()
    };
    Ok([d0, off.to_csc(), CscMatrix::from_diagonal(&dint)])
}

/// Tridiagonal precision of length-`T` stationary AR(1).
pub fn ar1_matrix<T: Real>(times: usize, params: &Ar1Params<T>) -> Result<CscMatrix<T>> {
    let [d0, off, dint] = ar1_components::<T>(times)?;
    let a = params.a;
    let q = d0.add_scaled(&off, a)?.add_scaled(&dint, a * a)?;
    Ok(q.scaled(params.tau))
}

/// `log det` of [`ar1_matrix`]: `T ln τ + ln(1 − a²)`.
pub fn ar1_log_determinant<T: Real>(times: usize, params: &Ar1Params<T>) -> T {
    T::from_count(times) * params.tau.ln() + (T::one() - params.a * params.a).ln()
}

pub fn ar1_precision<T: Real>(times: usize, params: &Ar1Params<T>) -> Result<SparsePrecision<T>> {
    SparsePrecision::new(ar1_matrix(times, params)?)
}

/// `Q_time ⊗ Q_space` in time-major order: index(s, t) = t·n_space + s.
pub fn kronecker_st_matrix<T: Real>(q_time: &CscMatrix<T>, q_space: &CscMatrix<T>) -> Result<CscMatrix<T>> {
    let nnz = q_time.nnz().checked_mul(q_space.nnz());
    match nnz {
        Some(n) if n <= MAX_KRONECKER_NNZ => Ok(q_time.kron(q_space)),
        _ => Err(Error::Resource(format!(
            "space-time precision would need {}x{} stored entries (limit {MAX_KRONECKER_NNZ})",
            q_time.nnz(),
            q_space.nnz()
        ))),
    }
}

pub fn kronecker_st_precision<T: Real>(
    q_time: &SparsePrecision<T>,
    q_space: &SparsePrecision<T>,
) -> Result<SparsePrecision<T>> {
    SparsePrecision::new(kronecker_st_matrix(q_time.matrix(), q_space.matrix())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_point_example() {
        let q = ar1_matrix(3, &Ar1Params::new(0.5f64, 1.0).unwrap()).unwrap().to_dense();
        let expected = [[1.0, -0.5, 0.0], [-0.5, 1.25, -0.5], [0.0, -0.5, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((q[i][j] - expected[i][j]).abs() < 1e-15);
            }
        }
        let single = ar1_matrix(1, &Ar1Params::new(0.6f64, 2.0).unwrap()).unwrap();
        assert!((single.get(0, 0) - 2.0 * 0.64).abs() < 1e-15);
        assert!(ar1_matrix::<f64>(0, &Ar1Params::new(0.1, 1.0).unwrap()).is_err());
        assert!(Ar1Params::new(1.0f64, 1.0).is_err());
    }

    #[test]
    fn logdet_matches_factorization() {
        for times in [1usize, 2, 5] {
            let p = Ar1Params::new(-0.3f64, 1.7).unwrap();
            let f = ar1_precision(times, &p).unwrap();
            assert!((f.log_determinant() - ar1_log_determinant(times, &p)).abs() < 1e-12);
        }
    }
}
