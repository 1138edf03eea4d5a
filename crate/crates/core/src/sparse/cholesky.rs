use std::sync::Arc;

use super::{minimum_degree_order, CscMatrix};
use crate::error::{Error, Result};
use crate::real::Real;

const NONE: usize = usize::MAX;

/// Ordering, elimination tree and factor pattern for a symmetric sparsity
/// pattern. Reused across every numeric factorization with the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicCholesky {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    iperm: Vec<usize>,
    source_colptr: Vec<usize>,
    source_rowidx: Vec<usize>,
    /// Upper triangle of the permuted matrix.
    upper_colptr: Vec<usize>,
    upper_rowidx: Vec<usize>,
    /// Source value index for every upper entry.
    upper_source: Vec<usize>,
    l_colptr: Vec<usize>,
    l_rowidx: Vec<usize>,
    /// Row patterns of L (topological order) for the up-looking numeric pass.
    row_ptr: Vec<usize>,
    row_pattern: Vec<usize>,
}

impl SymbolicCholesky {
    /// Analysis with a minimum-degree ordering.
    pub fn analyze<T: Real>(a: &CscMatrix<T>) -> Result<Self> {
        let perm = minimum_degree_order(a.ncols, &a.colptr, &a.rowidx);
        Self::analyze_with_order(a, perm)
    }

    pub fn analyze_with_order<T: Real>(a: &CscMatrix<T>, perm: Vec<usize>) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::InvalidArgument("Cholesky needs a square matrix".into()));
        }
        let n = a.ncols;
        if perm.len() != n {
            return Err(Error::InvalidArgument("ordering length mismatch".into()));
        }
        let mut iperm = vec![NONE; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        if iperm.contains(&NONE) {
            return Err(Error::InvalidArgument("ordering is not a permutation".into()));
        }
        let mut upper: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz() / 2 + n);
        for j in 0..n {
            for p in a.colptr[j]..a.colptr[j + 1] {
                let (pi, pj) = (iperm[a.rowidx[p]], iperm[j]);
                if pi <= pj {
                    upper.push((pj, pi, p));
                }
            }
        }
        upper.sort_unstable();
        let mut upper_colptr = vec![0usize; n + 1];
        for &(c, _, _) in &upper {
            upper_colptr[c + 1] += 1;
        }
        for j in 0..n {
            upper_colptr[j + 1] += upper_colptr[j];
        }
        let upper_rowidx: Vec<usize> = upper.iter().map(|e| e.1).collect();
        let upper_source: Vec<usize> = upper.iter().map(|e| e.2).collect();

        // Elimination tree.
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in upper_colptr[k]..upper_colptr[k + 1] {
                let mut i = upper_rowidx[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Row patterns via ereach; column patterns follow.
        let mut mark = vec![NONE; n];
        let mut stack = vec![0usize; n];
        let mut path = vec![0usize; n];
        let mut row_ptr = vec![0usize];
        let mut row_pattern = Vec::new();
        let mut col_counts = vec![1usize; n];
        for k in 0..n {
            mark[k] = k;
            let mut top = n;
            for p in upper_colptr[k]..upper_colptr[k + 1] {
                let mut i = upper_rowidx[p];
                if i > k {
                    continue;
                }
                let mut len = 0;
                while mark[i] != k {
                    path[len] = i;
                    len += 1;
                    mark[i] = k;
                    i = parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    stack[top] = path[len];
                }
            }
            for &i in &stack[top..n] {
                col_counts[i] += 1;
            }
            row_pattern.extend_from_slice(&stack[top..n]);
            row_ptr.push(row_pattern.len());
        }
        let mut l_colptr = vec![0usize; n + 1];
        for j in 0..n {
            l_colptr[j + 1] = l_colptr[j] + col_counts[j];
        }
        let mut next = l_colptr.clone();
        let mut l_rowidx = vec![0usize; l_colptr[n]];
        for k in 0..n {
            for &i in &row_pattern[row_ptr[k]..row_ptr[k + 1]] {
                l_rowidx[next[i]] = k;
                next[i] += 1;
            }
            l_rowidx[next[k]] = k;
            next[k] += 1;
        }
        Ok(Self {
            n,
            perm,
            iperm,
            source_colptr: a.colptr.clone(),
            source_rowidx: a.rowidx.clone(),
            upper_colptr,
            upper_rowidx,
            upper_source,
            l_colptr,
            l_rowidx,
            row_ptr,
            row_pattern,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_nnz(&self) -> usize {
        self.l_rowidx.len()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    fn matches<T>(&self, a: &CscMatrix<T>) -> bool {
        a.colptr == self.source_colptr && a.rowidx == self.source_rowidx
    }

    /// Numeric factorization of a matrix with exactly the analyzed pattern.
    pub fn factor<T: Real>(self: &Arc<Self>, a: &CscMatrix<T>) -> Result<CholeskyFactor<T>> {
        if !self.matches(a) {
            return Err(Error::InvalidArgument("matrix pattern differs from symbolic analysis".into()));
        }
        self.factor_values(&a.values)
    }

    /// Numeric factorization from a value array aligned with the analyzed
    /// source pattern.
    pub fn factor_values<T: Real>(self: &Arc<Self>, values: &[T]) -> Result<CholeskyFactor<T>> {
        let n = self.n;
        let mut lx = vec![T::zero(); self.l_rowidx.len()];
        let mut next: Vec<usize> = self.l_colptr[..n].to_vec();
        let mut x = vec![T::zero(); n];
        for k in 0..n {
            for p in self.upper_colptr[k]..self.upper_colptr[k + 1] {
                x[self.upper_rowidx[p]] = values[self.upper_source[p]];
            }
            let mut d = x[k];
            x[k] = T::zero();
            for &i in &self.row_pattern[self.row_ptr[k]..self.row_ptr[k + 1]] {
                let lki = x[i] / lx[self.l_colptr[i]];
                x[i] = T::zero();
                for p in self.l_colptr[i] + 1..next[i] {
                    x[self.l_rowidx[p]] -= lx[p] * lki;
                }
                d -= lki * lki;
                lx[next[i]] = lki;
                next[i] += 1;
            }
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::Factorization(format!(
                    "matrix not positive definite (pivot {} at permuted column {k}, original index {})",
                    d, self.perm[k]
                )));
            }
            lx[next[k]] = d.sqrt();
            next[k] += 1;
        }
        Ok(CholeskyFactor { symbolic: Arc::clone(self), values: lx })
    }
}

/// Numeric Cholesky factor `P A Pᵀ = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor<T> {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<T>,
}

impl<T: Real> CholeskyFactor<T> {
    /// One-shot analysis plus factorization.
    pub fn new(a: &CscMatrix<T>) -> Result<Self> {
        let s = Arc::new(SymbolicCholesky::analyze(a)?);
        s.factor(a)
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn dim(&self) -> usize {
        self.symbolic.n
    }

    pub fn log_determinant(&self) -> T {
        let s = &self.symbolic;
        let two = T::lit(2.0);
        (0..s.n).map(|j| two * self.values[s.l_colptr[j]].ln()).sum()
    }

    fn forward(&self, y: &mut [T]) {
        let s = &self.symbolic;
        for j in 0..s.n {
            let start = s.l_colptr[j];
            y[j] /= self.values[start];
            let yj = y[j];
            for p in start + 1..s.l_colptr[j + 1] {
                y[s.l_rowidx[p]] -= self.values[p] * yj;
            }
        }
    }

    fn backward(&self, y: &mut [T]) {
        let s = &self.symbolic;
        for j in (0..s.n).rev() {
            let start = s.l_colptr[j];
            let mut acc = y[j];
            for p in start + 1..s.l_colptr[j + 1] {
                acc -= self.values[p] * y[s.l_rowidx[p]];
            }
            y[j] = acc / self.values[start];
        }
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let s = &self.symbolic;
        let mut y: Vec<T> = s.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![T::zero(); s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// `‖L⁻¹ P b‖²`, i.e. `bᵀ A⁻¹ b`.
    pub fn inverse_quadratic_form(&self, b: &[T]) -> T {
        let s = &self.symbolic;
        let mut y: Vec<T> = s.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        y.iter().map(|&v| v * v).sum()
    }

    /// Maps standard-normal `z` to `Pᵀ L⁻ᵀ z`, a draw with covariance `A⁻¹`.
    pub fn sample_transform(&self, z: &[T]) -> Vec<T> {
        let s = &self.symbolic;
        let mut y = z.to_vec();
        self.backward(&mut y);
        let mut x = vec![T::zero(); s.n];
        for (new, &old) in s.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Entries of `A⁻¹` on the pattern of `L + Lᵀ` (Takahashi recursion).
    pub fn selected_inverse(&self) -> SelectedInverse<T> {
        let s = &self.symbolic;
        let n = s.n;
        let mut sigma = vec![T::zero(); self.values.len()];
        let lookup = |sigma: &[T], r: usize, c: usize| -> T {
            let (r, c) = if r >= c { (r, c) } else { (c, r) };
            let lo = s.l_colptr[c];
            let hi = s.l_colptr[c + 1];
            match s.l_rowidx[lo..hi].binary_search(&r) {
                Ok(p) => sigma[lo + p],
                Err(_) => T::zero(),
            }
        };
        for i in (0..n).rev() {
            let start = s.l_colptr[i];
            let end = s.l_colptr[i + 1];
            let lii = self.values[start];
            for q in start + 1..end {
                let j = s.l_rowidx[q];
                let mut acc = T::zero();
                for p in start + 1..end {
                    acc += self.values[p] * lookup(&sigma, s.l_rowidx[p], j);
                }
                sigma[q] = -acc / lii;
            }
            let mut acc = T::zero();
            for p in start + 1..end {
                acc += self.values[p] * sigma[p];
            }
            sigma[start] = (T::one() / lii - acc) / lii;
        }
        SelectedInverse { symbolic: Arc::clone(&self.symbolic), values: sigma }
    }
}

/// Covariance entries on the factor pattern.
#[derive(Debug, Clone)]
pub struct SelectedInverse<T> {
    symbolic: Arc<SymbolicCholesky>,
    values: Vec<T>,
}

impl<T: Real> SelectedInverse<T> {
    /// `(A⁻¹)_{ij}` in original indexing, when on the factor pattern.
    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        let s = &self.symbolic;
        let (a, b) = (s.iperm[i], s.iperm[j]);
        let (r, c) = if a >= b { (a, b) } else { (b, a) };
        let lo = s.l_colptr[c];
        let hi = s.l_colptr[c + 1];
        s.l_rowidx[lo..hi].binary_search(&r).ok().map(|p| self.values[lo + p])
    }

    pub fn diagonal(&self) -> Vec<T> {
        let s = &self.symbolic;
        (0..s.n).map(|i| self.values[s.l_colptr[s.iperm[i]]]).collect()
    }

    /// `cᵀ A⁻¹ c` for a sparse `c` whose support lies on the factor pattern.
    pub fn quadratic_form(&self, idx: &[usize], coef: &[T]) -> Option<T> {
        let mut acc = T::zero();
        for (a, (&i, &ci)) in idx.iter().zip(coef).enumerate() {
            acc += ci * ci * self.get(i, i)?;
            for (&j, &cj) in idx[a + 1..].iter().zip(&coef[a + 1..]) {
                if i == j {
                    acc += T::lit(2.0) * ci * cj * self.get(i, i)?;
                } else {
                    acc += T::lit(2.0) * ci * cj * self.get(i, j)?;
                }
            }
        }
        Some(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Triplets;

    fn laplacian_2d(m: usize) -> CscMatrix<f64> {
        let n = m * m;
        let mut t = Triplets::new(n, n);
        for i in 0..m {
            for j in 0..m {
                let k = i * m + j;
                t.push(k, k, 4.5);
                if i + 1 < m {
                    t.push(k, k + m, -1.0);
                    t.push(k + m, k, -1.0);
                }
                if j + 1 < m {
                    t.push(k, k + 1, -1.0);
                    t.push(k + 1, k, -1.0);
                }
            }
        }
        t.to_csc()
    }

    fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let inv = m.try_inverse().unwrap();
        (0..n).map(|i| (0..n).map(|j| inv[(i, j)]).collect()).collect()
    }

    #[test]
    fn solve_logdet_and_selected_inverse_match_dense() {
        let a = laplacian_2d(6);
        let f = CholeskyFactor::new(&a).unwrap();
        let b: Vec<f64> = (0..36).map(|i| (i as f64).sin()).collect();
        let x = f.solve(&b);
        let r = a.matvec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).abs() < 1e-12);
        }
        let dense = a.to_dense();
        let md = nalgebra::DMatrix::from_fn(36, 36, |i, j| dense[i][j]);
        let ld = md.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        assert!((f.log_determinant() - ld).abs() < 1e-10);
        let inv = dense_inverse(&dense);
        let sel = f.selected_inverse();
        let diag = sel.diagonal();
        for i in 0..36 {
            assert!((diag[i] - inv[i][i]).abs() < 1e-12);
            for j in 0..36 {
                if let Some(v) = sel.get(i, j) {
                    assert!((v - inv[i][j]).abs() < 1e-12);
                }
                if a.get(i, j) != 0.0 {
                    assert!(sel.get(i, j).is_some(), "pattern of A covered");
                }
            }
        }
        assert!((f.inverse_quadratic_form(&b) - b.iter().zip(&x).map(|(p, q)| p * q).sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn refactor_with_cached_symbolic_and_reject_indefinite() {
        let a = laplacian_2d(4);
        let sym = Arc::new(SymbolicCholesky::analyze(&a).unwrap());
        let f1 = sym.factor(&a).unwrap();
        let f2 = sym.factor(&a.scaled(4.0)).unwrap();
        assert!((f2.log_determinant() - f1.log_determinant() - 16.0 * 4f64.ln()).abs() < 1e-10);
        let bad = a.scaled(-1.0);
        assert!(matches!(sym.factor(&bad), Err(Error::Factorization(_))));
    }
}
