//! Compressed sparse matrices and sparse Cholesky factorization.

mod cholesky;
mod ordering;

use std::fmt::Write as _;

pub use cholesky::{CholeskyFactor, SelectedInverse, SymbolicCholesky};
pub use ordering::minimum_degree_order;

use crate::error::{invalid, Result};
use crate::real::Real;

/// Coordinate-format builder; duplicates are summed on compression.
#[derive(Debug, Clone)]
pub struct Triplets<T> {
    pub nrows: usize,
    pub ncols: usize,
    entries: Vec<(usize, usize, T)>,
}

impl<T: Real> Triplets<T> {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, entries: Vec::new() }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self { nrows, ncols, entries: Vec::with_capacity(cap) }
    }

    pub fn push(&mut self, row: usize, col: usize, value: T) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_csc(&self) -> CscMatrix<T> {
        let mut sorted = self.entries.clone();
        sorted.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let mut colptr = vec![0usize; self.ncols + 1];
        let mut rowidx = Vec::with_capacity(sorted.len());
        let mut values: Vec<T> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                rowidx.push(r);
                values.push(v);
                colptr[c + 1] += 1;
                last = Some((r, c));
            }
        }
        for j in 0..self.ncols {
            colptr[j + 1] += colptr[j];
        }
        CscMatrix { nrows: self.nrows, ncols: self.ncols, colptr, rowidx, values }
    }

    pub fn to_csr(&self) -> CsrMatrix<T> {
        let t = Triplets {
            nrows: self.ncols,
            ncols: self.nrows,
            entries: self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect(),
        }
        .to_csc();
        CsrMatrix { nrows: self.nrows, ncols: self.ncols, rowptr: t.colptr, colidx: t.rowidx, values: t.values }
    }
}

/// Compressed sparse column matrix. Row indices are sorted within each
/// column and explicit zeros are retained so patterns stay stable.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> CscMatrix<T> {
    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![T::one(); n])
    }

    pub fn from_diagonal(d: &[T]) -> Self {
        let n = d.len();
        Self { nrows: n, ncols: n, colptr: (0..=n).collect(), rowidx: (0..n).collect(), values: d.to_vec() }
    }

    pub fn from_dense(rows: &[Vec<T>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut t = Triplets::new(nrows, ncols);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    t.push(i, j, v);
                }
            }
        }
        t.to_csc()
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col(&self, j: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.colptr[j]..self.colptr[j + 1];
        self.rowidx[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    /// Position of entry `(i, j)` in the value array, if structurally present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let lo = self.colptr[j];
        let hi = self.colptr[j + 1];
        self.rowidx[lo..hi].binary_search(&i).ok().map(|p| p + lo)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.position(i, j).map_or(T::zero(), |p| self.values[p])
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.nrows];
        for j in 0..self.ncols {
            let xj = x[j];
            if xj == T::zero() {
                continue;
            }
            for p in self.colptr[j]..self.colptr[j + 1] {
                y[self.rowidx[p]] += self.values[p] * xj;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Triplets::with_capacity(self.ncols, self.nrows, self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                t.push(j, i, v);
            }
        }
        t.to_csc()
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s·other` over the union of both patterns.
    pub fn add_scaled(&self, other: &Self, s: T) -> Result<Self> {
        if self.nrows != other.nrows || self.ncols != other.ncols {
            return invalid("dimension mismatch in sparse addition");
        }
        let mut t = Triplets::with_capacity(self.nrows, self.ncols, self.nnz() + other.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                t.push(i, j, v);
            }
            for (i, v) in other.col(j) {
                t.push(i, j, s * v);
            }
        }
        Ok(t.to_csc())
    }

    /// Sparse product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.ncols != other.nrows {
            return invalid("dimension mismatch in sparse product");
        }
        let mut t = Triplets::new(self.nrows, other.ncols);
        let mut acc = vec![T::zero(); self.nrows];
        let mut mark = vec![usize::MAX; self.nrows];
        let mut touched = Vec::new();
        for j in 0..other.ncols {
            touched.clear();
            for (k, b) in other.col(j) {
                for (i, a) in self.col(k) {
                    if mark[i] != j {
                        mark[i] = j;
                        acc[i] = T::zero();
                        touched.push(i);
                    }
                    acc[i] += a * b;
                }
            }
            for &i in &touched {
                t.push(i, j, acc[i]);
            }
        }
        Ok(t.to_csc())
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &Self) -> Self {
        let mut t =
            Triplets::with_capacity(self.nrows * other.nrows, self.ncols * other.ncols, self.nnz() * other.nnz());
        for ja in 0..self.ncols {
            for (ia, va) in self.col(ja) {
                for jb in 0..other.ncols {
                    for (ib, vb) in other.col(jb) {
                        t.push(ia * other.nrows + ib, ja * other.ncols + jb, va * vb);
                    }
                }
            }
        }
        t.to_csc()
    }

    /// Largest absolute asymmetry `|A_ij − A_ji|`.
    pub fn asymmetry(&self) -> T {
        let mut worst = T::zero();
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.ncols]; self.nrows];
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                d[i][j] = v;
            }
        }
        d
    }

    /// Matrix Market coordinate text (general, 1-based).
    pub fn to_matrix_market(&self) -> String {
        let mut s = String::from("%%MatrixMarket matrix coordinate real general\n");
        let _ = writeln!(s, "{} {} {}", self.nrows, self.ncols, self.nnz());
        for j in 0..self.ncols {
            for (i, v) in self.col(j) {
                let _ = writeln!(s, "{} {} {}", i + 1, j + 1, v);
            }
        }
        s
    }
}

/// Compressed sparse row matrix, used for observation projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pub nrows: usize,
    pub ncols: usize,
    pub rowptr: Vec<usize>,
    pub colidx: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Real> CsrMatrix<T> {
    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.rowptr[i]..self.rowptr[i + 1];
        (&self.colidx[r.clone()], &self.values[r])
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        (0..self.nrows)
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x[j]).sum()
            })
            .collect()
    }

    pub fn transpose_matvec(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.ncols];
        for (i, &yi) in y.iter().enumerate().take(self.nrows) {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                out[j] += a * yi;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let mut d = vec![vec![T::zero(); self.ncols]; self.nrows];
        for (i, row) in d.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            for (&j, &a) in c.iter().zip(v) {
                row[j] += a;
            }
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates() {
        let mut t = Triplets::new(2, 2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, 0.0);
        let m = t.to_csc();
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.nnz(), 2, "explicit zeros retained");
    }

    #[test]
    fn kron_and_matmul_match_dense() {
        let a = CscMatrix::from_dense(&[vec![2.0, -1.0], vec![-1.0, 2.0]]);
        let b = CscMatrix::from_dense(&[vec![1.0, 0.5], vec![0.5, 3.0]]);
        let k = a.kron(&b).to_dense();
        assert_eq!(k[0][3], -0.5);
        assert_eq!(k[3][3], 6.0);
        let p = a.matmul(&b).unwrap().to_dense();
        assert_eq!(p[0][1], 2.0 * 0.5 - 3.0);
    }
}
