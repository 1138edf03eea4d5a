//! Piecewise-linear finite-element matrices on a triangular mesh.

use crate::error::{Error, Result};
use crate::mesh::TriangularMesh;
use crate::real::Real;
use crate::sparse::{CscMatrix, Triplets};

/// Lumped mass `C` (diagonal) and stiffness `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct FemMatrices<T> {
    /// Diagonal of the row-sum-lumped mass matrix, in area units.
    pub c: Vec<T>,
    pub g: CscMatrix<T>,
}

impl<T: Real> FemMatrices<T> {
    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn c_matrix(&self) -> CscMatrix<T> {
        CscMatrix::from_diagonal(&self.c)
    }

    /// `G C⁻¹ G`.
    pub fn g_cinv_g(&self) -> CscMatrix<T> {
        let inv: Vec<T> = self.c.iter().map(|&c| T::one() / c).collect();
        let mut scaled = self.g.clone();
        for j in 0..scaled.ncols {
            for p in scaled.colptr[j]..scaled.colptr[j + 1] {
                scaled.values[p] *= inv[scaled.rowidx[p]];
            }
        }
        self.g.matmul(&scaled).expect("square FEM matrices")
    }
}

/// Assembles the lumped mass and stiffness matrices.
pub fn assemble_fem<T: Real>(mesh: &TriangularMesh<T>) -> Result<FemMatrices<T>> {
    let n = mesh.num_nodes();
    let mut c = vec![T::zero(); n];
    let mut g = Triplets::with_capacity(n, n, 9 * mesh.num_triangles());
    let nodes = mesh.nodes();
    let three = T::lit(3.0);
    let four = T::lit(4.0);
    for (t, tri) in mesh.triangles().iter().enumerate() {
        let area = mesh.signed_area(t).abs();
        if !(area > T::zero()) {
            return Err(Error::Assembly(format!("triangle {t} has zero area")));
        }
        let p = tri.map(|i| nodes[i]);
        // Gradient numerators of the barycentric basis: b = Δy, c = −Δx.
        let bx: [T; 3] = std::array::from_fn(|i| p[(i + 1) % 3][1] - p[(i + 2) % 3][1]);
        let cy: [T; 3] = std::array::from_fn(|i| p[(i + 2) % 3][0] - p[(i + 1) % 3][0]);
        for i in 0..3 {
            c[tri[i]] += area / three;
            for j in 0..3 {
                g.push(tri[i], tri[j], (bx[i] * bx[j] + cy[i] * cy[j]) / (four * area));
            }
        }
    }
    Ok(FemMatrices { c, g: g.to_csc() })
}
