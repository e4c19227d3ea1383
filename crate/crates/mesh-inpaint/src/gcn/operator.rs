//! The scaled graph operator driving the Chebyshev recurrence.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::sparse::SparseMatrix;

/// L̂ = (2/λ_max) L_sym - I with λ_max fixed at 2, i.e. the negated
/// symmetrically normalized adjacency -D^{-1/2} A D^{-1/2}. Symmetric with
/// spectral radius at most 1.
#[derive(Debug, Clone)]
pub struct ScaledGraphOperator {
    matrix: SparseMatrix,
}

impl ScaledGraphOperator {
    pub fn from_mesh(mesh: &Mesh) -> Result<Self> {
        let n = mesh.vertex_count();
        let mut triplets = Vec::with_capacity(n * 7);
        for v in 0..n {
            let deg_v = mesh.degree(v);
            if deg_v == 0 {
                return Err(Error::Structure(format!(
                    "vertex {v} is isolated; the graph operator is undefined"
                )));
            }
            for &u in mesh.neighbors(v) {
                let w = -1.0 / ((deg_v as f64) * (mesh.degree(u) as f64)).sqrt();
                triplets.push((v, u, w));
            }
        }
        Ok(Self {
            matrix: SparseMatrix::from_triplets(n, n, &triplets)?,
        })
    }

    /// Wrap an explicit sparse matrix (tests and degenerate graphs).
    pub fn from_sparse(matrix: SparseMatrix) -> Self {
        Self { matrix }
    }

    pub fn size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.matrix.mul_dense(x)
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn operator_is_symmetric_with_unit_spectral_radius() {
        let mesh = fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let d = op.matrix().to_dense();
        let diff = (&d - d.transpose()).abs().max();
        assert!(diff < 1e-15);
        let eigen = nalgebra::SymmetricEigen::new(d);
        let radius = eigen.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(radius <= 1.0 + 1e-9, "spectral radius {radius}");
    }
}
