//! Dense quadrature matrices for small spectral systems.

use nalgebra::DMatrix;

use crate::spectral::DirichletBasis;

/// `E[m, j] = e_{j+1}(x_m)` for the first `modes` sine functions.
pub fn synthesis_matrix(basis: &DirichletBasis, modes: usize) -> DMatrix<f64> {
    let nodes = basis.nodes();
    DMatrix::from_fn(nodes.len(), modes, |m, j| basis.eigenfunction(j + 1, nodes[m]))
}

/// `h Eᵀ diag(w) E_cols`: the Galerkin matrix of multiplication by `w` on the grid, mapping
/// `E_cols`-coefficients to the rows of `E`.
pub fn weighted_gram(h: f64, rows: &DMatrix<f64>, weights: &[f64], cols: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = cols.clone();
    for (m, &w) in weights.iter().enumerate() {
        scaled.row_mut(m).scale_mut(h * w);
    }
    rows.tr_mul(&scaled)
}
