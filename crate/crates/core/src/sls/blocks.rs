//! Block lower-triangular operators and the stacked LTV matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LinearizationBundle;

/// A `T x T` block lower-triangular matrix with `p x q` blocks. Only blocks
/// `(k, j)` with `1 <= j <= k <= T` are stored (1-based, as in the stacked
/// state vector `[x_1; ...; x_T]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLowerTriangular {
    horizon: usize,
    rows: usize,
    cols: usize,
    blocks: Vec<DMatrix<f64>>,
}

fn tri_index(k: usize, j: usize) -> usize {
    debug_assert!(j >= 1 && j <= k);
    (k - 1) * k / 2 + (j - 1)
}

impl BlockLowerTriangular {
    pub fn zeros(horizon: usize, rows: usize, cols: usize) -> Self {
        let n = horizon * (horizon + 1) / 2;
        Self {
            horizon,
            rows,
            cols,
            blocks: vec![DMatrix::zeros(rows, cols); n],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Block `(k, j)`; `None` above the diagonal.
    pub fn block(&self, k: usize, j: usize) -> Option<&DMatrix<f64>> {
        (j >= 1 && j <= k && k <= self.horizon).then(|| &self.blocks[tri_index(k, j)])
    }

    pub fn block_mut(&mut self, k: usize, j: usize) -> &mut DMatrix<f64> {
        assert!(j >= 1 && j <= k && k <= self.horizon, "block ({k},{j}) is not stored");
        &mut self.blocks[tri_index(k, j)]
    }

    /// Block row `k`, columns `1..=k`, concatenated horizontally.
    pub fn row_blocks(&self, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows, k * self.cols);
        for j in 1..=k {
            out.view_mut((0, (j - 1) * self.cols), (self.rows, self.cols))
                .copy_from(&self.blocks[tri_index(k, j)]);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let t = self.horizon;
        let mut out = DMatrix::zeros(t * self.rows, t * self.cols);
        for k in 1..=t {
            for j in 1..=k {
                out.view_mut(((k - 1) * self.rows, (j - 1) * self.cols), (self.rows, self.cols))
                    .copy_from(&self.blocks[tri_index(k, j)]);
            }
        }
        out
    }

    /// Reads the lower-triangular blocks of a dense matrix, ignoring the rest.
    pub fn from_dense(m: &DMatrix<f64>, horizon: usize, rows: usize, cols: usize) -> Self {
        let mut out = Self::zeros(horizon, rows, cols);
        for k in 1..=horizon {
            for j in 1..=k {
                *out.block_mut(k, j) = m
                    .view(((k - 1) * rows, (j - 1) * cols), (rows, cols))
                    .into_owned();
            }
        }
        out
    }
}

/// `(A, B, Z)`: `A = blkdiag(A_1..A_{T-1}, 0)`, `B = blkdiag(B_1..B_{T-1}, 0)`
/// and `Z` the block down-shift of size `T n_x`.
pub fn assemble_blocks(
    bundle: &LinearizationBundle,
    horizon: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    if bundle.horizon() < horizon {
        return Err(Error::Dimension(format!(
            "bundle has {} steps, horizon {horizon} needs {horizon}",
            bundle.horizon()
        )));
    }
    if horizon == 0 {
        return Err(Error::Dimension("horizon must be positive".into()));
    }
    let nx = bundle.af[0].nrows();
    let nu = bundle.bf[0].ncols();
    for k in 0..horizon {
        if bundle.af[k].shape() != (nx, nx) || bundle.bf[k].shape() != (nx, nu) {
            return Err(Error::Dimension(format!("inconsistent Jacobian shape at step {k}")));
        }
    }
    let mut a = DMatrix::zeros(horizon * nx, horizon * nx);
    let mut b = DMatrix::zeros(horizon * nx, horizon * nu);
    for k in 1..horizon {
        a.view_mut(((k - 1) * nx, (k - 1) * nx), (nx, nx))
            .copy_from(&bundle.af[k]);
        b.view_mut(((k - 1) * nx, (k - 1) * nu), (nx, nu))
            .copy_from(&bundle.bf[k]);
    }
    let mut z = DMatrix::zeros(horizon * nx, horizon * nx);
    for k in 1..horizon {
        z.view_mut((k * nx, (k - 1) * nx), (nx, nx))
            .copy_from(&DMatrix::identity(nx, nx));
    }
    Ok((a, b, z))
}

/// `max |[I - Z A, -Z B][Phi_x; Phi_u] - Sigma|`.
pub fn affine_residual(
    phi_x: &BlockLowerTriangular,
    phi_u: &BlockLowerTriangular,
    sigma: &[Vec<f64>],
    blocks: &(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>),
) -> f64 {
    let (a, b, z) = blocks;
    let t = phi_x.horizon();
    let nx = phi_x.block_shape().0;
    let px = phi_x.to_dense();
    let pu = phi_u.to_dense();
    let eye = DMatrix::<f64>::identity(t * nx, t * nx);
    let mut lhs = (&eye - z * a) * px - z * b * pu;
    for (k, s) in sigma.iter().enumerate().take(t) {
        for i in 0..nx {
            lhs[(k * nx + i, k * nx + i)] -= s[i];
        }
    }
    lhs.amax()
}

/// Causal gain `K = Phi_u Phi_x^{-1}` by block back-substitution, so that the
/// result is exactly block lower-triangular. Singular diagonal blocks (zero
/// disturbance filter) are pseudo-inverted.
pub fn extract_gain(phi_x: &BlockLowerTriangular, phi_u: &BlockLowerTriangular) -> BlockLowerTriangular {
    let t = phi_x.horizon();
    let (nx, _) = phi_x.block_shape();
    let (nu, _) = phi_u.block_shape();
    let inv_diag: Vec<DMatrix<f64>> = (1..=t)
        .map(|j| {
            let d = phi_x.block(j, j).unwrap();
            d.clone()
                .try_inverse()
                .filter(|m| m.iter().all(|v| v.is_finite()) && d.abs().max() > 1e-12)
                .unwrap_or_else(|| {
                    d.clone()
                        .pseudo_inverse(1e-12)
                        .unwrap_or_else(|_| DMatrix::zeros(nx, nx))
                })
        })
        .collect();
    let mut k_gain = BlockLowerTriangular::zeros(t, nu, nx);
    for k in 1..=t {
        for j in (1..=k).rev() {
            let mut rhs = phi_u.block(k, j).unwrap().clone();
            for m in j + 1..=k {
                rhs -= k_gain.block(k, m).unwrap() * phi_x.block(m, j).unwrap();
            }
            *k_gain.block_mut(k, j) = rhs * &inv_diag[j - 1];
        }
    }
    k_gain
}
