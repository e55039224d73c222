//! Half-space polytopes `{x | H x <= h}` and vertex enumeration.
//!
//! Vertex enumeration is done by intersecting every `dim`-subset of facets,
//! which is exact but combinatorial; it is restricted to `dim <= 4`. Boxes
//! short-circuit to their corner list.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEAS_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-9;
pub const MAX_ENUM_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    h_mat: DMatrix<f64>,
    h_vec: DVector<f64>,
}

impl Polytope {
    pub fn new(h_mat: DMatrix<f64>, h_vec: DVector<f64>) -> Result<Self> {
        if h_mat.nrows() != h_vec.len() {
            return Err(Error::InvalidPolytope(format!(
                "H has {} rows but h has {} entries",
                h_mat.nrows(),
                h_vec.len()
            )));
        }
        if h_mat.ncols() == 0 {
            return Err(Error::InvalidPolytope("zero-dimensional polytope".into()));
        }
        for (i, row) in h_mat.row_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidPolytope(format!("row {i} of H is zero")));
            }
        }
        if h_mat.iter().chain(h_vec.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidPolytope("non-finite entry".into()));
        }
        Ok(Self { h_mat, h_vec })
    }

    /// Axis-aligned box `lo <= x <= hi`, encoded as `[I; -I] x <= [hi; -lo]`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("box bounds differ in length".into()));
        }
        let n = lo.len();
        if let Some(i) = (0..n).find(|&i| lo[i] > hi[i]) {
            return Err(Error::InvalidPolytope(format!(
                "box lower bound exceeds upper bound in coordinate {i}"
            )));
        }
        let mut h_mat = DMatrix::zeros(2 * n, n);
        let mut h_vec = DVector::zeros(2 * n);
        for i in 0..n {
            h_mat[(i, i)] = 1.0;
            h_vec[i] = hi[i];
            h_mat[(n + i, i)] = -1.0;
            h_vec[n + i] = -lo[i];
        }
        Self::new(h_mat, h_vec)
    }

    pub fn dim(&self) -> usize {
        self.h_mat.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.h_mat.nrows()
    }

    pub fn h_matrix(&self) -> &DMatrix<f64> {
        &self.h_mat
    }

    pub fn h_vector(&self) -> &DVector<f64> {
        &self.h_vec
    }

    /// `max_i (H_i x - h_i)`; nonpositive exactly when `x` is inside.
    pub fn margin(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let mut best = f64::NEG_INFINITY;
        for i in 0..self.num_rows() {
            let mut s = -self.h_vec[i];
            for (j, xj) in x.iter().enumerate() {
                s += self.h_mat[(i, j)] * xj;
            }
            best = best.max(s);
        }
        best
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.margin(x) <= tol
    }

    /// Returns `Some((lo, hi))` when every row has exactly one nonzero entry,
    /// i.e. the set is an axis-aligned box (possibly with redundant rows).
    pub fn as_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = self.dim();
        let mut lo = vec![f64::NEG_INFINITY; n];
        let mut hi = vec![f64::INFINITY; n];
        for i in 0..self.num_rows() {
            let row = self.h_mat.row(i);
            let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0);
            let (j, &a) = nz.next()?;
            if nz.next().is_some() {
                return None;
            }
            let bound = self.h_vec[i] / a;
            if a > 0.0 {
                hi[j] = hi[j].min(bound);
            } else {
                lo[j] = lo[j].max(bound);
            }
        }
        if lo.iter().chain(hi.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        Some((lo, hi))
    }

    /// Scales the set about the origin: `{s x | x in P}`. For a bounded set,
    /// `s = 0` collapses it to the origin.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        if s < 0.0 || !s.is_finite() {
            return Err(Error::InvalidPolytope(format!("invalid scale {s}")));
        }
        Self::new(self.h_mat.clone(), &self.h_vec * s)
    }

    /// All vertices, deduplicated. Errors when the set is empty or unbounded.
    pub fn vertices(&self) -> Result<Vec<Vec<f64>>> {
        if let Some((lo, hi)) = self.as_box() {
            if lo.iter().zip(&hi).any(|(l, h)| l > h) {
                return Err(Error::Empty);
            }
            return Ok(box_corners(&lo, &hi));
        }
        let n = self.dim();
        if n > MAX_ENUM_DIM {
            return Err(Error::InvalidPolytope(format!(
                "vertex enumeration supports dim <= {MAX_ENUM_DIM}, got {n}"
            )));
        }
        if self.is_unbounded() {
            return Err(Error::Unbounded);
        }
        let verts = facet_enumeration(&self.h_mat, &self.h_vec);
        if verts.is_empty() {
            return Err(Error::Empty);
        }
        Ok(verts)
    }

    /// Bounding box of the vertex set.
    pub fn bounding_box(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(b) = self.as_box() {
            return Ok(b);
        }
        let verts = self.vertices()?;
        let n = self.dim();
        let mut lo = vec![f64::INFINITY; n];
        let mut hi = vec![f64::NEG_INFINITY; n];
        for v in &verts {
            for j in 0..n {
                lo[j] = lo[j].min(v[j]);
                hi[j] = hi[j].max(v[j]);
            }
        }
        Ok((lo, hi))
    }

    /// The recession cone `{y | H y <= 0}` is nontrivial iff its intersection
    /// with the unit box has a vertex other than the origin.
    fn is_unbounded(&self) -> bool {
        let n = self.dim();
        let m = self.num_rows();
        let mut a = DMatrix::zeros(m + 2 * n, n);
        let mut b = DVector::zeros(m + 2 * n);
        a.view_mut((0, 0), (m, n)).copy_from(&self.h_mat);
        for j in 0..n {
            a[(m + j, j)] = 1.0;
            b[m + j] = 1.0;
            a[(m + n + j, j)] = -1.0;
            b[m + n + j] = 1.0;
        }
        facet_enumeration(&a, &b)
            .iter()
            .any(|v| v.iter().any(|c| c.abs() > 1e-7))
    }
}

fn box_corners(lo: &[f64], hi: &[f64]) -> Vec<Vec<f64>> {
    let n = lo.len();
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(1 << n);
    for mask in 0..(1usize << n) {
        let p: Vec<f64> = (0..n)
            .map(|j| if mask >> j & 1 == 1 { hi[j] } else { lo[j] })
            .collect();
        push_unique(&mut out, p);
    }
    out
}

fn push_unique(out: &mut Vec<Vec<f64>>, p: Vec<f64>) {
    let dup = out
        .iter()
        .any(|q| q.iter().zip(&p).all(|(a, b)| (a - b).abs() <= DEDUP_TOL));
    if !dup {
        out.push(p);
    }
}

fn facet_enumeration(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<Vec<f64>> {
    let n = a.ncols();
    let m = a.nrows();
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..n).collect();
    if m < n {
        return out;
    }
    loop {
        let sub = DMatrix::from_fn(n, n, |r, c| a[(idx[r], c)]);
        let rhs = DVector::from_fn(n, |r, _| b[idx[r]]);
        let lu = sub.lu();
        if lu.determinant().abs() > 1e-12 {
            if let Some(x) = lu.solve(&rhs) {
                let feasible = (0..m).all(|i| {
                    let s: f64 = (0..n).map(|j| a[(i, j)] * x[j]).sum();
                    s <= b[i] + FEAS_TOL
                });
                if feasible {
                    push_unique(&mut out, x.iter().copied().collect());
                }
            }
        }
        // advance to the next combination in lexicographic order
        let mut i = n;
        while i > 0 && idx[i - 1] == m - n + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for t in i..n {
            idx[t] = idx[t - 1] + 1;
        }
    }
}
