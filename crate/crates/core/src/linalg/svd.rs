//! Thin SVD by one-sided Jacobi rotations, plus sign/order canonicalization.
//!
//! Rotations act on the columns of the taller orientation of the input, so a
//! `d₁ × d₂` matrix with `d₁ < d₂` is factored through its transpose.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

/// Off-diagonal Gram threshold (relative) below which a pair counts as orthogonal.
pub const JACOBI_TOL: f64 = 1e-14;
/// Maximum number of full sweeps over all column pairs.
pub const MAX_SWEEPS: usize = 60;

/// Thin factorization `source = p · diag(lambda) · q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdView {
    /// `d₁ × r`, orthonormal columns.
    pub p: Matrix,
    /// Length `r`, non-negative.
    pub lambda: Vec<f64>,
    /// `r × d₂`, orthonormal rows.
    pub q: Matrix,
}

impl SvdView {
    pub fn rank(&self) -> usize {
        self.lambda.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.p
            .scale_columns(&self.lambda)
            .matmul(&self.q)
            .expect("SvdView shapes are consistent by construction")
    }

    /// Outer product `λ_i · p_i · q_i` of a single triplet.
    pub fn triplet_outer(&self, i: usize) -> Matrix {
        let (d1, d2) = (self.p.rows(), self.q.cols());
        Matrix::from_fn(d1, d2, |a, b| self.lambda[i] * self.p[(a, i)] * self.q[(i, b)])
    }

    /// Largest deviation of `pᵀp` and `q qᵀ` from the identity.
    pub fn orthogonality_residual(&self) -> f64 {
        let r = self.rank();
        let ptp = self.p.t_matmul(&self.p).expect("shape");
        let qqt = self.q.matmul_t(&self.q).expect("shape");
        let mut worst = 0.0_f64;
        for i in 0..r {
            for j in 0..r {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst
                    .max((ptp[(i, j)] - target).abs())
                    .max((qqt[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Thin SVD returning `min(d₁, d₂)` triplets in canonical form.
pub fn svd_thin(m: &Matrix) -> Result<SvdView> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let view = if m.rows() >= m.cols() {
        let (u, s, v) = jacobi_tall(m)?;
        SvdView {
            p: u,
            lambda: s,
            q: v.transpose(),
        }
    } else {
        // mᵀ = U S Vᵀ  ⇒  m = V S Uᵀ
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        SvdView {
            p: v,
            lambda: s,
            q: u.transpose(),
        }
    };
    Ok(canonicalize(&view))
}

/// One-sided Jacobi on a tall matrix (`rows ≥ cols`). Returns `(U, σ, V)`
/// with `a = U diag(σ) Vᵀ`, `U` of shape `rows × cols`, `V` square.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // Work column-major: cols[j] is column j of the rotated matrix.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::SvdNoConvergence { sweeps });
        }
        sweeps += 1;
        converged = true;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                converged = false;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
    }

    let sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let sigma_max = sigma.iter().cloned().fold(0.0, f64::max);
    // Columns this small carry only rounding noise from the rotations.
    let floor = sigma_max * (m.max(n) as f64) * f64::EPSILON;

    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut s_out = Vec::with_capacity(n);
    for (col, &s) in cols.iter().zip(&sigma) {
        if s > floor && s > 0.0 {
            u_cols.push(Some(col.iter().map(|x| x / s).collect()));
            s_out.push(s);
        } else {
            u_cols.push(None);
            s_out.push(0.0);
        }
    }
    let u_cols = complete_basis(u_cols, m);

    let u = Matrix::from_fn(m, n, |r, c| u_cols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| v[c][r]);
    Ok((u, s_out, v))
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(j);
    let (ci, cj) = (&mut head[i], &mut tail[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills `None` slots with unit vectors orthogonal to every other column.
/// Each slot takes the standard basis vector with the largest residual after
/// two rounds of Gram-Schmidt against the columns accepted so far.
fn complete_basis(mut cols: Vec<Option<Vec<f64>>>, dim: usize) -> Vec<Vec<f64>> {
    let missing: Vec<usize> = (0..cols.len()).filter(|&j| cols[j].is_none()).collect();
    for slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut e = vec![0.0; dim];
            e[k] = 1.0;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b) {
                best = Some((norm, e));
            }
        }
        let (norm, mut e) = best.expect("dim >= 1");
        e.iter_mut().for_each(|x| *x /= norm);
        cols[slot] = Some(e);
    }
    cols.into_iter().map(|c| c.expect("completed")).collect()
}

/// Sorts triplets by descending `λ` (stable on ties) and fixes signs so the
/// largest-magnitude entry of every `p` column is positive (lowest row wins
/// ties), flipping the matching `q` row.
pub fn canonicalize(v: &SvdView) -> SvdView {
    let r = v.rank();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| v.lambda[b].total_cmp(&v.lambda[a]).then(a.cmp(&b)));

    let mut p = v.p.select_columns(&order);
    let mut q = v.q.select_rows(&order);
    let lambda: Vec<f64> = order.iter().map(|&i| v.lambda[i]).collect();

    for k in 0..r {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..p.rows() {
            let a = p[(i, k)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if p[(best, k)] < 0.0 {
            for i in 0..p.rows() {
                p[(i, k)] = -p[(i, k)];
            }
            for x in q.row_mut(k) {
                *x = -*x;
            }
        }
    }
    SvdView { p, lambda, q }
}
