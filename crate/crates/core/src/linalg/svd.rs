//! One-sided (Hestenes) Jacobi SVD.

use super::Matrix;
use crate::error::{invalid, Error, Result};

/// Rotation threshold on `|<a_p, a_q>| / (|a_p| |a_q|)`.
const ROTATION_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 60;

/// Thin SVD `A = U diag(s) V^T` with `s` sorted non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    /// `m x d`, orthonormal columns.
    pub u: Matrix,
    /// `d` singular values, descending.
    pub s: Vec<f64>,
    /// `d x n`, orthonormal rows.
    pub vt: Matrix,
}

impl Svd {
    pub fn rank_dim(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        let d = self.s.len();
        let us = Matrix::from_fn(self.u.rows(), d, |i, k| self.u.get(i, k) * self.s[k]);
        us.matmul(&self.vt).expect("svd factors are conformant")
    }

    /// `(U[:, lo..hi] diag(sqrt s), diag(sqrt s) V^T[lo..hi, :])`.
    pub fn truncate(&self, lo: usize, hi: usize) -> Result<(Matrix, Matrix)> {
        let d = self.s.len();
        if lo >= hi || hi > d {
            return invalid(format!("component slice {lo}..{hi} invalid for d = {d}"));
        }
        let root: Vec<f64> = self.s[lo..hi].iter().map(|s| s.sqrt()).collect();
        let a = Matrix::from_fn(self.u.rows(), hi - lo, |i, k| {
            self.u.get(i, lo + k) * root[k]
        });
        let b = Matrix::from_fn(hi - lo, self.vt.cols(), |k, j| {
            root[k] * self.vt.get(lo + k, j)
        });
        Ok((a, b))
    }
}

/// Singular value decomposition of any finite matrix.
///
/// Sign convention: in each pair `(u_k, v_k)` the largest-magnitude entry of
/// `u_k` (first one on ties) is non-negative.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.rows() == 0 || a.cols() == 0 {
        return invalid("svd of an empty matrix");
    }
    if !a.is_finite() {
        return invalid("svd input has non-finite entries");
    }
    let mut out = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Svd {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        }
    };
    normalize_signs(&mut out);
    Ok(out)
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (xp, yq) in x.iter_mut().zip(y.iter_mut()) {
        let (p, q) = (*xp, *yq);
        *xp = c * p - s * q;
        *yq = s * p + c * q;
    }
}

fn pair_mut(v: &mut [Vec<f64>], p: usize, q: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
    debug_assert!(p < q);
    let (head, tail) = v.split_at_mut(q);
    (&mut head[p], &mut tail[0])
}

/// Requires `rows >= cols`.
fn jacobi_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut worst = 0.0_f64;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        sweeps += 1;
        worst = 0.0;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                worst = worst.max(off);
                if off <= ROTATION_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta.abs() > 1e150 {
                    0.5 / zeta
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (cp, cq) = pair_mut(&mut cols, p, q);
                rotate(cp, cq, c, s);
                let (vp, vq) = pair_mut(&mut v, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Convergence {
            sweeps,
            residual: worst,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        s.push(sigma);
        if sigma > f64::MIN_POSITIVE {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            missing.push(k);
        }
    }
    complete_basis(&mut u_cols, &missing, m);

    let u = Matrix::from_fn(m, n, |i, k| u_cols[k][i]);
    let vt = Matrix::from_fn(n, n, |k, j| v[order[k]][j]);
    Ok(Svd { u, s, vt })
}

/// Fill the zero-singular-value columns of `u` with unit vectors orthogonal
/// to every other column.
fn complete_basis(u: &mut [Vec<f64>], missing: &[usize], m: usize) {
    if missing.is_empty() {
        return;
    }
    let mut candidate = 0;
    for &k in missing {
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // Two Gram-Schmidt passes against every filled column.
            for _ in 0..2 {
                for (j, col) in u.iter().enumerate() {
                    if j == k || col.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, col);
                    for (x, c) in e.iter_mut().zip(col) {
                        *x -= proj * c;
                    }
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 0.5 {
                u[k] = e.iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

fn normalize_signs(svd: &mut Svd) {
    let (m, d) = svd.u.shape();
    for k in 0..d {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..m {
            let a = svd.u.get(i, k).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if svd.u.get(best, k) < 0.0 {
            for i in 0..m {
                svd.u.set(i, k, -svd.u.get(i, k));
            }
            for j in 0..svd.vt.cols() {
                svd.vt.set(k, j, -svd.vt.get(k, j));
            }
        }
    }
}
