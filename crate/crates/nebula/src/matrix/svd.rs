//! Thin singular value decomposition via one-sided Jacobi rotations, plus
//! rank truncation and the factor-size accounting used by the codecs.
//!
//! The decomposition is fully deterministic: cyclic pivot order, a stable
//! tie-break on equal singular values, and a fixed sign convention (the
//! largest-magnitude entry of each left singular vector is non-negative), so
//! identical input bytes always produce identical factor bytes.

use crate::matrix::{Mat, MatrixError};
use crate::scalar::Scalar;

/// Maximum number of cyclic Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 60;

/// Columns with norm at or below `frob * COLUMN_CUTOFF` are treated as
/// numerically zero and their left singular vectors are rebuilt by
/// orthonormal basis completion instead of normalization.
const COLUMN_CUTOFF: f64 = 1e-14;

/// Thin SVD factors: `a == u * diag(sigma) * v^T` with `k = min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors<T: Scalar = f64> {
    /// Left singular vectors, `rows x k`, orthonormal columns.
    pub u: Mat<T>,
    /// Singular values in non-increasing order, length `k`.
    pub sigma: Vec<T>,
    /// Right singular vectors, `cols x k`, orthonormal columns.
    pub v: Mat<T>,
}

/// Rank-`r` truncation of [`SvdFactors`].
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedFactors<T: Scalar = f64> {
    /// First `rank` left singular vectors, `rows x rank`.
    pub u: Mat<T>,
    /// Leading `rank` singular values.
    pub sigma: Vec<T>,
    /// First `rank` right singular vectors, `cols x rank`.
    pub v: Mat<T>,
    pub rank: usize,
}

impl<T: Scalar> SvdFactors<T> {
    /// Number of singular values carried, `min(rows, cols)` of the input.
    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// Rebuilds the full matrix `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Mat<T> {
        reconstruct_factors(&self.u, &self.sigma, &self.v)
    }
}

impl<T: Scalar> TruncatedFactors<T> {
    /// Rebuilds the rank-`rank` approximation `u * diag(sigma) * v^T`.
    pub fn reconstruct(&self) -> Mat<T> {
        reconstruct_factors(&self.u, &self.sigma, &self.v)
    }

    /// Original shape this truncation approximates.
    pub fn shape(&self) -> (usize, usize) {
        (self.u.rows(), self.v.rows())
    }
}

fn reconstruct_factors<T: Scalar>(u: &Mat<T>, sigma: &[T], v: &Mat<T>) -> Mat<T> {
    let m = u.rows();
    let n = v.rows();
    let k = sigma.len();
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        for t in 0..k {
            let us = u.get(i, t) * sigma[t];
            if us == T::zero() {
                continue;
            }
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += us * v.get(j, t);
            }
        }
    }
    out
}

/// Computes the thin SVD of `a` by one-sided Jacobi.
///
/// Singular values come back sorted in non-increasing order; ties keep the
/// original column order. Fails with [`MatrixError::NoConvergence`] if the
/// cyclic sweeps do not reach the off-diagonal threshold within the sweep cap.
pub fn svd<T: Scalar>(a: &Mat<T>) -> Result<SvdFactors<T>, MatrixError> {
    let mut factors = if a.rows() >= a.cols() {
        svd_tall(a)?
    } else {
        // Work on the transpose and swap the roles of U and V.
        let f = svd_tall(&a.transpose())?;
        SvdFactors { u: f.v, sigma: f.sigma, v: f.u }
    };
    fix_signs(&mut factors.u, &mut factors.v);
    Ok(factors)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn svd_tall<T: Scalar>(a: &Mat<T>) -> Result<SvdFactors<T>, MatrixError> {
    let m = a.rows();
    let n = a.cols();
    let frob = a.frobenius_norm();

    // Column-major working copies of A and of the accumulated V.
    let mut w: Vec<Vec<T>> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut col = vec![T::zero(); n];
            col[j] = T::one();
            col
        })
        .collect();

    // Pairs count as converged when |<ci,cj>| <= tol * |ci| * |cj|. The floor
    // keeps the threshold reachable above the dot-product rounding noise of
    // the working precision.
    let tol = {
        let floor = T::epsilon() * T::from_f64_c(4.0 * (m as f64).sqrt());
        T::from_f64_c(1e-12).max(floor)
    };

    if frob > T::zero() {
        let mut converged = false;
        let mut worst = T::zero();
        for _sweep in 0..MAX_SWEEPS {
            let mut rotations = 0usize;
            worst = T::zero();
            for p in 0..n.saturating_sub(1) {
                for q in p + 1..n {
                    let (app, aqq, apq) = column_gram(&w[p], &w[q]);
                    if app == T::zero() || aqq == T::zero() {
                        continue;
                    }
                    let denom = (app * aqq).sqrt();
                    let ratio = apq.abs() / denom;
                    worst = worst.max(ratio);
                    if ratio <= tol {
                        continue;
                    }
                    // Jacobi rotation diagonalizing the 2x2 Gram block.
                    let zeta = (aqq - app) / (T::from_f64_c(2.0) * apq);
                    let t = {
                        let s = if zeta >= T::zero() { T::one() } else { -T::one() };
                        s / (zeta.abs() + (T::one() + zeta * zeta).sqrt())
                    };
                    let c = T::one() / (T::one() + t * t).sqrt();
                    let s = c * t;
                    rotate_pair(&mut w, p, q, c, s);
                    rotate_pair(&mut v, p, q, c, s);
                    rotations += 1;
                }
            }
            if rotations == 0 {
                converged = true;
                break;
            }
        }
        if !converged {
            // One extra scan to report the current residual honestly.
            let mut residual = T::zero();
            for p in 0..n.saturating_sub(1) {
                for q in p + 1..n {
                    let (app, aqq, apq) = column_gram(&w[p], &w[q]);
                    if app > T::zero() && aqq > T::zero() {
                        residual = residual.max(apq.abs() / (app * aqq).sqrt());
                    }
                }
            }
            let _ = worst;
            return Err(MatrixError::NoConvergence {
                rows: m,
                cols: n,
                sweeps: MAX_SWEEPS,
                residual: residual.as_f64(),
            });
        }
    }

    // Extract singular values and order them (descending, stable by column).
    let norms: Vec<T> = w.iter().map(|col| col_norm(col)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .expect("finite singular values")
            .then(i.cmp(&j))
    });

    let cutoff = frob * T::from_f64_c(COLUMN_CUTOFF);
    let mut u = Mat::zeros(m, n);
    let mut v_out = Mat::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut needs_basis: Vec<usize> = Vec::new();

    for (slot, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..n {
            v_out.set(i, slot, v[src][i]);
        }
        if s > cutoff {
            for i in 0..m {
                u.set(i, slot, w[src][i] / s);
            }
        } else {
            needs_basis.push(slot);
        }
    }

    // Deterministic Gram-Schmidt completion for numerically zero columns.
    for slot in needs_basis {
        let mut filled = false;
        for basis in 0..m {
            let mut cand = vec![T::zero(); m];
            cand[basis] = T::one();
            for j in 0..n {
                if j == slot || sigma_slot_empty(&u, j, m) {
                    continue;
                }
                let mut proj = T::zero();
                for i in 0..m {
                    proj += u.get(i, j) * cand[i];
                }
                for i in 0..m {
                    let adj = proj * u.get(i, j);
                    cand[i] = cand[i] - adj;
                }
            }
            let norm = col_norm(&cand);
            if norm > T::from_f64_c(0.5) {
                for i in 0..m {
                    u.set(i, slot, cand[i] / norm);
                }
                filled = true;
                break;
            }
        }
        debug_assert!(filled, "orthonormal completion must succeed for rows >= cols");
    }

    Ok(SvdFactors { u, sigma, v: v_out })
}

/// True if column `j` of `u` is still all zeros (not yet filled).
fn sigma_slot_empty<T: Scalar>(u: &Mat<T>, j: usize, m: usize) -> bool {
    (0..m).all(|i| u.get(i, j) == T::zero())
}

fn column_gram<T: Scalar>(cp: &[T], cq: &[T]) -> (T, T, T) {
    let mut app = T::zero();
    let mut aqq = T::zero();
    let mut apq = T::zero();
    for (&x, &y) in cp.iter().zip(cq) {
        app += x * x;
        aqq += y * y;
        apq += x * y;
    }
    (app, aqq, apq)
}

fn col_norm<T: Scalar>(col: &[T]) -> T {
    col.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (head, tail) = cols.split_at_mut(q);
    let cp = &mut head[p];
    let cq = &mut tail[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = c * *x - s * *y;
        let xq = s * *x + c * *y;
        *x = xp;
        *y = xq;
    }
}

/// Flips factor column pairs so the largest-magnitude entry of each left
/// singular vector is non-negative (first index wins ties).
fn fix_signs<T: Scalar>(u: &mut Mat<T>, v: &mut Mat<T>) {
    for j in 0..u.cols() {
        let mut best = 0usize;
        let mut best_abs = T::zero();
        for i in 0..u.rows() {
            let a = u.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if u.get(best, j) < T::zero() {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
            for i in 0..v.rows() {
                let x = v.get(i, j);
                v.set(i, j, -x);
            }
        }
    }
}

/// Keeps the leading `rank` singular triplets.
///
/// The dropped tail obeys the Eckart-Young identity: the Frobenius error of
/// the rank-`rank` reconstruction equals `sqrt(sum of squared dropped sigma)`.
pub fn truncate<T: Scalar>(
    factors: &SvdFactors<T>,
    rank: usize,
) -> Result<TruncatedFactors<T>, MatrixError> {
    let k = factors.k();
    if rank == 0 || rank > k {
        return Err(MatrixError::RankOutOfRange {
            rank,
            max: k,
            rows: factors.u.rows(),
            cols: factors.v.rows(),
        });
    }
    let take_cols = |m: &Mat<T>| {
        Mat::from_fn(m.rows(), rank, |i, j| m.get(i, j))
    };
    Ok(TruncatedFactors {
        u: take_cols(&factors.u),
        sigma: factors.sigma[..rank].to_vec(),
        v: take_cols(&factors.v),
        rank,
    })
}

/// Size of the rank-`r` factors relative to the dense `m x n` matrix:
/// `(m*r + r + r*n) / (m*n)`, evaluated exactly in 64-bit arithmetic.
///
/// Values above 1 mean the factorization stores more numbers than the dense
/// matrix; see [`is_non_compressive`].
pub fn compression_ratio(m: usize, n: usize, r: usize) -> f64 {
    assert!(m >= 1 && n >= 1, "degenerate shape {m}x{n}");
    assert!(r >= 1 && r <= m.min(n), "rank {r} out of range for {m}x{n}");
    let num = (m as u128) * (r as u128) + (r as u128) + (r as u128) * (n as u128);
    let den = (m as u128) * (n as u128);
    num as f64 / den as f64
}

/// True when storing rank-`r` factors takes strictly more numbers than the
/// dense matrix itself.
pub fn is_non_compressive(m: usize, n: usize, r: usize) -> bool {
    compression_ratio(m, n, r) > 1.0
}
