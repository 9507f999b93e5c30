//! Dense kernels shared by both output-weight solvers.
//!
//! Products go through `matrixmultiply`'s blocked GEMM. The Cholesky
//! factorization is a right-looking blocked variant whose trailing update is
//! also a GEMM call, which keeps `M = 4000` factorizations to a few seconds.

use log::warn;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Row/column block edge for the symmetric rank-k update.
const SYRK_BLOCK: usize = 256;
/// Panel width of the blocked Cholesky factorization.
const CHOL_BLOCK: usize = 96;
/// Row block for the Cholesky trailing update.
const CHOL_UPDATE_ROWS: usize = 192;

/// Relative symmetry tolerance for inputs to the SPD routines.
pub const SYMMETRY_TOL: f64 = 1e-8;
/// Smallest non-zero jitter tried during escalation.
pub const MIN_JITTER: f64 = 1e-10;
/// Escalation stops once jitter exceeds this fraction of the mean diagonal.
pub const MAX_JITTER_FRACTION: f64 = 1e-2;

/// `c = alpha * a * b + beta * c` on strided views of row-major storage.
///
/// # Safety
/// Every pointer/stride combination must address memory valid for the given
/// extents, and the region written through `c` must not overlap the regions
/// read through `a` and `b`.
#[allow(clippy::too_many_arguments)]
#[inline]
unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: *const f64,
    rsa: usize,
    csa: usize,
    b: *const f64,
    rsb: usize,
    csb: usize,
    beta: f64,
    c: *mut f64,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    matrixmultiply::dgemm(
        m,
        k,
        n,
        alpha,
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        c,
        rsc as isize,
        1,
    );
}

/// Matrix product `a * b`.
///
/// ```
/// use elm_lda::{linalg::matmul, Matrix};
/// let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
/// let ones = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
/// assert_eq!(matmul(&a, &ones).unwrap().as_slice(), &[3.0, 7.0]);
/// ```
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut c = Matrix::zeros(m, n);
    // SAFETY: extents match the three allocations; `c` is a fresh buffer.
    unsafe {
        gemm(
            m,
            k,
            n,
            1.0,
            a.as_slice().as_ptr(),
            k,
            1,
            b.as_slice().as_ptr(),
            n,
            1,
            0.0,
            c.as_mut_slice().as_mut_ptr(),
            n,
        );
    }
    Ok(c)
}

/// `a * b^T` without materializing the transpose.
pub fn matmul_transpose_b(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch {
            op: "matmul_transpose_b",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (m, k, n) = (a.rows(), a.cols(), b.rows());
    let mut c = Matrix::zeros(m, n);
    // SAFETY: b^T is read through (row stride 1, col stride k) inside b's buffer.
    unsafe {
        gemm(
            m,
            k,
            n,
            1.0,
            a.as_slice().as_ptr(),
            k,
            1,
            b.as_slice().as_ptr(),
            1,
            k,
            0.0,
            c.as_mut_slice().as_mut_ptr(),
            n,
        );
    }
    Ok(c)
}

/// Gram matrix `a * a^T`. The result is exactly symmetric.
pub fn gram(a: &Matrix) -> Matrix {
    let mut g = Matrix::zeros(a.rows(), a.rows());
    gram_accumulate(&mut g, a).expect("shapes agree by construction");
    g
}

/// Adds `a * a^T` into the symmetric matrix `acc`.
///
/// Only the upper block triangle is multiplied; the lower triangle is then
/// mirrored from it so the result stays bitwise symmetric. Feeding the columns
/// of a wide matrix through in chunks yields the same Gram matrix up to
/// summation order, with only one chunk resident at a time.
pub fn gram_accumulate(acc: &mut Matrix, a: &Matrix) -> Result<()> {
    let r = a.rows();
    if acc.shape() != (r, r) {
        return Err(Error::DimensionMismatch {
            op: "gram_accumulate",
            lhs: acc.shape(),
            rhs: a.shape(),
        });
    }
    let k = a.cols();
    if k > 0 {
        let ap = a.as_slice().as_ptr();
        let cp = acc.as_mut_slice().as_mut_ptr();
        for i0 in (0..r).step_by(SYRK_BLOCK) {
            let ib = SYRK_BLOCK.min(r - i0);
            for j0 in (i0..r).step_by(SYRK_BLOCK) {
                let jb = SYRK_BLOCK.min(r - j0);
                // SAFETY: reads rows [i0, i0+ib) and [j0, j0+jb) of `a`; writes the
                // (i0, j0) block of `acc`, a separate allocation.
                unsafe {
                    gemm(
                        ib,
                        k,
                        jb,
                        1.0,
                        ap.add(i0 * k),
                        k,
                        1,
                        ap.add(j0 * k),
                        1,
                        k,
                        1.0,
                        cp.add(i0 * r + j0),
                        r,
                    );
                }
            }
        }
    }
    mirror_upper(acc);
    Ok(())
}

fn mirror_upper(s: &mut Matrix) {
    let n = s.rows();
    for i in 1..n {
        for j in 0..i {
            s[(i, j)] = s[(j, i)];
        }
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 4];
    let xc = x.chunks_exact(4);
    let yc = y.chunks_exact(4);
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        acc[0] += a[0] * b[0];
        acc[1] += a[1] * b[1];
        acc[2] += a[2] * b[2];
        acc[3] += a[3] * b[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lower Cholesky factor `L` with `S = L L^T`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    /// Factors a symmetric positive definite matrix. Only the lower triangle
    /// of `s` is read. On failure the error carries the failing pivot.
    pub fn factor(s: &Matrix) -> Result<Self> {
        if s.rows() != s.cols() {
            return Err(Error::DimensionMismatch {
                op: "cholesky",
                lhs: s.shape(),
                rhs: s.shape(),
            });
        }
        let n = s.rows();
        let mut a = s.clone();
        factor_in_place(a.as_mut_slice(), n).map_err(|pivot| Error::NotPositiveDefinite { pivot, jitter: 0.0 })?;
        for i in 0..n {
            for v in &mut a.row_mut(i)[i + 1..] {
                *v = 0.0;
            }
        }
        Ok(Cholesky { lower: a })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `log |S|`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `S X = B` by forward and back substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows() != n {
            return Err(Error::DimensionMismatch {
                op: "cholesky solve",
                lhs: self.lower.shape(),
                rhs: b.shape(),
            });
        }
        let mut x = b.clone();
        let r = x.cols();
        let l = &self.lower;
        let xs = x.as_mut_slice();
        // L Y = B, row by row.
        for i in 0..n {
            let (done, rest) = xs.split_at_mut(i * r);
            let xi = &mut rest[..r];
            let li = l.row(i);
            for (p, &lip) in li[..i].iter().enumerate() {
                if lip != 0.0 {
                    axpy(-lip, &done[p * r..(p + 1) * r], xi);
                }
            }
            let inv = 1.0 / li[i];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        // L^T X = Y, eliminating column i of L^T as soon as x_i is known.
        for i in (0..n).rev() {
            let (head, rest) = xs.split_at_mut(i * r);
            let xi = &mut rest[..r];
            let li = l.row(i);
            let inv = 1.0 / li[i];
            xi.iter_mut().for_each(|v| *v *= inv);
            for (p, &lip) in li[..i].iter().enumerate() {
                if lip != 0.0 {
                    axpy(-lip, xi, &mut head[p * r..(p + 1) * r]);
                }
            }
        }
        Ok(x)
    }
}

/// Blocked right-looking Cholesky on row-major `n x n` storage. On success the
/// lower triangle holds `L`; the strict upper triangle is left unspecified.
/// Returns the index of the first pivot that is not safely positive.
fn factor_in_place(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    let original_diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    for k0 in (0..n).step_by(CHOL_BLOCK) {
        let kb = CHOL_BLOCK.min(n - k0);
        let k1 = k0 + kb;

        // Left-looking within the panel: column j of L for all rows below j.
        for j in k0..k1 {
            let (upto, below) = a.split_at_mut((j + 1) * n);
            let rj = &mut upto[j * n..];
            let d = rj[j] - dot(&rj[k0..j], &rj[k0..j]);
            // A pivot that has lost all but ~1e-14 of its original mass is
            // rounding noise, not a positive direction.
            if !(d.is_finite() && d > 0.0 && d > original_diag[j].abs() * 1e-14) {
                return Err(j);
            }
            rj[j] = d.sqrt();
            let rj = &*rj;
            let ljj = rj[j];
            for ri in below.chunks_exact_mut(n) {
                ri[j] = (ri[j] - dot(&ri[k0..j], &rj[k0..j])) / ljj;
            }
        }

        if k1 < n {
            let base = a.as_mut_ptr();
            for i0 in (k1..n).step_by(CHOL_UPDATE_ROWS) {
                let i1 = (i0 + CHOL_UPDATE_ROWS).min(n);
                // A[i0..i1, k1..i1] -= L[i0..i1, k0..k1] * L[k1..i1, k0..k1]^T
                // SAFETY: reads columns [k0, k1) and writes columns >= k1 of the
                // same buffer; the regions are disjoint.
                unsafe {
                    gemm(
                        i1 - i0,
                        kb,
                        i1 - k1,
                        -1.0,
                        base.add(i0 * n + k0),
                        n,
                        1,
                        base.add(k1 * n + k0),
                        1,
                        n,
                        1.0,
                        base.add(i0 * n + k1),
                        n,
                    );
                }
            }
        }
    }
    Ok(())
}

/// Largest entry of `|S - S^T|`.
pub fn asymmetry(s: &Matrix) -> f64 {
    let n = s.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

fn symmetrized(s: &Matrix) -> Result<Matrix> {
    if s.rows() != s.cols() {
        return Err(Error::DimensionMismatch {
            op: "spd",
            lhs: s.shape(),
            rhs: s.shape(),
        });
    }
    s.check_finite()?;
    let tolerance = SYMMETRY_TOL * s.max_abs();
    let asym = asymmetry(s);
    if asym > tolerance {
        return Err(Error::NotSymmetric {
            asymmetry: asym,
            tolerance,
        });
    }
    let n = s.rows();
    let mut out = s.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (s[(i, j)] + s[(j, i)]);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    Ok(out)
}

/// Jitter values tried in order: the caller's value, then a tenfold ladder
/// from `max(MIN_JITTER, start)` up to `MAX_JITTER_FRACTION * mean(diag)`.
/// At least one escalated value is always tried so an all-zero matrix can
/// still be rescued.
pub fn jitter_schedule(start: f64, mean_diag: f64) -> Vec<f64> {
    let mut out = vec![start];
    let mut next = MIN_JITTER.max(start);
    if next <= start {
        next = start * 10.0;
    }
    let cap = MAX_JITTER_FRACTION * mean_diag;
    out.push(next);
    loop {
        next *= 10.0;
        if next > cap {
            break;
        }
        out.push(next);
    }
    out
}

/// Factors `s + jitter * I`, escalating the jitter on failure. Returns the
/// factor and the jitter that succeeded.
pub fn spd_factor(s: &Matrix, jitter: f64) -> Result<(Cholesky, f64)> {
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "jitter must be finite and >= 0, got {jitter}"
        )));
    }
    let sym = symmetrized(s)?;
    let n = sym.rows();
    let diag = sym.diag();
    let mean_diag = if n == 0 {
        0.0
    } else {
        diag.iter().sum::<f64>() / n as f64
    };
    let mut last_pivot = 0;
    let mut last_jitter = jitter;
    for (attempt, &j) in jitter_schedule(jitter, mean_diag).iter().enumerate() {
        let mut shifted = sym.clone();
        if j != 0.0 {
            for i in 0..n {
                shifted[(i, i)] += j;
            }
        }
        match Cholesky::factor(&shifted) {
            Ok(ch) => {
                if attempt > 0 {
                    warn!("cholesky needed jitter {j:e} (requested {jitter:e}, n = {n})");
                }
                return Ok((ch, j));
            }
            Err(Error::NotPositiveDefinite { pivot, .. }) => {
                last_pivot = pivot;
                last_jitter = j;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: last_pivot,
        jitter: last_jitter,
    })
}

/// Solution of a jittered SPD system together with the jitter actually used.
#[derive(Debug, Clone)]
pub struct SpdSolution {
    pub x: Matrix,
    pub jitter: f64,
}

/// Solves `(s + jitter * I) X = b` via Cholesky with jitter escalation.
///
/// ```
/// use elm_lda::{linalg::spd_solve, Matrix};
/// let s = Matrix::from_rows(&[[4.0]]).unwrap();
/// let b = Matrix::from_rows(&[[8.0]]).unwrap();
/// let sol = spd_solve(&s, &b, 0.0).unwrap();
/// assert_eq!(sol.x[(0, 0)], 2.0);
/// assert_eq!(sol.jitter, 0.0);
/// ```
pub fn spd_solve(s: &Matrix, b: &Matrix, jitter: f64) -> Result<SpdSolution> {
    if s.rows() != b.rows() {
        return Err(Error::DimensionMismatch {
            op: "spd_solve",
            lhs: s.shape(),
            rhs: b.shape(),
        });
    }
    let (chol, used) = spd_factor(s, jitter)?;
    Ok(SpdSolution {
        x: chol.solve(b)?,
        jitter: used,
    })
}

/// Explicit inverse of `s + jitter * I`, symmetrized after the solve.
pub fn spd_inverse(s: &Matrix, jitter: f64) -> Result<SpdSolution> {
    let n = s.rows();
    let SpdSolution { x, jitter } = spd_solve(s, &Matrix::identity(n), jitter)?;
    let mut inv = x;
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = m;
            inv[(j, i)] = m;
        }
    }
    Ok(SpdSolution { x: inv, jitter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Reference product, entry by entry.
    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|p| a[(i, p)] * b[(p, j)]).sum()
        })
    }

    fn random_spd(n: usize, seed: u64) -> Matrix {
        // Full row rank with overwhelming probability.
        gram(&random(n, 3 * n + 2, seed))
    }

    #[test]
    fn matmul_identity_and_hand_sum() {
        let b = Matrix::from_rows(&[[1.5, -2.0], [0.25, 7.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let ones = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert_eq!(matmul(&a, &ones).unwrap(), Matrix::from_rows(&[[3.0], [7.0]]).unwrap());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(3, 4, 1);
        let b = random(4, 2, 2);
        let got = matmul(&a, &b).unwrap();
        let want = naive_matmul(&a, &b);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-14);
        }
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(
            err,
            Error::DimensionMismatch {
                lhs: (2, 3),
                rhs: (2, 3),
                ..
            }
        ));
    }

    #[test]
    fn matmul_transpose_b_matches_explicit() {
        let a = random(5, 7, 3);
        let b = random(4, 7, 4);
        let got = matmul_transpose_b(&a, &b).unwrap();
        let want = naive_matmul(&a, &b.transpose());
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert_abs_diff_eq!(g, w, epsilon = 1e-14);
        }
    }

    #[test]
    fn gram_small_cases() {
        assert_eq!(gram(&Matrix::identity(2)), Matrix::identity(2));
        assert_eq!(
            gram(&Matrix::from_rows(&[[1.0, 2.0]]).unwrap()),
            Matrix::from_rows(&[[5.0]]).unwrap()
        );
    }

    #[test]
    fn gram_symmetric_and_matches_matmul() {
        let a = random(3, 5, 5);
        let g = gram(&a);
        let want = naive_matmul(&a, &a.transpose());
        assert_eq!(asymmetry(&g), 0.0);
        for (x, y) in g.as_slice().iter().zip(want.as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn gram_spanning_several_blocks() {
        // 600 rows crosses the 256-row block boundary twice.
        let a = random(600, 40, 6);
        let g = gram(&a);
        assert_eq!(asymmetry(&g), 0.0);
        for &(i, j) in &[(0, 599), (300, 10), (257, 511), (599, 599)] {
            let want = dot(a.row(i), a.row(j));
            assert_abs_diff_eq!(g[(i, j)], want, epsilon = 1e-11);
        }
    }

    #[test]
    fn gram_accumulate_in_chunks() {
        let a = random(30, 100, 7);
        let mut acc = Matrix::zeros(30, 30);
        for c in (0..100).step_by(32) {
            gram_accumulate(&mut acc, &a.columns(c..(c + 32).min(100))).unwrap();
        }
        let full = gram(&a);
        assert_eq!(asymmetry(&acc), 0.0);
        assert!(acc.sub(&full).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn gram_pivots_nonnegative() {
        let ch = Cholesky::factor(&gram(&random(6, 20, 8))).unwrap();
        assert!(ch.lower().diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn spd_solve_identity_and_scalar() {
        let b = random(3, 2, 9);
        let sol = spd_solve(&Matrix::identity(3), &b, 0.0).unwrap();
        assert_eq!(sol.x, b);
        let sol = spd_solve(
            &Matrix::from_rows(&[[4.0]]).unwrap(),
            &Matrix::from_rows(&[[8.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        assert_eq!(sol.x[(0, 0)], 2.0);
    }

    #[test]
    fn spd_solve_inverts_random_spd() {
        let s = random_spd(12, 10);
        let x = spd_solve(&s, &Matrix::identity(12), 0.0).unwrap().x;
        let r = naive_matmul(&s, &x).sub(&Matrix::identity(12)).unwrap();
        assert!(r.frobenius_norm() < 1e-8);
    }

    #[test]
    fn blocked_factor_matches_product() {
        // Larger than one panel and one update block.
        let n = 410;
        let s = random_spd(n, 11);
        let ch = Cholesky::factor(&s).unwrap();
        let l = ch.lower();
        let llt = matmul_transpose_b(l, l).unwrap();
        let rel = llt.sub(&s).unwrap().frobenius_norm() / s.frobenius_norm();
        assert!(rel < 1e-13, "relative reconstruction error {rel:e}");
        let b = random(n, 3, 12);
        let x = ch.solve(&b).unwrap();
        let res = matmul(&s, &x).unwrap().sub(&b).unwrap().frobenius_norm() / b.frobenius_norm();
        assert!(res < 1e-8, "residual {res:e}");
    }

    #[test]
    fn spd_inverse_cases() {
        let inv = spd_inverse(&Matrix::identity(2), 0.0).unwrap().x;
        assert_eq!(inv, Matrix::identity(2));
        let inv = spd_inverse(&Matrix::from_diag(&[2.0, 4.0]), 0.0).unwrap().x;
        assert!(inv.sub(&Matrix::from_diag(&[0.5, 0.25])).unwrap().max_abs() < 1e-15);
        let s = random_spd(9, 13);
        let inv = spd_inverse(&s, 0.0).unwrap().x;
        assert_eq!(asymmetry(&inv), 0.0);
        let r = naive_matmul(&s, &inv).sub(&Matrix::identity(9)).unwrap();
        assert!(r.frobenius_norm() < 1e-8);
    }

    #[test]
    fn log_det_of_diagonal() {
        let ch = Cholesky::factor(&Matrix::from_diag(&[2.0, 3.0, 5.0])).unwrap();
        assert_abs_diff_eq!(ch.log_det(), 30f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        // Rank one, 3x3.
        let v = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        let s = matmul_transpose_b(&v, &v).unwrap();
        assert!(matches!(Cholesky::factor(&s), Err(Error::NotPositiveDefinite { .. })));
        let sol = spd_solve(&s, &Matrix::identity(3), 0.0).unwrap();
        assert!(sol.jitter > 0.0);
        assert!(sol.jitter <= MAX_JITTER_FRACTION * 14.0 / 3.0);
        let shifted = s.add(&Matrix::identity(3).scale(sol.jitter)).unwrap();
        // Backward-stable residual; the jittered system is badly conditioned.
        let r = matmul(&shifted, &sol.x).unwrap().sub(&Matrix::identity(3)).unwrap();
        assert!(r.frobenius_norm() <= 1e-12 * shifted.frobenius_norm() * sol.x.frobenius_norm());
    }

    #[test]
    fn zero_matrix_rescued_by_first_rung() {
        let sol = spd_solve(&Matrix::zeros(2, 2), &Matrix::identity(2), 0.0).unwrap();
        assert_eq!(sol.jitter, MIN_JITTER);
    }

    #[test]
    fn indefinite_matrix_fails_after_ladder() {
        let s = Matrix::from_diag(&[1.0, -1.0]);
        assert!(matches!(
            spd_solve(&s, &Matrix::identity(2), 0.0),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let s = Matrix::from_rows(&[[2.0, 1.0], [0.0, 2.0]]).unwrap();
        assert!(matches!(
            spd_solve(&s, &Matrix::identity(2), 0.0),
            Err(Error::NotSymmetric { .. })
        ));
        // Rounding-level asymmetry is accepted and averaged away.
        let s = Matrix::from_rows(&[[2.0, 1.0], [1.0 + 1e-12, 2.0]]).unwrap();
        assert!(spd_solve(&s, &Matrix::identity(2), 0.0).is_ok());
    }

    #[test]
    fn schedule_shape() {
        let s = jitter_schedule(0.0, 1.0);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 1e-10);
        assert!(*s.last().unwrap() <= 1e-2 * (1.0 + 1e-12));
        assert_eq!(s.len(), 10);
        let s = jitter_schedule(0.5, 1.0);
        assert_eq!(s, vec![0.5, 5.0]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matmul_is_associative(m in 1usize..6, k in 1usize..6, p in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
            let a = random(m, k, seed);
            let b = random(k, p, seed ^ 1);
            let c = random(p, n, seed ^ 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1.0);
            prop_assert!(left.sub(&right).unwrap().frobenius_norm() / scale < 1e-10);
        }

        #[test]
        fn spd_residual_small(n in 1usize..30, r in 1usize..4, seed in any::<u64>(), jitter in prop_oneof![Just(0.0), 1e-6..1e-1f64]) {
            let s = random_spd(n, seed);
            let b = random(n, r, seed ^ 3);
            let sol = spd_solve(&s, &b, jitter).unwrap();
            prop_assert_eq!(sol.jitter, jitter);
            let shifted = s.add(&Matrix::identity(n).scale(jitter)).unwrap();
            let res = matmul(&shifted, &sol.x).unwrap().sub(&b).unwrap().frobenius_norm() / b.frobenius_norm();
            prop_assert!(res < 1e-8, "residual {:e}", res);
        }
    }
}
