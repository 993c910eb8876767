//! Dense symmetric linear algebra on `f64` matrices.
//!
//! Everything operates on [`Mat`], a plain `ndarray` matrix in row-major
//! layout. The factorization routines are deliberately self-contained: a
//! textbook Cholesky with a relative pivot guard, and a cyclic Jacobi
//! eigensolver. They target the small symmetric systems that arise in
//! curvature preconditioning, where predictable tolerances matter more than
//! raw speed.

use crate::error::{Error, Result};
use ndarray::Array2;

/// Dense real matrix, the universal numeric carrier for this crate.
pub type Mat = Array2<f64>;

/// Maximum allowed |A - A^T| entry before a matrix is rejected as input to
/// the symmetric routines.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A Cholesky pivot at or below `PIVOT_REL_TOL * max diagonal` means the
/// damped matrix is treated as not positive definite.
const PIVOT_REL_TOL: f64 = 1e-14;

/// Jacobi stops once the off-diagonal Frobenius mass drops below this
/// fraction of the input's Frobenius norm.
const JACOBI_REL_TOL: f64 = 1e-12;

/// Hard cap on Jacobi sweeps; typical inputs converge in well under ten.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Lower-triangular Cholesky factor of a damped SPD matrix `A + damping*I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    dim: usize,
    lower: Mat,
}

impl SpdFactor {
    /// Side length of the factored matrix.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The lower-triangular factor `L` with `L L^T = A + damping*I`.
    pub fn lower(&self) -> &Mat {
        &self.lower
    }

    /// Log-determinant of the factored matrix, `2 * sum ln L_ii`.
    pub fn logdet(&self) -> f64 {
        (0..self.dim).map(|i| self.lower[[i, i]].ln()).sum::<f64>() * 2.0
    }
}

fn check_square(a: &Mat) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "expected square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(a.nrows())
}

fn symmetry_deviation(a: &Mat) -> f64 {
    let n = a.nrows();
    let mut dev: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            dev = dev.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    dev
}

fn check_symmetric(a: &Mat) -> Result<()> {
    let dev = symmetry_deviation(a);
    if dev > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_dev: dev });
    }
    Ok(())
}

/// Frobenius norm of a matrix.
pub fn frobenius_norm(a: &Mat) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest absolute elementwise difference between two equal-shaped matrices.
pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim(), "max_abs_diff needs equal shapes");
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Cholesky factorization of `a + damping * I`.
///
/// `a` must be square and symmetric within [`SYMMETRY_TOL`]. The factorization
/// fails with [`Error::NotPositiveDefinite`] when a pivot falls at or below
/// `1e-14` times the largest diagonal entry of the damped matrix, so nearly
/// singular inputs are rejected instead of producing garbage factors.
pub fn spd_factor(a: &Mat, damping: f64) -> Result<SpdFactor> {
    let n = check_square(a)?;
    check_symmetric(a)?;

    let mut m: Vec<f64> = a.iter().copied().collect();
    for i in 0..n {
        m[i * n + i] += damping;
    }
    let max_diag = (0..n)
        .map(|i| m[i * n + i])
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let tol = PIVOT_REL_TOL * max_diag;

    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = m[j * n + j];
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if pivot <= tol {
            return Err(Error::NotPositiveDefinite { pivot, index: j });
        }
        let d = pivot.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut v = m[i * n + j];
            for k in 0..j {
                v -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = v / d;
        }
    }

    Ok(SpdFactor {
        dim: n,
        lower: Array2::from_shape_vec((n, n), l).expect("square buffer"),
    })
}

/// Solves `(A + damping*I) X = B` given the factor from [`spd_factor`].
///
/// `B` may have any number of columns; the solve runs forward and backward
/// substitution across whole rows so multiple right-hand sides share the
/// triangular traversal.
pub fn spd_solve(f: &SpdFactor, b: &Mat) -> Result<Mat> {
    let n = f.dim;
    if b.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "rhs has {} rows, factor dimension is {}",
            b.nrows(),
            n
        )));
    }
    let nc = b.ncols();
    let l = f.lower.as_slice().expect("factor is row-major");
    let mut x: Vec<f64> = b.iter().copied().collect();

    // Forward substitution L y = b, sweeping full rows of the right-hand side.
    for i in 0..n {
        for k in 0..i {
            let c = l[i * n + k];
            if c != 0.0 {
                let (head, tail) = x.split_at_mut(i * nc);
                let xk = &head[k * nc..k * nc + nc];
                let xi = &mut tail[..nc];
                for j in 0..nc {
                    xi[j] -= c * xk[j];
                }
            }
        }
        let d = l[i * n + i];
        for j in 0..nc {
            x[i * nc + j] /= d;
        }
    }

    // Backward substitution L^T x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let c = l[k * n + i];
            if c != 0.0 {
                let (head, tail) = x.split_at_mut(k * nc);
                let xi = &mut head[i * nc..i * nc + nc];
                let xk = &tail[..nc];
                for j in 0..nc {
                    xi[j] -= c * xk[j];
                }
            }
        }
        let d = l[i * n + i];
        for j in 0..nc {
            x[i * nc + j] /= d;
        }
    }

    Ok(Array2::from_shape_vec((n, nc), x).expect("solution buffer"))
}

fn offdiag_norm(w: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += w[i * n + j] * w[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvector columns, so `A = V diag(w) V^T`. Convergence is declared when
/// the off-diagonal Frobenius mass falls below `1e-12 * ||A||_F`; exceeding
/// 100 sweeps is an error rather than a silent partial result.
pub fn sym_eig(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    let n = check_square(a)?;
    check_symmetric(a)?;

    let mut w: Vec<f64> = a.iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let anorm = frobenius_norm(a);
    let target = JACOBI_REL_TOL * anorm;

    let mut sweeps = 0;
    loop {
        if offdiag_norm(&w, n) <= target {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps });
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle that zeroes the (p, q) entry.
                let theta = (w[q * n + q] - w[p * n + p]) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;

                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        w[j * n + j]
            .partial_cmp(&w[i * n + i])
            .expect("finite eigenvalues")
    });

    let evals: Vec<f64> = order.iter().map(|&i| w[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vecs[k * n + new_col] = v[k * n + old_col];
        }
    }

    Ok((
        evals,
        Array2::from_shape_vec((n, n), vecs).expect("eigenvector buffer"),
    ))
}

/// Solves `(A_i + damping*I) X_i = B_i` for every block in order.
///
/// All blocks must share one dimension. Failures are reported with the index
/// of the offending block. The output is elementwise identical to calling
/// [`spd_factor`] and [`spd_solve`] per block yourself, which is exactly what
/// this does; the batched form exists so block-diagonal preconditioning has a
/// single audited entry point.
pub fn batched_spd_solve(blocks: &[(Mat, Mat)], damping: f64) -> Result<Vec<Mat>> {
    let dim0 = blocks.first().map(|(a, _)| a.nrows());
    let mut out = Vec::with_capacity(blocks.len());
    for (index, (a, b)) in blocks.iter().enumerate() {
        if let Some(d0) = dim0 {
            if a.nrows() != d0 || a.ncols() != d0 {
                return Err(Error::Block {
                    index,
                    source: Box::new(Error::DimensionMismatch(format!(
                        "block is {}x{}, expected {}x{}",
                        a.nrows(),
                        a.ncols(),
                        d0,
                        d0
                    ))),
                });
            }
        }
        let f = spd_factor(a, damping).map_err(|e| Error::Block {
            index,
            source: Box::new(e),
        })?;
        let x = spd_solve(&f, b).map_err(|e| Error::Block {
            index,
            source: Box::new(e),
        })?;
        out.push(x);
    }
    Ok(out)
}

/// Weighted Frobenius norm `sqrt(tr(A^T (B + damping*I) A))` evaluated
/// through the Cholesky factor of `B + damping*I` as `||L^T A||_F`.
pub fn weighted_norm(a: &Mat, f: &SpdFactor) -> Result<f64> {
    if a.nrows() != f.dim {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows, weight dimension is {}",
            a.nrows(),
            f.dim
        )));
    }
    Ok(frobenius_norm(&f.lower.t().dot(a)))
}
