//! Gram-matrix curvature: construction, refresh policy, and the study
//! comparing the matrix Gram against the flattened-gradient covariance.
//!
//! For per-sample gradients `G_i` of an `m x n` weight, the curvature proxy
//! is the left Gram `(1/N) sum G_i G_i^T` when `m <= n` and the right Gram
//! `(1/N) sum G_i^T G_i` otherwise, so the preconditioner is always the
//! smaller square. With rank-one factors `G_i = g_i a_i^T` the left Gram
//! collapses to `(1/N) sum ||a_i||^2 g_i g_i^T`, which is what
//! [`build_subsampled`] computes without ever materializing `G_i`.
//!
//! [`CurvatureState`] owns the running matrix, its damping, and the cached
//! Cholesky factor. Refreshes happen every `freq` iterations; between them
//! both the matrix and the factorization are reused untouched.

use crate::error::{Error, Result};
use crate::gradients::PerSampleFactors;
use crate::linalg::{frobenius_norm, spd_factor, Mat, SpdFactor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which Gram of the per-sample gradients preconditions the layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `m x m` Gram `G G^T`, applied from the left.
    Left,
    /// `n x n` Gram `G^T G`, applied from the right.
    Right,
}

/// Picks the smaller Gram side for an `m x n` weight; ties go left.
pub fn choose_side(rows: usize, cols: usize) -> Side {
    if rows <= cols {
        Side::Left
    } else {
        Side::Right
    }
}

/// How the running curvature matrix incorporates fresh statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CurvatureMode {
    /// Replace with the Gram of the current sample set.
    Subsampled,
    /// Exponential moving average `beta * old + (1 - beta) * fresh`; the
    /// first refresh adopts the fresh Gram outright.
    Momentum { beta: f64 },
    /// Accumulator `beta * old + gamma * G_B G_B^T` over mini-batch
    /// gradients, started at `lambda0 * I`. With `beta = gamma = 1` this is
    /// the raw sum-of-squares accumulator used by Shampoo-style roots.
    MiniBatch { beta: f64, gamma: f64 },
}

fn factor_dims(factors: &[PerSampleFactors]) -> Result<(usize, usize)> {
    let first = factors.first().ok_or(Error::EmptyBatch)?;
    let (m, n) = (first.g.nrows(), first.a.nrows());
    for f in factors {
        if f.g.nrows() != m || f.a.nrows() != n {
            return Err(Error::ShapeMismatch(format!(
                "factor shapes {}x{} vary within the sample set",
                f.g.nrows(),
                f.a.nrows()
            )));
        }
        if f.g.ncols() != f.a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "factor has {} g columns but {} a columns",
                f.g.ncols(),
                f.a.ncols()
            )));
        }
    }
    Ok((m, n))
}

/// Exact (a + a^T)/2 symmetrization; a no-op on already symmetric input,
/// used to scrub roundoff asymmetry from accumulated products.
fn symmetrize(mut a: Mat) -> Mat {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

/// Mean Gram of a sample set's factored gradients on the requested side.
///
/// Left: `(1/|S|) sum G_i (A_i^T A_i) G_i^T`, right: the mirror image. For
/// rank-one factors the inner product is the scalar `||a_i||^2` (left) or
/// `||g_i||^2` (right).
pub fn build_subsampled(factors: &[PerSampleFactors], side: Side) -> Result<Mat> {
    let (m, n) = factor_dims(factors)?;
    let dim = match side {
        Side::Left => m,
        Side::Right => n,
    };
    let mut sum = Array2::<f64>::zeros((dim, dim));
    for f in factors {
        let term = match side {
            Side::Left => {
                let inner = f.a.t().dot(&f.a);
                f.g.dot(&inner).dot(&f.g.t())
            }
            Side::Right => {
                let inner = f.g.t().dot(&f.g);
                f.a.dot(&inner).dot(&f.a.t())
            }
        };
        sum = sum + term;
    }
    Ok(symmetrize(sum / factors.len() as f64))
}

/// Scaled low-rank factor `U` with `U U^T` equal to [`build_subsampled`] of
/// the same sample set, without forming the square Gram. Columns are
/// `sqrt(||a_i||^2 / |S|) g_i` on the left side (mirrored on the right).
/// Requires rank-one factors.
pub fn low_rank_factor(factors: &[PerSampleFactors], side: Side) -> Result<Mat> {
    let (m, n) = factor_dims(factors)?;
    if let Some(f) = factors.iter().find(|f| f.kappa() != 1) {
        return Err(Error::KappaNotOne { kappa: f.kappa() });
    }
    let rows = match side {
        Side::Left => m,
        Side::Right => n,
    };
    let inv_batch = 1.0 / factors.len() as f64;
    let mut u = Array2::<f64>::zeros((rows, factors.len()));
    for (col, f) in factors.iter().enumerate() {
        let (vec, scale_sq) = match side {
            Side::Left => (&f.g, f.a_norm_sq()),
            Side::Right => (&f.a, f.g_norm_sq()),
        };
        let scale = (scale_sq * inv_batch).sqrt();
        for i in 0..rows {
            u[[i, col]] = scale * vec[[i, 0]];
        }
    }
    Ok(u)
}

/// Exponential moving average of Gram matrices.
pub fn update_momentum(prev: &Mat, fresh: &Mat, beta: f64) -> Result<Mat> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "momentum beta {beta} outside [0, 1]"
        )));
    }
    if prev.dim() != fresh.dim() {
        return Err(Error::ShapeMismatch(format!(
            "momentum update {}x{} vs {}x{}",
            prev.nrows(),
            prev.ncols(),
            fresh.nrows(),
            fresh.ncols()
        )));
    }
    Ok(prev * beta + &(fresh * (1.0 - beta)))
}

/// Accumulator update `beta * prev + gamma * Gram(grad)` from a mini-batch
/// gradient, on the given side.
pub fn update_minibatch(
    prev: &Mat,
    grad: &Mat,
    beta: f64,
    gamma: f64,
    side: Side,
) -> Result<Mat> {
    if beta < 0.0 || gamma < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "accumulator weights beta={beta} gamma={gamma} must be nonnegative"
        )));
    }
    let gram = match side {
        Side::Left => grad.dot(&grad.t()),
        Side::Right => grad.t().dot(grad),
    };
    if prev.dim() != gram.dim() {
        return Err(Error::ShapeMismatch(format!(
            "accumulator is {}x{}, gradient Gram is {}x{}",
            prev.nrows(),
            prev.ncols(),
            gram.nrows(),
            gram.ncols()
        )));
    }
    Ok(symmetrize(prev * beta + &(gram * gamma)))
}

/// Internal representation of the running curvature.
#[derive(Debug, Clone)]
enum Repr {
    /// Square Gram plus its cached Cholesky factor of `lambda I + M`.
    Dense { mat: Mat, factor: SpdFactor },
    /// Low-rank snapshot `U` with the factor of `lambda I + U^T U`.
    LowRank { u: Mat, small: SpdFactor },
}

/// Running curvature of one layer: the Gram (dense or as a low-rank
/// snapshot), its damping, the refresh cadence, and the cached factorization.
///
/// Only [`CurvatureState::maybe_refresh`] and [`CurvatureState::set_lambda`]
/// mutate the state; everything else reads the cache.
#[derive(Debug, Clone)]
pub struct CurvatureState {
    side: Side,
    dim: usize,
    lambda: f64,
    mode: CurvatureMode,
    freq: Option<usize>,
    repr: Repr,
    last_refresh: Option<usize>,
    refresh_count: usize,
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "damping must be positive and finite, got {lambda}"
        )));
    }
    Ok(())
}

fn validate_mode(mode: &CurvatureMode) -> Result<()> {
    match *mode {
        CurvatureMode::Subsampled => Ok(()),
        CurvatureMode::Momentum { beta } => {
            if (0.0..=1.0).contains(&beta) {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "momentum beta {beta} outside [0, 1]"
                )))
            }
        }
        CurvatureMode::MiniBatch { beta, gamma } => {
            if beta >= 0.0 && gamma >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "accumulator weights beta={beta} gamma={gamma} must be nonnegative"
                )))
            }
        }
    }
}

impl CurvatureState {
    /// Dense state for an `m x n` layer. The Gram starts at zero, or at
    /// `lambda0 * I` in accumulator mode, and is first populated by the
    /// refresh at iteration 0.
    pub fn new_dense(
        rows: usize,
        cols: usize,
        mode: CurvatureMode,
        freq: usize,
        lambda0: f64,
    ) -> Result<Self> {
        validate_lambda(lambda0)?;
        validate_mode(&mode)?;
        if freq == 0 {
            return Err(Error::InvalidConfig("refresh freq must be >= 1".into()));
        }
        let side = choose_side(rows, cols);
        let dim = rows.min(cols);
        let mat = match mode {
            CurvatureMode::MiniBatch { .. } => Array2::<f64>::eye(dim) * lambda0,
            _ => Array2::<f64>::zeros((dim, dim)),
        };
        let factor = spd_factor(&mat, lambda0)?;
        Ok(CurvatureState {
            side,
            dim,
            lambda: lambda0,
            mode,
            freq: Some(freq),
            repr: Repr::Dense { mat, factor },
            last_refresh: None,
            refresh_count: 0,
        })
    }

    /// Low-rank state for paths that never materialize the square Gram.
    /// Always subsampled: the snapshot is exactly the last refresh set.
    pub fn new_low_rank(rows: usize, cols: usize, freq: usize, lambda0: f64) -> Result<Self> {
        validate_lambda(lambda0)?;
        if freq == 0 {
            return Err(Error::InvalidConfig("refresh freq must be >= 1".into()));
        }
        let side = choose_side(rows, cols);
        let long_dim = match side {
            Side::Left => rows,
            Side::Right => cols,
        };
        let u = Array2::<f64>::zeros((long_dim, 0));
        let small = spd_factor(&Array2::<f64>::zeros((0, 0)), lambda0)?;
        Ok(CurvatureState {
            side,
            dim: rows.min(cols),
            lambda: lambda0,
            mode: CurvatureMode::Subsampled,
            freq: Some(freq),
            repr: Repr::LowRank { u, small },
            last_refresh: None,
            refresh_count: 0,
        })
    }

    /// State pinned to a fixed Gram that never refreshes. Useful for
    /// degenerate configurations (a zero Gram turns the step into plain
    /// gradient descent scaled by `1/lambda`).
    pub fn frozen(mat: Mat, side: Side, lambda: f64) -> Result<Self> {
        validate_lambda(lambda)?;
        let dim = mat.nrows();
        let factor = spd_factor(&mat, lambda)?;
        Ok(CurvatureState {
            side,
            dim,
            lambda,
            mode: CurvatureMode::Subsampled,
            freq: None,
            repr: Repr::Dense { mat, factor },
            last_refresh: None,
            refresh_count: 0,
        })
    }

    pub fn side(&self) -> Side {
        self.side
    }

    /// Gram dimension, `min(m, n)` of the layer.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mode(&self) -> CurvatureMode {
        self.mode
    }

    pub fn last_refresh_iter(&self) -> Option<usize> {
        self.last_refresh
    }

    pub fn refresh_count(&self) -> usize {
        self.refresh_count
    }

    /// The dense Gram, if this state keeps one.
    pub fn matrix(&self) -> Option<&Mat> {
        match &self.repr {
            Repr::Dense { mat, .. } => Some(mat),
            Repr::LowRank { .. } => None,
        }
    }

    /// Cholesky factor of `lambda I + M` for the dense representation.
    pub fn dense_factor(&self) -> Result<&SpdFactor> {
        match &self.repr {
            Repr::Dense { factor, .. } => Ok(factor),
            Repr::LowRank { .. } => Err(Error::InvalidConfig(
                "dense solve requested on a low-rank curvature state".into(),
            )),
        }
    }

    /// Low-rank snapshot `U` and the factor of `lambda I + U^T U`.
    pub fn low_rank(&self) -> Result<(&Mat, &SpdFactor)> {
        match &self.repr {
            Repr::LowRank { u, small } => Ok((u, small)),
            Repr::Dense { .. } => Err(Error::InvalidConfig(
                "low-rank solve requested on a dense curvature state".into(),
            )),
        }
    }

    /// Trace of the running Gram; with the damping this brackets the
    /// preconditioner spectrum inside `[lambda, lambda + trace]`.
    pub fn gram_trace(&self) -> f64 {
        match &self.repr {
            Repr::Dense { mat, .. } => (0..self.dim).map(|i| mat[[i, i]]).sum(),
            Repr::LowRank { u, .. } => u.iter().map(|x| x * x).sum(),
        }
    }

    /// Whether [`CurvatureState::maybe_refresh`] would rebuild at this
    /// iteration.
    pub fn refresh_due(&self, iter: usize) -> bool {
        matches!(self.freq, Some(t) if iter % t == 0)
    }

    /// Changes the damping, refactoring the cached decomposition if the
    /// value actually moved.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        validate_lambda(lambda)?;
        if lambda == self.lambda {
            return Ok(());
        }
        self.lambda = lambda;
        self.refactor()
    }

    fn refactor(&mut self) -> Result<()> {
        match &mut self.repr {
            Repr::Dense { mat, factor } => {
                *factor = spd_factor(mat, self.lambda)?;
            }
            Repr::LowRank { u, small } => {
                *small = spd_factor(&u.t().dot(&*u), self.lambda)?;
            }
        }
        Ok(())
    }

    /// Refreshes the Gram when the iteration counter is on the cadence
    /// (`iter % freq == 0`), otherwise leaves matrix and factorization
    /// untouched. Returns whether a refresh happened.
    ///
    /// `factors` feed the subsampled and momentum modes; `batch_grad` feeds
    /// the accumulator mode.
    pub fn maybe_refresh(
        &mut self,
        iter: usize,
        factors: &[PerSampleFactors],
        batch_grad: &Mat,
    ) -> Result<bool> {
        if !self.refresh_due(iter) {
            return Ok(false);
        }
        match &mut self.repr {
            Repr::Dense { mat, .. } => {
                let next = match self.mode {
                    CurvatureMode::Subsampled => build_subsampled(factors, self.side)?,
                    CurvatureMode::Momentum { beta } => {
                        let fresh = build_subsampled(factors, self.side)?;
                        if self.refresh_count == 0 {
                            fresh
                        } else {
                            update_momentum(mat, &fresh, beta)?
                        }
                    }
                    CurvatureMode::MiniBatch { beta, gamma } => {
                        update_minibatch(mat, batch_grad, beta, gamma, self.side)?
                    }
                };
                if next.nrows() != self.dim {
                    return Err(Error::ShapeMismatch(format!(
                        "refresh produced a {}x{} Gram for a state of dimension {}",
                        next.nrows(),
                        next.ncols(),
                        self.dim
                    )));
                }
                *mat = next;
            }
            Repr::LowRank { u, .. } => {
                *u = low_rank_factor(factors, self.side)?;
            }
        }
        self.refactor()?;
        self.last_refresh = Some(iter);
        self.refresh_count += 1;
        Ok(true)
    }
}

/// Elementwise difference statistics between two matrices.
#[derive(Debug, Clone, Copy)]
pub struct DiffStats {
    pub max_abs: f64,
    pub frobenius: f64,
    pub mean_abs: f64,
}

fn diff_stats(a: &Mat, b: &Mat) -> DiffStats {
    let d = a - b;
    let count = d.len().max(1) as f64;
    DiffStats {
        max_abs: d.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())),
        frobenius: frobenius_norm(&d),
        mean_abs: d.iter().map(|x| x.abs()).sum::<f64>() / count,
    }
}

/// Output of [`efim_gfim_study`].
#[derive(Debug, Clone)]
pub struct StudyResult {
    /// Mean left Gram `(1/N) sum G G^T` of the drawn gradients.
    pub gfim: Mat,
    /// Leading `m x m` diagonal block of the flattened-gradient covariance
    /// `(1/N) sum vec(G) vec(G)^T`, which is the outer product of the first
    /// columns.
    pub efim_block: Mat,
    /// Stats of `gfim - efim_block`.
    pub raw: DiffStats,
    /// Stats of `gfim / n - efim_block`; for standard Gaussian draws both
    /// terms converge to the identity, so this difference shrinks like a
    /// Monte-Carlo error.
    pub normalized: DiffStats,
}

/// Draws `n_samples` i.i.d. standard Gaussian `m x n` gradient matrices and
/// compares the matrix Gram against the matching block of the flattened
/// covariance. Deterministic in `seed`.
pub fn efim_gfim_study(n_samples: usize, m: usize, n: usize, seed: u64) -> Result<StudyResult> {
    if n_samples == 0 || m == 0 || n == 0 {
        return Err(Error::InvalidSpec(format!(
            "study needs positive sizes, got N={n_samples}, m={m}, n={n}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // Accumulate chunks of samples through one wide product Z Z^T instead of
    // a Gram per sample; the flop count is identical but the multiply runs
    // at dgemm speed.
    let chunk = 64.min(n_samples);
    let mut gram_sum = Array2::<f64>::zeros((m, m));
    let mut block_sum = Array2::<f64>::zeros((m, m));
    let mut z = Array2::<f64>::zeros((m, n * chunk));
    let mut done = 0;
    while done < n_samples {
        let take = chunk.min(n_samples - done);
        for s in 0..take {
            for i in 0..m {
                for j in 0..n {
                    z[[i, s * n + j]] = normal.sample(&mut rng);
                }
            }
        }
        let zv = z.slice(ndarray::s![.., ..take * n]);
        gram_sum = gram_sum + zv.dot(&zv.t());
        for s in 0..take {
            let first = z.column(s * n);
            for i in 0..m {
                let fi = first[i];
                for j in 0..m {
                    block_sum[[i, j]] += fi * first[j];
                }
            }
        }
        done += take;
    }

    let inv = 1.0 / n_samples as f64;
    let gfim = symmetrize(gram_sum * inv);
    let efim_block = symmetrize(block_sum * inv);
    let scaled = &gfim / n as f64;
    let raw = diff_stats(&gfim, &efim_block);
    let normalized = diff_stats(&scaled, &efim_block);
    Ok(StudyResult {
        gfim,
        efim_block,
        raw,
        normalized,
    })
}
