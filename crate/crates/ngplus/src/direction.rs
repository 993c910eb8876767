//! Direction solves: turn a mini-batch gradient into a preconditioned
//! descent direction through one of several interchangeable paths.
//!
//! All paths target the same damped solve `D = -(lambda I + L)^-1 G` (or its
//! right-side mirror). `Dense` factors the square Gram directly. `Smw`
//! rewrites the inverse through the Woodbury identity so only a batch-sized
//! system is factored. `SketchedLs` additionally row-samples the low-rank
//! factor before the small solve. `BlockDiag` keeps only the block diagonal
//! of the Gram and solves the blocks independently. The KFAC and Shampoo
//! baselines live here too since they are alternative direction rules over
//! the same inputs.
//!
//! The canonical orientation is the left side; right-side layers are handled
//! by transposing in and out in [`compute_direction`].

use crate::curvature::{low_rank_factor, CurvatureState, Side};
use crate::error::{Error, Result};
use crate::gradients::PerSampleFactors;
use crate::linalg::{batched_spd_solve, spd_factor, spd_solve, sym_eig, Mat, SpdFactor};
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Eigenvalues are clipped up to this floor before the inverse quarter root.
const SHAMPOO_EIG_FLOOR: f64 = 1e-12;

/// How sketch indices are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SketchKind {
    /// Independent uniform draws with replacement, scaled so the sketch is
    /// unbiased in expectation.
    Iid,
    /// Deterministic identity permutation covering every index exactly once;
    /// only meaningful when the sketch size equals the sampled dimension.
    /// Exists for exact-recovery tests.
    Complete,
}

/// Sketch size, seed, and index scheme for the sketched paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SketchConfig {
    pub q: usize,
    pub seed: u64,
    pub kind: SketchKind,
}

/// Which solver turns gradients into directions.
#[derive(Debug, Clone, PartialEq)]
pub enum SolverPath {
    Dense,
    Smw,
    SketchedLs(SketchConfig),
    BlockDiag { blocks: usize },
}

/// Dense damped solve through the state's cached Cholesky factor:
/// `-(lambda I + M)^-1 G` on the left, `-G (lambda I + M)^-1` on the right.
pub fn dense_direction(grad: &Mat, state: &CurvatureState) -> Result<Mat> {
    let factor = state.dense_factor()?;
    match state.side() {
        Side::Left => Ok(-spd_solve(factor, grad)?),
        Side::Right => {
            let solved = spd_solve(factor, &grad.t().to_owned())?;
            Ok(-solved.t().to_owned())
        }
    }
}

/// Woodbury application `-(1/lambda) (G - U (lambda I + U^T U)^-1 U^T G)`,
/// which equals `-(lambda I + U U^T)^-1 G` without forming the long-side
/// square. `small` must hold the factor of `lambda I + U^T U`.
pub fn smw_apply(grad: &Mat, u: &Mat, small: &SpdFactor, lambda: f64) -> Result<Mat> {
    if u.nrows() != grad.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "low-rank factor has {} rows, gradient has {}",
            u.nrows(),
            grad.nrows()
        )));
    }
    if small.dim() != u.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "small factor dimension {} vs {} factor columns",
            small.dim(),
            u.ncols()
        )));
    }
    let rhs = u.t().dot(grad);
    let coeff = spd_solve(small, &rhs)?;
    Ok((u.dot(&coeff) - grad) / lambda)
}

/// Direction through the Woodbury identity from fresh rank-one factors.
pub fn smw_direction(grad: &Mat, factors: &[PerSampleFactors], lambda: f64) -> Result<Mat> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "damping must be positive, got {lambda}"
        )));
    }
    let u = low_rank_factor(factors, Side::Left)?;
    let small = spd_factor(&u.t().dot(&u), lambda)?;
    smw_apply(grad, &u, &small, lambda)
}

/// Draws the sketch row indices and their common scale for a sampled
/// dimension of size `dim`.
fn sketch_indices(dim: usize, cfg: &SketchConfig) -> Result<(Vec<usize>, f64)> {
    if cfg.q == 0 {
        return Err(Error::InvalidConfig("sketch size must be >= 1".into()));
    }
    match cfg.kind {
        SketchKind::Iid => {
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let idx = (0..cfg.q).map(|_| rng.gen_range(0..dim)).collect();
            Ok((idx, (dim as f64 / cfg.q as f64).sqrt()))
        }
        SketchKind::Complete => {
            if cfg.q != dim {
                return Err(Error::InvalidConfig(format!(
                    "complete sketch must cover the dimension exactly: q={} dim={}",
                    cfg.q, dim
                )));
            }
            Ok(((0..dim).collect(), 1.0))
        }
    }
}

/// Sketched Gram `(G Omega)(G Omega)^T` where `Omega` has `q` columns, each
/// a scaled standard basis vector drawn uniformly. In expectation over the
/// draws this equals `G G^T`.
pub fn sketch_gram(grad: &Mat, cfg: &SketchConfig) -> Result<Mat> {
    let n = grad.ncols();
    let (idx, scale) = sketch_indices(n, cfg)?;
    let mut sampled = Array2::<f64>::zeros((grad.nrows(), idx.len()));
    for (c, &j) in idx.iter().enumerate() {
        for i in 0..grad.nrows() {
            sampled[[i, c]] = scale * grad[[i, j]];
        }
    }
    Ok(sampled.dot(&sampled.t()))
}

/// Woodbury direction with the long dimension row-sampled before the small
/// solve: both `U` and `G` are hit by the same sketch, the batch-sized
/// system is solved on the sketched rows, and the correction is lifted back.
/// With a complete sketch this reproduces [`smw_direction`] bit for bit.
pub fn sketched_apply(grad: &Mat, u: &Mat, lambda: f64, cfg: &SketchConfig) -> Result<Mat> {
    let m = grad.nrows();
    if u.nrows() != m {
        return Err(Error::DimensionMismatch(format!(
            "low-rank factor has {} rows, gradient has {}",
            u.nrows(),
            m
        )));
    }
    if cfg.q > m {
        return Err(Error::SketchTooLarge { q: cfg.q, max: m });
    }
    let (idx, scale) = sketch_indices(m, cfg)?;
    let q = idx.len();
    let mut su = Array2::<f64>::zeros((q, u.ncols()));
    let mut sg = Array2::<f64>::zeros((q, grad.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        for c in 0..u.ncols() {
            su[[r, c]] = scale * u[[i, c]];
        }
        for c in 0..grad.ncols() {
            sg[[r, c]] = scale * grad[[i, c]];
        }
    }
    let small = spd_factor(&su.t().dot(&su), lambda)?;
    let coeff = spd_solve(&small, &su.t().dot(&sg))?;
    Ok((u.dot(&coeff) - grad) / lambda)
}

/// Sketched direction from fresh rank-one factors.
pub fn sketched_ls_direction(
    grad: &Mat,
    factors: &[PerSampleFactors],
    lambda: f64,
    cfg: &SketchConfig,
) -> Result<Mat> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "damping must be positive, got {lambda}"
        )));
    }
    let u = low_rank_factor(factors, Side::Left)?;
    sketched_apply(grad, &u, lambda, cfg)
}

/// Block-diagonal direction: the rows of `G` are cut into `blocks` equal
/// slabs and each slab is preconditioned by its own damped Gram
/// `(lambda I + G_b G_b^T)^-1`. One block reproduces the dense solve over
/// the gradient's own Gram; `m` blocks scale each row by
/// `1 / (lambda + ||row||^2)`.
pub fn block_diag_direction(grad: &Mat, lambda: f64, blocks: usize) -> Result<Mat> {
    let m = grad.nrows();
    if blocks == 0 || m % blocks != 0 {
        return Err(Error::NotDivisible {
            count: blocks,
            dim: m,
        });
    }
    let p = m / blocks;
    let systems: Vec<(Mat, Mat)> = (0..blocks)
        .map(|b| {
            let slab = grad.slice(s![b * p..(b + 1) * p, ..]);
            (slab.dot(&slab.t()), slab.to_owned())
        })
        .collect();
    let solved = batched_spd_solve(&systems, lambda)?;
    let mut out = Array2::<f64>::zeros(grad.dim());
    for (b, x) in solved.iter().enumerate() {
        out.slice_mut(s![b * p..(b + 1) * p, ..]).assign(&(-x));
    }
    Ok(out)
}

/// Kronecker-factored baseline direction. Builds the damped factor Grams
/// `sqrt(lambda) I + (1/|S|) sum g g^T` and `sqrt(lambda) I + (1/|S|) sum
/// a a^T` and returns `-(Gtilde)^-1 G (Atilde)^-1`, the ordering under which
/// the product is `m x n`.
pub fn kfac_direction(grad: &Mat, factors: &[PerSampleFactors], lambda: f64) -> Result<Mat> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "damping must be positive, got {lambda}"
        )));
    }
    let first = factors.first().ok_or(Error::EmptyBatch)?;
    let (m, n) = (first.g.nrows(), first.a.nrows());
    if grad.dim() != (m, n) {
        return Err(Error::ShapeMismatch(format!(
            "gradient {}x{} vs factor layout {}x{}",
            grad.nrows(),
            grad.ncols(),
            m,
            n
        )));
    }
    let mut gg = Array2::<f64>::zeros((m, m));
    let mut aa = Array2::<f64>::zeros((n, n));
    for f in factors {
        if f.kappa() != 1 {
            return Err(Error::KappaNotOne { kappa: f.kappa() });
        }
        if f.g.nrows() != m || f.a.nrows() != n {
            return Err(Error::ShapeMismatch(
                "factor shapes vary within the sample set".into(),
            ));
        }
        gg = gg + f.g.dot(&f.g.t());
        aa = aa + f.a.dot(&f.a.t());
    }
    let inv = 1.0 / factors.len() as f64;
    let fg = spd_factor(&(gg * inv), lambda.sqrt())?;
    let fa = spd_factor(&(aa * inv), lambda.sqrt())?;
    let left = spd_solve(&fg, grad)?;
    let both = spd_solve(&fa, &left.t().to_owned())?;
    Ok(-both.t().to_owned())
}

/// Symmetric inverse quarter root through the eigendecomposition, with
/// eigenvalues clipped at a small floor before powering.
fn inv_quarter_root(a: &Mat) -> Result<Mat> {
    let (w, v) = sym_eig(a)?;
    let scale = w.first().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some((index, &bad)) = w
        .iter()
        .enumerate()
        .find(|(_, &x)| x < -1e-10 * scale)
    {
        return Err(Error::NotPositiveDefinite { pivot: bad, index });
    }
    let n = a.nrows();
    let mut scaled = v.clone();
    for j in 0..n {
        let p = w[j].max(SHAMPOO_EIG_FLOOR).powf(-0.25);
        for i in 0..n {
            scaled[[i, j]] *= p;
        }
    }
    Ok(scaled.dot(&v.t()))
}

/// Shampoo baseline direction `-(L^-1/4) G (R^-1/4)` from the two
/// sum-of-squares accumulators.
pub fn shampoo_direction(grad: &Mat, l_acc: &Mat, r_acc: &Mat) -> Result<Mat> {
    if l_acc.nrows() != grad.nrows() || r_acc.nrows() != grad.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "accumulators {}x{} / {}x{} vs gradient {}x{}",
            l_acc.nrows(),
            l_acc.ncols(),
            r_acc.nrows(),
            r_acc.ncols(),
            grad.nrows(),
            grad.ncols()
        )));
    }
    let lq = inv_quarter_root(l_acc)?;
    let rq = inv_quarter_root(r_acc)?;
    Ok(-lq.dot(grad).dot(&rq))
}

/// Applies the configured solver path to a gradient, honoring the state's
/// Gram side by transposing in and out for right-side layers.
pub fn compute_direction(grad: &Mat, state: &CurvatureState, path: &SolverPath) -> Result<Mat> {
    match path {
        SolverPath::Dense => dense_direction(grad, state),
        SolverPath::Smw => {
            let (u, small) = state.low_rank()?;
            match state.side() {
                Side::Left => smw_apply(grad, u, small, state.lambda()),
                Side::Right => Ok(smw_apply(
                    &grad.t().to_owned(),
                    u,
                    small,
                    state.lambda(),
                )?
                .t()
                .to_owned()),
            }
        }
        SolverPath::SketchedLs(cfg) => {
            let (u, _) = state.low_rank()?;
            match state.side() {
                Side::Left => sketched_apply(grad, u, state.lambda(), cfg),
                Side::Right => Ok(sketched_apply(
                    &grad.t().to_owned(),
                    u,
                    state.lambda(),
                    cfg,
                )?
                .t()
                .to_owned()),
            }
        }
        SolverPath::BlockDiag { blocks } => match state.side() {
            Side::Left => block_diag_direction(grad, state.lambda(), *blocks),
            Side::Right => Ok(block_diag_direction(
                &grad.t().to_owned(),
                state.lambda(),
                *blocks,
            )?
            .t()
            .to_owned()),
        },
    }
}
