//! Online variant of the Gram-preconditioned step, with regret
//! instrumentation.
//!
//! Each round accumulates the right Gram of the fresh gradient,
//! `L_t = L_{t-1} + grad^T grad` starting from `eps I`, takes the
//! preconditioned step `Theta - (1/alpha) grad L_t^-1`, and projects back
//! onto a Frobenius ball of radius `R` in the `L_t`-weighted norm. On the
//! quadratic stream `f_t(W) = 0.5 ||W^T x_t - y_t||^2` with `alpha =
//! 1/(4R^2)` the cumulative regret against the best fixed feasible point is
//! expected to stay under `(n/alpha) log(alpha Lg^2 D^2 t)`, and the audit
//! helpers verify that trace along with the log-det potential chain it rests
//! on.

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, spd_factor, spd_solve, sym_eig, Mat, SpdFactor};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Accumulated curvature and geometry of the online learner.
pub struct OnlineState {
    l: Mat,
    factor: SpdFactor,
    eps: f64,
    alpha: f64,
    radius: f64,
    t: usize,
}

impl OnlineState {
    /// State over an `n`-column parameter with the default regularizer
    /// `eps = 2 / (alpha D^2)`, `D = 2R` being the feasible diameter.
    pub fn new(n: usize, alpha: f64, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "feasible radius must be positive and finite, got {radius}"
            )));
        }
        let diameter = 2.0 * radius;
        Self::with_eps(n, alpha, radius, 2.0 / (alpha * diameter * diameter))
    }

    /// State with an explicit regularizer, used by tests that want an
    /// unbounded feasible set or a hand-picked `eps`.
    pub fn with_eps(n: usize, alpha: f64, radius: f64, eps: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("gram dimension must be >= 1".into()));
        }
        if !(alpha > 0.0) || !(eps > 0.0) || !(radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha, eps, and radius must be positive, got {alpha}, {eps}, {radius}"
            )));
        }
        let l = Array2::<f64>::eye(n) * eps;
        let factor = spd_factor(&l, 0.0)?;
        Ok(OnlineState {
            l,
            factor,
            eps,
            alpha,
            radius,
            t: 0,
        })
    }

    pub fn gram(&self) -> &Mat {
        &self.l
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn rounds(&self) -> usize {
        self.t
    }

    /// Squared gradient norm in the inverse-Gram metric,
    /// `tr(G L^-1 G^T)`, against the current accumulated `L`.
    pub fn weighted_gram_norm_sq(&self, grad: &Mat) -> Result<f64> {
        let solved = spd_solve(&self.factor, &grad.t().to_owned())?;
        let mut acc = 0.0;
        for i in 0..grad.nrows() {
            for j in 0..grad.ncols() {
                acc += grad[[i, j]] * solved[[j, i]];
            }
        }
        Ok(acc)
    }
}

/// One online round: fold `grad^T grad` into the Gram, take the
/// `(1/alpha)`-scaled inverse-Gram step, and project back onto the feasible
/// ball in the norm weighted by the updated Gram.
pub fn online_step(state: &mut OnlineState, theta: &Mat, grad: &Mat) -> Result<Mat> {
    if theta.dim() != grad.dim() {
        return Err(Error::ShapeMismatch(format!(
            "parameter {}x{} vs gradient {}x{}",
            theta.nrows(),
            theta.ncols(),
            grad.nrows(),
            grad.ncols()
        )));
    }
    if grad.ncols() != state.l.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} columns but the Gram is {}x{}",
            grad.ncols(),
            state.l.nrows(),
            state.l.ncols()
        )));
    }
    state.l = &state.l + &grad.t().dot(grad);
    state.factor = spd_factor(&state.l, 0.0)?;
    state.t += 1;

    let solved = spd_solve(&state.factor, &grad.t().to_owned())?;
    let raw = theta - &(solved.t().to_owned() / state.alpha);
    let projected = weighted_project(&raw.t().to_owned(), &state.l, state.radius)?;
    Ok(projected.t().to_owned())
}

/// Projection of `Y` onto the Frobenius ball of the given radius in the
/// `L`-weighted norm `||X - Y||_L^2 = tr((X - Y)^T L (X - Y))`.
///
/// Feasible inputs return unchanged. Otherwise the minimizer satisfies the
/// stationarity condition `(L + mu I) X = L Y` for the multiplier `mu > 0`
/// that puts `X` on the sphere, found by bisection after diagonalizing `L`.
pub fn weighted_project(y: &Mat, l: &Mat, radius: f64) -> Result<Mat> {
    if !(radius > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "projection radius must be positive, got {radius}"
        )));
    }
    let norm = frobenius_norm(y);
    if norm <= radius {
        return Ok(y.clone());
    }
    if l.nrows() != y.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "weight matrix {}x{} vs point with {} rows",
            l.nrows(),
            l.ncols(),
            y.nrows()
        )));
    }
    let (w, v) = sym_eig(l)?;
    let transformed = v.t().dot(y);

    // In the eigenbasis each row scales by w_i / (w_i + mu); rows in the
    // null space of L carry no cost, so the optimum drops them entirely.
    let scaled_norm = |mu: f64| -> f64 {
        let mut acc = 0.0;
        for (i, &wi) in w.iter().enumerate() {
            if wi <= 0.0 {
                continue;
            }
            let s = wi / (wi + mu);
            for j in 0..transformed.ncols() {
                let x = s * transformed[[i, j]];
                acc += x * x;
            }
        }
        acc.sqrt()
    };

    let lam_max = w.first().copied().unwrap_or(0.0).max(0.0);
    let mut lo = 0.0f64;
    let mut hi = lam_max * norm / radius;
    if scaled_norm(lo) <= radius {
        // All the excess sat in the null space; mu = 0 is already feasible.
        hi = 0.0;
    }
    for _ in 0..200 {
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if scaled_norm(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // The upper end of the bracket is on the feasible side.
    let mu = hi;
    let mut out = transformed;
    for (i, &wi) in w.iter().enumerate() {
        let s = if wi <= 0.0 { 0.0 } else { wi / (wi + mu) };
        for j in 0..out.ncols() {
            out[[i, j]] *= s;
        }
    }
    Ok(v.dot(&out))
}

/// A stream of quadratic rounds `f_t(W) = 0.5 ||W^T x_t - y_t||^2` with
/// `||x_t|| <= 1` and `||y_t|| <= R`, the family on which the regret bound
/// is audited with `alpha = 1/(4R^2)`.
pub struct ExpConcaveStream {
    xs: Vec<Array1<f64>>,
    ys: Vec<Array1<f64>>,
    radius: f64,
}

impl ExpConcaveStream {
    /// Validates the norm preconditions and wraps the rounds.
    pub fn new(xs: Vec<Array1<f64>>, ys: Vec<Array1<f64>>, radius: f64) -> Result<Self> {
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "stream needs matching nonempty rounds, got {} and {}",
                xs.len(),
                ys.len()
            )));
        }
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "stream radius must be positive and finite, got {radius}"
            )));
        }
        let tol = 1.0 + 1e-12;
        for (t, (x, y)) in xs.iter().zip(ys.iter()).enumerate() {
            if x.len() != xs[0].len() || y.len() != ys[0].len() {
                return Err(Error::ShapeMismatch(format!(
                    "round {t} changes the stream dimensions"
                )));
            }
            if x.dot(x).sqrt() > tol || y.dot(y).sqrt() > radius * tol {
                return Err(Error::InvalidConfig(format!(
                    "round {t} violates the norm preconditions"
                )));
            }
        }
        Ok(ExpConcaveStream { xs, ys, radius })
    }

    /// Rounds drawn uniformly from the unit and radius balls.
    pub fn random(m: usize, n: usize, radius: f64, rounds: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut ball = |dim: usize, scale: f64| -> Array1<f64> {
            let mut v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = v.dot(&v).sqrt();
            if norm > 0.0 {
                let r = scale * rng.gen_range(0.0f64..1.0).powf(1.0 / dim as f64);
                v *= r / norm;
            }
            v
        };
        let xs = (0..rounds).map(|_| ball(m, 1.0)).collect();
        let ys = (0..rounds).map(|_| ball(n, radius)).collect();
        Self::new(xs, ys, radius)
    }

    /// The same round repeated: the easiest stream, where the hindsight
    /// optimum is the projected least-squares solution of one quadratic.
    pub fn constant(x: Array1<f64>, y: Array1<f64>, radius: f64, rounds: usize) -> Result<Self> {
        Self::new(vec![x; rounds], vec![y; rounds], radius)
    }

    /// Sign-flipping targets on alternating directions, an adversarial
    /// pattern that keeps dragging the learner back and forth.
    pub fn alternating(m: usize, n: usize, radius: f64, rounds: usize) -> Result<Self> {
        let xs = (0..rounds)
            .map(|t| {
                let mut x = Array1::<f64>::zeros(m);
                x[t % m] = 1.0;
                x
            })
            .collect();
        let ys = (0..rounds)
            .map(|t| {
                let mut y = Array1::<f64>::zeros(n);
                let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
                y[t % n] = sign * radius;
                y
            })
            .collect();
        Self::new(xs, ys, radius)
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Parameter shape `(m, n)` the stream acts on.
    pub fn dims(&self) -> (usize, usize) {
        (self.xs[0].len(), self.ys[0].len())
    }

    /// Round-`t` loss `0.5 ||W^T x - y||^2`.
    pub fn loss(&self, t: usize, w: &Mat) -> f64 {
        let r = self.residual(t, w);
        0.5 * r.dot(&r)
    }

    /// Round-`t` gradient `x (W^T x - y)^T`, an m x n rank-one matrix.
    pub fn grad(&self, t: usize, w: &Mat) -> Mat {
        let r = self.residual(t, w);
        let x = &self.xs[t];
        Array2::from_shape_fn((x.len(), r.len()), |(i, j)| x[i] * r[j])
    }

    fn residual(&self, t: usize, w: &Mat) -> Array1<f64> {
        let x = &self.xs[t];
        let y = &self.ys[t];
        let mut r = Array1::<f64>::zeros(y.len());
        for j in 0..y.len() {
            let mut acc = 0.0;
            for i in 0..x.len() {
                acc += w[[i, j]] * x[i];
            }
            r[j] = acc - y[j];
        }
        r
    }
}

/// Best fixed feasible point in hindsight for a prefix of the stream,
/// maintained through the sufficient statistics of the summed quadratic and
/// re-solved each round by projected gradient descent warm-started at the
/// previous solution.
struct Hindsight {
    sxx: Mat,
    sxy: Mat,
    constant: f64,
    radius: f64,
    current: Mat,
    started: bool,
}

impl Hindsight {
    fn new(m: usize, n: usize, radius: f64) -> Self {
        Hindsight {
            sxx: Array2::zeros((m, m)),
            sxy: Array2::zeros((m, n)),
            constant: 0.0,
            radius,
            current: Array2::zeros((m, n)),
            started: false,
        }
    }

    fn add_round(&mut self, x: &Array1<f64>, y: &Array1<f64>) {
        for i in 0..x.len() {
            for j in 0..x.len() {
                self.sxx[[i, j]] += x[i] * x[j];
            }
            for j in 0..y.len() {
                self.sxy[[i, j]] += x[i] * y[j];
            }
        }
        self.constant += 0.5 * y.dot(y);
    }

    fn objective(&self, w: &Mat) -> f64 {
        let sw = self.sxx.dot(w);
        let mut quad = 0.0;
        let mut lin = 0.0;
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                quad += w[[i, j]] * sw[[i, j]];
                lin += w[[i, j]] * self.sxy[[i, j]];
            }
        }
        0.5 * quad - lin + self.constant
    }

    fn ball_clip(&self, w: Mat) -> Mat {
        let norm = frobenius_norm(&w);
        if norm > self.radius {
            w * (self.radius / norm)
        } else {
            w
        }
    }

    /// Minimum of the prefix objective over the Frobenius ball, to a 1e-10
    /// gradient-map tolerance.
    fn best_value(&mut self) -> Result<f64> {
        let (w_eig, _) = sym_eig(&self.sxx)?;
        let lam_max = w_eig.first().copied().unwrap_or(0.0);
        if lam_max <= 1e-12 {
            // No data direction yet: the objective is the constant alone.
            return Ok(self.constant);
        }
        if !self.started {
            // Ridge warm start, then keep refining the previous solution.
            let ridge = spd_factor(&self.sxx, 1e-8 * lam_max)?;
            self.current = self.ball_clip(spd_solve(&ridge, &self.sxy)?);
            self.started = true;
        }
        let step = 1.0 / lam_max;
        let tol = 1e-10 * self.radius.max(1.0);
        for _ in 0..10_000 {
            let grad = &self.sxx.dot(&self.current) - &self.sxy;
            let cand = self.ball_clip(&self.current - &(&grad * step));
            let moved = frobenius_norm(&(&cand - &self.current));
            self.current = cand;
            if moved <= tol {
                break;
            }
        }
        Ok(self.objective(&self.current))
    }
}

/// Per-round traces from an online run over a stream.
pub struct RegretReport {
    /// Cumulative loss of the learner minus the hindsight optimum, per
    /// round.
    pub regret: Vec<f64>,
    /// `(n/alpha) log(alpha Lg^2 D^2 t)` with the running max gradient norm.
    pub bound: Vec<f64>,
    /// Running sum of `tr(G_t L_t^-1 G_t^T)`, the elliptical potential.
    pub potential: Vec<f64>,
    /// Gradients of every round, for replaying the potential audit.
    pub grads: Vec<Mat>,
    /// Largest observed gradient Frobenius norm.
    pub lg: f64,
    /// First 1-based round where the bound exceeds one; assertions start
    /// here. `None` when the bound never rises above one.
    pub burn_in: Option<usize>,
    /// Whether regret stayed at or under the bound past the burn-in.
    pub holds: bool,
}

/// Runs the online learner from the zero matrix over the whole stream with
/// `alpha = 1/(4R^2)` and the default `eps`, recording regret against the
/// per-prefix hindsight optimum, the bound trace, and the potential trace.
pub fn run_regret(stream: &ExpConcaveStream) -> Result<RegretReport> {
    let (m, n) = stream.dims();
    let radius = stream.radius();
    let alpha = 1.0 / (4.0 * radius * radius);
    let diameter_sq = 4.0 * radius * radius;
    let mut state = OnlineState::new(n, alpha, radius)?;
    let mut theta = Array2::<f64>::zeros((m, n));
    let mut hindsight = Hindsight::new(m, n, radius);

    let rounds = stream.len();
    let mut report = RegretReport {
        regret: Vec::with_capacity(rounds),
        bound: Vec::with_capacity(rounds),
        potential: Vec::with_capacity(rounds),
        grads: Vec::with_capacity(rounds),
        lg: 0.0,
        burn_in: None,
        holds: true,
    };
    let mut cumulative = 0.0;
    let mut potential = 0.0;
    for t in 0..rounds {
        cumulative += stream.loss(t, &theta);
        let grad = stream.grad(t, &theta);
        report.lg = report.lg.max(frobenius_norm(&grad));

        theta = online_step(&mut state, &theta, &grad)?;
        potential += state.weighted_gram_norm_sq(&grad)?;

        hindsight.add_round(&stream.xs[t], &stream.ys[t]);
        let best = hindsight.best_value()?;
        let regret = cumulative - best;

        let rounds_so_far = (t + 1) as f64;
        let arg = alpha * report.lg * report.lg * diameter_sq * rounds_so_far;
        let bound = (n as f64 / alpha) * arg.ln();
        if report.burn_in.is_none() && bound > 1.0 {
            report.burn_in = Some(t + 1);
        }
        if report.burn_in.is_some() && regret > bound + 1e-9 {
            report.holds = false;
        }

        report.regret.push(regret);
        report.bound.push(bound);
        report.potential.push(potential);
        report.grads.push(grad);
    }
    Ok(report)
}

/// Outcome of replaying the potential recursion over recorded gradients:
/// `lhs` is the summed inverse-Gram energy, `rhs` the log-det ratio, `cap`
/// the closed-form ceiling `n log((T Lg^2 + eps)/eps)`.
pub struct PotentialAudit {
    pub lhs: f64,
    pub rhs: f64,
    pub cap: f64,
    pub holds: bool,
}

/// Replays `L_t = L_{t-1} + G_t^T G_t` from `eps I` and checks the chain
/// `sum_t tr(G_t L_t^-1 G_t^T) <= log det(L_T) - log det(L_0) <= cap`.
pub fn elliptical_potential_audit(grads: &[Mat], eps: f64) -> Result<PotentialAudit> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let Some(first) = grads.first() else {
        return Ok(PotentialAudit {
            lhs: 0.0,
            rhs: 0.0,
            cap: 0.0,
            holds: true,
        });
    };
    let (m, n) = first.dim();
    let mut l = Array2::<f64>::eye(n) * eps;
    let mut lhs = 0.0;
    let mut lg = 0.0f64;
    let mut factor = spd_factor(&l, 0.0)?;
    for (t, g) in grads.iter().enumerate() {
        if g.dim() != (m, n) {
            return Err(Error::ShapeMismatch(format!(
                "gradient {t} is {}x{}, expected {}x{}",
                g.nrows(),
                g.ncols(),
                m,
                n
            )));
        }
        lg = lg.max(frobenius_norm(g));
        l = &l + &g.t().dot(g);
        factor = spd_factor(&l, 0.0)?;
        let solved = spd_solve(&factor, &g.t().to_owned())?;
        for i in 0..m {
            for j in 0..n {
                lhs += g[[i, j]] * solved[[j, i]];
            }
        }
    }
    let rhs = factor.logdet() - n as f64 * eps.ln();
    let t = grads.len() as f64;
    let cap = n as f64 * ((t * lg * lg + eps) / eps).ln();
    let slack = 1e-12 * rhs.abs().max(1.0);
    let holds = lhs <= rhs + slack && rhs <= cap + slack;
    Ok(PotentialAudit {
        lhs,
        rhs,
        cap,
        holds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::max_abs_diff;
    use ndarray::arr2;

    fn random_mat(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn scalar_step_matches_the_hand_formula() {
        // theta - g / (alpha (eps + g^2)) for the 1x1 case.
        let mut state = OnlineState::with_eps(1, 0.5, 100.0, 1.0).unwrap();
        let theta = arr2(&[[2.0]]);
        let grad = arr2(&[[3.0]]);
        let next = online_step(&mut state, &theta, &grad).unwrap();
        assert!((next[[0, 0]] - (2.0 - 3.0 / (0.5 * 10.0))).abs() < 1e-15);
        assert_eq!(state.rounds(), 1);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut state = OnlineState::new(3, 0.25, 1.0).unwrap();
        let before = state.gram().clone();
        let theta = Array2::<f64>::zeros((2, 3));
        let grad = Array2::<f64>::zeros((2, 3));
        let next = online_step(&mut state, &theta, &grad).unwrap();
        assert_eq!(max_abs_diff(state.gram(), &before), 0.0);
        assert_eq!(max_abs_diff(&next, &theta), 0.0);
    }

    #[test]
    fn repeated_rounds_shrink_steps_harmonically() {
        let mut state = OnlineState::with_eps(2, 1.0, 1e6, 1.0).unwrap();
        let grad = arr2(&[[1.0, 0.5], [0.0, 0.5]]);
        let mut theta = Array2::<f64>::zeros((2, 2));
        let mut step_norms = Vec::new();
        for _ in 0..40 {
            let next = online_step(&mut state, &theta, &grad).unwrap();
            step_norms.push(frobenius_norm(&(&next - &theta)));
            theta = next;
        }
        let ratio = step_norms[39] / step_norms[19];
        assert!(
            (0.4..0.6).contains(&ratio),
            "step decay ratio {ratio} is not harmonic"
        );
    }

    #[test]
    fn projection_is_identity_inside_the_ball() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let y = random_mat(&mut rng, 3, 2) * 0.1;
        let c = random_mat(&mut rng, 3, 3);
        let l = &c.dot(&c.t()) + &(Array2::<f64>::eye(3) * 0.1);
        let p = weighted_project(&y, &l, 1.0).unwrap();
        assert_eq!(max_abs_diff(&p, &y), 0.0);
    }

    #[test]
    fn identity_weight_projects_radially() {
        let mut rng = ChaCha20Rng::seed_from_u64(32);
        let y = random_mat(&mut rng, 4, 3) * 5.0;
        let p = weighted_project(&y, &Array2::<f64>::eye(4), 1.0).unwrap();
        let expected = &y * (1.0 / frobenius_norm(&y));
        assert!(max_abs_diff(&p, &expected) < 1e-9);
        assert!((frobenius_norm(&p) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn anisotropic_projection_matches_the_kkt_hand_solve() {
        // minimize 4(x-2)^2 + y^2 on the unit disk: multiplier 4, point
        // (1, 0).
        let l = arr2(&[[4.0, 0.0], [0.0, 1.0]]);
        let y = arr2(&[[2.0], [0.0]]);
        let p = weighted_project(&y, &l, 1.0).unwrap();
        assert!((p[[0, 0]] - 1.0).abs() < 1e-9);
        assert!(p[[1, 0]].abs() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        for _ in 0..10 {
            let y = random_mat(&mut rng, 3, 3) * 3.0;
            let c = random_mat(&mut rng, 3, 3);
            let l = &c.dot(&c.t()) + &(Array2::<f64>::eye(3) * 0.05);
            let once = weighted_project(&y, &l, 1.0).unwrap();
            let twice = weighted_project(&once, &l, 1.0).unwrap();
            assert!(max_abs_diff(&once, &twice) < 1e-10);
        }
    }

    #[test]
    fn projection_contracts_toward_every_feasible_point() {
        let mut rng = ChaCha20Rng::seed_from_u64(34);
        let y = random_mat(&mut rng, 3, 2) * 4.0;
        let c = random_mat(&mut rng, 3, 3);
        let l = &c.dot(&c.t()) + &(Array2::<f64>::eye(3) * 0.1);
        let lf = spd_factor(&l, 0.0).unwrap();
        let weighted = |a: &Mat| crate::linalg::weighted_norm(a, &lf).unwrap();
        let p = weighted_project(&y, &l, 1.0).unwrap();
        for _ in 0..100 {
            let mut z = random_mat(&mut rng, 3, 2);
            let zn = frobenius_norm(&z);
            if zn > 1.0 {
                z = z / zn;
            }
            let dp = weighted(&(&p - &z));
            let dy = weighted(&(&y - &z));
            assert!(dp <= dy + 1e-10, "projection failed to contract");
        }
    }

    #[test]
    fn online_iterates_stay_feasible_and_grams_grow() {
        let stream = ExpConcaveStream::random(3, 2, 1.0, 60, 7).unwrap();
        let (m, n) = stream.dims();
        let mut state = OnlineState::new(n, 0.25, 1.0).unwrap();
        let mut theta = Array2::<f64>::zeros((m, n));
        let mut prev = state.gram().clone();
        for t in 0..stream.len() {
            let grad = stream.grad(t, &theta);
            theta = online_step(&mut state, &theta, &grad).unwrap();
            assert!(frobenius_norm(&theta) <= 1.0 + 1e-9);
            let diff = state.gram() - &prev;
            let (w, _) = sym_eig(&diff).unwrap();
            assert!(w[w.len() - 1] >= -1e-10, "gram increment not psd");
            prev = state.gram().clone();
        }
    }

    #[test]
    fn audit_is_zero_on_an_empty_history() {
        let audit = elliptical_potential_audit(&[], 2.0).unwrap();
        assert_eq!(audit.lhs, 0.0);
        assert_eq!(audit.rhs, 0.0);
        assert!(audit.holds);
    }

    #[test]
    fn audit_matches_the_scalar_identity() {
        // One 1x1 round: lhs = g^2/(eps+g^2), rhs = log((eps+g^2)/eps).
        let g = 1.7;
        let eps = 0.3;
        let audit = elliptical_potential_audit(&[arr2(&[[g]])], eps).unwrap();
        assert!((audit.lhs - g * g / (eps + g * g)).abs() < 1e-12);
        assert!((audit.rhs - ((eps + g * g) / eps).ln()).abs() < 1e-12);
        assert!(audit.holds);
        assert!(audit.lhs <= audit.rhs && audit.rhs <= audit.cap);
    }

    #[test]
    fn audit_chain_holds_on_random_histories() {
        let mut rng = ChaCha20Rng::seed_from_u64(35);
        let grads: Vec<Mat> = (0..200).map(|_| random_mat(&mut rng, 3, 4) * 0.5).collect();
        let audit = elliptical_potential_audit(&grads, 2.0).unwrap();
        assert!(audit.holds);
        assert!(audit.lhs > 0.0);
        assert!(audit.lhs <= audit.rhs && audit.rhs <= audit.cap);
    }

    #[test]
    fn constant_stream_regret_stays_bounded() {
        let x = Array1::from_vec(vec![0.8, 0.6]);
        let y = Array1::from_vec(vec![0.5]);
        let stream = ExpConcaveStream::constant(x, y, 1.0, 300).unwrap();
        let report = run_regret(&stream).unwrap();
        assert!(report.holds, "bound violated on the constant stream");
        // Late-run regret should be flat: the learner has converged.
        let late = report.regret[299] - report.regret[150];
        assert!(late.abs() < 0.5, "regret still climbing: {late}");
    }

    #[test]
    fn random_stream_bound_holds_for_narrow_and_square_targets() {
        for n in [1usize, 4] {
            for seed in 0..3u64 {
                let stream = ExpConcaveStream::random(4, n, 1.0, 2000, seed).unwrap();
                let report = run_regret(&stream).unwrap();
                assert!(
                    report.holds,
                    "regret bound violated for n={n} seed={seed}"
                );
                assert!(report.burn_in.is_some());
            }
        }
    }

    #[test]
    fn alternating_stream_bound_holds() {
        let stream = ExpConcaveStream::alternating(4, 2, 1.0, 2000).unwrap();
        let report = run_regret(&stream).unwrap();
        assert!(report.holds, "regret bound violated on alternating stream");
    }

    #[test]
    fn regret_potential_agrees_with_the_audit_replay() {
        let stream = ExpConcaveStream::random(3, 2, 1.0, 150, 11).unwrap();
        let report = run_regret(&stream).unwrap();
        let audit = elliptical_potential_audit(&report.grads, 2.0).unwrap();
        assert!((audit.lhs - report.potential.last().unwrap()).abs() < 1e-10);
        assert!(audit.holds);
    }

    #[test]
    fn regret_runs_are_deterministic() {
        let a = run_regret(&ExpConcaveStream::random(4, 2, 1.0, 300, 5).unwrap()).unwrap();
        let b = run_regret(&ExpConcaveStream::random(4, 2, 1.0, 300, 5).unwrap()).unwrap();
        assert!(a
            .regret
            .iter()
            .zip(b.regret.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn stream_constructor_rejects_oversized_rounds() {
        let xs = vec![Array1::from_vec(vec![2.0, 0.0])];
        let ys = vec![Array1::from_vec(vec![0.1])];
        assert!(ExpConcaveStream::new(xs, ys, 1.0).is_err());
    }
}
