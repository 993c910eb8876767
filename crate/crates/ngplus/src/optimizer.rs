//! Training loops: the natural-gradient optimizer over per-layer curvature
//! states, SGD-with-momentum and Adam baselines for comparison runs, and a
//! probe that checks squared-gradient-norm traces against a self-calibrated
//! decay envelope.

use crate::curvature::{CurvatureMode, CurvatureState};
use crate::direction::{compute_direction, SketchConfig, SolverPath};
use crate::error::{Error, Result};
use crate::gradients::{backward_per_sample, batch_gradients, Batch, FcLayer, Loss};
use crate::linalg::Mat;
use crate::schedule::Schedule;
use ndarray::Array1;

/// Hyperparameters for the natural-gradient optimizer.
#[derive(Debug, Clone)]
pub struct NgPlusConfig {
    pub lr: Schedule,
    pub damping: Schedule,
    /// Curvature refresh cadence in iterations.
    pub freq: usize,
    pub mode: CurvatureMode,
    pub path: SolverPath,
    /// Decoupled weight decay applied to weights before the preconditioned
    /// step; zero disables it.
    pub weight_decay: f64,
}

impl NgPlusConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.damping.validate()?;
        if self.freq == 0 {
            return Err(Error::InvalidConfig("refresh freq must be >= 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !matches!(self.path, SolverPath::Dense)
            && !matches!(self.mode, CurvatureMode::Subsampled)
        {
            return Err(Error::InvalidConfig(
                "momentum and accumulator curvature modes require the dense solver path".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step diagnostics emitted by every optimizer in this module.
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iter: usize,
    /// Fractional epoch at which the step's schedules were evaluated.
    pub epoch: f64,
    pub loss: f64,
    /// Frobenius norm of the whole batch gradient, biases included.
    pub grad_norm: f64,
    pub lr: f64,
    /// Damping in effect this step; zero for the baselines.
    pub damping: f64,
    /// Whether any curvature state was rebuilt this step.
    pub refreshed: bool,
    /// Empirical preconditioner spectrum bounds: `h1` is the damping floor,
    /// `h2` the largest `lambda + tr(Gram)` across layers. Zero for the
    /// baselines.
    pub h1: f64,
    pub h2: f64,
}

/// Mixes the configured base seed with step and layer indices so every
/// sketched solve draws fresh indices while staying reproducible.
fn per_step_seed(base: u64, iter: usize, layer: usize) -> u64 {
    base ^ (iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (layer as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Natural-gradient optimizer: per layer, a Gram curvature state refreshed
/// every `freq` iterations preconditions the batch gradient through the
/// configured solver path. Biases take a plain gradient step, and weight
/// decay is decoupled from the preconditioning.
pub struct NgPlusOptimizer {
    config: NgPlusConfig,
    states: Vec<CurvatureState>,
    iters_per_epoch: usize,
    iter: usize,
}

impl NgPlusOptimizer {
    pub fn new(config: NgPlusConfig, model: &[FcLayer], iters_per_epoch: usize) -> Result<Self> {
        config.validate()?;
        if model.is_empty() {
            return Err(Error::InvalidConfig("model has no layers".into()));
        }
        let lambda0 = config.damping.value(0.0, 0)?;
        let mut states = Vec::with_capacity(model.len());
        for layer in model {
            let (m, n) = (layer.out_dim(), layer.in_dim());
            let state = match config.path {
                SolverPath::Dense => {
                    CurvatureState::new_dense(m, n, config.mode, config.freq, lambda0)?
                }
                // The other paths never materialize the square Gram; the
                // state carries side, damping, and the low-rank snapshot.
                _ => CurvatureState::new_low_rank(m, n, config.freq, lambda0)?,
            };
            states.push(state);
        }
        Self::with_states(config, states, iters_per_epoch)
    }

    /// Builds the optimizer around externally constructed curvature states,
    /// for example frozen ones that never refresh.
    pub fn with_states(
        config: NgPlusConfig,
        states: Vec<CurvatureState>,
        iters_per_epoch: usize,
    ) -> Result<Self> {
        config.validate()?;
        if iters_per_epoch == 0 {
            return Err(Error::InvalidConfig(
                "iterations per epoch must be >= 1".into(),
            ));
        }
        if states.is_empty() {
            return Err(Error::InvalidConfig("no curvature states".into()));
        }
        Ok(NgPlusOptimizer {
            config,
            states,
            iters_per_epoch,
            iter: 0,
        })
    }

    pub fn config(&self) -> &NgPlusConfig {
        &self.config
    }

    pub fn states(&self) -> &[CurvatureState] {
        &self.states
    }

    pub fn iter(&self) -> usize {
        self.iter
    }

    /// One optimizer step over all layers. The learning rate is evaluated at
    /// the fractional epoch, the damping at the whole epoch, so damping only
    /// moves at epoch boundaries and cached factorizations stay valid
    /// between refreshes.
    pub fn step(&mut self, model: &mut [FcLayer], batch: &Batch, loss: Loss) -> Result<StepReport> {
        if model.len() != self.states.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} layers vs {} curvature states",
                model.len(),
                self.states.len()
            )));
        }
        let epoch = self.iter as f64 / self.iters_per_epoch as f64;
        let lr = self.config.lr.value(epoch, self.iter)?;
        let lambda = self.config.damping.value(epoch.floor(), self.iter)?;

        let grads = batch_gradients(model, batch, loss)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                loss: grads.loss,
            });
        }

        // Per-sample factors are materialized only on iterations where some
        // state will actually consume them for its refresh.
        let block_path = matches!(self.config.path, SolverPath::BlockDiag { .. });
        let wants_factors = !block_path
            && !matches!(self.config.mode, CurvatureMode::MiniBatch { .. })
            && self.states.iter().any(|s| s.refresh_due(self.iter));
        let factors = if wants_factors {
            backward_per_sample(model, batch, loss)?
        } else {
            Vec::new()
        };

        let mut sq_norm = 0.0;
        let mut refreshed_any = false;
        let mut h2 = 0.0f64;
        for (l, layer) in model.iter_mut().enumerate() {
            let grad = &grads.weights[l];
            sq_norm += grad.iter().map(|x| x * x).sum::<f64>();

            let state = &mut self.states[l];
            state.set_lambda(lambda)?;
            let refreshed = if block_path {
                // The block preconditioner is rebuilt from the live gradient
                // inside the solve; there is no state to refresh.
                false
            } else {
                let layer_factors = factors.get(l).map(|v| v.as_slice()).unwrap_or(&[]);
                state.maybe_refresh(self.iter, layer_factors, grad)?
            };
            refreshed_any |= refreshed;

            let dir = match &self.config.path {
                SolverPath::SketchedLs(base) => {
                    let cfg = SketchConfig {
                        q: base.q,
                        kind: base.kind,
                        seed: per_step_seed(base.seed, self.iter, l),
                    };
                    compute_direction(grad, state, &SolverPath::SketchedLs(cfg))?
                }
                p => compute_direction(grad, state, p)?,
            };

            let trace = if block_path {
                grad.iter().map(|x| x * x).sum::<f64>()
            } else {
                state.gram_trace()
            };
            h2 = h2.max(lambda + trace);

            if self.config.weight_decay > 0.0 {
                let shrink = &layer.weight * (lr * self.config.weight_decay);
                layer.weight = &layer.weight - &shrink;
            }
            layer.weight = &layer.weight + &(&dir * lr);

            if let Some(bg) = &grads.biases[l] {
                sq_norm += bg.iter().map(|x| x * x).sum::<f64>();
                if let Some(bias) = layer.bias.as_mut() {
                    *bias = &*bias - &(bg * lr);
                }
            }
        }

        let report = StepReport {
            iter: self.iter,
            epoch,
            loss: grads.loss,
            grad_norm: sq_norm.sqrt(),
            lr,
            damping: lambda,
            refreshed: refreshed_any,
            h1: lambda,
            h2,
        };
        self.iter += 1;
        Ok(report)
    }
}

/// SGD with heavy-ball momentum: `v <- momentum v + g`, `theta <- theta -
/// lr v`, with weight decay folded into the gradient when nonzero.
pub struct SgdMomentum {
    lr: Schedule,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<(Mat, Option<Array1<f64>>)>,
    iters_per_epoch: usize,
    iter: usize,
}

impl SgdMomentum {
    pub fn new(
        lr: Schedule,
        momentum: f64,
        weight_decay: f64,
        model: &[FcLayer],
        iters_per_epoch: usize,
    ) -> Result<Self> {
        lr.validate()?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        if weight_decay < 0.0 || iters_per_epoch == 0 || model.is_empty() {
            return Err(Error::InvalidConfig(
                "sgd needs nonnegative decay, layers, and iterations per epoch".into(),
            ));
        }
        let velocity = model
            .iter()
            .map(|l| {
                (
                    Mat::zeros((l.out_dim(), l.in_dim())),
                    l.bias.as_ref().map(|_| Array1::zeros(l.out_dim())),
                )
            })
            .collect();
        Ok(SgdMomentum {
            lr,
            momentum,
            weight_decay,
            velocity,
            iters_per_epoch,
            iter: 0,
        })
    }

    pub fn step(&mut self, model: &mut [FcLayer], batch: &Batch, loss: Loss) -> Result<StepReport> {
        let epoch = self.iter as f64 / self.iters_per_epoch as f64;
        let lr = self.lr.value(epoch, self.iter)?;
        let grads = batch_gradients(model, batch, loss)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                loss: grads.loss,
            });
        }

        let mut sq_norm = 0.0;
        for (l, layer) in model.iter_mut().enumerate() {
            let mut grad = grads.weights[l].clone();
            sq_norm += grad.iter().map(|x| x * x).sum::<f64>();
            if self.weight_decay > 0.0 {
                grad = &grad + &(&layer.weight * self.weight_decay);
            }
            let (vw, vb) = &mut self.velocity[l];
            *vw = &(&*vw * self.momentum) + &grad;
            layer.weight = &layer.weight - &(&*vw * lr);

            if let Some(bg) = &grads.biases[l] {
                sq_norm += bg.iter().map(|x| x * x).sum::<f64>();
                if let (Some(bias), Some(vel)) = (layer.bias.as_mut(), vb.as_mut()) {
                    *vel = &(&*vel * self.momentum) + bg;
                    *bias = &*bias - &(&*vel * lr);
                }
            }
        }

        let report = StepReport {
            iter: self.iter,
            epoch,
            loss: grads.loss,
            grad_norm: sq_norm.sqrt(),
            lr,
            damping: 0.0,
            refreshed: false,
            h1: 0.0,
            h2: 0.0,
        };
        self.iter += 1;
        Ok(report)
    }
}

/// Adam with bias-corrected moments; the stabilizer sits inside the square
/// root, `theta <- theta - lr mhat / sqrt(vhat + eps)`.
pub struct Adam {
    lr: Schedule,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    first: Vec<(Mat, Option<Array1<f64>>)>,
    second: Vec<(Mat, Option<Array1<f64>>)>,
    iters_per_epoch: usize,
    iter: usize,
}

impl Adam {
    pub fn new(
        lr: Schedule,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
        model: &[FcLayer],
        iters_per_epoch: usize,
    ) -> Result<Self> {
        lr.validate()?;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "adam needs betas in [0, 1) and eps > 0, got {beta1}, {beta2}, {eps}"
            )));
        }
        if weight_decay < 0.0 || iters_per_epoch == 0 || model.is_empty() {
            return Err(Error::InvalidConfig(
                "adam needs nonnegative decay, layers, and iterations per epoch".into(),
            ));
        }
        let zeros: Vec<(Mat, Option<Array1<f64>>)> = model
            .iter()
            .map(|l| {
                (
                    Mat::zeros((l.out_dim(), l.in_dim())),
                    l.bias.as_ref().map(|_| Array1::zeros(l.out_dim())),
                )
            })
            .collect();
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            first: zeros.clone(),
            second: zeros,
            iters_per_epoch,
            iter: 0,
        })
    }

    pub fn step(&mut self, model: &mut [FcLayer], batch: &Batch, loss: Loss) -> Result<StepReport> {
        let epoch = self.iter as f64 / self.iters_per_epoch as f64;
        let lr = self.lr.value(epoch, self.iter)?;
        let grads = batch_gradients(model, batch, loss)?;
        if !grads.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter: self.iter,
                loss: grads.loss,
            });
        }

        let t = (self.iter + 1) as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut sq_norm = 0.0;
        for (l, layer) in model.iter_mut().enumerate() {
            let mut grad = grads.weights[l].clone();
            sq_norm += grad.iter().map(|x| x * x).sum::<f64>();
            if self.weight_decay > 0.0 {
                grad = &grad + &(&layer.weight * self.weight_decay);
            }
            let (mw, mb) = &mut self.first[l];
            let (vw, vb) = &mut self.second[l];
            for ((w, m), (v, &g)) in layer
                .weight
                .iter_mut()
                .zip(mw.iter_mut())
                .zip(vw.iter_mut().zip(grad.iter()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / bc1) / (*v / bc2 + self.eps).sqrt();
            }

            if let Some(bg) = &grads.biases[l] {
                sq_norm += bg.iter().map(|x| x * x).sum::<f64>();
                if let (Some(bias), Some(m1), Some(v1)) =
                    (layer.bias.as_mut(), mb.as_mut(), vb.as_mut())
                {
                    for ((b, m), (v, &g)) in bias
                        .iter_mut()
                        .zip(m1.iter_mut())
                        .zip(v1.iter_mut().zip(bg.iter()))
                    {
                        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                        *b -= lr * (*m / bc1) / (*v / bc2 + self.eps).sqrt();
                    }
                }
            }
        }

        let report = StepReport {
            iter: self.iter,
            epoch,
            loss: grads.loss,
            grad_norm: sq_norm.sqrt(),
            lr,
            damping: 0.0,
            refreshed: false,
            h1: 0.0,
            h2: 0.0,
        };
        self.iter += 1;
        Ok(report)
    }
}

/// Checkpointed running averages of a squared-gradient-norm trace, plus a
/// two-term decay envelope `C1 / T + C2 T^-beta` whose constants are
/// calibrated so each term alone explains the average at the fit point.
#[derive(Debug, Clone)]
pub struct ProbeReport {
    /// `(T, running average over the first T entries)` per checkpoint.
    pub checkpoints: Vec<(usize, f64)>,
    /// Least-squares decay exponent of the running average across the
    /// checkpoints (positive means decaying).
    pub fitted_exponent: f64,
    pub c1: f64,
    pub c2: f64,
    pub beta: f64,
    /// Running average non-increasing across checkpoints past the burn-in.
    pub monotone: bool,
    /// Final checkpoint average at or below the envelope.
    pub within_envelope: bool,
}

/// Summarizes a trace of squared gradient norms: running averages at the
/// requested checkpoints, an envelope calibrated at `fit_at`, monotonicity
/// past `burn_in`, and the fitted decay exponent.
pub fn convergence_probe(
    trace: &[f64],
    beta: f64,
    fit_at: usize,
    checkpoints: &[usize],
    burn_in: usize,
) -> Result<ProbeReport> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "envelope exponent must lie in (0, 1), got {beta}"
        )));
    }
    if fit_at == 0 || fit_at > trace.len() {
        return Err(Error::InvalidConfig(format!(
            "fit point {fit_at} outside the trace of length {}",
            trace.len()
        )));
    }
    if checkpoints.is_empty() {
        return Err(Error::InvalidConfig("no checkpoints requested".into()));
    }
    let mut prefix = 0.0;
    let mut avg_at = vec![0.0; trace.len() + 1];
    for (k, value) in trace.iter().enumerate() {
        prefix += value;
        avg_at[k + 1] = prefix / (k + 1) as f64;
    }
    let mut cps = Vec::with_capacity(checkpoints.len());
    for &t in checkpoints {
        if t == 0 || t > trace.len() {
            return Err(Error::InvalidConfig(format!(
                "checkpoint {t} outside the trace of length {}",
                trace.len()
            )));
        }
        cps.push((t, avg_at[t]));
    }

    let fit_avg = avg_at[fit_at];
    let c1 = fit_avg * fit_at as f64;
    let c2 = fit_avg * (fit_at as f64).powf(beta);

    let mut monotone = true;
    let mut prev: Option<f64> = None;
    for &(t, a) in cps.iter().filter(|(t, _)| *t > burn_in) {
        if let Some(p) = prev {
            if a > p * (1.0 + 1e-9) {
                monotone = false;
            }
        }
        let _ = t;
        prev = Some(a);
    }

    let (t_last, a_last) = *cps.last().unwrap();
    let envelope = c1 / t_last as f64 + c2 * (t_last as f64).powf(-beta);
    let within_envelope = a_last <= envelope;

    // Log-log least squares over the checkpoints; degenerate traces with
    // nonpositive averages get an exponent of zero.
    let fitted_exponent = if cps.iter().all(|&(_, a)| a > 0.0) && cps.len() > 1 {
        let pts: Vec<(f64, f64)> = cps
            .iter()
            .map(|&(t, a)| ((t as f64).ln(), a.ln()))
            .collect();
        let n = pts.len() as f64;
        let sx: f64 = pts.iter().map(|p| p.0).sum();
        let sy: f64 = pts.iter().map(|p| p.1).sum();
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let denom = n * sxx - sx * sx;
        if denom.abs() > 1e-12 {
            -(n * sxy - sx * sy) / denom
        } else {
            0.0
        }
    } else {
        0.0
    };

    Ok(ProbeReport {
        checkpoints: cps,
        fitted_exponent,
        c1,
        c2,
        beta,
        monotone,
        within_envelope,
    })
}
