//! Configuration, synthetic data, CSV persistence, and the reproducible
//! study drivers behind the `ngplus` binary.
//!
//! A run is a task name plus a flat `key = value` config; [`run_task`]
//! executes it, writes `metrics.csv` and `summary.txt` (plus `diff.csv` for
//! the curvature study) into the output directory, and reports whether every
//! built-in assertion passed. All randomness flows from one seed through
//! fixed ChaCha substreams, so identical config and seed reproduce
//! `metrics.csv` byte for byte; measured wall time appears only in the
//! summary.

use crate::curvature::{efim_gfim_study, CurvatureMode};
use crate::direction::{SketchConfig, SketchKind, SolverPath};
use crate::error::{Error, Result};
use crate::gradients::{
    backward_per_sample, batch_gradients, finite_diff_check, forward, output_loss, Activation,
    Batch, FcLayer, Loss, Targets,
};
use crate::linalg::{max_abs_diff, Mat};
use crate::online::{elliptical_potential_audit, run_regret, ExpConcaveStream};
use crate::optimizer::{
    convergence_probe, Adam, NgPlusConfig, NgPlusOptimizer, SgdMomentum, StepReport,
};
use crate::schedule::{Schedule, ScheduleKind};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Substream indices for the per-run ChaCha seed. Data generation, sketch
/// seeding, parameter init, and batch shuffling draw from disjoint streams,
/// so changing how one consumer uses randomness cannot perturb the others.
const STREAM_DATA: u64 = 1;
const STREAM_SKETCH: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_SHUFFLE: u64 = 4;

fn substream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The five runnable studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Train,
    GfimStudy,
    Regret,
    Gradcheck,
    Convergence,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Train => "train",
            Task::GfimStudy => "gfim-study",
            Task::Regret => "regret",
            Task::Gradcheck => "gradcheck",
            Task::Convergence => "convergence",
        }
    }

    pub fn parse(name: &str) -> Result<Task> {
        match name {
            "train" => Ok(Task::Train),
            "gfim-study" => Ok(Task::GfimStudy),
            "regret" => Ok(Task::Regret),
            "gradcheck" => Ok(Task::Gradcheck),
            "convergence" => Ok(Task::Convergence),
            other => Err(Error::InvalidConfig(format!(
                "unknown task `{other}`, expected train, gfim-study, regret, gradcheck, or convergence"
            ))),
        }
    }
}

/// Which optimizer drives the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmKind {
    NgPlus,
    Sgd,
    Adam,
}

/// Learning-rate schedule family named in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrKind {
    Constant,
    Cosine,
    Exponential,
    Poly,
}

/// Damping schedule family named in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DampingKind {
    Constant,
    Stepped,
}

/// Curvature update rule named in the config; parameters come from the
/// `curvature_beta` and `curvature_gamma` keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeKind {
    Subsampled,
    Momentum,
    MiniBatch,
}

/// Direction solver path named in the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Dense,
    Smw,
    Sketched,
    Block,
}

/// Where the dataset comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    GaussianMixture,
    LinearRegression,
    File,
}

/// Which round sequence the regret task plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Random,
    Constant,
    Alternating,
}

/// Everything a run needs, one field per config key. Every field has a
/// default; see the README key table.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub out: String,

    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,

    pub algorithm: AlgorithmKind,
    pub lr: f64,
    pub lr_schedule: LrKind,
    pub lr_floor: f64,
    pub lr_power: f64,
    pub lr_beta: f64,
    pub lr_horizon: f64,
    pub warmup_epochs: f64,
    pub warmup_start: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,

    pub freq: usize,
    pub mode: ModeKind,
    pub curvature_beta: f64,
    pub curvature_gamma: f64,
    pub path: PathKind,
    pub blocks: usize,
    pub sketch_q: usize,
    pub sketch_kind: SketchKind,
    pub damping: f64,
    pub damping_schedule: DampingKind,
    pub damping_rate: f64,
    pub damping_interval: f64,

    pub dataset: DatasetKind,
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    pub noise: f64,
    pub separation: f64,
    pub condition: f64,
    pub data_path: String,

    pub rounds: usize,
    pub regret_m: usize,
    pub regret_n: usize,
    pub radius: f64,
    pub stream: StreamKind,

    pub study_samples: usize,
    pub study_m: usize,
    pub study_n: usize,
    pub study_seeds: usize,
    pub study_scale: usize,

    pub iterations: usize,
    pub fit_at: usize,
    pub envelope_beta: f64,

    pub gradcheck_nets: usize,
    pub gradcheck_h: f64,
    pub gradcheck_tol: f64,
    pub factored_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            epochs: 20,
            batch_size: 32,
            out: "out".into(),

            hidden: Vec::new(),
            activation: Activation::Tanh,
            bias: true,

            algorithm: AlgorithmKind::NgPlus,
            lr: 0.1,
            lr_schedule: LrKind::Constant,
            lr_floor: 0.0,
            lr_power: 5.0,
            lr_beta: 0.7,
            lr_horizon: 0.0,
            warmup_epochs: 0.0,
            warmup_start: 0.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,

            freq: 500,
            mode: ModeKind::Subsampled,
            curvature_beta: 0.9,
            curvature_gamma: 1.0,
            path: PathKind::Dense,
            blocks: 1,
            sketch_q: 8,
            sketch_kind: SketchKind::Iid,
            damping: 0.16,
            damping_schedule: DampingKind::Stepped,
            damping_rate: 0.8,
            damping_interval: 10.0,

            dataset: DatasetKind::GaussianMixture,
            classes: 3,
            dims: 10,
            samples: 3000,
            noise: 0.1,
            separation: 3.0,
            condition: 1.0,
            data_path: String::new(),

            rounds: 10_000,
            regret_m: 4,
            regret_n: 1,
            radius: 1.0,
            stream: StreamKind::Random,

            study_samples: 2000,
            study_m: 200,
            study_n: 200,
            study_seeds: 10,
            study_scale: 4,

            iterations: 10_000,
            fit_at: 1000,
            envelope_beta: 0.7,

            gradcheck_nets: 10,
            gradcheck_h: 1e-5,
            gradcheck_tol: 1e-5,
            factored_tol: 1e-10,
        }
    }
}

impl RunConfig {
    /// Cross-field checks that have no natural home in a typed constructor.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.dataset == DatasetKind::File && self.data_path.is_empty() {
            return Err(Error::MissingRequired {
                key: "data_path".into(),
            });
        }
        Ok(())
    }

    /// Learning-rate schedule, horizon defaulting to the epoch budget.
    pub fn lr_schedule(&self) -> Schedule {
        let horizon = if self.lr_horizon > 0.0 {
            self.lr_horizon
        } else {
            self.epochs as f64
        };
        let kind = match self.lr_schedule {
            LrKind::Constant => ScheduleKind::Constant(self.lr),
            LrKind::Cosine => ScheduleKind::Cosine {
                base: self.lr,
                floor: self.lr_floor,
                max_epoch: horizon,
            },
            LrKind::Exponential => ScheduleKind::Exponential {
                base: self.lr,
                power: self.lr_power,
                max_epoch: horizon,
            },
            LrKind::Poly => ScheduleKind::PolyDecay {
                c: self.lr,
                beta: self.lr_beta,
            },
        };
        let sched = Schedule::new(kind);
        if self.warmup_epochs > 0.0 {
            sched.with_warmup(self.warmup_epochs, self.warmup_start)
        } else {
            sched
        }
    }

    /// Damping schedule for the curvature solve.
    pub fn damping_schedule(&self) -> Schedule {
        match self.damping_schedule {
            DampingKind::Constant => Schedule::constant(self.damping),
            DampingKind::Stepped => Schedule::new(ScheduleKind::ExpEpochDecay {
                base: self.damping,
                rate: self.damping_rate,
                interval: self.damping_interval,
            }),
        }
    }

    /// Assembles the natural-gradient hyperparameters, drawing the sketch
    /// seed from its dedicated substream.
    pub fn ngplus_config(&self) -> NgPlusConfig {
        let mode = match self.mode {
            ModeKind::Subsampled => CurvatureMode::Subsampled,
            ModeKind::Momentum => CurvatureMode::Momentum {
                beta: self.curvature_beta,
            },
            ModeKind::MiniBatch => CurvatureMode::MiniBatch {
                beta: self.curvature_beta,
                gamma: self.curvature_gamma,
            },
        };
        let path = match self.path {
            PathKind::Dense => SolverPath::Dense,
            PathKind::Smw => SolverPath::Smw,
            PathKind::Sketched => SolverPath::SketchedLs(SketchConfig {
                q: self.sketch_q,
                seed: substream(self.seed, STREAM_SKETCH).gen(),
                kind: self.sketch_kind,
            }),
            PathKind::Block => SolverPath::BlockDiag {
                blocks: self.blocks,
            },
        };
        NgPlusConfig {
            lr: self.lr_schedule(),
            damping: self.damping_schedule(),
            freq: self.freq,
            mode,
            path,
            weight_decay: self.weight_decay,
        }
    }

    /// Layer stack `in_dim -> hidden... -> out_dim` with the configured
    /// activation on hidden layers and identity at the output, weights drawn
    /// from the init substream at scale `1/sqrt(fan_in)`.
    pub fn build_model(&self, in_dim: usize, out_dim: usize) -> Result<Vec<FcLayer>> {
        let mut rng = substream(self.seed, STREAM_INIT);
        let mut dims = vec![in_dim];
        dims.extend_from_slice(&self.hidden);
        dims.push(out_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::InvalidConfig("layer widths must be >= 1".into()));
            }
            let scale = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_fn((fan_out, fan_in), |_| {
                scale * rng.sample::<f64, _>(StandardNormal)
            });
            let bias = self.bias.then(|| Array1::zeros(fan_out));
            let last = layers.len() + 1 == dims.len() - 1;
            let act = if last { Activation::Identity } else { self.activation };
            layers.push(FcLayer::new(weight, bias, act)?);
        }
        Ok(layers)
    }
}

/// Parses the line-oriented `key = value` format. `[section]` headers are
/// checked against the known section names but carry no scoping: the key
/// namespace is flat, so a bare `freq = 500` line works the same anywhere in
/// the file. `#` starts a comment. Unknown keys and sections are hard
/// errors.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    const SECTIONS: [&str; 8] = [
        "run",
        "model",
        "optimizer",
        "dataset",
        "regret",
        "study",
        "convergence",
        "gradcheck",
    ];
    let mut cfg = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').unwrap_or(rest).trim();
            if !SECTIONS.contains(&name) {
                return Err(Error::UnknownKey {
                    line: line_no,
                    key: format!("[{name}]"),
                });
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::UnknownKey {
                line: line_no,
                key: line.to_string(),
            });
        };
        let key = key.trim();
        let value = value.trim();
        set_key(&mut cfg, line_no, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn type_err(line: usize, key: &str, expected: &'static str, value: &str) -> Error {
    Error::TypeError {
        line,
        key: key.to_string(),
        expected,
        value: value.to_string(),
    }
}

fn set_key(cfg: &mut RunConfig, line: usize, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(
        line: usize,
        key: &str,
        value: &str,
        expected: &'static str,
    ) -> Result<T> {
        value
            .parse()
            .map_err(|_| type_err(line, key, expected, value))
    }
    let u = |v: &mut usize| -> Result<()> {
        *v = num(line, key, value, "an unsigned integer")?;
        Ok(())
    };
    let f = |v: &mut f64| -> Result<()> {
        *v = num(line, key, value, "a real number")?;
        Ok(())
    };

    match key {
        "seed" => cfg.seed = num(line, key, value, "an unsigned integer")?,
        "epochs" => u(&mut cfg.epochs)?,
        "batch_size" => u(&mut cfg.batch_size)?,
        "out" => cfg.out = value.to_string(),

        "hidden" => {
            cfg.hidden = if value.is_empty() {
                Vec::new()
            } else {
                value
                    .split(',')
                    .map(|p| {
                        p.trim().parse().map_err(|_| {
                            type_err(line, key, "comma-separated layer widths", value)
                        })
                    })
                    .collect::<Result<Vec<usize>>>()?
            }
        }
        "activation" => {
            cfg.activation = match value {
                "identity" => Activation::Identity,
                "relu" => Activation::Relu,
                "tanh" => Activation::Tanh,
                _ => return Err(type_err(line, key, "identity, relu, or tanh", value)),
            }
        }
        "bias" => {
            cfg.bias = value
                .parse()
                .map_err(|_| type_err(line, key, "true or false", value))?
        }

        "algorithm" => {
            cfg.algorithm = match value {
                "ngplus" => AlgorithmKind::NgPlus,
                "sgd" => AlgorithmKind::Sgd,
                "adam" => AlgorithmKind::Adam,
                _ => return Err(type_err(line, key, "ngplus, sgd, or adam", value)),
            }
        }
        "lr" => f(&mut cfg.lr)?,
        "lr_schedule" => {
            cfg.lr_schedule = match value {
                "constant" => LrKind::Constant,
                "cosine" => LrKind::Cosine,
                "exponential" => LrKind::Exponential,
                "poly" => LrKind::Poly,
                _ => {
                    return Err(type_err(
                        line,
                        key,
                        "constant, cosine, exponential, or poly",
                        value,
                    ))
                }
            }
        }
        "lr_floor" => f(&mut cfg.lr_floor)?,
        "lr_power" => f(&mut cfg.lr_power)?,
        "lr_beta" => f(&mut cfg.lr_beta)?,
        "lr_horizon" => f(&mut cfg.lr_horizon)?,
        "warmup_epochs" => f(&mut cfg.warmup_epochs)?,
        "warmup_start" => f(&mut cfg.warmup_start)?,
        "momentum" => f(&mut cfg.momentum)?,
        "beta1" => f(&mut cfg.beta1)?,
        "beta2" => f(&mut cfg.beta2)?,
        "adam_eps" => f(&mut cfg.adam_eps)?,
        "weight_decay" => f(&mut cfg.weight_decay)?,

        "freq" => u(&mut cfg.freq)?,
        "mode" => {
            cfg.mode = match value {
                "subsampled" => ModeKind::Subsampled,
                "momentum" => ModeKind::Momentum,
                "minibatch" => ModeKind::MiniBatch,
                _ => {
                    return Err(type_err(
                        line,
                        key,
                        "subsampled, momentum, or minibatch",
                        value,
                    ))
                }
            }
        }
        "curvature_beta" => f(&mut cfg.curvature_beta)?,
        "curvature_gamma" => f(&mut cfg.curvature_gamma)?,
        "path" => {
            cfg.path = match value {
                "dense" => PathKind::Dense,
                "smw" => PathKind::Smw,
                "sketched" => PathKind::Sketched,
                "block" => PathKind::Block,
                _ => return Err(type_err(line, key, "dense, smw, sketched, or block", value)),
            }
        }
        "blocks" => u(&mut cfg.blocks)?,
        "sketch_q" => u(&mut cfg.sketch_q)?,
        "sketch_kind" => {
            cfg.sketch_kind = match value {
                "iid" => SketchKind::Iid,
                "complete" => SketchKind::Complete,
                _ => return Err(type_err(line, key, "iid or complete", value)),
            }
        }
        "damping" => f(&mut cfg.damping)?,
        "damping_schedule" => {
            cfg.damping_schedule = match value {
                "constant" => DampingKind::Constant,
                "stepped" => DampingKind::Stepped,
                _ => return Err(type_err(line, key, "constant or stepped", value)),
            }
        }
        "damping_rate" => f(&mut cfg.damping_rate)?,
        "damping_interval" => f(&mut cfg.damping_interval)?,

        "dataset" => {
            cfg.dataset = match value {
                "gaussian-mixture" => DatasetKind::GaussianMixture,
                "linear-regression" => DatasetKind::LinearRegression,
                "file" => DatasetKind::File,
                _ => {
                    return Err(type_err(
                        line,
                        key,
                        "gaussian-mixture, linear-regression, or file",
                        value,
                    ))
                }
            }
        }
        "classes" => u(&mut cfg.classes)?,
        "dims" => u(&mut cfg.dims)?,
        "samples" => u(&mut cfg.samples)?,
        "noise" => f(&mut cfg.noise)?,
        "separation" => f(&mut cfg.separation)?,
        "condition" => f(&mut cfg.condition)?,
        "data_path" => cfg.data_path = value.to_string(),

        "rounds" => u(&mut cfg.rounds)?,
        "regret_m" => u(&mut cfg.regret_m)?,
        "regret_n" => u(&mut cfg.regret_n)?,
        "radius" => f(&mut cfg.radius)?,
        "stream" => {
            cfg.stream = match value {
                "random" => StreamKind::Random,
                "constant" => StreamKind::Constant,
                "alternating" => StreamKind::Alternating,
                _ => {
                    return Err(type_err(
                        line,
                        key,
                        "random, constant, or alternating",
                        value,
                    ))
                }
            }
        }

        "study_samples" => u(&mut cfg.study_samples)?,
        "study_m" => u(&mut cfg.study_m)?,
        "study_n" => u(&mut cfg.study_n)?,
        "study_seeds" => u(&mut cfg.study_seeds)?,
        "study_scale" => u(&mut cfg.study_scale)?,

        "iterations" => u(&mut cfg.iterations)?,
        "fit_at" => u(&mut cfg.fit_at)?,
        "envelope_beta" => f(&mut cfg.envelope_beta)?,

        "gradcheck_nets" => u(&mut cfg.gradcheck_nets)?,
        "gradcheck_h" => f(&mut cfg.gradcheck_h)?,
        "gradcheck_tol" => f(&mut cfg.gradcheck_tol)?,
        "factored_tol" => f(&mut cfg.factored_tol)?,

        _ => {
            return Err(Error::UnknownKey {
                line,
                key: key.to_string(),
            })
        }
    }
    Ok(())
}

/// Samples stored feature-major: `features` is `d x N`, `labels[i]` is the
/// label column of sample `i`. Classification datasets carry their class
/// count and integral labels; regression datasets carry real targets.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<f64>,
    pub classes: Option<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.nrows()
    }

    /// Output width a model trained on this data needs: the class count, or
    /// one regression target.
    pub fn out_dim(&self) -> usize {
        self.classes.unwrap_or(1)
    }

    /// Loss matching the target kind.
    pub fn loss(&self) -> Loss {
        if self.classes.is_some() {
            Loss::CrossEntropy
        } else {
            Loss::Mse
        }
    }

    /// Assembles the selected samples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let d = self.dim();
        let inputs = Array2::from_shape_fn((d, indices.len()), |(i, j)| {
            self.features[[i, indices[j]]]
        });
        let targets = if self.classes.is_some() {
            Targets::Labels(indices.iter().map(|&i| self.labels[i] as usize).collect())
        } else {
            Targets::Values(Array2::from_shape_fn((1, indices.len()), |(_, j)| {
                self.labels[indices[j]]
            }))
        };
        Batch { inputs, targets }
    }

    /// Index split: first 80% train, last 20% test, by position.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let cut = self.len() * 8 / 10;
        ((0..cut).collect(), (cut..self.len()).collect())
    }
}

/// Synthetic dataset families the generator understands.
#[derive(Debug, Clone)]
pub enum SyntheticSpec {
    /// `classes` Gaussian blobs in `dims` dimensions, means on the sphere of
    /// radius `separation`, labels assigned round-robin. `condition` >= 1
    /// rescales feature dimensions geometrically so the input covariance has
    /// that condition number; 1 keeps the blobs isotropic.
    GaussianMixture {
        classes: usize,
        dims: usize,
        samples: usize,
        separation: f64,
        condition: f64,
    },
    /// Targets `w*^T x + noise * N(0,1)` for a planted Gaussian `w*`.
    LinearRegression {
        dims: usize,
        samples: usize,
        noise: f64,
    },
}

/// Draws a dataset from the data substream of `seed`. Deterministic: the
/// same spec and seed produce identical bytes after [`save_csv`].
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let mut rng = substream(seed, STREAM_DATA);
    match spec {
        SyntheticSpec::GaussianMixture {
            classes,
            dims,
            samples,
            separation,
            condition,
        } => {
            if *classes < 2 || *dims == 0 || *samples == 0 {
                return Err(Error::InvalidSpec(format!(
                    "gaussian mixture needs >= 2 classes, >= 1 dims, >= 1 samples, got {classes}, {dims}, {samples}"
                )));
            }
            if !(*condition >= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "condition number must be >= 1, got {condition}"
                )));
            }
            let mut means = Vec::with_capacity(*classes);
            for _ in 0..*classes {
                let mut v: Array1<f64> =
                    Array1::from_shape_fn(*dims, |_| rng.sample::<f64, _>(StandardNormal));
                let norm = v.dot(&v).sqrt();
                if norm > 0.0 {
                    v *= *separation / norm;
                }
                means.push(v);
            }
            // Per-dimension scales decaying geometrically from 1 to
            // 1/sqrt(condition); the covariance then has the requested
            // condition number. A pure change of units: separability is
            // untouched, but gradient descent has to crawl along the
            // shrunken axes.
            let scales: Vec<f64> = (0..*dims)
                .map(|i| {
                    if *dims > 1 {
                        condition.powf(-(i as f64) / (2.0 * (*dims - 1) as f64))
                    } else {
                        1.0
                    }
                })
                .collect();
            let mut features = Array2::<f64>::zeros((*dims, *samples));
            let mut labels = Vec::with_capacity(*samples);
            for s in 0..*samples {
                let c = s % *classes;
                for i in 0..*dims {
                    features[[i, s]] =
                        scales[i] * (means[c][i] + rng.sample::<f64, _>(StandardNormal));
                }
                labels.push(c as f64);
            }
            Ok(Dataset {
                features,
                labels,
                classes: Some(*classes),
            })
        }
        SyntheticSpec::LinearRegression {
            dims,
            samples,
            noise,
        } => {
            if *dims == 0 || *samples == 0 {
                return Err(Error::InvalidSpec(format!(
                    "linear regression needs >= 1 dims and samples, got {dims}, {samples}"
                )));
            }
            if *noise < 0.0 {
                return Err(Error::InvalidSpec(format!(
                    "noise must be nonnegative, got {noise}"
                )));
            }
            let planted: Array1<f64> = Array1::from_shape_fn(*dims, |_| rng.sample::<f64, _>(StandardNormal));
            let mut features = Array2::<f64>::zeros((*dims, *samples));
            let mut labels = Vec::with_capacity(*samples);
            for s in 0..*samples {
                let mut y = 0.0;
                for i in 0..*dims {
                    let x: f64 = rng.sample::<f64, _>(StandardNormal);
                    features[[i, s]] = x;
                    y += planted[i] * x;
                }
                let eps: f64 = rng.sample::<f64, _>(StandardNormal);
                labels.push(y + noise * eps);
            }
            Ok(Dataset {
                features,
                labels,
                classes: None,
            })
        }
    }
}

/// Writes `label,f1,...,fd` rows. Floats use the shortest representation
/// that parses back exactly, so a save/load round trip is lossless.
pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    let d = ds.dim();
    let mut text = String::from("label");
    for i in 1..=d {
        let _ = write!(text, ",f{i}");
    }
    text.push('\n');
    for s in 0..ds.len() {
        let _ = write!(text, "{}", ds.labels[s]);
        for i in 0..d {
            let _ = write!(text, ",{}", ds.features[[i, s]]);
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a `label,f1,...,fd` file back into a dataset. The class count is
/// inferred: when every label is a nonnegative integer the data is treated
/// as classification over `max label + 1` classes, otherwise as regression.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::ParseError {
        row: 0,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 2 || cols[0] != "label" {
        return Err(Error::ParseError {
            row: 0,
            msg: format!("header must start with `label,f1,...`, got `{header}`"),
        });
    }
    let d = cols.len() - 1;

    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let row_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(Error::RaggedRow {
                row: row_no,
                expected: d + 1,
                found: fields.len(),
            });
        }
        let mut parsed = Vec::with_capacity(d + 1);
        for field in &fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::ParseError {
                row: row_no,
                msg: format!("cannot parse `{}` as a number", field.trim()),
            })?;
            parsed.push(v);
        }
        rows.push((parsed[0], parsed[1..].to_vec()));
    }
    if rows.is_empty() {
        return Err(Error::ParseError {
            row: 0,
            msg: "no data rows after the header".into(),
        });
    }

    let n = rows.len();
    let mut features = Array2::<f64>::zeros((d, n));
    let mut labels = Vec::with_capacity(n);
    for (s, (label, feats)) in rows.iter().enumerate() {
        labels.push(*label);
        for i in 0..d {
            features[[i, s]] = feats[i];
        }
    }
    let integral = labels.iter().all(|&l| l >= 0.0 && l.fract() == 0.0);
    let classes = if integral {
        Some(labels.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1)
    } else {
        None
    };
    Ok(Dataset {
        features,
        labels,
        classes,
    })
}

/// One line of `metrics.csv`. The column set is fixed across tasks; the
/// README documents what each task stores in `loss` and `grad_norm`.
/// `wall_ms` is always written as zero so reruns are byte-identical;
/// measured time lives in `summary.txt`.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iter: usize,
    pub epoch: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub damping: f64,
    pub accuracy: Option<f64>,
    pub wall_ms: u64,
}

impl MetricsRow {
    fn from_report(r: &StepReport) -> Self {
        MetricsRow {
            iter: r.iter,
            epoch: r.epoch,
            loss: r.loss,
            grad_norm: r.grad_norm,
            lr: r.lr,
            damping: r.damping,
            accuracy: None,
            wall_ms: 0,
        }
    }
}

/// Serializes rows under the fixed header, enforcing the strictly
/// increasing iteration invariant.
pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut text = String::from("iter,epoch,loss,grad_norm,lr,damping,accuracy,wall_ms\n");
    let mut prev: Option<usize> = None;
    for row in rows {
        if let Some(p) = prev {
            if row.iter <= p {
                return Err(Error::InvalidConfig(format!(
                    "metrics iterations must strictly increase, {} after {}",
                    row.iter, p
                )));
            }
        }
        prev = Some(row.iter);
        let _ = write!(
            text,
            "{},{},{},{},{},{},",
            row.iter, row.epoch, row.loss, row.grad_norm, row.lr, row.damping
        );
        if let Some(acc) = row.accuracy {
            let _ = write!(text, "{acc}");
        }
        let _ = writeln!(text, ",{}", row.wall_ms);
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// What a finished task reports back to the caller.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    /// True when every built-in assertion of the task held.
    pub passed: bool,
    /// Names of the assertions that failed, in declaration order.
    pub failures: Vec<String>,
    /// The text written to `summary.txt`.
    pub summary: String,
}

struct TaskBody {
    rows: Vec<MetricsRow>,
    checks: Vec<(String, bool)>,
    notes: String,
    extra_file: Option<(&'static str, String)>,
}

/// The optimizers the training tasks can drive, behind one step call.
enum Driver {
    Ng(NgPlusOptimizer),
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Driver {
    fn step(&mut self, model: &mut [FcLayer], batch: &Batch, loss: Loss) -> Result<StepReport> {
        match self {
            Driver::Ng(o) => o.step(model, batch, loss),
            Driver::Sgd(o) => o.step(model, batch, loss),
            Driver::Adam(o) => o.step(model, batch, loss),
        }
    }
}

fn build_driver(cfg: &RunConfig, model: &[FcLayer], ipe: usize) -> Result<Driver> {
    Ok(match cfg.algorithm {
        AlgorithmKind::NgPlus => Driver::Ng(NgPlusOptimizer::new(cfg.ngplus_config(), model, ipe)?),
        AlgorithmKind::Sgd => Driver::Sgd(SgdMomentum::new(
            cfg.lr_schedule(),
            cfg.momentum,
            cfg.weight_decay,
            model,
            ipe,
        )?),
        AlgorithmKind::Adam => Driver::Adam(Adam::new(
            cfg.lr_schedule(),
            cfg.beta1,
            cfg.beta2,
            cfg.adam_eps,
            cfg.weight_decay,
            model,
            ipe,
        )?),
    })
}

fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::GaussianMixture => gen_synthetic(
            &SyntheticSpec::GaussianMixture {
                classes: cfg.classes,
                dims: cfg.dims,
                samples: cfg.samples,
                separation: cfg.separation,
                condition: cfg.condition,
            },
            cfg.seed,
        ),
        DatasetKind::LinearRegression => gen_synthetic(
            &SyntheticSpec::LinearRegression {
                dims: cfg.dims,
                samples: cfg.samples,
                noise: cfg.noise,
            },
            cfg.seed,
        ),
        DatasetKind::File => load_csv(Path::new(&cfg.data_path)),
    }
}

/// Mean loss and, for classification, argmax accuracy of the model on a
/// batch.
fn evaluate(model: &[FcLayer], batch: &Batch, loss: Loss) -> Result<(f64, Option<f64>)> {
    let cache = forward(model, &batch.inputs)?;
    let value = output_loss(&cache.outputs, &batch.targets, loss)?;
    let acc = match &batch.targets {
        Targets::Labels(labels) => {
            let mut correct = 0usize;
            for (j, &label) in labels.iter().enumerate() {
                let col = cache.outputs.column(j);
                let mut best = 0;
                for i in 1..col.len() {
                    if col[i] > col[best] {
                        best = i;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }
            Some(correct as f64 / labels.len().max(1) as f64)
        }
        Targets::Values(_) => None,
    };
    Ok((value, acc))
}

/// Sum of squared entries across a full-batch gradient, biases included.
fn full_grad_sq(model: &[FcLayer], batch: &Batch, loss: Loss) -> Result<f64> {
    let grads = batch_gradients(model, batch, loss)?;
    let mut sq = 0.0;
    for w in &grads.weights {
        sq += w.iter().map(|x| x * x).sum::<f64>();
    }
    for b in grads.biases.iter().flatten() {
        sq += b.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(sq)
}

/// Runs the mini-batch training loop shared by the train and convergence
/// tasks: `total_iters` steps over reshuffled epochs, one metrics row per
/// step. The hook runs on the updated model after every step.
fn train_loop(
    cfg: &RunConfig,
    ds: &Dataset,
    train_idx: &[usize],
    model: &mut Vec<FcLayer>,
    driver: &mut Driver,
    total_iters: usize,
    mut after_step: impl FnMut(&[FcLayer], &StepReport) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    let loss = ds.loss();
    let mut shuffle_rng = substream(cfg.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = train_idx.to_vec();
    let mut rows = Vec::with_capacity(total_iters);
    let mut done = 0;
    'epochs: loop {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            if done == total_iters {
                break 'epochs;
            }
            let batch = ds.batch(chunk);
            let report = driver.step(model, &batch, loss)?;
            rows.push(MetricsRow::from_report(&report));
            after_step(model, &report)?;
            done += 1;
        }
        if done == total_iters {
            break;
        }
    }
    Ok(rows)
}

fn task_train(cfg: &RunConfig) -> Result<TaskBody> {
    let ds = build_dataset(cfg)?;
    let (train_idx, test_idx) = ds.split();
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::InvalidSpec(
            "dataset too small for an 80/20 split".into(),
        ));
    }
    let loss = ds.loss();
    let mut model = cfg.build_model(ds.dim(), ds.out_dim())?;
    let ipe = train_idx.len().div_ceil(cfg.batch_size);
    let mut driver = build_driver(cfg, &model, ipe)?;

    let train_batch = ds.batch(&train_idx);
    let test_batch = ds.batch(&test_idx);
    let (init_loss, _) = evaluate(&model, &train_batch, loss)?;

    let total = cfg.epochs * ipe;
    let mut epoch_lines = Vec::with_capacity(cfg.epochs);
    let mut epoch_evals: Vec<(f64, Option<f64>)> = Vec::with_capacity(cfg.epochs);
    let mut step_in_epoch = 0usize;
    let mut rows = {
        let epoch_lines = &mut epoch_lines;
        let epoch_evals = &mut epoch_evals;
        train_loop(
            cfg,
            &ds,
            &train_idx,
            &mut model,
            &mut driver,
            total,
            |model, report| {
                step_in_epoch += 1;
                if step_in_epoch == ipe {
                    step_in_epoch = 0;
                    let (tr_loss, tr_acc) = evaluate(model, &train_batch, loss)?;
                    let epoch = epoch_evals.len() + 1;
                    epoch_evals.push((tr_loss, tr_acc));
                    let mut line = format!("epoch {epoch}: train_loss={tr_loss:.6e}");
                    if let Some(a) = tr_acc {
                        let _ = write!(line, " train_acc={a:.4}");
                    }
                    let _ = write!(line, " lr={:.4e} damping={:.4e}", report.lr, report.damping);
                    epoch_lines.push(line);
                }
                Ok(())
            },
        )?
    };

    // Stamp the end-of-epoch training accuracy onto that epoch's last row.
    for (e, (_, acc)) in epoch_evals.iter().enumerate() {
        let idx = (e + 1) * ipe - 1;
        if let Some(row) = rows.get_mut(idx) {
            row.accuracy = *acc;
        }
    }

    let (final_train, final_acc) = evaluate(&model, &train_batch, loss)?;
    let (test_loss, test_acc) = evaluate(&model, &test_batch, loss)?;

    let mut notes = String::new();
    let _ = writeln!(
        notes,
        "dataset: {:?} d={} n={} (train {}, test {})",
        cfg.dataset,
        ds.dim(),
        ds.len(),
        train_idx.len(),
        test_idx.len()
    );
    let _ = writeln!(notes, "optimizer: {:?}", cfg.algorithm);
    let _ = writeln!(notes, "initial train_loss={init_loss:.6e}");
    for line in &epoch_lines {
        let _ = writeln!(notes, "{line}");
    }
    let _ = writeln!(notes, "final train_loss={final_train:.6e}");
    if let Some(a) = final_acc {
        let _ = writeln!(notes, "final train_acc={a:.4}");
    }
    let _ = writeln!(notes, "test_loss={test_loss:.6e}");
    if let Some(a) = test_acc {
        let _ = writeln!(notes, "test_acc={a:.4}");
    }

    let checks = vec![(
        "final training loss below the initial loss".to_string(),
        final_train < init_loss,
    )];
    Ok(TaskBody {
        rows,
        checks,
        notes,
        extra_file: None,
    })
}

fn task_gfim_study(cfg: &RunConfig) -> Result<TaskBody> {
    if cfg.study_seeds == 0 || cfg.study_scale < 2 {
        return Err(Error::InvalidConfig(
            "study needs >= 1 seeds and a scale factor >= 2".into(),
        ));
    }
    let (n1, m, n) = (cfg.study_samples, cfg.study_m, cfg.study_n);
    let n2 = cfg.study_scale * n1;

    let mut rows = Vec::with_capacity(2 * cfg.study_seeds);
    let mut errs1 = Vec::with_capacity(cfg.study_seeds);
    let mut errs2 = Vec::with_capacity(cfg.study_seeds);
    let mut diff_csv = None;
    for s in 0..cfg.study_seeds {
        let seed = cfg.seed + s as u64;
        let small = efim_gfim_study(n1, m, n, seed)?;
        let big = efim_gfim_study(n2, m, n, seed)?;
        if s == 0 {
            // Elementwise normalized difference of the first run, the
            // artifact downstream plots consume.
            let mut text = String::from("i,j,diff\n");
            let scaled = &small.gfim / n as f64;
            for i in 0..m {
                for j in 0..m {
                    let _ = writeln!(text, "{i},{j},{}", scaled[[i, j]] - small.efim_block[[i, j]]);
                }
            }
            diff_csv = Some(text);
        }
        errs1.push(small.normalized.frobenius);
        errs2.push(big.normalized.frobenius);
        rows.push(MetricsRow {
            iter: 2 * s,
            epoch: n1 as f64,
            loss: small.normalized.frobenius,
            grad_norm: small.raw.frobenius,
            lr: 0.0,
            damping: 0.0,
            accuracy: None,
            wall_ms: 0,
        });
        rows.push(MetricsRow {
            iter: 2 * s + 1,
            epoch: n2 as f64,
            loss: big.normalized.frobenius,
            grad_norm: big.raw.frobenius,
            lr: 0.0,
            damping: 0.0,
            accuracy: None,
            wall_ms: 0,
        });
    }
    let mean1 = errs1.iter().sum::<f64>() / errs1.len() as f64;
    let mean2 = errs2.iter().sum::<f64>() / errs2.len() as f64;

    let mut notes = String::new();
    let _ = writeln!(notes, "matrix size: {m}x{n}, seeds: {}", cfg.study_seeds);
    let _ = writeln!(notes, "mean normalized Frobenius error at N={n1}: {mean1:.6e}");
    let _ = writeln!(notes, "mean normalized Frobenius error at N={n2}: {mean2:.6e}");
    let _ = writeln!(notes, "ratio: {:.4}", mean2 / mean1);

    let checks = vec![(
        format!("mean error at N={n2} is at most 0.6x the error at N={n1}"),
        mean2 <= 0.6 * mean1,
    )];
    Ok(TaskBody {
        rows,
        checks,
        notes,
        extra_file: diff_csv.map(|t| ("diff.csv", t)),
    })
}

fn task_regret(cfg: &RunConfig) -> Result<TaskBody> {
    let (m, n, r, t) = (cfg.regret_m, cfg.regret_n, cfg.radius, cfg.rounds);
    let stream = match cfg.stream {
        StreamKind::Random => ExpConcaveStream::random(m, n, r, t, cfg.seed)?,
        StreamKind::Constant => {
            let x = Array1::from_elem(m, 1.0 / (m as f64).sqrt());
            let y = Array1::from_elem(n, 0.5 * r / (n as f64).sqrt());
            ExpConcaveStream::constant(x, y, r, t)?
        }
        StreamKind::Alternating => ExpConcaveStream::alternating(m, n, r, t)?,
    };
    let report = run_regret(&stream)?;
    // With alpha = 1/(4R^2) the default regularizer is exactly 2.
    let audit = elliptical_potential_audit(&report.grads, 2.0)?;

    let rows = (0..t)
        .map(|k| MetricsRow {
            iter: k,
            epoch: (k + 1) as f64,
            loss: report.regret[k],
            grad_norm: report.bound[k],
            lr: 0.0,
            damping: 0.0,
            accuracy: None,
            wall_ms: 0,
        })
        .collect();

    let mut notes = String::new();
    let _ = writeln!(notes, "stream: {:?} m={m} n={n} radius={r} rounds={t}", cfg.stream);
    let _ = writeln!(notes, "max gradient norm: {:.6e}", report.lg);
    let _ = writeln!(notes, "burn-in round: {:?}", report.burn_in);
    let _ = writeln!(
        notes,
        "final regret={:.6e} final bound={:.6e}",
        report.regret.last().unwrap_or(&0.0),
        report.bound.last().unwrap_or(&0.0)
    );
    let _ = writeln!(
        notes,
        "potential lhs={:.6e} logdet rhs={:.6e} cap={:.6e}",
        audit.lhs, audit.rhs, audit.cap
    );

    let checks = vec![
        (
            "regret stays under the logarithmic bound past burn-in".to_string(),
            report.holds,
        ),
        (
            "potential chain lhs <= logdet ratio <= cap (1e-8 slack)".to_string(),
            audit.lhs <= audit.rhs + 1e-8 && audit.rhs <= audit.cap + 1e-8,
        ),
    ];
    Ok(TaskBody {
        rows,
        checks,
        notes,
        extra_file: None,
    })
}

fn task_gradcheck(cfg: &RunConfig) -> Result<TaskBody> {
    if cfg.gradcheck_nets == 0 {
        return Err(Error::InvalidConfig("gradcheck needs >= 1 networks".into()));
    }
    let mut rng = substream(cfg.seed, STREAM_INIT);
    let mut rows = Vec::with_capacity(cfg.gradcheck_nets);
    let mut max_fd = 0.0f64;
    let mut max_factored = 0.0f64;
    for net in 0..cfg.gradcheck_nets {
        let d0 = rng.gen_range(1..=8usize);
        let d1 = rng.gen_range(1..=8usize);
        let d2 = rng.gen_range(1..=8usize);
        let b = rng.gen_range(1..=8usize);
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| 0.7 * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = draw(d1, d0);
        let w2 = draw(d2, d1);
        let inputs = draw(d0, b);
        let b1 = Array1::from_shape_fn(d1, |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let b2 = Array1::from_shape_fn(d2, |_| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let model = vec![
            FcLayer::new(w1, Some(b1), Activation::Tanh)?,
            FcLayer::new(w2, Some(b2), Activation::Identity)?,
        ];
        // Alternate the loss so both backward rules get exercised.
        let (targets, loss) = if net % 2 == 0 {
            (
                Targets::Values(Array2::from_shape_fn((d2, b), |_| {
                    rng.sample::<f64, _>(StandardNormal)
                })),
                Loss::Mse,
            )
        } else {
            (
                Targets::Labels((0..b).map(|_| rng.gen_range(0..d2)).collect()),
                Loss::CrossEntropy,
            )
        };
        let batch = Batch { inputs, targets };

        let fd = finite_diff_check(&model, &batch, loss, cfg.gradcheck_h)?;
        max_fd = max_fd.max(fd);

        // Per-sample factored gradients against a fresh single-sample
        // batched backward pass.
        let factors = backward_per_sample(&model, &batch, loss)?;
        let mut factored_dev = 0.0f64;
        for s in 0..b {
            let single = Batch {
                inputs: batch.inputs.column(s).insert_axis(ndarray::Axis(1)).to_owned(),
                targets: match &batch.targets {
                    Targets::Labels(l) => Targets::Labels(vec![l[s]]),
                    Targets::Values(v) => {
                        Targets::Values(v.column(s).insert_axis(ndarray::Axis(1)).to_owned())
                    }
                },
            };
            let dense = batch_gradients(&model, &single, loss)?;
            for (l, per_sample) in factors.iter().enumerate() {
                factored_dev =
                    factored_dev.max(max_abs_diff(&per_sample[s].dense(), &dense.weights[l]));
            }
        }
        max_factored = max_factored.max(factored_dev);

        rows.push(MetricsRow {
            iter: net,
            epoch: net as f64,
            loss: fd,
            grad_norm: factored_dev,
            lr: 0.0,
            damping: 0.0,
            accuracy: None,
            wall_ms: 0,
        });
    }

    let mut notes = String::new();
    let _ = writeln!(notes, "networks checked: {}", cfg.gradcheck_nets);
    let _ = writeln!(notes, "max finite-difference deviation: {max_fd:.6e}");
    let _ = writeln!(notes, "max factored-vs-dense deviation: {max_factored:.6e}");

    let checks = vec![
        (
            format!("finite-difference deviation <= {:e}", cfg.gradcheck_tol),
            max_fd <= cfg.gradcheck_tol,
        ),
        (
            format!("factored-vs-dense deviation <= {:e}", cfg.factored_tol),
            max_factored <= cfg.factored_tol,
        ),
    ];
    Ok(TaskBody {
        rows,
        checks,
        notes,
        extra_file: None,
    })
}

fn task_convergence(cfg: &RunConfig) -> Result<TaskBody> {
    // Deterministic leg: full-batch steps on the strongly convex quadratic
    // 0.5/d ||W||_F^2 (identity inputs, zero targets) must never increase
    // the loss. Parameters are pinned here; the certificate should not
    // depend on tuning.
    let d = 4;
    let quad_batch = Batch {
        inputs: Array2::<f64>::eye(d),
        targets: Targets::Values(Array2::<f64>::zeros((d, d))),
    };
    let mut quad_rng = substream(cfg.seed, STREAM_INIT);
    let mut quad_model = vec![FcLayer::new(
        Array2::from_shape_fn((d, d), |_| quad_rng.sample::<f64, _>(StandardNormal)),
        None,
        Activation::Identity,
    )?];
    let quad_cfg = NgPlusConfig {
        lr: Schedule::constant(0.5),
        damping: Schedule::constant(1.0),
        freq: 1,
        mode: CurvatureMode::Subsampled,
        path: SolverPath::Dense,
        weight_decay: 0.0,
    };
    let mut quad_opt = NgPlusOptimizer::new(quad_cfg, &quad_model, 1)?;
    let mut quad_losses = Vec::with_capacity(200);
    for _ in 0..200 {
        let report = quad_opt.step(&mut quad_model, &quad_batch, Loss::Mse)?;
        quad_losses.push(report.loss);
    }
    let monotone = quad_losses.windows(2).all(|w| w[1] <= w[0] + 1e-12);

    // Stochastic leg: mini-batch training with the polynomially decaying
    // step law; the audited trace is the full training-split gradient norm
    // after every step.
    let ds = build_dataset(cfg)?;
    let (train_idx, _) = ds.split();
    if train_idx.is_empty() {
        return Err(Error::InvalidSpec("empty training split".into()));
    }
    if cfg.fit_at == 0 || cfg.fit_at > cfg.iterations {
        return Err(Error::InvalidConfig(format!(
            "fit_at must lie in [1, iterations], got {} with {} iterations",
            cfg.fit_at, cfg.iterations
        )));
    }
    let loss = ds.loss();
    let mut model = cfg.build_model(ds.dim(), ds.out_dim())?;
    let ipe = train_idx.len().div_ceil(cfg.batch_size);
    let ng_cfg = NgPlusConfig {
        lr: Schedule::new(ScheduleKind::PolyDecay {
            c: cfg.lr,
            beta: cfg.lr_beta,
        }),
        damping: Schedule::constant(cfg.damping),
        freq: cfg.freq,
        mode: CurvatureMode::Subsampled,
        path: SolverPath::Dense,
        weight_decay: 0.0,
    };
    let mut driver = Driver::Ng(NgPlusOptimizer::new(ng_cfg, &model, ipe)?);

    let train_batch = ds.batch(&train_idx);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut rows = {
        let trace = &mut trace;
        train_loop(
            cfg,
            &ds,
            &train_idx,
            &mut model,
            &mut driver,
            cfg.iterations,
            |model, _| {
                trace.push(full_grad_sq(model, &train_batch, loss)?);
                Ok(())
            },
        )?
    };
    // Report the audited full-gradient norm, not the mini-batch one.
    for (row, sq) in rows.iter_mut().zip(trace.iter()) {
        row.grad_norm = sq.sqrt();
    }

    let probe = convergence_probe(
        &trace,
        cfg.envelope_beta,
        cfg.fit_at,
        &[cfg.fit_at, cfg.iterations],
        cfg.fit_at,
    )?;

    let mut notes = String::new();
    let _ = writeln!(
        notes,
        "quadratic leg: 200 full-batch steps, final loss {:.6e}",
        quad_losses.last().unwrap()
    );
    let _ = writeln!(
        notes,
        "stochastic leg: {} iterations, step law {:.4} * k^-{:.2}",
        cfg.iterations, cfg.lr, cfg.lr_beta
    );
    for (t, a) in &probe.checkpoints {
        let _ = writeln!(notes, "running mean squared grad norm at T={t}: {a:.6e}");
    }
    let _ = writeln!(
        notes,
        "envelope constants: C1={:.6e} C2={:.6e} beta={}",
        probe.c1, probe.c2, probe.beta
    );
    let _ = writeln!(notes, "fitted decay exponent: {:.4}", probe.fitted_exponent);

    let checks = vec![
        (
            "quadratic objective decreases monotonically".to_string(),
            monotone,
        ),
        (
            format!(
                "running mean squared grad norm at T={} within the fitted envelope",
                cfg.iterations
            ),
            probe.within_envelope,
        ),
    ];
    Ok(TaskBody {
        rows,
        checks,
        notes,
        extra_file: None,
    })
}

/// Executes one task end to end: runs the study, writes `metrics.csv`,
/// `summary.txt`, and any extra artifact into `out_dir`, and returns the
/// assertion outcome. The caller maps `passed` to the process exit code.
pub fn run_task(task: Task, cfg: &RunConfig, out_dir: &Path) -> Result<TaskOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let body = match task {
        Task::Train => task_train(cfg)?,
        Task::GfimStudy => task_gfim_study(cfg)?,
        Task::Regret => task_regret(cfg)?,
        Task::Gradcheck => task_gradcheck(cfg)?,
        Task::Convergence => task_convergence(cfg)?,
    };
    let elapsed_ms = start.elapsed().as_millis();

    write_metrics(&out_dir.join("metrics.csv"), &body.rows)?;
    if let Some((name, text)) = &body.extra_file {
        std::fs::write(out_dir.join(name), text)?;
    }

    let failures: Vec<String> = body
        .checks
        .iter()
        .filter(|(_, ok)| !ok)
        .map(|(name, _)| name.clone())
        .collect();
    let passed = failures.is_empty();

    let mut summary = String::new();
    let _ = writeln!(summary, "task: {}", task.name());
    let _ = writeln!(summary, "seed: {}", cfg.seed);
    summary.push_str(&body.notes);
    for (name, ok) in &body.checks {
        let _ = writeln!(summary, "{}: {name}", if *ok { "PASS" } else { "FAIL" });
    }
    let _ = writeln!(summary, "elapsed_ms: {elapsed_ms}");
    let _ = writeln!(summary, "result: {}", if passed { "PASS" } else { "FAIL" });
    std::fs::write(out_dir.join("summary.txt"), &summary)?;

    Ok(TaskOutcome {
        passed,
        failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{spd_factor, spd_solve};

    #[test]
    fn empty_config_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.freq, 500);
        assert_eq!(cfg.epochs, 20);
        assert_eq!(cfg.algorithm, AlgorithmKind::NgPlus);
    }

    #[test]
    fn bare_freq_line_sets_the_refresh_cadence() {
        let cfg = parse_config("freq = 500\n").unwrap();
        assert_eq!(cfg.freq, 500);
    }

    #[test]
    fn sections_are_organizational_and_validated() {
        let cfg = parse_config("[optimizer]\nlr = 0.25\n[dataset]\nfreq = 7\n").unwrap();
        assert_eq!(cfg.lr, 0.25);
        assert_eq!(cfg.freq, 7);
        let err = parse_config("[nonsense]\n").unwrap_err();
        assert!(matches!(err, Error::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn unknown_keys_and_bad_values_carry_line_numbers() {
        let err = parse_config("lr = 0.1\nfrq = 500\n").unwrap_err();
        match err {
            Error::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "frq");
            }
            other => panic!("expected UnknownKey, got {other:?}"),
        }
        let err = parse_config("\nfreq = abc\n").unwrap_err();
        match err {
            Error::TypeError { line, key, .. } => {
                assert_eq!(line, 2);
                assert_eq!(key, "freq");
            }
            other => panic!("expected TypeError, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = parse_config("# a comment\n\nlr = 0.5 # trailing\n").unwrap();
        assert_eq!(cfg.lr, 0.5);
    }

    #[test]
    fn file_dataset_requires_a_path() {
        let err = parse_config("dataset = file\n").unwrap_err();
        assert!(matches!(err, Error::MissingRequired { key } if key == "data_path"));
    }

    #[test]
    fn mixture_generation_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::GaussianMixture {
            classes: 3,
            dims: 5,
            samples: 30,
            separation: 3.0,
            condition: 1.0,
        };
        let a = gen_synthetic(&spec, 9).unwrap();
        let b = gen_synthetic(&spec, 9).unwrap();
        assert_eq!(max_abs_diff(&a.features, &b.features), 0.0);
        assert_eq!(a.labels, b.labels);
        for c in 0..3 {
            let count = a.labels.iter().filter(|&&l| l == c as f64).count();
            assert_eq!(count, 10);
        }
        let c = gen_synthetic(&spec, 10).unwrap();
        assert!(max_abs_diff(&a.features, &c.features) > 0.0);
    }

    #[test]
    fn zero_samples_are_rejected() {
        let spec = SyntheticSpec::LinearRegression {
            dims: 3,
            samples: 0,
            noise: 0.0,
        };
        assert!(matches!(
            gen_synthetic(&spec, 0),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn noiseless_regression_is_recovered_by_least_squares() {
        let spec = SyntheticSpec::LinearRegression {
            dims: 5,
            samples: 200,
            noise: 0.0,
        };
        let ds = gen_synthetic(&spec, 4).unwrap();
        // Solve (X X^T) w = X y and check the residuals vanish.
        let x = &ds.features;
        let y = Array1::from_vec(ds.labels.clone());
        let gram = x.dot(&x.t());
        let rhs = x.dot(&y).insert_axis(ndarray::Axis(1));
        let factor = spd_factor(&gram, 0.0).unwrap();
        let w = spd_solve(&factor, &rhs).unwrap();
        let fitted = x.t().dot(&w);
        for (i, &target) in ds.labels.iter().enumerate() {
            assert!(
                (fitted[[i, 0]] - target).abs() < 1e-8,
                "sample {i} residual too large"
            );
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let spec = SyntheticSpec::LinearRegression {
            dims: 4,
            samples: 25,
            noise: 0.3,
        };
        let ds = gen_synthetic(&spec, 2).unwrap();
        save_csv(&path, &ds).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.dim(), 4);
        assert_eq!(back.len(), 25);
        assert_eq!(back.classes, None);
        assert_eq!(max_abs_diff(&back.features, &ds.features), 0.0);
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn classification_csv_recovers_the_class_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let spec = SyntheticSpec::GaussianMixture {
            classes: 4,
            dims: 3,
            samples: 20,
            separation: 2.0,
            condition: 1.0,
        };
        let ds = gen_synthetic(&spec, 6).unwrap();
        save_csv(&path, &ds).unwrap();
        let back = load_csv(&path).unwrap();
        assert_eq!(back.classes, Some(4));
    }

    #[test]
    fn ragged_and_malformed_rows_are_reported_with_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "label,f1,f2\n0,1.0\n").unwrap();
        match load_csv(&path).unwrap_err() {
            Error::RaggedRow { row, expected, found } => {
                assert_eq!((row, expected, found), (1, 3, 2));
            }
            other => panic!("expected RaggedRow, got {other:?}"),
        }
        std::fs::write(&path, "label,f1,f2\n0,1.0,x\n").unwrap();
        assert!(matches!(
            load_csv(&path).unwrap_err(),
            Error::ParseError { row: 1, .. }
        ));
        std::fs::write(&path, "label,f1,f2\n").unwrap();
        assert!(matches!(
            load_csv(&path).unwrap_err(),
            Error::ParseError { row: 0, .. }
        ));
    }

    #[test]
    fn metrics_require_strictly_increasing_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let row = |iter: usize| MetricsRow {
            iter,
            epoch: 0.0,
            loss: 1.0,
            grad_norm: 1.0,
            lr: 0.1,
            damping: 0.0,
            accuracy: None,
            wall_ms: 0,
        };
        assert!(write_metrics(&path, &[row(0), row(1)]).is_ok());
        assert!(write_metrics(&path, &[row(1), row(1)]).is_err());
    }

    #[test]
    fn gradcheck_task_passes_and_writes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.gradcheck_nets = 3;
        let outcome = run_task(Task::Gradcheck, &cfg, dir.path()).unwrap();
        assert!(outcome.passed, "failures: {:?}", outcome.failures);
        assert!(dir.path().join("metrics.csv").exists());
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("result: PASS"));
        assert!(summary.contains("max finite-difference deviation"));
    }

    #[test]
    fn small_training_run_improves_the_loss_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.samples = 200;
        cfg.epochs = 3;
        cfg.freq = 10;
        cfg.lr = 0.5;
        let out_a = dir.path().join("a");
        let out_b = dir.path().join("b");
        let outcome = run_task(Task::Train, &cfg, &out_a).unwrap();
        assert!(outcome.passed, "failures: {:?}", outcome.failures);
        run_task(Task::Train, &cfg, &out_b).unwrap();
        let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
        let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
        assert_eq!(a, b, "metrics.csv differs between identical runs");
    }

    #[test]
    fn regret_task_passes_at_reduced_scale() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.rounds = 500;
        let outcome = run_task(Task::Regret, &cfg, dir.path()).unwrap();
        assert!(outcome.passed, "failures: {:?}", outcome.failures);
        let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(text.lines().count(), 501);
    }

    #[test]
    fn gfim_study_task_passes_at_reduced_scale() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.study_samples = 200;
        cfg.study_m = 12;
        cfg.study_n = 12;
        cfg.study_seeds = 5;
        let outcome = run_task(Task::GfimStudy, &cfg, dir.path()).unwrap();
        assert!(outcome.passed, "failures: {:?}", outcome.failures);
        let diff = std::fs::read_to_string(dir.path().join("diff.csv")).unwrap();
        assert_eq!(diff.lines().count(), 12 * 12 + 1);
    }

    #[test]
    fn convergence_task_passes_at_reduced_scale() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.dims = 8;
        cfg.classes = 2;
        cfg.samples = 500;
        cfg.iterations = 800;
        cfg.fit_at = 200;
        cfg.lr = 0.5;
        cfg.freq = 20;
        cfg.damping = 0.1;
        let outcome = run_task(Task::Convergence, &cfg, dir.path()).unwrap();
        assert!(outcome.passed, "failures: {:?}", outcome.failures);
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("quadratic objective decreases monotonically"));
    }

    #[test]
    fn failed_assertions_are_named_in_the_summary() {
        // An impossibly tight tolerance forces the finite-difference check
        // to fail; the summary must name it and report FAIL.
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.gradcheck_nets = 2;
        cfg.gradcheck_tol = 1e-300;
        let outcome = run_task(Task::Gradcheck, &cfg, dir.path()).unwrap();
        assert!(!outcome.passed);
        assert_eq!(outcome.failures.len(), 1);
        let summary = std::fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(summary.contains("FAIL: finite-difference deviation"));
        assert!(summary.contains("result: FAIL"));
    }

    #[test]
    fn substreams_are_mutually_independent() {
        // Drawing more data must not change what the init stream yields.
        let mut init_a = substream(5, STREAM_INIT);
        let a: f64 = init_a.gen();
        let mut data = substream(5, STREAM_DATA);
        let _: [f64; 16] = std::array::from_fn(|_| data.gen());
        let mut init_b = substream(5, STREAM_INIT);
        let b: f64 = init_b.gen();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
