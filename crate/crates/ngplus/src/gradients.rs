//! Fully-connected layers with per-sample factored gradients.
//!
//! The weight gradient of a dense layer for one sample is the rank-one outer
//! product `g a^T`, where `g` is the backpropagated error at the layer output
//! and `a` is the layer input. Curvature construction downstream only ever
//! needs these factors, never the materialized `m x n` gradient, so the
//! backward pass here returns `(g, a)` pairs per layer per sample. Batches
//! are column-major: a batch of size `B` over `d` features is a `d x B`
//! matrix whose columns are samples.

use crate::error::{Error, Result};
use crate::linalg::Mat;
use ndarray::{Array1, Array2};

/// Elementwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation. The ReLU subgradient at
    /// exactly zero is taken as zero.
    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One dense layer: `out = activation(W x + b)` with `W` of shape `m x n`.
#[derive(Debug, Clone)]
pub struct FcLayer {
    pub weight: Mat,
    pub bias: Option<Array1<f64>>,
    pub activation: Activation,
}

impl FcLayer {
    pub fn new(weight: Mat, bias: Option<Array1<f64>>, activation: Activation) -> Result<Self> {
        if let Some(b) = &bias {
            if b.len() != weight.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "bias length {} does not match {} output rows",
                    b.len(),
                    weight.nrows()
                )));
            }
        }
        Ok(FcLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Targets for a batch: class labels for cross-entropy, a value matrix
/// (same shape as the network output) for mean squared error.
#[derive(Debug, Clone)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Mat),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(l) => l.len(),
            Targets::Values(v) => v.ncols(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A batch of samples stored as columns.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Targets,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.inputs.ncols()
    }
}

/// Per-sample loss applied to the network output.
///
/// `Mse` is `0.5 ||out - y||^2` per sample; `CrossEntropy` is softmax
/// negative log-likelihood, evaluated in fused form with the usual
/// max-subtraction so large logits cannot overflow. Batch losses are means
/// over samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    CrossEntropy,
}

/// Rank-`kappa` gradient factors of one layer for one sample: the weight
/// gradient is `g a^T`. Dense layers produce `kappa = 1`.
#[derive(Debug, Clone)]
pub struct PerSampleFactors {
    pub g: Mat,
    pub a: Mat,
    pub sample_index: usize,
}

impl PerSampleFactors {
    /// Number of factor columns.
    pub fn kappa(&self) -> usize {
        self.g.ncols()
    }

    /// Materialized `m x n` per-sample gradient `g a^T`.
    pub fn dense(&self) -> Mat {
        self.g.dot(&self.a.t())
    }

    /// Squared norm of the `a` factor; for rank-one factors this is the
    /// scaling constant that turns `g g^T` into the sample's Gram
    /// contribution.
    pub fn a_norm_sq(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum()
    }

    /// Squared norm of the `g` factor, the mirror constant for the
    /// right-side Gram.
    pub fn g_norm_sq(&self) -> f64 {
        self.g.iter().map(|x| x * x).sum()
    }
}

/// Activations recorded during a forward pass, enough to backpropagate.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`layer_inputs[0]` is the batch input).
    pub layer_inputs: Vec<Mat>,
    /// Pre-activation `W x + b` of each layer.
    pub preacts: Vec<Mat>,
    /// Network output after the last activation.
    pub outputs: Mat,
}

fn check_model_input(model: &[FcLayer], inputs: &Mat) -> Result<()> {
    if model.is_empty() {
        return Err(Error::InvalidConfig("model has no layers".into()));
    }
    let mut dim = inputs.nrows();
    for (l, layer) in model.iter().enumerate() {
        if layer.in_dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "layer {} expects {} inputs, got {}",
                l,
                layer.in_dim(),
                dim
            )));
        }
        dim = layer.out_dim();
    }
    Ok(())
}

/// Runs the batch through the model, recording per-layer activations.
pub fn forward(model: &[FcLayer], inputs: &Mat) -> Result<ForwardCache> {
    check_model_input(model, inputs)?;
    let mut layer_inputs = Vec::with_capacity(model.len());
    let mut preacts = Vec::with_capacity(model.len());
    let mut current = inputs.to_owned();
    for layer in model {
        let mut z = layer.weight.dot(&current);
        if let Some(b) = &layer.bias {
            for (mut row, bi) in z.rows_mut().into_iter().zip(b.iter()) {
                row.mapv_inplace(|v| v + bi);
            }
        }
        let out = z.mapv(|v| layer.activation.apply(v));
        layer_inputs.push(current);
        preacts.push(z);
        current = out;
    }
    Ok(ForwardCache {
        layer_inputs,
        preacts,
        outputs: current,
    })
}

/// Stable per-column log-sum-exp of a logits matrix.
fn log_sum_exp_cols(z: &Mat) -> Array1<f64> {
    let mut out = Array1::zeros(z.ncols());
    for (j, col) in z.columns().into_iter().enumerate() {
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = col.iter().map(|v| (v - m).exp()).sum();
        out[j] = m + s.ln();
    }
    out
}

fn check_targets(outputs: &Mat, targets: &Targets, loss: Loss) -> Result<()> {
    if outputs.ncols() != targets.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} output columns vs {} targets",
            outputs.ncols(),
            targets.len()
        )));
    }
    match (loss, targets) {
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            if let Some(&bad) = labels.iter().find(|&&l| l >= outputs.nrows()) {
                return Err(Error::InvalidSpec(format!(
                    "label {} out of range for {} classes",
                    bad,
                    outputs.nrows()
                )));
            }
            Ok(())
        }
        (Loss::Mse, Targets::Values(values)) => {
            if values.nrows() != outputs.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "target rows {} vs output rows {}",
                    values.nrows(),
                    outputs.nrows()
                )));
            }
            Ok(())
        }
        (Loss::CrossEntropy, Targets::Values(_)) => Err(Error::UnsupportedLoss(
            "cross-entropy requires class labels".into(),
        )),
        (Loss::Mse, Targets::Labels(_)) => Err(Error::UnsupportedLoss(
            "mse requires value targets".into(),
        )),
    }
}

/// Mean per-sample loss of `outputs` against `targets`.
pub fn output_loss(outputs: &Mat, targets: &Targets, loss: Loss) -> Result<f64> {
    check_targets(outputs, targets, loss)?;
    let b = outputs.ncols();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let total = match (loss, targets) {
        (Loss::Mse, Targets::Values(y)) => {
            let diff = outputs - y;
            0.5 * diff.iter().map(|v| v * v).sum::<f64>()
        }
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            let lse = log_sum_exp_cols(outputs);
            labels
                .iter()
                .enumerate()
                .map(|(j, &y)| lse[j] - outputs[[y, j]])
                .sum()
        }
        _ => unreachable!("checked above"),
    };
    Ok(total / b as f64)
}

/// Gradient of the per-sample loss with respect to the network output,
/// one column per sample, without the `1/B` batch averaging.
fn output_delta(outputs: &Mat, targets: &Targets, loss: Loss) -> Result<Mat> {
    check_targets(outputs, targets, loss)?;
    match (loss, targets) {
        (Loss::Mse, Targets::Values(y)) => Ok(outputs - y),
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            let lse = log_sum_exp_cols(outputs);
            let mut delta = Array2::zeros(outputs.dim());
            for j in 0..outputs.ncols() {
                for i in 0..outputs.nrows() {
                    delta[[i, j]] = (outputs[[i, j]] - lse[j]).exp();
                }
                delta[[labels[j], j]] -= 1.0;
            }
            Ok(delta)
        }
        _ => unreachable!("checked above"),
    }
}

/// Full-batch loss of the model on a batch.
pub fn batch_loss(model: &[FcLayer], batch: &Batch, loss: Loss) -> Result<f64> {
    let cache = forward(model, &batch.inputs)?;
    output_loss(&cache.outputs, &batch.targets, loss)
}

/// Backpropagates the batch and returns rank-one gradient factors, outer
/// index layer, inner index sample. `factors[l][i].dense()` is the exact
/// gradient of sample `i`'s loss with respect to layer `l`'s weight, with no
/// batch averaging applied.
pub fn backward_per_sample(
    model: &[FcLayer],
    batch: &Batch,
    loss: Loss,
) -> Result<Vec<Vec<PerSampleFactors>>> {
    if batch.size() == 0 {
        return Err(Error::EmptyBatch);
    }
    let cache = forward(model, &batch.inputs)?;
    let mut delta = output_delta(&cache.outputs, &batch.targets, loss)?;

    let b = batch.size();
    let mut per_layer: Vec<Vec<PerSampleFactors>> = vec![Vec::with_capacity(b); model.len()];
    for l in (0..model.len()).rev() {
        let layer = &model[l];
        // Chain through the activation to get errors at the pre-activation.
        let z = &cache.preacts[l];
        let mut dz = delta;
        dz.zip_mut_with(z, |d, &zv| *d *= layer.activation.derivative(zv));

        let inputs = &cache.layer_inputs[l];
        for i in 0..b {
            let g = dz.column(i).insert_axis(ndarray::Axis(1)).to_owned();
            let a = inputs.column(i).insert_axis(ndarray::Axis(1)).to_owned();
            per_layer[l].push(PerSampleFactors {
                g,
                a,
                sample_index: i,
            });
        }
        delta = layer.weight.t().dot(&dz);
    }
    Ok(per_layer)
}

/// Batch loss and batch-averaged gradients for every layer, computed with
/// batched matrix products only.
#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub loss: f64,
    /// Weight gradient per layer, already divided by the batch size.
    pub weights: Vec<Mat>,
    /// Bias gradient per layer, `None` where the layer has no bias.
    pub biases: Vec<Option<Array1<f64>>>,
}

/// One forward and one backward pass yielding the loss and the mean
/// gradients, without materializing per-sample factors. Agrees with
/// averaging [`backward_per_sample`] output but runs on whole-batch matrix
/// products, which is what the training loop wants on iterations that do
/// not refresh curvature.
pub fn batch_gradients(model: &[FcLayer], batch: &Batch, loss: Loss) -> Result<BatchGrads> {
    if batch.size() == 0 {
        return Err(Error::EmptyBatch);
    }
    let cache = forward(model, &batch.inputs)?;
    let loss_value = output_loss(&cache.outputs, &batch.targets, loss)?;
    let mut delta = output_delta(&cache.outputs, &batch.targets, loss)?;

    let b = batch.size() as f64;
    let mut weights: Vec<Mat> = Vec::with_capacity(model.len());
    let mut biases: Vec<Option<Array1<f64>>> = Vec::with_capacity(model.len());
    for l in (0..model.len()).rev() {
        let layer = &model[l];
        let z = &cache.preacts[l];
        let mut dz = delta;
        dz.zip_mut_with(z, |d, &zv| *d *= layer.activation.derivative(zv));

        weights.push(dz.dot(&cache.layer_inputs[l].t()) / b);
        biases.push(
            layer
                .bias
                .as_ref()
                .map(|_| dz.sum_axis(ndarray::Axis(1)) / b),
        );
        delta = layer.weight.t().dot(&dz);
    }
    weights.reverse();
    biases.reverse();
    Ok(BatchGrads {
        loss: loss_value,
        weights,
        biases,
    })
}

/// Mini-batch weight gradient `(1/B) sum g_i a_i^T` from per-sample factors.
pub fn minibatch_gradient(factors: &[PerSampleFactors]) -> Result<Mat> {
    let first = factors.first().ok_or(Error::EmptyBatch)?;
    let (m, n) = (first.g.nrows(), first.a.nrows());
    let mut sum = Array2::<f64>::zeros((m, n));
    for f in factors {
        if f.g.nrows() != m || f.a.nrows() != n || f.g.ncols() != f.a.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "factor {}x{} / {}x{} disagrees with {}x{} layout",
                f.g.nrows(),
                f.g.ncols(),
                f.a.nrows(),
                f.a.ncols(),
                m,
                n
            )));
        }
        sum = sum + f.dense();
    }
    Ok(sum / factors.len() as f64)
}

/// Mini-batch bias gradient: the mean of the `g` factors.
pub fn mean_bias_gradient(factors: &[PerSampleFactors]) -> Result<Array1<f64>> {
    let first = factors.first().ok_or(Error::EmptyBatch)?;
    let m = first.g.nrows();
    let mut sum = Array1::<f64>::zeros(m);
    for f in factors {
        if f.g.nrows() != m {
            return Err(Error::ShapeMismatch(format!(
                "bias factor rows {} vs {}",
                f.g.nrows(),
                m
            )));
        }
        for k in 0..f.g.ncols() {
            for i in 0..m {
                sum[i] += f.g[[i, k]];
            }
        }
    }
    Ok(sum / factors.len() as f64)
}

/// Compares analytic batch gradients against central finite differences of
/// the batch loss, over every weight and bias entry, and returns the largest
/// absolute deviation.
pub fn finite_diff_check(model: &[FcLayer], batch: &Batch, loss: Loss, h: f64) -> Result<f64> {
    let factors = backward_per_sample(model, batch, loss)?;
    let mut work: Vec<FcLayer> = model.to_vec();
    let mut worst: f64 = 0.0;

    for l in 0..model.len() {
        let grad_w = minibatch_gradient(&factors[l])?;
        let (m, n) = grad_w.dim();
        for i in 0..m {
            for j in 0..n {
                let orig = work[l].weight[[i, j]];
                work[l].weight[[i, j]] = orig + h;
                let up = batch_loss(&work, batch, loss)?;
                work[l].weight[[i, j]] = orig - h;
                let down = batch_loss(&work, batch, loss)?;
                work[l].weight[[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - grad_w[[i, j]]).abs());
            }
        }
        if model[l].bias.is_some() {
            let grad_b = mean_bias_gradient(&factors[l])?;
            for i in 0..m {
                let orig = work[l].bias.as_ref().expect("bias present")[i];
                work[l].bias.as_mut().expect("bias present")[i] = orig + h;
                let up = batch_loss(&work, batch, loss)?;
                work[l].bias.as_mut().expect("bias present")[i] = orig - h;
                let down = batch_loss(&work, batch, loss)?;
                work[l].bias.as_mut().expect("bias present")[i] = orig;
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - grad_b[i]).abs());
            }
        }
    }
    Ok(worst)
}
