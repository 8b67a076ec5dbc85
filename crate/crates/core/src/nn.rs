//! Dense feed-forward network with manual backpropagation.
//!
//! Hidden layers are ReLU and carry Bernoulli dropout gates; the output layer
//! is linear and produces logits for a softmax cross-entropy loss. Dropout is
//! the inverted variant: at train time surviving units are scaled by
//! `1 / keep_prob`, so evaluation runs the plain network with no masks.
//!
//! Weights are stored row-major with shape `(out_width, in_width)`. Batches
//! are `(batch, width)`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floating-point element type of a network. Training runs in `f32`;
/// gradient checks use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Draw fresh dropout masks and apply inverted scaling.
    Train,
    /// No masks, no scaling.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LayerParams<F: Scalar> {
    pub weights: Array2<F>,
    pub biases: Array1<F>,
    pub activation: Activation,
}

impl<F: Scalar> LayerParams<F> {
    pub fn in_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_width(&self) -> usize {
        self.weights.nrows()
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// The continual learner: ReLU hidden layers, a linear output layer and a
/// shared dropout keep probability for every hidden unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DenseNet<F: Scalar = f32> {
    layers: Vec<LayerParams<F>>,
    keep_prob: f64,
}

fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if (0.0..=1.0).contains(&keep_prob) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "keep_prob must lie in [0, 1], got {keep_prob}"
        )))
    }
}

impl<F: Scalar> DenseNet<F> {
    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    ///
    /// `widths` lists every layer width including input and output, e.g.
    /// `[784, 100, 100, 10]`.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], keep_prob: f64, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Validation(format!(
                "architecture needs at least two nonzero widths, got {widths:?}"
            )));
        }
        check_keep_prob(keep_prob)?;
        let n_layers = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit);
                let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || F::of(dist.sample(rng)));
                LayerParams {
                    weights,
                    biases: Array1::zeros(fan_out),
                    activation: if l + 1 == n_layers {
                        Activation::Linear
                    } else {
                        Activation::Relu
                    },
                }
            })
            .collect();
        Ok(DenseNet { layers, keep_prob })
    }

    /// Assemble a network from explicit layers, validating shapes, activation
    /// kinds and finiteness.
    pub fn from_layers(layers: Vec<LayerParams<F>>, keep_prob: f64) -> Result<Self> {
        check_keep_prob(keep_prob)?;
        if layers.is_empty() {
            return Err(Error::Validation("network needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.biases.len() != layer.out_width() {
                return Err(Error::Shape(format!(
                    "layer {l}: {} biases for {} output units",
                    layer.biases.len(),
                    layer.out_width()
                )));
            }
            if l > 0 && layers[l - 1].out_width() != layer.in_width() {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} emits {}",
                    layer.in_width(),
                    l - 1,
                    layers[l - 1].out_width()
                )));
            }
            let expected = if l + 1 == layers.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            if layer.activation != expected {
                return Err(Error::Validation(format!(
                    "layer {l} must be {expected:?}, got {:?}",
                    layer.activation
                )));
            }
            if !layer.weights.iter().chain(layer.biases.iter()).all(|v| v.is_finite()) {
                return Err(Error::Validation(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(DenseNet { layers, keep_prob })
    }

    pub fn layers(&self) -> &[LayerParams<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<F>] {
        &mut self.layers
    }

    pub fn keep_prob(&self) -> f64 {
        self.keep_prob
    }

    pub fn set_keep_prob(&mut self, keep_prob: f64) -> Result<()> {
        check_keep_prob(keep_prob)?;
        self.keep_prob = keep_prob;
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn architecture(&self) -> Vec<usize> {
        std::iter::once(self.input_width())
            .chain(self.layers.iter().map(LayerParams::out_width))
            .collect()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].out_width()
    }

    pub fn num_hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    /// Parameters flattened layer by layer: weights row-major, then biases.
    pub fn flat_params(&self) -> Vec<F> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend(layer.weights.iter().copied());
            flat.extend(layer.biases.iter().copied());
        }
        flat
    }

    pub fn set_flat_params(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has length {}, network has {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Convert to another precision.
    pub fn cast<G: Scalar>(&self) -> DenseNet<G> {
        DenseNet {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.mapv(|v| G::of(v.as_f64())),
                    biases: l.biases.mapv(|v| G::of(v.as_f64())),
                    activation: l.activation,
                })
                .collect(),
            keep_prob: self.keep_prob,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    fn check_batch(&self, batch: &ArrayView2<F>) -> Result<()> {
        if batch.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "batch has {} columns, network expects {}",
                batch.ncols(),
                self.input_width()
            )));
        }
        if !batch.iter().all(|v| v.is_finite()) {
            return Err(Error::Validation("batch contains non-finite values".into()));
        }
        Ok(())
    }

    /// Inverted-dropout scale applied to surviving units. Zero when every
    /// unit is dropped.
    fn dropout_scale(&self) -> F {
        if self.keep_prob > 0.0 {
            F::of(1.0 / self.keep_prob)
        } else {
            F::zero()
        }
    }

    fn unit_masks(&self, rows: usize) -> Vec<Array2<F>> {
        self.layers[..self.num_hidden_layers()]
            .iter()
            .map(|layer| Array2::ones((rows, layer.out_width())))
            .collect()
    }

    /// Draw one Bernoulli(keep_prob) mask per hidden layer for a batch of
    /// `rows` examples.
    pub fn sample_masks<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Vec<Array2<F>> {
        let keep = self.keep_prob;
        if keep >= 1.0 {
            return self.unit_masks(rows);
        }
        self.layers[..self.num_hidden_layers()]
            .iter()
            .map(|layer| {
                Array2::from_shape_simple_fn((rows, layer.out_width()), || {
                    if rng.gen_bool(keep) {
                        F::one()
                    } else {
                        F::zero()
                    }
                })
            })
            .collect()
    }

    /// Run the network on a batch. In [`Mode::Train`] every hidden unit is
    /// gated by a fresh Bernoulli mask and survivors are scaled by
    /// `1 / keep_prob`; [`Mode::Eval`] runs unmasked.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: ArrayView2<F>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace<F>> {
        self.check_batch(&batch)?;
        match mode {
            Mode::Train if self.keep_prob < 1.0 => {
                let masks = self.sample_masks(batch.nrows(), rng);
                self.run(batch, masks, self.dropout_scale())
            }
            _ => self.run(batch, self.unit_masks(batch.nrows()), F::one()),
        }
    }

    /// Train-mode forward pass with caller-supplied masks (one per hidden
    /// layer, entries in `{0, 1}`). The inverted-dropout scale is applied.
    pub fn forward_with_masks(
        &self,
        batch: ArrayView2<F>,
        masks: Vec<Array2<F>>,
    ) -> Result<ForwardTrace<F>> {
        self.check_batch(&batch)?;
        if masks.len() != self.num_hidden_layers() {
            return Err(Error::Shape(format!(
                "{} masks supplied for {} hidden layers",
                masks.len(),
                self.num_hidden_layers()
            )));
        }
        for (l, mask) in masks.iter().enumerate() {
            if mask.dim() != (batch.nrows(), self.layers[l].out_width()) {
                return Err(Error::Shape(format!(
                    "mask {l} has shape {:?}, expected {:?}",
                    mask.dim(),
                    (batch.nrows(), self.layers[l].out_width())
                )));
            }
        }
        let scale = if self.keep_prob < 1.0 {
            self.dropout_scale()
        } else {
            F::one()
        };
        self.run(batch, masks, scale)
    }

    fn run(&self, batch: ArrayView2<F>, masks: Vec<Array2<F>>, scale: F) -> Result<ForwardTrace<F>> {
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut post_activations = Vec::with_capacity(self.layers.len());
        let mut current = batch.to_owned();
        let input = current.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = current.dot(&layer.weights.t());
            z += &layer.biases;
            let a = match layer.activation {
                Activation::Relu => z.mapv(|v| if v > F::zero() { v } else { F::zero() }),
                Activation::Linear => z.clone(),
            };
            current = match masks.get(l) {
                Some(mask) if layer.activation == Activation::Relu => {
                    let mut gated = a.clone();
                    Zip::from(&mut gated).and(mask).for_each(|g, &m| *g = *g * m * scale);
                    gated
                }
                _ => a.clone(),
            };
            pre_activations.push(z);
            post_activations.push(a);
        }
        Ok(ForwardTrace {
            input,
            pre_activations,
            post_activations,
            dropout_masks: masks,
            dropout_scale: scale,
            logits: current,
        })
    }

    /// Eval-mode logits.
    pub fn predict(&self, batch: ArrayView2<F>) -> Result<Array2<F>> {
        Ok(self.forward(batch, Mode::Eval, &mut NoDraws)?.logits)
    }

    /// Mean softmax cross-entropy over the batch and its gradient with
    /// respect to every parameter. Units whose mask entry is zero pass no
    /// gradient.
    pub fn loss_and_backward(
        &self,
        trace: &ForwardTrace<F>,
        labels: &[usize],
    ) -> Result<(F, Gradients<F>)> {
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, labels)?;
        let grads = self.backward(trace, dlogits)?;
        Ok((loss, grads))
    }

    /// Backpropagate an arbitrary gradient on the logits.
    pub fn backward(&self, trace: &ForwardTrace<F>, dlogits: Array2<F>) -> Result<Gradients<F>> {
        self.backprop(trace, dlogits, false)
    }

    /// Sum over the batch of the elementwise-squared per-example gradients,
    /// `Σ_b (∂ℓ_b/∂θ)²`, where `dlogits` row `b` holds `∂ℓ_b/∂logits_b`.
    pub fn squared_example_gradients(
        &self,
        trace: &ForwardTrace<F>,
        dlogits: Array2<F>,
    ) -> Result<Gradients<F>> {
        self.backprop(trace, dlogits, true)
    }

    fn backprop(&self, trace: &ForwardTrace<F>, dlogits: Array2<F>, squared: bool) -> Result<Gradients<F>> {
        if trace.pre_activations.len() != self.layers.len() || trace.input.ncols() != self.input_width() {
            return Err(Error::Shape("trace was not produced by this network".into()));
        }
        if dlogits.dim() != trace.logits.dim() {
            return Err(Error::Shape(format!(
                "logit gradient has shape {:?}, logits have {:?}",
                dlogits.dim(),
                trace.logits.dim()
            )));
        }
        let mut layers: Vec<LayerGrads<F>> = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits;
        for l in (0..self.layers.len()).rev() {
            let input = trace.layer_input(l);
            let (gw, gb) = if squared {
                let d2 = delta.mapv(|v| v * v);
                let x2 = input.mapv(|v| v * v);
                (d2.t().dot(&x2), d2.sum_axis(Axis(0)))
            } else {
                (delta.t().dot(&input), delta.sum_axis(Axis(0)))
            };
            layers.push(LayerGrads {
                weights: gw,
                biases: gb,
            });
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].weights);
                let scale = trace.dropout_scale;
                Zip::from(&mut upstream)
                    .and(&trace.dropout_masks[l - 1])
                    .and(&trace.pre_activations[l - 1])
                    .for_each(|d, &m, &z| {
                        *d = if z > F::zero() { *d * m * scale } else { F::zero() };
                    });
                delta = upstream;
            }
        }
        layers.reverse();
        Ok(Gradients { layers })
    }
}

/// A generator that is never consulted; eval-mode passes draw nothing.
struct NoDraws;

impl rand::RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval mode draws no random numbers")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("eval mode draws no random numbers")
    }
}

/// Everything computed during one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<F: Scalar> {
    pub input: Array2<F>,
    /// Affine outputs `S` of every layer, `(batch, width)`.
    pub pre_activations: Vec<Array2<F>>,
    /// Activation outputs before masking.
    pub post_activations: Vec<Array2<F>>,
    /// One `{0, 1}` mask per hidden layer; all ones in eval mode.
    pub dropout_masks: Vec<Array2<F>>,
    /// Factor applied to surviving units (`1 / keep_prob` in train mode).
    pub dropout_scale: F,
    pub logits: Array2<F>,
}

impl<F: Scalar> ForwardTrace<F> {
    /// What layer `l` actually received: the raw batch for the first layer,
    /// otherwise the gated and scaled output of the previous hidden layer.
    pub fn layer_input(&self, l: usize) -> Array2<F> {
        if l == 0 {
            return self.input.clone();
        }
        let mut x = self.post_activations[l - 1].clone();
        let scale = self.dropout_scale;
        Zip::from(&mut x)
            .and(&self.dropout_masks[l - 1])
            .for_each(|v, &m| *v = *v * m * scale);
        x
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    probs
}

/// Mean cross-entropy and its gradient on the logits, `(softmax − onehot) / B`.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let (batch, classes) = logits.dim();
    if labels.len() != batch {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Validation("empty batch".into()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Validation(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut loss = F::zero();
    let mut grad = logits.clone();
    let inv_batch = F::one() / F::of(batch as f64);
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
        let log_total = row.fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        loss += log_total - row[y];
        row.mapv_inplace(|v| (v - log_total).exp() * inv_batch);
        row[y] -= inv_batch;
    }
    Ok((loss * inv_batch, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<F: Scalar> {
    pub weights: Array2<F>,
    pub biases: Array1<F>,
}

/// Per-layer parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F: Scalar = f32> {
    pub layers: Vec<LayerGrads<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(net: &DenseNet<F>) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: Array2::zeros(l.weights.dim()),
                    biases: Array1::zeros(l.biases.len()),
                })
                .collect(),
        }
    }

    /// Inverse of [`Gradients::flatten`], shaped after `net`.
    pub fn from_flat(net: &DenseNet<F>, flat: &[F]) -> Result<Self> {
        let mut grads = Self::zeros_like(net);
        if flat.len() != net.num_params() {
            return Err(Error::Shape(format!(
                "flat gradient has length {}, network has {} parameters",
                flat.len(),
                net.num_params()
            )));
        }
        let mut it = flat.iter();
        for layer in &mut grads.layers {
            for g in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *g = *it.next().expect("length checked");
            }
        }
        Ok(grads)
    }

    /// Same ordering as [`DenseNet::flat_params`].
    pub fn flatten(&self) -> Vec<F> {
        let mut flat = Vec::with_capacity(self.len());
        for layer in &self.layers {
            flat.extend(layer.weights.iter().copied());
            flat.extend(layer.biases.iter().copied());
        }
        flat
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, net: &DenseNet<F>) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, p)| g.weights.dim() == p.weights.dim() && g.biases.len() == p.biases.len())
    }

    fn check_congruent(&self, other: &Self) -> Result<()> {
        let ok = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.biases.len() == b.biases.len());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("gradient shapes differ".into()))
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: F) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            a.biases.scaled_add(alpha, &b.biases);
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: F) {
        for layer in &mut self.layers {
            layer.weights.mapv_inplace(|v| v * alpha);
            layer.biases.mapv_inplace(|v| v * alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }
}

/// Classical (heavy-ball) momentum state.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Scalar = f32> {
    pub velocity: Gradients<F>,
    pub lr: f64,
    pub momentum: f64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(net: &DenseNet<F>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Validation(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Validation(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            velocity: Gradients::zeros_like(net),
            lr,
            momentum,
        })
    }

    /// `lr ← lr · factor` for `0 < factor ≤ 1`.
    pub fn decay_lr(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::Validation(format!(
                "decay factor must lie in (0, 1], got {factor}"
            )));
        }
        self.lr *= factor;
        Ok(())
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v`.
pub fn sgd_momentum_step<F: Scalar>(
    net: &mut DenseNet<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
) -> Result<()> {
    if !grads.matches(net) || !state.velocity.matches(net) {
        return Err(Error::Shape("gradient or velocity shapes do not mirror the network".into()));
    }
    let momentum = F::of(state.momentum);
    let lr = F::of(state.lr);
    for ((param, grad), vel) in net.layers.iter_mut().zip(&grads.layers).zip(&mut state.velocity.layers) {
        Zip::from(&mut param.weights)
            .and(&mut vel.weights)
            .and(&grad.weights)
            .for_each(|p, v, &g| {
                *v = momentum * *v + g;
                *p -= lr * *v;
            });
        Zip::from(&mut param.biases)
            .and(&mut vel.biases)
            .and(&grad.biases)
            .for_each(|p, v, &g| {
                *v = momentum * *v + g;
                *p -= lr * *v;
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn scalar_net(theta: f64) -> DenseNet<f64> {
        DenseNet::from_layers(
            vec![LayerParams {
                weights: array![[theta]],
                biases: array![0.0],
                activation: Activation::Linear,
            }],
            1.0,
        )
        .unwrap()
    }

    fn scalar_grad(g: f64) -> Gradients<f64> {
        Gradients {
            layers: vec![LayerGrads {
                weights: array![[g]],
                biases: array![0.0],
            }],
        }
    }

    #[test]
    fn zero_network_gives_uniform_softmax() {
        let mut rng = seeded_rng(1);
        let mut net = DenseNet::<f64>::new(&[6, 5, 10], 0.5, &mut rng).unwrap();
        let zeros = vec![0.0; net.num_params()];
        net.set_flat_params(&zeros).unwrap();
        let batch = Array2::from_shape_fn((3, 6), |(i, j)| (i * 6 + j) as f64 * 0.1);
        let trace = net.forward(batch.view(), Mode::Eval, &mut rng).unwrap();
        assert!(trace.logits.iter().all(|&v| v == 0.0));
        for p in softmax(&trace.logits).iter() {
            assert_relative_eq!(*p, 0.1, epsilon = 1e-15);
        }
    }

    #[test]
    fn keep_prob_one_train_matches_eval() {
        let mut rng = seeded_rng(2);
        let net = DenseNet::<f64>::new(&[4, 3, 3, 2], 1.0, &mut rng).unwrap();
        let batch = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64).sin());
        let train = net.forward(batch.view(), Mode::Train, &mut rng).unwrap();
        let eval = net.forward(batch.view(), Mode::Eval, &mut rng).unwrap();
        assert_eq!(train.pre_activations, eval.pre_activations);
        assert_eq!(train.post_activations, eval.post_activations);
        assert_eq!(train.dropout_masks, eval.dropout_masks);
        assert_eq!(train.logits, eval.logits);
    }

    #[test]
    fn mask_mean_tracks_keep_prob() {
        let mut rng = seeded_rng(3);
        let net = DenseNet::<f64>::new(&[4, 3, 2], 0.7, &mut rng).unwrap();
        let batch = Array2::from_elem((1, 4), 0.5);
        let draws = 100_000;
        let mut kept = 0.0;
        for _ in 0..draws {
            let trace = net.forward(batch.view(), Mode::Train, &mut rng).unwrap();
            kept += trace.dropout_masks[0].sum();
        }
        let mean = kept / (draws * 3) as f64;
        assert!((mean - 0.7).abs() < 0.01 * 0.7, "mask mean {mean}");
    }

    #[test]
    fn masks_are_binary_and_eval_masks_are_ones() {
        let mut rng = seeded_rng(4);
        let net = DenseNet::<f32>::new(&[8, 6, 6, 3], 0.5, &mut rng).unwrap();
        let batch = Array2::from_elem((16, 8), 0.25f32);
        let train = net.forward(batch.view(), Mode::Train, &mut rng).unwrap();
        assert!(train.dropout_masks.iter().flatten().all(|&m| m == 0.0 || m == 1.0));
        assert_eq!(train.dropout_scale, 2.0);
        let eval = net.forward(batch.view(), Mode::Eval, &mut rng).unwrap();
        assert!(eval.dropout_masks.iter().flatten().all(|&m| m == 1.0));
        assert_eq!(eval.dropout_scale, 1.0);
    }

    #[test]
    fn relu_trace_is_consistent() {
        let mut rng = seeded_rng(5);
        let net = DenseNet::<f64>::new(&[5, 7, 4, 3], 0.6, &mut rng).unwrap();
        let batch = Array2::from_shape_fn((9, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).cos());
        let trace = net.forward(batch.view(), Mode::Train, &mut rng).unwrap();
        for l in 0..2 {
            Zip::from(&trace.pre_activations[l])
                .and(&trace.post_activations[l])
                .for_each(|&z, &a| {
                    assert!(a >= 0.0);
                    assert_eq!(a == 0.0, z <= 0.0);
                    if z > 0.0 {
                        assert_eq!(a, z);
                    }
                });
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let mut rng = seeded_rng(6);
        let net = DenseNet::<f64>::new(&[4, 3, 2], 0.5, &mut rng).unwrap();
        let wrong = Array2::zeros((2, 5));
        assert!(matches!(
            net.forward(wrong.view(), Mode::Eval, &mut rng),
            Err(Error::Shape(_))
        ));
        let mut nan = Array2::zeros((2, 4));
        nan[[1, 2]] = f64::NAN;
        assert!(matches!(
            net.forward(nan.view(), Mode::Eval, &mut rng),
            Err(Error::Validation(_))
        ));
        assert!(DenseNet::<f64>::new(&[4, 3, 2], 1.5, &mut rng).is_err());
    }

    #[test]
    fn from_layers_rejects_incompatible_shapes() {
        let l0 = LayerParams {
            weights: Array2::<f64>::zeros((3, 4)),
            biases: Array1::zeros(3),
            activation: Activation::Relu,
        };
        let l1 = LayerParams {
            weights: Array2::<f64>::zeros((2, 5)),
            biases: Array1::zeros(2),
            activation: Activation::Linear,
        };
        assert!(matches!(
            DenseNet::from_layers(vec![l0.clone(), l1], 1.0),
            Err(Error::Shape(_))
        ));
        let bad_bias = LayerParams {
            biases: Array1::zeros(4),
            ..l0.clone()
        };
        assert!(DenseNet::from_layers(vec![bad_bias], 1.0).is_err());
        // Output layer must be linear.
        assert!(DenseNet::from_layers(vec![l0], 1.0).is_err());
    }

    #[test]
    fn uniform_logits_gradient() {
        let logits = Array2::<f64>::zeros((4, 10));
        let labels = [0, 3, 9, 3];
        let (loss, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert_relative_eq!(loss, 10f64.ln(), epsilon = 1e-12);
        for (b, &y) in labels.iter().enumerate() {
            for k in 0..10 {
                let onehot = if k == y { 1.0 } else { 0.0 };
                assert_relative_eq!(grad[[b, k]], (0.1 - onehot) / 4.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let logits = Array2::<f64>::zeros((2, 10));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[1, 10]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fully_masked_unit_gets_zero_incoming_gradient() {
        let mut rng = seeded_rng(7);
        let net = DenseNet::<f64>::new(&[4, 5, 3], 0.5, &mut rng).unwrap();
        let batch = Array2::from_shape_fn((6, 4), |(i, j)| 0.1 + (i + j) as f64 * 0.2);
        let mut masks = net.sample_masks(6, &mut rng);
        masks[0].column_mut(2).fill(0.0);
        masks[0].column_mut(0).fill(1.0);
        let trace = net.forward_with_masks(batch.view(), masks).unwrap();
        let (_, grads) = net.loss_and_backward(&trace, &[0, 1, 2, 0, 1, 2]).unwrap();
        assert!(grads.layers[0].weights.row(2).iter().all(|&g| g == 0.0));
        assert_eq!(grads.layers[0].biases[2], 0.0);
        // The unit's outgoing weights see only zeros as input.
        assert!(grads.layers[1].weights.column(2).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn vanilla_sgd_when_momentum_is_zero() {
        let mut net = scalar_net(1.0);
        let mut state = OptimizerState::new(&net, 0.1, 0.0).unwrap();
        sgd_momentum_step(&mut net, &scalar_grad(2.0), &mut state).unwrap();
        assert_eq!(net.layers()[0].weights[[0, 0]], 1.0 - 0.1 * 2.0);
        sgd_momentum_step(&mut net, &scalar_grad(-1.0), &mut state).unwrap();
        assert_eq!(net.layers()[0].weights[[0, 0]], 1.0 - 0.1 * 2.0 + 0.1);
    }

    #[test]
    fn zero_lr_accumulates_velocity_only() {
        let mut net = scalar_net(1.0);
        let mut state = OptimizerState::new(&net, 0.0, 0.8).unwrap();
        sgd_momentum_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        sgd_momentum_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        assert_eq!(net.layers()[0].weights[[0, 0]], 1.0);
        assert_relative_eq!(state.velocity.layers[0].weights[[0, 0]], 1.8, epsilon = 1e-15);
    }

    #[test]
    fn momentum_recurrence_by_hand() {
        let mut net = scalar_net(1.0);
        let mut state = OptimizerState::new(&net, 0.1, 0.8).unwrap();
        sgd_momentum_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        assert_relative_eq!(net.layers()[0].weights[[0, 0]], 0.9, epsilon = 1e-15);
        sgd_momentum_step(&mut net, &scalar_grad(1.0), &mut state).unwrap();
        assert_relative_eq!(state.velocity.layers[0].weights[[0, 0]], 1.8, epsilon = 1e-15);
        assert_relative_eq!(net.layers()[0].weights[[0, 0]], 0.72, epsilon = 1e-15);
    }

    #[test]
    fn step_rejects_mismatched_gradients() {
        let mut net = scalar_net(1.0);
        let mut state = OptimizerState::new(&net, 0.1, 0.8).unwrap();
        let mut rng = seeded_rng(8);
        let other = DenseNet::<f64>::new(&[2, 2], 1.0, &mut rng).unwrap();
        let g = Gradients::zeros_like(&other);
        assert!(matches!(
            sgd_momentum_step(&mut net, &g, &mut state),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lr_decay() {
        let net = scalar_net(1.0);
        let mut state = OptimizerState::new(&net, 0.01, 0.8).unwrap();
        state.decay_lr(0.8).unwrap();
        assert_relative_eq!(state.lr, 0.008, epsilon = 1e-15);
        state.decay_lr(1.0).unwrap();
        assert_relative_eq!(state.lr, 0.008, epsilon = 1e-15);
        for _ in 0..3 {
            state.decay_lr(0.8).unwrap();
        }
        assert_relative_eq!(state.lr, 0.004096, epsilon = 1e-15);
        assert!(state.decay_lr(0.0).is_err());
        assert!(state.decay_lr(1.2).is_err());
    }

    #[test]
    fn flat_round_trip_preserves_layout() {
        let mut rng = seeded_rng(9);
        let net = DenseNet::<f32>::new(&[3, 4, 2], 1.0, &mut rng).unwrap();
        let flat = net.flat_params();
        assert_eq!(flat.len(), 3 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(flat[0], net.layers()[0].weights[[0, 0]]);
        assert_eq!(flat[3], net.layers()[0].weights[[1, 0]]);
        let mut other = net.clone();
        other.set_flat_params(&vec![0.0; flat.len()]).unwrap();
        other.set_flat_params(&flat).unwrap();
        assert_eq!(other, net);
        let g = Gradients::from_flat(&net, &flat).unwrap();
        assert_eq!(g.flatten(), flat);
    }

    #[test]
    fn glorot_bounds_hold() {
        let mut rng = seeded_rng(10);
        let net = DenseNet::<f32>::new(&[784, 100, 100, 10], 0.5, &mut rng).unwrap();
        let limit = (6.0f32 / 884.0).sqrt();
        assert!(net.layers()[0].weights.iter().all(|w| w.abs() <= limit));
        assert!(net.layers().iter().all(|l| l.biases.iter().all(|&b| b == 0.0)));
        assert_eq!(net.architecture(), vec![784, 100, 100, 10]);
        assert_eq!(net.num_params(), 89_610);
    }
}
