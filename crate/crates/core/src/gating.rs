//! Firing-pattern analysis of hidden units.
//!
//! A unit "fires" on an example when its ReLU output is strictly positive.
//! The firing frequency of a unit on a task is the fraction of that task's
//! validation examples on which it fires, measured in eval mode. Dropout
//! training is expected to push frequencies toward 0 or 1 (saturated gates)
//! and to keep a task's gates in place while later tasks are learned.
//!
//! The module also carries the closed-form variance of a unit's input under
//! Bernoulli gating of the previous layer, with a Monte Carlo estimator to
//! check it.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::metrics::EVAL_CHUNK;
use crate::nn::{DenseNet, Scalar};
use crate::{Error, Result};

/// Frequencies at or below `tau`, or at or above `1 - tau`, count as
/// saturated.
pub const DEFAULT_SPARSITY_TAU: f64 = 0.1;
/// A unit is "on" for a task when its frequency exceeds this value.
pub const BINARIZE_THRESHOLD: f64 = 0.5;
/// Minimum gate overlap expected between a task's profile right after it was
/// learned and at the end of the stream.
pub const CONSISTENCY_OVERLAP_THRESHOLD: f64 = 0.8;
/// Smallest Monte Carlo sample accepted by [`monte_carlo_dropout_variance`].
pub const MIN_MONTE_CARLO_DRAWS: usize = 10_000;

/// Per-hidden-layer firing frequencies of one network on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationProfile {
    pub task_id: usize,
    /// `layers[l][j]`: frequency of unit `j` of hidden layer `l`.
    pub layers: Vec<Vec<f64>>,
    pub dataset_size: usize,
}

impl ActivationProfile {
    pub fn num_units(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    fn concatenated(&self) -> Vec<f64> {
        self.layers.concat()
    }
}

fn count_firing<F: Scalar>(net: &DenseNet<F>, inputs: ArrayView2<F>, counts: &mut [Vec<usize>]) -> Result<()> {
    let mut current = inputs.to_owned();
    for (l, layer) in net.layers()[..net.num_hidden_layers()].iter().enumerate() {
        let mut z = current.dot(&layer.weights.t());
        z += &layer.biases;
        for row in z.axis_iter(Axis(0)) {
            for (c, &v) in counts[l].iter_mut().zip(row) {
                if v > F::zero() {
                    *c += 1;
                }
            }
        }
        z.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
        current = z;
    }
    Ok(())
}

/// Firing frequencies over arbitrary inputs.
pub fn firing_profile_inputs<F: Scalar>(
    net: &DenseNet<F>,
    task_id: usize,
    inputs: ArrayView2<F>,
) -> Result<ActivationProfile> {
    if inputs.nrows() == 0 {
        return Err(Error::Validation("cannot profile an empty dataset".into()));
    }
    if inputs.ncols() != net.input_width() {
        return Err(Error::Shape(format!(
            "inputs have {} columns, network expects {}",
            inputs.ncols(),
            net.input_width()
        )));
    }
    let mut counts: Vec<Vec<usize>> = net.layers()[..net.num_hidden_layers()]
        .iter()
        .map(|l| vec![0; l.out_width()])
        .collect();
    for chunk in inputs.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
        count_firing(net, chunk, &mut counts)?;
    }
    let n = inputs.nrows();
    Ok(ActivationProfile {
        task_id,
        layers: counts
            .into_iter()
            .map(|c| c.into_iter().map(|k| k as f64 / n as f64).collect())
            .collect(),
        dataset_size: n,
    })
}

/// Firing frequencies of every hidden unit on a task's validation set.
pub fn firing_profile(net: &DenseNet<f32>, task: &Task) -> Result<ActivationProfile> {
    let split = task.validation();
    if split.is_empty() {
        return Err(Error::Validation("task has an empty validation set".into()));
    }
    let mut counts: Vec<Vec<usize>> = net.layers()[..net.num_hidden_layers()]
        .iter()
        .map(|l| vec![0; l.out_width()])
        .collect();
    for (inputs, _) in split.chunks(EVAL_CHUNK) {
        count_firing(net, inputs.view(), &mut counts)?;
    }
    let n = split.len();
    Ok(ActivationProfile {
        task_id: task.id,
        layers: counts
            .into_iter()
            .map(|c| c.into_iter().map(|k| k as f64 / n as f64).collect())
            .collect(),
        dataset_size: n,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 0.5 {
        Ok(())
    } else {
        Err(Error::Validation(format!("tau must lie in (0, 0.5), got {tau}")))
    }
}

fn saturated_fraction(freqs: &[f64], tau: f64) -> f64 {
    let saturated = freqs.iter().filter(|&&f| f <= tau || f >= 1.0 - tau).count();
    saturated as f64 / freqs.len() as f64
}

/// Fraction of all hidden units whose frequency is within `tau` of 0 or 1.
pub fn profile_sparsity(profile: &ActivationProfile, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let freqs = profile.concatenated();
    if freqs.is_empty() {
        return Err(Error::Validation("profile has no units".into()));
    }
    Ok(saturated_fraction(&freqs, tau))
}

/// [`profile_sparsity`] restricted to hidden layer `layer` (0-based).
pub fn layer_sparsity(profile: &ActivationProfile, layer: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let freqs = profile
        .layers
        .get(layer)
        .ok_or_else(|| Error::Validation(format!("profile has no hidden layer {layer}")))?;
    if freqs.is_empty() {
        return Err(Error::Validation(format!("hidden layer {layer} has no units")));
    }
    Ok(saturated_fraction(freqs, tau))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    /// Pearson correlation of the frequency vectors; `None` when either is
    /// constant.
    pub pearson: Option<f64>,
    /// Fraction of units whose binarized gate (`f > 0.5`) agrees.
    pub overlap: f64,
}

fn consistency_of(a: &[f64], b: &[f64]) -> Consistency {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut cov, mut var_a, mut var_b) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - mean_a) * (y - mean_b);
        var_a += (x - mean_a) * (x - mean_a);
        var_b += (y - mean_b) * (y - mean_b);
    }
    let pearson = (var_a > 0.0 && var_b > 0.0).then(|| cov / (var_a.sqrt() * var_b.sqrt()));
    let agree = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| (x > BINARIZE_THRESHOLD) == (y > BINARIZE_THRESHOLD))
        .count();
    Consistency {
        pearson,
        overlap: agree as f64 / n,
    }
}

fn check_same_shape(p1: &ActivationProfile, p2: &ActivationProfile) -> Result<()> {
    let shape = |p: &ActivationProfile| p.layers.iter().map(Vec::len).collect::<Vec<_>>();
    if shape(p1) != shape(p2) {
        return Err(Error::Shape(format!(
            "profiles have layer widths {:?} and {:?}",
            shape(p1),
            shape(p2)
        )));
    }
    if p1.task_id != p2.task_id {
        return Err(Error::Validation(format!(
            "profiles measure different tasks ({} and {})",
            p1.task_id, p2.task_id
        )));
    }
    if p1.num_units() == 0 {
        return Err(Error::Validation("profiles have no units".into()));
    }
    Ok(())
}

/// Compare two profiles of the same task taken at different times, over all
/// hidden units.
pub fn profile_consistency(p1: &ActivationProfile, p2: &ActivationProfile) -> Result<Consistency> {
    check_same_shape(p1, p2)?;
    Ok(consistency_of(&p1.concatenated(), &p2.concatenated()))
}

/// [`profile_consistency`] restricted to one hidden layer.
pub fn layer_consistency(p1: &ActivationProfile, p2: &ActivationProfile, layer: usize) -> Result<Consistency> {
    check_same_shape(p1, p2)?;
    let (a, b) = match (p1.layers.get(layer), p2.layers.get(layer)) {
        (Some(a), Some(b)) if !a.is_empty() => (a, b),
        _ => return Err(Error::Validation(format!("profiles have no hidden layer {layer}"))),
    };
    Ok(consistency_of(a, b))
}

/// `(task_id, layer, neuron_index, frequency)` rows, all indices 0-based.
pub fn profiles_to_csv(profiles: &[ActivationProfile]) -> String {
    let mut out = String::from("task_id,layer,neuron_index,frequency\n");
    for p in profiles {
        for (l, freqs) in p.layers.iter().enumerate() {
            for (j, f) in freqs.iter().enumerate() {
                out.push_str(&format!("{},{l},{j},{f}\n", p.task_id));
            }
        }
    }
    out
}

/// Inverse of [`profiles_to_csv`]. The dataset size is not stored in the CSV
/// and comes back as zero.
pub fn profiles_from_csv(text: &str) -> Result<Vec<ActivationProfile>> {
    let mut profiles: Vec<ActivationProfile> = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let bad = || Error::Validation(format!("profile CSV line {}: `{line}`", n + 1));
        if cells.len() != 4 {
            return Err(bad());
        }
        let task: usize = cells[0].trim().parse().map_err(|_| bad())?;
        let layer: usize = cells[1].trim().parse().map_err(|_| bad())?;
        let neuron: usize = cells[2].trim().parse().map_err(|_| bad())?;
        let freq: f64 = cells[3].trim().parse().map_err(|_| bad())?;
        if profiles.last().map(|p| p.task_id) != Some(task) {
            profiles.push(ActivationProfile {
                task_id: task,
                layers: Vec::new(),
                dataset_size: 0,
            });
        }
        let p = profiles.last_mut().expect("just pushed");
        if layer == p.layers.len() {
            p.layers.push(Vec::new());
        }
        let is_last = layer + 1 == p.layers.len();
        match p.layers.get_mut(layer) {
            Some(freqs) if freqs.len() == neuron && is_last => freqs.push(freq),
            _ => return Err(bad()),
        }
    }
    Ok(profiles)
}

/// Tasks × units matrix of one hidden layer, ready for a heatmap. Row `r`
/// belongs to `profiles[r]`.
pub fn heatmap_matrix(profiles: &[ActivationProfile], layer: usize) -> Result<Array2<f64>> {
    let width = profiles
        .first()
        .and_then(|p| p.layers.get(layer))
        .map(Vec::len)
        .ok_or_else(|| Error::Validation(format!("no profiles with hidden layer {layer}")))?;
    let mut m = Array2::zeros((profiles.len(), width));
    for (r, p) in profiles.iter().enumerate() {
        let freqs = p
            .layers
            .get(layer)
            .filter(|f| f.len() == width)
            .ok_or_else(|| Error::Shape(format!("profile {r} has a different layer {layer} width")))?;
        m.row_mut(r).assign(&ndarray::ArrayView1::from(freqs.as_slice()));
    }
    Ok(m)
}

/// Heatmap matrix as CSV: a `task_id` column followed by one column per unit.
pub fn heatmap_csv(profiles: &[ActivationProfile], layer: usize) -> Result<String> {
    let m = heatmap_matrix(profiles, layer)?;
    let mut out = String::from("task_id");
    for j in 0..m.ncols() {
        out.push_str(&format!(",n{j}"));
    }
    out.push('\n');
    for (p, row) in profiles.iter().zip(m.rows()) {
        out.push_str(&p.task_id.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Closed-form variance of each unit's input `S_i` when only the inputs of
/// weight layer `layer` are gated by independent Bernoulli(p) variables
/// (unscaled) and nothing upstream is dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariancePrediction {
    pub layer: usize,
    pub keep_prob: f64,
    pub variances: Vec<f64>,
}

/// Eval-mode activations entering weight layer `layer` for one example.
fn layer_input<F: Scalar>(net: &DenseNet<F>, input: &[F], layer: usize) -> Result<Vec<f64>> {
    if layer >= net.layers().len() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range for a network with {} weight layers",
            net.layers().len()
        )));
    }
    if input.len() != net.input_width() {
        return Err(Error::Shape(format!(
            "input has {} values, network expects {}",
            input.len(),
            net.input_width()
        )));
    }
    let mut current: Vec<f64> = input.iter().map(|v| v.as_f64()).collect();
    for params in &net.layers()[..layer] {
        current = params
            .weights
            .axis_iter(Axis(0))
            .zip(params.biases.iter())
            .map(|(row, &b)| {
                let z: f64 = row.iter().zip(&current).map(|(&w, &a)| w.as_f64() * a).sum::<f64>() + b.as_f64();
                z.max(0.0)
            })
            .collect();
    }
    Ok(current)
}

/// `Var(S_i) = Σ_j w_ij² σ(S_j)² p (1 − p)`.
pub fn predicted_dropout_variance<F: Scalar>(
    net: &DenseNet<F>,
    input: &[F],
    layer: usize,
) -> Result<VariancePrediction> {
    let act = layer_input(net, input, layer)?;
    let p = net.keep_prob();
    let bernoulli = p * (1.0 - p);
    let variances = net.layers()[layer]
        .weights
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(&act)
                .map(|(&w, &a)| {
                    let w = w.as_f64();
                    w * w * a * a * bernoulli
                })
                .sum()
        })
        .collect();
    Ok(VariancePrediction {
        layer,
        keep_prob: p,
        variances,
    })
}

/// Empirical variance of each `S_i` of weight layer `layer` over `draws`
/// resampled unscaled masks on that layer's inputs.
pub fn monte_carlo_dropout_variance<F: Scalar, R: Rng + ?Sized>(
    net: &DenseNet<F>,
    input: &[F],
    layer: usize,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if draws < MIN_MONTE_CARLO_DRAWS {
        return Err(Error::Validation(format!(
            "Monte Carlo needs at least {MIN_MONTE_CARLO_DRAWS} draws, got {draws}"
        )));
    }
    let act = layer_input(net, input, layer)?;
    let params = &net.layers()[layer];
    let weights: Vec<Vec<f64>> = params
        .weights
        .axis_iter(Axis(0))
        .map(|row| row.iter().map(|w| w.as_f64()).collect())
        .collect();
    let biases: Vec<f64> = params.biases.iter().map(|b| b.as_f64()).collect();
    let p = net.keep_prob();
    let mut mean = vec![0.0; weights.len()];
    let mut m2 = vec![0.0; weights.len()];
    let mut kept = Vec::with_capacity(act.len());
    for k in 1..=draws {
        kept.clear();
        kept.extend((0..act.len()).filter(|_| rng.gen_bool(p)));
        for (i, w) in weights.iter().enumerate() {
            let s = biases[i] + kept.iter().map(|&j| w[j] * act[j]).sum::<f64>();
            let delta = s - mean[i];
            mean[i] += delta / k as f64;
            m2[i] += delta * (s - mean[i]);
        }
    }
    Ok(m2.into_iter().map(|v| v / draws as f64).collect())
}
