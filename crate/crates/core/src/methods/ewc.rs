//! Online EWC: one anchor and a running-sum diagonal Fisher.

use ndarray::{Array2, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::nn::{softmax, DenseNet, Gradients, Mode, Scalar};
use crate::{Error, Result};

const FISHER_CHUNK: usize = 250;

/// Consolidated anchor `θ*` and accumulated Fisher diagonal, both flattened in
/// [`DenseNet::flat_params`] order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct EwcState<F: Scalar = f32> {
    pub anchor: Vec<F>,
    pub fisher: Vec<F>,
    pub consolidated_tasks: usize,
}

impl<F: Scalar> EwcState<F> {
    pub fn new() -> Self {
        EwcState {
            anchor: Vec::new(),
            fisher: Vec::new(),
            consolidated_tasks: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.consolidated_tasks == 0
    }

    /// Add a task's Fisher to the running sum and move the anchor to `net`.
    pub fn absorb(&mut self, net: &DenseNet<F>, fisher: Vec<F>) -> Result<()> {
        if fisher.len() != net.num_params() {
            return Err(Error::Shape(format!(
                "Fisher has {} entries, network has {} parameters",
                fisher.len(),
                net.num_params()
            )));
        }
        if self.is_empty() {
            self.fisher = fisher;
        } else {
            if self.fisher.len() != fisher.len() {
                return Err(Error::Shape("network changed size between consolidations".into()));
            }
            for (acc, f) in self.fisher.iter_mut().zip(fisher) {
                *acc += f;
            }
        }
        self.anchor = net.flat_params();
        self.consolidated_tasks += 1;
        Ok(())
    }
}

/// Empirical mean over the rows of `inputs` of the squared log-likelihood
/// gradient, with each label drawn from the model's own predictive
/// distribution.
pub fn fisher_diagonal<F: Scalar, R: Rng + ?Sized>(
    net: &DenseNet<F>,
    inputs: ArrayView2<F>,
    rng: &mut R,
) -> Result<Vec<F>> {
    if inputs.nrows() == 0 {
        return Err(Error::Validation("Fisher estimate needs at least one example".into()));
    }
    let mut total = Gradients::zeros_like(net);
    for chunk in inputs.axis_chunks_iter(Axis(0), FISHER_CHUNK) {
        let trace = net.forward(chunk, Mode::Eval, rng)?;
        let probs = softmax(&trace.logits);
        let mut dlogits: Array2<F> = probs.clone();
        for (mut row, p) in dlogits.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
            let weights: Vec<f64> = p.iter().map(|v| v.as_f64().max(0.0)).collect();
            let y = WeightedIndex::new(&weights)
                .map_err(|e| Error::Runtime(format!("cannot sample a label: {e}")))?
                .sample(rng);
            row[y] -= F::one();
        }
        let sq = net.squared_example_gradients(&trace, dlogits)?;
        total.add_scaled(&sq, F::one())?;
    }
    total.scale(F::of(1.0 / inputs.nrows() as f64));
    Ok(total.flatten())
}

/// Estimate the Fisher on `n_samples` training examples drawn without
/// replacement, add it to the running sum, and re-anchor at the current
/// parameters. Asking for more samples than the task has uses all of them.
pub fn ewc_consolidate<R: Rng + ?Sized>(
    net: &DenseNet<f32>,
    task: &Task,
    n_samples: usize,
    state: &mut EwcState<f32>,
    rng: &mut R,
) -> Result<()> {
    let split = task.train();
    let mut n = n_samples;
    if n > split.len() {
        log::warn!(
            "task {} has {} training examples; Fisher uses all of them instead of {n_samples}",
            task.id,
            split.len()
        );
        n = split.len();
    }
    let idx = index::sample(rng, split.len(), n).into_vec();
    let inputs = split.batch(&idx);
    let fisher = fisher_diagonal(net, inputs.view(), rng)?;
    state.absorb(net, fisher)
}

/// `λ · F ⊙ (θ − θ*)`.
pub fn ewc_penalty_grad<F: Scalar>(net: &DenseNet<F>, state: &EwcState<F>, lambda: f64) -> Result<Gradients<F>> {
    if state.is_empty() {
        return Err(Error::Validation("EWC state has no consolidated task".into()));
    }
    let theta = net.flat_params();
    if theta.len() != state.anchor.len() || theta.len() != state.fisher.len() {
        return Err(Error::Shape(format!(
            "network has {} parameters, EWC state {}",
            theta.len(),
            state.anchor.len()
        )));
    }
    let lambda = F::of(lambda);
    let flat: Vec<F> = theta
        .iter()
        .zip(&state.anchor)
        .zip(&state.fisher)
        .map(|((&t, &a), &f)| lambda * f * (t - a))
        .collect();
    Gradients::from_flat(net, &flat)
}
