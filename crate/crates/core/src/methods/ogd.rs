//! Orthogonal gradient descent, ground-truth-logit variant: after each task,
//! store the gradients of the true-class logit on a few of its examples and
//! keep later steps orthogonal to their span.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::data::Task;
use crate::nn::{DenseNet, Mode, Scalar};
use crate::{Error, Result};

/// Residuals at or below this norm are treated as already in the span.
pub const RESIDUAL_FLOOR: f64 = 1e-8;

/// Orthonormal directions, kept in double precision, with a single-precision
/// copy for projecting training gradients.
#[derive(Debug, Clone)]
pub struct OgdBasis {
    dim: usize,
    vectors: Vec<Vec<f64>>,
    packed: Array2<f32>,
}

impl OgdBasis {
    pub fn new(dim: usize) -> Self {
        OgdBasis {
            dim,
            vectors: Vec::new(),
            packed: Array2::zeros((0, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Gram–Schmidt `v` against the basis (two passes) and append the
    /// normalized residual if its norm exceeds [`RESIDUAL_FLOOR`]. Returns
    /// whether a vector was appended. Call [`OgdBasis::sync`] before the
    /// next [`OgdBasis::project_f32`].
    pub fn push(&mut self, v: &[f64]) -> Result<bool> {
        if v.len() != self.dim {
            return Err(Error::Shape(format!("vector has {} entries, basis {}", v.len(), self.dim)));
        }
        let mut r = v.to_vec();
        for _ in 0..2 {
            subtract_projections(&mut r, &self.vectors);
        }
        let norm = dot(&r, &r).sqrt();
        // Also rejects a NaN residual.
        if norm.is_nan() || norm <= RESIDUAL_FLOOR {
            return Ok(false);
        }
        r.iter_mut().for_each(|x| *x /= norm);
        self.vectors.push(r);
        Ok(true)
    }

    /// Refresh the single-precision copy after [`OgdBasis::push`] calls.
    pub fn sync(&mut self) {
        let mut packed = Array2::zeros((self.vectors.len(), self.dim));
        for (mut row, v) in packed.rows_mut().into_iter().zip(&self.vectors) {
            row.iter_mut().zip(v).for_each(|(p, &x)| *p = x as f32);
        }
        self.packed = packed;
    }

    /// Single-precision projection used inside the training loop.
    pub fn project_f32(&self, g: &mut [f32]) -> Result<()> {
        if g.len() != self.dim {
            return Err(Error::Shape(format!("gradient has {} entries, basis {}", g.len(), self.dim)));
        }
        if self.packed.nrows() != self.vectors.len() {
            return Err(Error::Runtime("basis changed since the last sync()".into()));
        }
        if self.is_empty() {
            return Ok(());
        }
        // Blocks of rows small enough to stay in cache between the dot and
        // the subtraction, so the basis streams from memory once per step.
        // Blockwise (modified) Gram–Schmidt; equal to the one-shot
        // projection up to rounding because the rows are orthonormal.
        let rows_per_block = (PROJECT_BLOCK_BYTES / (4 * self.dim)).max(1);
        let mut coeffs = vec![0.0f32; rows_per_block];
        for block in self.packed.axis_chunks_iter(Axis(0), rows_per_block) {
            for (c, row) in coeffs.iter_mut().zip(block.rows()) {
                *c = dot_f32(row.as_slice().expect("packed rows are contiguous"), g);
            }
            for (&c, row) in coeffs.iter().zip(block.rows()) {
                let row = row.as_slice().expect("packed rows are contiguous");
                g.iter_mut().zip(row).for_each(|(x, &b)| *x -= c * b);
            }
        }
        Ok(())
    }
}

const PROJECT_BLOCK_BYTES: usize = 1 << 20;

/// Eight independent accumulators so the loop vectorizes.
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f32>() + tail
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn subtract_projections(r: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let c = dot(r, b);
        r.iter_mut().zip(b).for_each(|(x, &y)| *x -= c * y);
    }
}

/// `g` minus its components along every basis vector.
pub fn ogd_project(g: &[f64], basis: &OgdBasis) -> Result<Vec<f64>> {
    if g.len() != basis.dim {
        return Err(Error::Shape(format!("gradient has {} entries, basis {}", g.len(), basis.dim)));
    }
    let mut out = g.to_vec();
    subtract_projections(&mut out, &basis.vectors);
    Ok(out)
}

/// Flattened gradient of the true-class logit for each row of `inputs`.
pub fn logit_gradients<F: Scalar>(
    net: &DenseNet<F>,
    inputs: ArrayView2<F>,
    labels: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if inputs.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} inputs but {} labels", inputs.nrows(), labels.len())));
    }
    let mut out = Vec::with_capacity(labels.len());
    let mut no_draws = rand::rngs::mock::StepRng::new(0, 0);
    for (x, &y) in inputs.axis_iter(Axis(0)).zip(labels) {
        let x = x.insert_axis(Axis(0));
        let trace = net.forward(x, Mode::Eval, &mut no_draws)?;
        if y >= trace.logits.ncols() {
            return Err(Error::Validation(format!("label {y} out of range")));
        }
        let mut dlogits = Array2::zeros(trace.logits.raw_dim());
        dlogits[[0, y]] = F::one();
        let g = net.backward(&trace, dlogits)?;
        out.push(g.flatten().into_iter().map(|v| v.as_f64()).collect());
    }
    Ok(out)
}

/// Extend the basis with true-class-logit gradients of `k` training examples
/// of a finished task, drawn uniformly without replacement. Returns how many
/// directions were appended.
pub fn ogd_extend_basis<R: Rng + ?Sized>(
    net: &DenseNet<f32>,
    task: &Task,
    k: usize,
    basis: &mut OgdBasis,
    rng: &mut R,
) -> Result<usize> {
    if basis.dim != net.num_params() {
        return Err(Error::Shape(format!(
            "basis has dimension {}, network {} parameters",
            basis.dim,
            net.num_params()
        )));
    }
    let split = task.train();
    let idx = index::sample(rng, split.len(), k.min(split.len())).into_vec();
    let grads = logit_gradients(net, split.batch(&idx).view(), &split.batch_labels(&idx))?;
    let mut added = 0;
    for g in &grads {
        if basis.push(g)? {
            added += 1;
        }
    }
    basis.sync();
    Ok(added)
}

/// [`ogd_extend_basis`] over explicit examples, in any precision.
pub fn extend_basis_with<F: Scalar>(
    net: &DenseNet<F>,
    inputs: ArrayView2<F>,
    labels: &[usize],
    basis: &mut OgdBasis,
) -> Result<usize> {
    let grads = logit_gradients(net, inputs, labels)?;
    let mut added = 0;
    for g in &grads {
        if basis.push(g)? {
            added += 1;
        }
    }
    basis.sync();
    Ok(added)
}

/// Largest `|b_i · b_j|` over distinct pairs and largest `| ‖b_i‖ − 1 |`.
pub fn orthonormality_error(basis: &OgdBasis) -> (f64, f64) {
    let mut off = 0.0f64;
    let mut norm = 0.0f64;
    for (i, a) in basis.vectors.iter().enumerate() {
        norm = norm.max((dot(a, a).sqrt() - 1.0).abs());
        for b in &basis.vectors[i + 1..] {
            off = off.max(dot(a, b).abs());
        }
    }
    (off, norm)
}
