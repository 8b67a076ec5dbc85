//! Accuracy evaluation and the two continual-learning summaries: average
//! accuracy `A_t` and the forgetting measure `F`.
//!
//! Everything here works on fractions in `[0, 1]`; reports convert to
//! percentage points.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::nn::{DenseNet, Scalar};
use crate::{Error, Result};

/// Examples per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 1000;

/// Lower-triangular matrix of validation accuracies: entry `(t, i)` is the
/// accuracy on task `i` right after training finished on task `t`, for
/// `i <= t`. Indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    rows: Vec<Vec<f64>>,
}

fn check_fraction(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Validation(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            tasks,
            rows: Vec::with_capacity(tasks),
        }
    }

    /// Build a complete matrix; row `t` must hold `t + 1` entries.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Append the row for the next finished task.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.tasks {
            return Err(Error::Validation(format!("matrix already holds all {} rows", self.tasks)));
        }
        if row.len() != t + 1 {
            return Err(Error::Shape(format!("row {t} needs {} entries, got {}", t + 1, row.len())));
        }
        row.iter().try_for_each(|&v| check_fraction(v))?;
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks
    }

    /// Rows recorded so far.
    pub fn filled(&self) -> usize {
        self.rows.len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.tasks
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    pub fn row(&self, t: usize) -> Option<&[f64]> {
        self.rows.get(t).map(Vec::as_slice)
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Accuracies on every task after the last recorded row.
    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }

    /// CSV with one row per finished task `t` (1-based) and one column per
    /// task `i`; cells above the diagonal are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.tasks {
            out.push_str(&format!(",task_{i}"));
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for i in 0..self.tasks {
                out.push(',');
                if let Some(v) = row.get(i) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Validation("empty accuracy CSV".into()))?;
        let tasks = header.split(',').count().saturating_sub(1);
        let mut m = AccuracyMatrix::new(tasks);
        for (t, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != tasks + 1 {
                return Err(Error::Shape(format!("CSV row {} has {} cells", t + 1, cells.len())));
            }
            let row = cells[1..=t + 1]
                .iter()
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Validation(format!("bad accuracy `{c}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if cells[t + 2..].iter().any(|c| !c.trim().is_empty()) {
                return Err(Error::Validation(format!("row {} fills cells above the diagonal", t + 1)));
            }
            m.push_row(row)?;
        }
        Ok(m)
    }
}

/// `A_t = (1/t) Σ_{i=1..t} a_{t,i}` for `1 <= t <= filled rows`.
pub fn average_accuracy(matrix: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t == 0 || t > matrix.filled() {
        return Err(Error::Validation(format!(
            "t = {t} outside 1..={}",
            matrix.filled()
        )));
    }
    let row = &matrix.rows[t - 1];
    Ok(row.iter().sum::<f64>() / t as f64)
}

/// `F = (1/(T−1)) Σ_{i=1..T−1} max_t (a_{t,i} − a_{T,i})`, with the max
/// taken over the defined entries `t ∈ {i..T−1}`.
pub fn forgetting(matrix: &AccuracyMatrix) -> Result<f64> {
    let tasks = matrix.num_tasks();
    if tasks < 2 {
        return Err(Error::Validation(format!("forgetting needs T >= 2, got {tasks}")));
    }
    if !matrix.is_complete() {
        return Err(Error::Validation(format!(
            "forgetting needs a complete matrix ({} of {tasks} rows)",
            matrix.filled()
        )));
    }
    let last = &matrix.rows[tasks - 1];
    let total: f64 = (0..tasks - 1)
        .map(|i| {
            (i..tasks - 1)
                .map(|t| matrix.rows[t][i] - last[i])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / (tasks - 1) as f64)
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, F::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// Number of argmax-correct predictions on one batch, dropout disabled.
pub fn count_correct<F: Scalar>(net: &DenseNet<F>, inputs: ArrayView2<F>, labels: &[usize]) -> Result<usize> {
    if inputs.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            inputs.nrows(),
            labels.len()
        )));
    }
    let logits = net.predict(inputs)?;
    Ok(argmax_rows(&logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count())
}

/// Fraction of a split classified correctly in eval mode.
pub fn evaluate(net: &DenseNet<f32>, split: Split<'_>) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for (inputs, labels) in split.chunks(EVAL_CHUNK) {
        correct += count_correct(net, inputs.view(), &labels)?;
    }
    Ok(correct as f64 / split.len() as f64)
}

/// [`evaluate`] for in-memory inputs.
pub fn evaluate_inputs<F: Scalar>(net: &DenseNet<F>, inputs: ArrayView2<F>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0;
    for (chunk, ys) in inputs
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .zip(labels.chunks(EVAL_CHUNK))
    {
        correct += count_correct(net, chunk, ys)?;
    }
    Ok(correct as f64 / labels.len() as f64)
}
