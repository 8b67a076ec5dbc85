//! A-GEM: project the step so the loss on an episodic-memory reference batch
//! does not increase to first order.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::index;
use rand::Rng;

use crate::data::Task;
use crate::{Error, Result};

/// Below this reference-gradient norm the projection is skipped.
pub const REF_NORM_FLOOR: f64 = 1e-12;
/// Size of each reference batch drawn from memory.
pub const REFERENCE_BATCH: usize = 64;

/// Raw examples of finished tasks, at most `capacity` per task.
#[derive(Debug, Clone)]
pub struct EpisodicMemory {
    capacity: usize,
    tasks: Vec<usize>,
    inputs: Vec<Array2<f32>>,
    labels: Vec<Vec<usize>>,
}

impl EpisodicMemory {
    pub fn new(capacity: usize) -> Self {
        EpisodicMemory {
            capacity,
            tasks: Vec::new(),
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.labels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Ids of the tasks stored so far.
    pub fn tasks(&self) -> &[usize] {
        &self.tasks
    }

    /// Store `capacity` training examples of a finished task, drawn uniformly
    /// without replacement (all of them if the task is smaller).
    pub fn store<R: Rng + ?Sized>(&mut self, task: &Task, rng: &mut R) -> Result<()> {
        if self.tasks.contains(&task.id) {
            return Err(Error::Validation(format!("task {} is already in memory", task.id)));
        }
        let split = task.train();
        let k = self.capacity.min(split.len());
        let idx = index::sample(rng, split.len(), k).into_vec();
        self.tasks.push(task.id);
        self.inputs.push(split.batch(&idx));
        self.labels.push(split.batch_labels(&idx));
        Ok(())
    }

    /// `size` examples drawn uniformly without replacement from the whole
    /// memory (everything if it holds fewer).
    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> (Array2<f32>, Vec<usize>) {
        let total = self.len();
        let picks = index::sample(rng, total, size.min(total)).into_vec();
        let mut rows = Vec::with_capacity(picks.len());
        let mut labels = Vec::with_capacity(picks.len());
        for p in picks {
            let (mut t, mut i) = (0, p);
            while i >= self.labels[t].len() {
                i -= self.labels[t].len();
                t += 1;
            }
            rows.push(self.inputs[t].row(i));
            labels.push(self.labels[t][i]);
        }
        let width = self.inputs.first().map_or(0, |a| a.ncols());
        let inputs = if rows.is_empty() {
            Array2::zeros((0, width))
        } else {
            concatenate(Axis(0), &rows.iter().map(|r| r.insert_axis(Axis(0))).collect::<Vec<_>>())
                .expect("memory rows share one width")
        };
        (inputs, labels)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns `g` if `g·g_ref ≥ 0`, otherwise `g − (g·g_ref / g_ref·g_ref) g_ref`.
pub fn agem_project(g: &[f64], g_ref: &[f64]) -> Result<Vec<f64>> {
    if g.len() != g_ref.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, reference {}",
            g.len(),
            g_ref.len()
        )));
    }
    let d = dot(g, g_ref);
    let rr = dot(g_ref, g_ref);
    if d >= 0.0 || rr.sqrt() < REF_NORM_FLOOR {
        return Ok(g.to_vec());
    }
    let c = d / rr;
    Ok(g.iter().zip(g_ref).map(|(x, r)| x - c * r).collect())
}

/// [`agem_project`] on single-precision training gradients, accumulating the
/// dot products in double precision.
pub fn agem_project_f32(g: &mut [f32], g_ref: &[f32]) -> Result<bool> {
    if g.len() != g_ref.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, reference {}",
            g.len(),
            g_ref.len()
        )));
    }
    let (mut d, mut rr) = (0.0f64, 0.0f64);
    for (&x, &r) in g.iter().zip(g_ref) {
        d += x as f64 * r as f64;
        rr += r as f64 * r as f64;
    }
    if d >= 0.0 || rr.sqrt() < REF_NORM_FLOOR {
        return Ok(false);
    }
    let c = (d / rr) as f32;
    for (x, &r) in g.iter_mut().zip(g_ref) {
        *x -= c * r;
    }
    Ok(true)
}
