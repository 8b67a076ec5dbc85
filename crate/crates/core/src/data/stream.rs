//! Continual-learning task streams built from one base dataset.
//!
//! Every task shares the same underlying images; a task only stores how to
//! transform them (a pixel permutation or a rotation). Normalized inputs are
//! produced on demand, batch by batch.

use std::sync::Arc;

use ndarray::{Array2, ArrayViewMut1};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::idx::ImageSet;
use crate::{seeded_rng, Error, Result};

/// Degrees added per task in a rotated stream.
pub const ROTATION_STEP_DEGREES: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Permuted,
    Rotated,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Permuted => "permuted",
            TaskKind::Rotated => "rotated",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permuted" => Ok(TaskKind::Permuted),
            "rotated" => Ok(TaskKind::Rotated),
            other => Err(Error::Validation(format!(
                "unknown dataset kind `{other}` (expected permuted or rotated)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    /// Output pixel `k` takes input pixel `perm[k]`.
    Permutation(Vec<usize>),
    /// Counterclockwise rotation about the image center.
    Rotation { degrees: f64 },
}

impl Transform {
    /// Apply to one row-major image of intensities. Rotations need the image
    /// shape.
    pub fn apply(&self, image: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        match self {
            Transform::Permutation(perm) => perm.iter().map(|&src| image[src]).collect(),
            Transform::Rotation { degrees } => rotate_bilinear(image, rows, cols, *degrees),
        }
    }
}

/// One output pixel of a bilinear rotation: up to four `(source, weight)`
/// taps. Unused slots have zero weight.
type Taps = [(u32, f32); 4];

/// Sampling taps of a counterclockwise rotation by `degrees` about the
/// center `((cols-1)/2, (rows-1)/2)`. Source positions that fall outside the
/// image contribute zero.
pub(crate) fn rotation_taps(rows: usize, cols: usize, degrees: f64) -> Vec<Taps> {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (cols as f64 - 1.0) / 2.0;
    let cy = (rows as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            // Image rows grow downward; rotate in a y-up frame.
            let dx = c as f64 - cx;
            let dy = cy - r as f64;
            let sx = cos * dx + sin * dy;
            let sy = -sin * dx + cos * dy;
            let src_col = cx + sx;
            let src_row = cy - sy;
            let c0 = src_col.floor();
            let r0 = src_row.floor();
            let fx = src_col - c0;
            let fy = src_row - r0;
            let mut taps: Taps = [(0, 0.0); 4];
            let corners = [
                (r0, c0, (1.0 - fx) * (1.0 - fy)),
                (r0, c0 + 1.0, fx * (1.0 - fy)),
                (r0 + 1.0, c0, (1.0 - fx) * fy),
                (r0 + 1.0, c0 + 1.0, fx * fy),
            ];
            for (slot, (rr, cc, w)) in taps.iter_mut().zip(corners) {
                let inside = rr >= 0.0 && cc >= 0.0 && rr < rows as f64 && cc < cols as f64;
                if inside && w > 0.0 {
                    *slot = ((rr as usize * cols + cc as usize) as u32, w as f32);
                }
            }
            out.push(taps);
        }
    }
    out
}

/// Rotate a row-major image counterclockwise by `degrees` using bilinear
/// interpolation with zero fill.
pub fn rotate_bilinear(image: &[f32], rows: usize, cols: usize, degrees: f64) -> Vec<f32> {
    assert_eq!(image.len(), rows * cols, "image length must equal rows * cols");
    rotation_taps(rows, cols, degrees)
        .iter()
        .map(|taps| taps.iter().map(|&(src, w)| w * image[src as usize]).sum())
        .collect()
}

#[derive(Debug, Clone)]
enum PixelMap {
    Identity,
    Gather(Vec<usize>),
    Bilinear(Vec<Taps>),
}

impl PixelMap {
    fn fill(&self, raw: &[u8], mut out: ArrayViewMut1<f32>) {
        match self {
            PixelMap::Identity => {
                for (o, &p) in out.iter_mut().zip(raw) {
                    *o = p as f32 / 255.0;
                }
            }
            PixelMap::Gather(perm) => {
                for (o, &src) in out.iter_mut().zip(perm) {
                    *o = raw[src] as f32 / 255.0;
                }
            }
            PixelMap::Bilinear(taps) => {
                for (o, t) in out.iter_mut().zip(taps) {
                    let v: f32 = t.iter().map(|&(src, w)| w * raw[src as usize] as f32).sum();
                    *o = (v / 255.0).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// One classification task of a stream.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: usize,
    pub kind: TaskKind,
    pub transform: Transform,
    map: PixelMap,
    train: Arc<ImageSet>,
    validation: Arc<ImageSet>,
}

impl Task {
    pub fn train(&self) -> Split<'_> {
        Split {
            set: &self.train,
            map: &self.map,
        }
    }

    pub fn validation(&self) -> Split<'_> {
        Split {
            set: &self.validation,
            map: &self.map,
        }
    }
}

/// A task's train or validation examples, normalized to `[0, 1]` on demand.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    set: &'a ImageSet,
    map: &'a PixelMap,
}

impl<'a> Split<'a> {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn width(&self) -> usize {
        self.set.pixels()
    }

    pub fn labels(&self) -> &'a [u8] {
        self.set.labels()
    }

    pub fn label(&self, i: usize) -> usize {
        self.set.labels()[i] as usize
    }

    /// Transformed, normalized inputs for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Array2<f32> {
        let mut out = Array2::zeros((indices.len(), self.width()));
        for (row, &i) in out.rows_mut().into_iter().zip(indices) {
            self.map.fill(self.set.image(i), row);
        }
        out
    }

    /// Write example `i` into `out`, which must have [`Split::width`] entries.
    pub fn write_example(&self, i: usize, out: ArrayViewMut1<f32>) {
        assert_eq!(out.len(), self.width(), "output row has the wrong width");
        self.map.fill(self.set.image(i), out);
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.label(i)).collect()
    }

    pub fn image(&self, i: usize) -> Vec<f32> {
        self.batch(&[i]).into_raw_vec_and_offset().0
    }

    /// Every example in order.
    pub fn all_inputs(&self) -> Array2<f32> {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    /// Consecutive `(inputs, labels)` chunks covering the split in order.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = (Array2<f32>, Vec<usize>)> + 'a {
        let split = *self;
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let idx: Vec<usize> = (start..(start + size).min(split.len())).collect();
            (split.batch(&idx), split.batch_labels(&idx))
        })
    }
}

/// Ordered tasks sharing one base dataset.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub kind: TaskKind,
    /// Seed of the permutation draws; `None` for rotated streams.
    pub seed: Option<u64>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_width(&self) -> usize {
        self.tasks.first().map_or(0, |t| t.train().width())
    }

    /// Keep only the first `count` tasks.
    pub fn truncated(&self, count: usize) -> TaskStream {
        TaskStream {
            kind: self.kind,
            seed: self.seed,
            tasks: self.tasks.iter().take(count).cloned().collect(),
        }
    }
}

fn check_base(train: &ImageSet, validation: &ImageSet, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Validation("a task stream needs at least one task".into()));
    }
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Validation("base train and validation sets must be nonempty".into()));
    }
    if (train.rows(), train.cols()) != (validation.rows(), validation.cols()) {
        return Err(Error::Shape(format!(
            "train images are {}x{}, validation images {}x{}",
            train.rows(),
            train.cols(),
            validation.rows(),
            validation.cols()
        )));
    }
    Ok(())
}

/// Task 0 keeps the original pixel order; tasks `1..count` apply independent
/// uniform permutations drawn by Fisher–Yates from the seeded generator.
pub fn make_permuted_stream(
    train: Arc<ImageSet>,
    validation: Arc<ImageSet>,
    count: usize,
    seed: u64,
) -> Result<TaskStream> {
    check_base(&train, &validation, count)?;
    let pixels = train.pixels();
    let mut rng = seeded_rng(seed);
    let tasks = (0..count)
        .map(|id| {
            let mut perm: Vec<usize> = (0..pixels).collect();
            let map = if id == 0 {
                PixelMap::Identity
            } else {
                perm.shuffle(&mut rng);
                PixelMap::Gather(perm.clone())
            };
            Task {
                id,
                kind: TaskKind::Permuted,
                transform: Transform::Permutation(perm),
                map,
                train: Arc::clone(&train),
                validation: Arc::clone(&validation),
            }
        })
        .collect();
    Ok(TaskStream {
        kind: TaskKind::Permuted,
        seed: Some(seed),
        tasks,
    })
}

/// Task `k` rotates every image by `10·k` degrees counterclockwise.
pub fn make_rotated_stream(train: Arc<ImageSet>, validation: Arc<ImageSet>, count: usize) -> Result<TaskStream> {
    check_base(&train, &validation, count)?;
    let (rows, cols) = (train.rows(), train.cols());
    let tasks = (0..count)
        .map(|id| {
            let degrees = ROTATION_STEP_DEGREES * id as f64;
            let map = if id == 0 {
                PixelMap::Identity
            } else {
                PixelMap::Bilinear(rotation_taps(rows, cols, degrees))
            };
            Task {
                id,
                kind: TaskKind::Rotated,
                transform: Transform::Rotation { degrees },
                map,
                train: Arc::clone(&train),
                validation: Arc::clone(&validation),
            }
        })
        .collect();
    Ok(TaskStream {
        kind: TaskKind::Rotated,
        seed: None,
        tasks,
    })
}

/// Build either stream kind. The seed only affects permuted streams.
pub fn make_stream(
    kind: TaskKind,
    train: Arc<ImageSet>,
    validation: Arc<ImageSet>,
    count: usize,
    seed: u64,
) -> Result<TaskStream> {
    match kind {
        TaskKind::Permuted => make_permuted_stream(train, validation, count, seed),
        TaskKind::Rotated => make_rotated_stream(train, validation, count),
    }
}
