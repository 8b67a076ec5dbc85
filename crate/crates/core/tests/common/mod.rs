//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use dropgate::data::{ImageSet, TaskStream};
use dropgate::metrics::AccuracyMatrix;
use dropgate::nn::{softmax_cross_entropy, DenseNet};
use dropgate::{seeded_rng, Rng as RunRng};
use ndarray::{Array2, Array3};
use rand::Rng;

pub const SIDE: usize = 28;

/// Ten separable classes on 28×28 images: class `c` lights a horizontal bar
/// at rows `2c+2..2c+5`, plus seeded noise.
pub fn synthetic_set(n: usize, seed: u64) -> ImageSet {
    let mut rng = seeded_rng(seed);
    let mut images = Array3::<u8>::zeros((n, SIDE, SIDE));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 10;
        labels.push(c as u8);
        for r in 0..SIDE {
            for col in 0..SIDE {
                let on = (2 * c + 2..2 * c + 5).contains(&r) && (4..24).contains(&col);
                let noise: u8 = rng.gen_range(0..40);
                images[[i, r, col]] = if on { 200 + noise / 2 } else { noise };
            }
        }
    }
    ImageSet::new(images, labels).expect("valid fixture")
}

pub fn synthetic_pair(train: usize, validation: usize) -> (Arc<ImageSet>, Arc<ImageSet>) {
    (Arc::new(synthetic_set(train, 1)), Arc::new(synthetic_set(validation, 2)))
}

pub fn synthetic_stream(tasks: usize, seed: u64) -> TaskStream {
    let (train, validation) = synthetic_pair(300, 100);
    dropgate::data::make_permuted_stream(train, validation, tasks, seed).unwrap()
}

pub fn random_net(widths: &[usize], keep_prob: f64, rng: &mut RunRng) -> DenseNet<f64> {
    let mut net = DenseNet::<f64>::new(widths, keep_prob, rng).unwrap();
    // Nonzero biases so every parameter is exercised.
    let flat: Vec<f64> = net.flat_params().iter().map(|w| w + rng.gen_range(-0.1..0.1)).collect();
    net.set_flat_params(&flat).unwrap();
    net
}

/// Worst relative error between backprop and central differences of the
/// mean cross-entropy, with the dropout masks held fixed.
pub fn finite_difference_error(
    net: &DenseNet<f64>,
    x: &Array2<f64>,
    labels: &[usize],
    masks: Vec<Array2<f64>>,
) -> f64 {
    let trace = net.forward_with_masks(x.view(), masks.clone()).unwrap();
    let (_, grads) = net.loss_and_backward(&trace, labels).unwrap();
    let analytic = grads.flatten();
    let theta = net.flat_params();
    let loss_at = |params: &[f64]| {
        let mut probe = net.clone();
        probe.set_flat_params(params).unwrap();
        let t = probe.forward_with_masks(x.view(), masks.clone()).unwrap();
        softmax_cross_entropy(&t.logits, labels).unwrap().0
    };
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let mut plus = theta.clone();
        plus[k] += h;
        let mut minus = theta.clone();
        minus[k] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        // Absolute floor keeps exactly-zero gradients (gated units) from
        // dividing by round-off.
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}

/// `A_t` by a plain double loop over a full row-list matrix (1-based `t`).
#[allow(clippy::needless_range_loop)]
pub fn brute_average(rows: &[Vec<f64>], t: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..t {
        sum += rows[t - 1][i];
    }
    sum / t as f64
}

/// Forgetting by a plain double loop: for each `i < T-1`, the best earlier
/// accuracy on task `i` minus the final one, averaged.
pub fn brute_forgetting(rows: &[Vec<f64>]) -> f64 {
    let t_total = rows.len();
    let mut sum = 0.0;
    for i in 0..t_total - 1 {
        let mut best = f64::NEG_INFINITY;
        for row in rows.iter().take(t_total - 1).skip(i) {
            if row[i] > best {
                best = row[i];
            }
        }
        sum += best - rows[t_total - 1][i];
    }
    sum / (t_total - 1) as f64
}

/// Random complete lower-triangular matrix with entries on a 1/1000 grid.
pub fn random_matrix(rng: &mut RunRng) -> (Vec<Vec<f64>>, AccuracyMatrix) {
    let t = rng.gen_range(2..=8);
    let rows: Vec<Vec<f64>> = (1..=t)
        .map(|r| (0..r).map(|_| rng.gen_range(0..=1000) as f64 / 1000.0).collect())
        .collect();
    let matrix = AccuracyMatrix::from_rows(rows.clone()).unwrap();
    (rows, matrix)
}

/// Rotation written independently of the library: complex multiplication
/// in a y-up frame about the pixel-grid center, bilinear, zero fill.
pub fn oracle_rotate(image: &[f32], rows: usize, cols: usize, degrees: f64) -> Vec<f32> {
    let a = degrees.to_radians();
    // A counterclockwise turn by `a` samples the source at z · e^{-ia}.
    let (re, im) = (a.cos(), -a.sin());
    let (cx, cy) = ((cols - 1) as f64 / 2.0, (rows - 1) as f64 / 2.0);
    let at = |r: i64, c: i64| -> f64 {
        if r < 0 || c < 0 || r >= rows as i64 || c >= cols as i64 {
            0.0
        } else {
            image[r as usize * cols + c as usize] as f64
        }
    };
    let mut out = vec![0.0f32; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (c as f64 - cx, cy - r as f64);
            let (sx, sy) = (x * re - y * im, x * im + y * re);
            let (fc, fr) = (cx + sx, cy - sy);
            let (c0, r0) = (fc.floor(), fr.floor());
            let (u, v) = (fc - c0, fr - r0);
            let (c0, r0) = (c0 as i64, r0 as i64);
            let value = at(r0, c0) * (1.0 - u) * (1.0 - v)
                + at(r0, c0 + 1) * u * (1.0 - v)
                + at(r0 + 1, c0) * (1.0 - u) * v
                + at(r0 + 1, c0 + 1) * u * v;
            out[r * cols + c] = value as f32;
        }
    }
    out
}

/// A smooth digit-like ring with a stroke, zero near the borders.
pub fn ring_image() -> Vec<f32> {
    let mut img = vec![0.0f32; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (y, x) = (r as f64 - 13.5, c as f64 - 13.5);
            let ring = (-(((x * x + y * y).sqrt() - 7.0).powi(2)) / 4.0).exp();
            let stroke = (-((x - 0.6 * y).powi(2)) / 3.0).exp() * (y.abs() < 9.0) as i32 as f64;
            img[r * SIDE + c] = ring.max(stroke) as f32;
        }
    }
    img
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va.sqrt() * vb.sqrt())
}
