//! Continual-learning laboratory for studying dropout as an implicit gating
//! mechanism.
//!
//! The crate trains small ReLU networks sequentially on permuted or rotated
//! MNIST task streams and measures how much they forget. Six training methods
//! are available (plain SGD, SGD with dropout, EWC, A-GEM, OGD and a
//! multi-task upper bound). The [`gating`] module inspects per-neuron firing
//! frequencies to quantify how sparse and how stable the learned gates are.
//!
//! Module map:
//!
//! - [`nn`]: dense network, inverted dropout, manual backprop, SGD with momentum.
//! - [`data`]: IDX parsing and task-stream construction.
//! - [`methods`]: the sequential training loop and method-specific state.
//! - [`metrics`]: accuracy, average accuracy `A_t` and forgetting `F`.
//! - [`gating`]: firing profiles, sparsity, consistency and dropout variance.
//! - [`harness`]: experiment configs, presets, run artifacts and summaries.

pub mod data;
pub mod error;
pub mod gating;
pub mod harness;
pub mod methods;
pub mod metrics;
pub mod nn;

pub use error::{Error, Result};

/// Name of the pseudo-random generator used for every seeded draw. Recorded
/// in run metadata.
pub const RNG_NAME: &str = "ChaCha8Rng";

pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's seeded generator.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
