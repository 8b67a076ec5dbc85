//! Continual-learning methods and the sequential training loop.
//!
//! `sgd` and `sgd_dropout` differ only in configuration. `ewc`, `agem` and
//! `ogd` add per-task state that shapes later gradients; `mtl` trains on
//! pooled data and is the non-continual reference.

mod agem;
mod config;
mod ewc;
mod ogd;
mod train;

pub use agem::{agem_project, agem_project_f32, EpisodicMemory, REFERENCE_BATCH, REF_NORM_FLOOR};
pub use config::{Method, MethodConfig};
pub use ewc::{ewc_consolidate, ewc_penalty_grad, fisher_diagonal, EwcState};
pub use ogd::{
    extend_basis_with, logit_gradients, ogd_extend_basis, ogd_project, orthonormality_error, OgdBasis,
    RESIDUAL_FLOOR,
};
pub use train::{
    curves_from_csv, curves_to_csv, mtl_train, mtl_train_with, train_continual, train_continual_with,
    CurvePoint, PooledSampler, RunResult,
};
