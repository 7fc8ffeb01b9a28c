//! Key-locked, gated rank-1 editing of cross-attention projections.
//!
//! The crate is organized bottom-up:
//!
//! - [`metric`]: the `C⁻¹` inner-product geometry (covariance estimation,
//!   Cholesky factor, similarities, orthogonal projections).
//! - [`rank1`]: closed-form and reformulated rank-1 edits, logistic gating,
//!   multi-concept composition, and the online target-input estimate.
//! - [`textenc`]: a small deterministic text encoder with causal mixing.
//! - [`diffuser`]: cross-attention denoiser, noise schedule, DDIM sampler.
//! - [`personalize`]: concept initialization, training, key-locking, and the
//!   train/inference mismatch experiment.
//! - [`store`]: binary concept, covariance, and feature-grid files.

pub mod diffuser;
pub mod error;
pub mod metric;
pub mod personalize;
pub mod rank1;
pub mod rng;
pub mod store;
pub mod textenc;

#[cfg(test)]
pub(crate) mod testutil;

pub type Vector = nalgebra::DVector<f64>;
pub type Matrix = nalgebra::DMatrix<f64>;

pub use diffuser::{attention_spread, AttentionMaps, CrossAttentionLayer, FeatureGrid, Schedule, ToyDenoiser};
pub use error::{Error, Result};
pub use metric::{estimate_covariance, ConceptBasis, MetricSpace};
pub use personalize::{Concept, ConceptWeights, LockMode, TrainConfig, TrainingSample};
pub use rank1::{gate_value, rome_closed_form, ConceptEdit, EditedProjection, GateParams, PassMode};
pub use store::Precision;
pub use textenc::{EncodedPrompt, TextEncoder, Vocabulary};
