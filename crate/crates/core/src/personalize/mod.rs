//! Concept initialization, training, key-locking, and generation.

mod concept;
mod conditioning;
mod dataset;
mod experiments;
mod generate;
mod train;

#[cfg(test)]
mod tests;

pub use concept::{init_concept, Concept, ConceptWeights, LockMode, INFERENCE_TAU};
pub use conditioning::{condition, global_key_lock, overrides, ConceptSlot, Conditioning};
pub use dataset::{elliptical_mask, normalize_mask, synthetic_dataset, teacher_weights, SyntheticConfig, TrainingSample};
pub use experiments::{
    concept_attention_spread, key_lock_ablation, reproduce_mismatch, validation_loss, AblationReport, MismatchReport,
    VALIDATION_DRAWS,
};
pub use generate::{generate, GenerateConfig, Generation};
pub use train::{
    evaluate, loss_and_grad, masked_loss, random_draws, render_clean, train_concept, train_concept_with, validation_draws,
    ConceptGrad, Draw, EditPath, StepLog, TrainConfig, TrainOutcome,
};
