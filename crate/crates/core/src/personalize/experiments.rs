use crate::diffuser::{attention_spread, ToyPipeline};
use crate::error::{ensure, Result};
use crate::personalize::conditioning::{prepare_layers, Pathway};
use crate::personalize::{
    evaluate, init_concept, overrides, train_concept, train_concept_with, validation_draws, Concept, ConceptSlot, Draw, EditPath,
    TrainConfig, TrainingSample,
};
use crate::rank1::GateParams;

/// Number of held-out draws behind every reported validation loss.
pub const VALIDATION_DRAWS: usize = 32;

/// Validation loss of a concept through the gated pass with its training gate.
pub fn validation_loss(pipeline: &ToyPipeline, concept: &Concept, dataset: &[TrainingSample], draws: &[Draw]) -> Result<f64> {
    evaluate(pipeline, &concept.weights, dataset, draws, EditPath::Gated, concept.train_gate)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MismatchReport {
    /// Placeholder-only variant, scored the way it was trained.
    pub a_train_view: f64,
    /// Placeholder-only variant, scored with its closed-form weight update
    /// applied to every token.
    pub a_eval: f64,
    /// End-to-end variant trained and scored through the linear-ratio pass.
    pub b_loss: f64,
    /// The end-to-end variant scored through the gated pass.
    pub b_gated: f64,
}

impl MismatchReport {
    pub fn gap(&self) -> f64 {
        self.a_eval - self.b_loss
    }

    /// How much worse the placeholder-only variant scores once its edit is
    /// applied to every token.
    pub fn train_view_gap(&self) -> f64 {
        self.a_eval - self.a_train_view
    }
}

/// Trains the value target-outputs two ways, with the embedding frozen so
/// that both variants edit the same target-input, and scores both on the
/// same held-out draws.
pub fn reproduce_mismatch(
    pipeline: &ToyPipeline,
    dataset: &[TrainingSample],
    superclass: &str,
    cfg: &TrainConfig,
) -> Result<MismatchReport> {
    let cfg = TrainConfig { lr_embed: 0.0, ..*cfg };
    let init = init_concept(pipeline, "S*", superclass)?;
    let draws = validation_draws(pipeline, dataset.len(), VALIDATION_DRAWS, cfg.seed);
    let a = train_concept_with(&init, dataset, &cfg, pipeline, EditPath::Replacement)?.concept;
    let b = train_concept_with(&init, dataset, &cfg, pipeline, EditPath::Ungated)?.concept;
    Ok(MismatchReport {
        a_train_view: evaluate(pipeline, &a.weights, dataset, &draws, EditPath::Replacement, cfg.gate)?,
        a_eval: evaluate(pipeline, &a.weights, dataset, &draws, EditPath::ClosedForm, cfg.gate)?,
        b_loss: evaluate(pipeline, &b.weights, dataset, &draws, EditPath::Ungated, cfg.gate)?,
        b_gated: evaluate(pipeline, &b.weights, dataset, &draws, EditPath::Gated, cfg.gate)?,
    })
}

/// Mean normalized entropy of the placeholder's attention map, over layers
/// and draws, with the concept entering through the gated pass.
pub fn concept_attention_spread(
    pipeline: &ToyPipeline,
    concept: &Concept,
    dataset: &[TrainingSample],
    draws: &[Draw],
    gate: GateParams,
) -> Result<f64> {
    ensure(!draws.is_empty(), || "no draws".into())?;
    let mut slot = ConceptSlot::new(concept);
    slot.beta = gate.beta;
    let layers = prepare_layers(pipeline, std::slice::from_ref(&slot), gate.tau, Pathway::Gated, Pathway::Gated, None)?;
    let denoiser = pipeline.denoiser();
    let (mut total, mut count) = (0.0, 0usize);
    for d in draws {
        let sample = &dataset[d.sample];
        let ep = pipeline.encoder().encode(&sample.prompt, &overrides(std::slice::from_ref(&slot)))?;
        let s = ep.concept_index.expect("training prompts contain the placeholder");
        let kv = crate::diffuser::KvSequences {
            keys: layers.keys.iter().map(|p| p.forward_rows(&ep.encodings)).collect(),
            values: layers.values.iter().map(|p| p.forward_rows(&ep.encodings)).collect(),
        };
        let a = denoiser.schedule().alpha_bar(d.t);
        let x_t = sample.target.data() * a.sqrt() + &d.eps * (1.0 - a).sqrt();
        let trace = denoiser.forward(&x_t, d.t, &kv)?;
        for maps in denoiser.attention_maps(&trace) {
            total += attention_spread(&maps.map(s))?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationReport {
    pub locked_spread: f64,
    pub trained_spread: f64,
    pub locked_loss: f64,
    pub trained_loss: f64,
}

/// Trains a key-locked and a trained-key concept on the same data and
/// compares the spread of their placeholder attention.
pub fn key_lock_ablation(
    pipeline: &ToyPipeline,
    dataset: &[TrainingSample],
    superclass: &str,
    cfg: &TrainConfig,
) -> Result<AblationReport> {
    let locked_init = init_concept(pipeline, "S*", superclass)?;
    let trained_init = Concept {
        keys_trainable: true,
        ..locked_init.clone()
    };
    let locked = train_concept(&locked_init, dataset, cfg, pipeline)?.concept;
    let trained = train_concept(&trained_init, dataset, cfg, pipeline)?.concept;
    let draws = validation_draws(pipeline, dataset.len(), VALIDATION_DRAWS, cfg.seed);
    Ok(AblationReport {
        locked_spread: concept_attention_spread(pipeline, &locked, dataset, &draws, cfg.gate)?,
        trained_spread: concept_attention_spread(pipeline, &trained, dataset, &draws, cfg.gate)?,
        locked_loss: validation_loss(pipeline, &locked, dataset, &draws)?,
        trained_loss: validation_loss(pipeline, &trained, dataset, &draws)?,
    })
}
