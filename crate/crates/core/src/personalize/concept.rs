use std::fmt;
use std::str::FromStr;

use crate::diffuser::ToyPipeline;
use crate::error::{Error, Result};
use crate::rank1::{ConceptEdit, GateParams};
use crate::textenc::{superclass_target, INIT_TEMPLATE};
use crate::Vector;

/// Bias and temperature used at inference time.
pub const INFERENCE_TAU: f64 = 0.15;

/// The learned and estimated state of one concept: everything a concept
/// file stores.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWeights {
    /// Word embedding of the placeholder token.
    pub embedding: Vector,
    /// Online estimate of the target-input, shared by every layer.
    pub i_star: Vector,
    /// Per-layer key target-outputs (frozen when key-locked).
    pub key_targets: Vec<Vector>,
    /// Per-layer value target-outputs (learned).
    pub value_targets: Vec<Vector>,
    /// Gate bias the concept was trained with.
    pub beta: f64,
}

impl ConceptWeights {
    pub fn layer_count(&self) -> usize {
        self.value_targets.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().all(|x| x.is_finite())
            && self.i_star.iter().all(|x| x.is_finite())
            && self.key_targets.iter().flatten().all(|x| x.is_finite())
            && self.value_targets.iter().flatten().all(|x| x.is_finite())
            && self.beta.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Concept {
    pub name: String,
    pub superclass: String,
    pub weights: ConceptWeights,
    /// `false` when keys are locked to the superclass (the default).
    pub keys_trainable: bool,
    pub train_gate: GateParams,
}

impl Concept {
    pub fn key_edit(&self, layer: usize) -> ConceptEdit {
        ConceptEdit::new(
            self.weights.i_star.clone(),
            self.weights.key_targets[layer].clone(),
            self.keys_trainable,
            self.weights.beta,
        )
    }

    pub fn value_edit(&self, layer: usize) -> ConceptEdit {
        ConceptEdit::new(
            self.weights.i_star.clone(),
            self.weights.value_targets[layer].clone(),
            true,
            self.weights.beta,
        )
    }
}

/// Starts a concept at its superclass: the embedding is copied, `i*` is the
/// superclass encoding in the init template, and every target-output is what
/// the unedited layer emits for it.
pub fn init_concept(pipeline: &ToyPipeline, name: &str, superclass: &str) -> Result<Concept> {
    let encoder = pipeline.encoder();
    let embedding = encoder.embedding(superclass)?.clone();
    let i_star = encoder.superclass_encoding(INIT_TEMPLATE, superclass)?;
    let mut key_targets = Vec::with_capacity(pipeline.layer_count());
    let mut value_targets = Vec::with_capacity(pipeline.layer_count());
    for l in 0..pipeline.layer_count() {
        key_targets.push(superclass_target(encoder, INIT_TEMPLATE, superclass, pipeline.w_k(l))?);
        value_targets.push(pipeline.w_v(l) * &i_star);
    }
    Ok(Concept {
        name: name.to_string(),
        superclass: superclass.to_string(),
        weights: ConceptWeights {
            embedding,
            i_star,
            key_targets,
            value_targets,
            beta: GateParams::TRAINING.beta,
        },
        keys_trainable: false,
        train_gate: GateParams::TRAINING,
    })
}

/// How the key pathway of an edited prompt is formed at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockMode {
    /// Keys use the unedited projection.
    None,
    /// Keys use the gated edit towards the superclass key.
    #[default]
    Local,
    /// Keys of the whole prompt come from the superclass prompt.
    Global,
}

impl LockMode {
    /// Inference-time gate bias: midpoints of the ranges that work for
    /// local (0.6–0.75) and global (0.4–0.6) locking.
    pub fn default_beta(self) -> f64 {
        match self {
            LockMode::None | LockMode::Local => 0.675,
            LockMode::Global => 0.5,
        }
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LockMode::None => "none",
            LockMode::Local => "local",
            LockMode::Global => "global",
        })
    }
}

impl FromStr for LockMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(LockMode::None),
            "local" => Ok(LockMode::Local),
            "global" => Ok(LockMode::Global),
            other => Err(Error::Contract(format!("unknown lock mode {other:?}"))),
        }
    }
}
