use std::collections::HashMap;

use crate::diffuser::{KvSequences, ToyPipeline};
use crate::error::{ensure, Error, Result};
use crate::metric::ConceptBasis;
use crate::personalize::{Concept, ConceptWeights, LockMode};
use crate::rank1::{ConceptEdit, EditedProjection, GateParams, PassMode, PreparedProjection};
use crate::textenc::{substitute, EncodedPrompt, PLACEHOLDER};
use crate::Vector;

/// One concept bound to a placeholder token of a prompt.
#[derive(Debug, Clone)]
pub struct ConceptSlot<'a> {
    pub placeholder: String,
    pub weights: &'a ConceptWeights,
    /// Needed for global key-locking only.
    pub superclass: Option<String>,
    /// Gate bias used for this concept.
    pub beta: f64,
}

impl<'a> ConceptSlot<'a> {
    /// Binds a concept to `S*` with its training bias.
    pub fn new(concept: &'a Concept) -> Self {
        Self {
            placeholder: PLACEHOLDER.to_string(),
            weights: &concept.weights,
            superclass: Some(concept.superclass.clone()),
            beta: concept.weights.beta,
        }
    }
}

/// Encoded prompt plus the per-layer key and value rows it conditions on.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub prompt: EncodedPrompt,
    pub kv: KvSequences,
    /// Gate values per token (rows) and concept (columns) of the first
    /// value projection.
    pub gates: Vec<Vec<f64>>,
    pub ratios: Vec<Vec<f64>>,
}

fn edited(base: &EditedProjection, edits: Vec<ConceptEdit>, tau: f64) -> Result<EditedProjection> {
    let mut p = base.clone();
    p.clear_edits();
    p.set_tau(tau)?;
    for e in edits {
        p.push_edit(e)?;
    }
    Ok(p)
}

/// Prepared per-layer key and value passes for a set of concepts.
#[derive(Debug, Clone)]
pub(crate) struct PreparedLayers {
    pub keys: Vec<PreparedProjection>,
    pub values: Vec<PreparedProjection>,
}

/// Which pass each pathway runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Pathway {
    Base,
    Ungated,
    Gated,
}

pub(crate) fn prepare_layers(
    pipeline: &ToyPipeline,
    slots: &[ConceptSlot<'_>],
    tau: f64,
    keys: Pathway,
    values: Pathway,
    basis: Option<&ConceptBasis>,
) -> Result<PreparedLayers> {
    let mut out = PreparedLayers {
        keys: Vec::new(),
        values: Vec::new(),
    };
    for (l, layer) in pipeline.denoiser().layers().iter().enumerate() {
        let key_edits = slots
            .iter()
            .map(|s| ConceptEdit::new(s.weights.i_star.clone(), s.weights.key_targets[l].clone(), false, s.beta))
            .collect();
        let value_edits = slots
            .iter()
            .map(|s| ConceptEdit::new(s.weights.i_star.clone(), s.weights.value_targets[l].clone(), true, s.beta))
            .collect();
        out.keys.push(prepare_one(&layer.w_k, key_edits, tau, keys, basis)?);
        out.values.push(prepare_one(&layer.w_v, value_edits, tau, values, basis)?);
    }
    Ok(out)
}

fn prepare_one(
    base: &EditedProjection,
    edits: Vec<ConceptEdit>,
    tau: f64,
    pathway: Pathway,
    basis: Option<&ConceptBasis>,
) -> Result<PreparedProjection> {
    if pathway == Pathway::Base || edits.is_empty() {
        return base.prepare(PassMode::Base);
    }
    let p = edited(base, edits, tau)?;
    match (pathway, basis) {
        (Pathway::Ungated, None) => p.prepare(PassMode::Ungated),
        (Pathway::Gated, None) => p.prepare(PassMode::Gated(None)),
        (Pathway::Gated, Some(b)) => p.prepare(PassMode::Gated(Some(b))),
        _ => Err(Error::Contract("ungated pass is single-concept only".into())),
    }
}

fn check_slots(pipeline: &ToyPipeline, slots: &[ConceptSlot<'_>]) -> Result<()> {
    let d_w = pipeline.encoder().d_w();
    let d_e = pipeline.encoder().d_e();
    for s in slots {
        let w = s.weights;
        ensure(w.embedding.len() == d_w && w.i_star.len() == d_e, || {
            format!(
                "concept for {} has d_w = {}, d_e = {}; pipeline has d_w = {d_w}, d_e = {d_e}",
                s.placeholder,
                w.embedding.len(),
                w.i_star.len()
            )
        })?;
        ensure(w.layer_count() == pipeline.layer_count() && w.key_targets.len() == pipeline.layer_count(), || {
            format!("concept for {} has {} layers, pipeline has {}", s.placeholder, w.layer_count(), pipeline.layer_count())
        })?;
        for l in 0..pipeline.layer_count() {
            let layer = &pipeline.denoiser().layers()[l];
            ensure(w.key_targets[l].len() == layer.d_k() && w.value_targets[l].len() == layer.d_v(), || {
                format!(
                    "concept for {} layer {l} has d_k = {}, d_v = {}; pipeline has d_k = {}, d_v = {}",
                    s.placeholder,
                    w.key_targets[l].len(),
                    w.value_targets[l].len(),
                    layer.d_k(),
                    layer.d_v()
                )
            })?;
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in slots {
        ensure(seen.insert(s.placeholder.as_str()), || format!("placeholder {} bound twice", s.placeholder))?;
    }
    Ok(())
}

/// Embedding overrides binding each placeholder to its concept.
pub fn overrides(slots: &[ConceptSlot<'_>]) -> HashMap<String, Vector> {
    slots.iter().map(|s| (s.placeholder.clone(), s.weights.embedding.clone())).collect()
}

/// Keys and values for a prompt conditioned on zero or more concepts.
///
/// Values always run the gated pass (multi-concept over an orthonormal basis
/// when more than one concept is bound). Keys follow `lock`: the unedited
/// projection, the gated edit towards the frozen superclass keys, or the
/// unedited keys of the prompt with every placeholder replaced by its
/// superclass.
pub fn condition(
    pipeline: &ToyPipeline,
    tokens: &[String],
    slots: &[ConceptSlot<'_>],
    lock: LockMode,
    tau: f64,
) -> Result<Conditioning> {
    check_slots(pipeline, slots)?;
    for s in slots {
        ensure(tokens.contains(&s.placeholder), || {
            format!("prompt does not contain placeholder {}", s.placeholder)
        })?;
    }
    let prompt = pipeline.encoder().encode(tokens, &overrides(slots))?;
    if slots.is_empty() {
        let kv = pipeline.base_kv(&prompt);
        let n = prompt.len();
        return Ok(Conditioning {
            prompt,
            kv,
            gates: vec![Vec::new(); n],
            ratios: vec![Vec::new(); n],
        });
    }
    GateParams::new(0.0, tau)?;
    let basis = if slots.len() > 1 {
        let targets: Vec<Vector> = slots.iter().map(|s| s.weights.i_star.clone()).collect();
        Some(pipeline.metric().orthonormal_basis(&targets)?)
    } else {
        None
    };
    let key_path = match lock {
        LockMode::Local => Pathway::Gated,
        LockMode::None | LockMode::Global => Pathway::Base,
    };
    let layers = prepare_layers(pipeline, slots, tau, key_path, Pathway::Gated, basis.as_ref())?;
    let mut keys: Vec<_> = layers.keys.iter().map(|p| p.forward_rows(&prompt.encodings)).collect();
    if lock == LockMode::Global {
        keys = global_keys(pipeline, tokens, slots)?.keys;
    }
    let values = layers.values.iter().map(|p| p.forward_rows(&prompt.encodings)).collect();
    let (ratios, gates) = (0..prompt.len())
        .map(|m| {
            let row = layers.values[0].forward_row(&prompt.row(m));
            (row.ratios, row.gates)
        })
        .unzip();
    Ok(Conditioning {
        prompt,
        kv: KvSequences { keys, values },
        gates,
        ratios,
    })
}

/// Unedited keys of the prompt with placeholders replaced by superclasses.
fn global_keys(pipeline: &ToyPipeline, tokens: &[String], slots: &[ConceptSlot<'_>]) -> Result<KvSequences> {
    let mut replaced = tokens.to_vec();
    for s in slots {
        let sup = s
            .superclass
            .as_deref()
            .ok_or_else(|| Error::Contract(format!("global key-locking needs a superclass for {}", s.placeholder)))?;
        replaced = substitute(&replaced, &s.placeholder, sup);
    }
    let ep = pipeline.encoder().encode(&replaced, &HashMap::new())?;
    Ok(pipeline.base_kv(&ep))
}

/// Global key-locking for a single concept: values from the concept prompt
/// through the gated pass, keys from the superclass prompt through the
/// unedited projection.
pub fn global_key_lock(pipeline: &ToyPipeline, tokens: &[String], concept: &Concept, gate: GateParams) -> Result<KvSequences> {
    ensure(tokens.iter().any(|t| t == PLACEHOLDER), || format!("prompt does not contain {PLACEHOLDER}"))?;
    let mut slot = ConceptSlot::new(concept);
    slot.beta = gate.beta;
    Ok(condition(pipeline, tokens, &[slot], LockMode::Global, gate.tau)?.kv)
}
