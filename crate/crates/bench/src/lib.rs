//! Fixtures shared by the benchmarks: a toy pipeline with trained-looking
//! concepts attached.

use klr_core::diffuser::{KvSequences, PipelineConfig, ToyPipeline};
use klr_core::personalize::{condition, init_concept, Concept, ConceptSlot, LockMode, INFERENCE_TAU};
use klr_core::textenc::tokenize;
use klr_core::Result;

pub struct Fixture {
    pub pipeline: ToyPipeline,
    pub concepts: Vec<Concept>,
}

impl Fixture {
    pub fn new() -> Result<Self> {
        let pipeline = ToyPipeline::new(PipelineConfig::default())?;
        let concepts = ["teddy", "cat", "dog"]
            .iter()
            .enumerate()
            .map(|(j, sup)| {
                let mut c = init_concept(&pipeline, &format!("S{}", j + 1), sup)?;
                c.weights.value_targets.iter_mut().for_each(|v| v.add_scalar_mut(0.1 * (j + 1) as f64));
                Ok(c)
            })
            .collect::<Result<_>>()?;
        Ok(Self { pipeline, concepts })
    }

    /// Keys and values of a prompt with one concept bound to `S*`.
    pub fn single_kv(&self, prompt: &str) -> Result<KvSequences> {
        let slot = ConceptSlot::new(&self.concepts[0]);
        Ok(condition(&self.pipeline, &tokenize(prompt), &[slot], LockMode::Local, INFERENCE_TAU)?.kv)
    }
}
