use crate::diffuser::{ddim_sample, AttentionMaps, Branch, FeatureGrid, ToyPipeline};
use crate::error::Result;
use crate::personalize::{condition, ConceptSlot, Conditioning, LockMode, INFERENCE_TAU};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenerateConfig {
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
    pub lock: LockMode,
    pub tau: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            guidance: 1.0,
            seed: 0,
            lock: LockMode::Local,
            tau: INFERENCE_TAU,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub grid: FeatureGrid,
    /// Per-layer conditional attention of the final sampling step.
    pub attention: Vec<AttentionMaps>,
    pub conditioning: Conditioning,
}

/// DDIM sampling conditioned on a prompt with bound concepts.
pub fn generate(pipeline: &ToyPipeline, tokens: &[String], slots: &[ConceptSlot<'_>], cfg: &GenerateConfig) -> Result<Generation> {
    let conditioning = condition(pipeline, tokens, slots, cfg.lock, cfg.tau)?;
    let uncond = pipeline.base_kv(&pipeline.unconditional_prompt()?);
    let denoiser = pipeline.denoiser();
    let dc = denoiser.config();
    let mut attention = Vec::new();
    let grid = ddim_sample(
        |x, t, branch| match branch {
            Branch::Conditional => {
                let trace = denoiser.forward(x, t, &conditioning.kv)?;
                attention = denoiser.attention_maps(&trace);
                Ok(trace.eps_hat)
            }
            Branch::Unconditional => denoiser.predict_eps(x, t, &uncond),
        },
        dc.height,
        dc.width,
        dc.d_f,
        denoiser.schedule(),
        cfg.steps,
        cfg.guidance,
        cfg.seed,
    )?;
    Ok(Generation {
        grid,
        attention,
        conditioning,
    })
}
