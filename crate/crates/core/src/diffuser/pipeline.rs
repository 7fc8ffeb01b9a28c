use std::collections::HashMap;
use std::sync::Arc;

use crate::diffuser::{DenoiserConfig, KvSequences, Schedule, ToyDenoiser};
use crate::error::Result;
use crate::metric::{default_ridge, estimate_covariance, MetricSpace};
use crate::textenc::{tokenize, EncodedPrompt, EncoderConfig, TextEncoder, Vocabulary};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub denoiser: DenoiserConfig,
    /// Random prompts whose encodings estimate the covariance.
    pub covariance_prompts: usize,
    /// Covariance ridge; `None` selects `1e-6·trace(C)/d_e`.
    pub ridge: Option<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            encoder: EncoderConfig::default(),
            denoiser: DenoiserConfig::default(),
            covariance_prompts: 400,
            ridge: None,
        }
    }
}

impl PipelineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Same configuration with the encoder's token mixing switched off.
    pub fn without_mixing(mut self) -> Self {
        self.encoder.alpha = 0.0;
        self
    }
}

/// Text encoder, shared metric, and denoiser: the frozen "pretrained" model
/// that concepts are trained against. Everything is regenerated from the seed.
#[derive(Debug, Clone)]
pub struct ToyPipeline {
    cfg: PipelineConfig,
    encoder: TextEncoder,
    metric: Arc<MetricSpace>,
    denoiser: ToyDenoiser,
}

impl ToyPipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        Self::with_vocabulary(Vocabulary::default(), cfg)
    }

    pub fn with_vocabulary(vocab: Vocabulary, cfg: PipelineConfig) -> Result<Self> {
        let encoder = TextEncoder::new(vocab, cfg.encoder, cfg.seed)?;
        let samples = covariance_samples(&encoder, cfg.covariance_prompts, cfg.seed)?;
        let ridge = match cfg.ridge {
            Some(r) => r,
            None => default_ridge(&samples)?,
        };
        let metric = estimate_covariance(&samples, ridge)?;
        Self::assemble(encoder, metric, cfg)
    }

    /// Uses a precomputed metric instead of estimating one.
    pub fn with_metric(vocab: Vocabulary, cfg: PipelineConfig, metric: MetricSpace) -> Result<Self> {
        let encoder = TextEncoder::new(vocab, cfg.encoder, cfg.seed)?;
        Self::assemble(encoder, metric, cfg)
    }

    fn assemble(encoder: TextEncoder, metric: MetricSpace, cfg: PipelineConfig) -> Result<Self> {
        let metric = Arc::new(metric);
        let schedule = Schedule::linear(cfg.denoiser.train_steps, 0.999, 0.05)?;
        let denoiser = ToyDenoiser::new(cfg.denoiser, metric.clone(), schedule, cfg.seed)?;
        Ok(Self {
            cfg,
            encoder,
            metric,
            denoiser,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn metric(&self) -> &Arc<MetricSpace> {
        &self.metric
    }

    pub fn denoiser(&self) -> &ToyDenoiser {
        &self.denoiser
    }

    pub fn layer_count(&self) -> usize {
        self.denoiser.layers().len()
    }

    pub fn w_k(&self, layer: usize) -> &Matrix {
        self.denoiser.layers()[layer].w_k.w()
    }

    pub fn w_v(&self, layer: usize) -> &Matrix {
        self.denoiser.layers()[layer].w_v.w()
    }

    /// Unedited keys and values: `W_K e_m`, `W_V e_m` for every token.
    pub fn base_kv(&self, ep: &EncodedPrompt) -> KvSequences {
        let (keys, values) = self
            .denoiser
            .layers()
            .iter()
            .map(|l| (&ep.encodings * l.w_k.w().transpose(), &ep.encodings * l.w_v.w().transpose()))
            .unzip();
        KvSequences { keys, values }
    }

    /// The empty prompt used for the unconditional branch.
    pub fn unconditional_prompt(&self) -> Result<EncodedPrompt> {
        self.encoder.encode(&tokenize(""), &HashMap::new())
    }
}

/// Encoder outputs of random prompts: the samples behind `C`.
pub fn covariance_samples(encoder: &TextEncoder, prompts: usize, seed: u64) -> Result<Vec<Vector>> {
    let mut samples = Vec::new();
    for tokens in encoder.random_prompts(prompts, seed) {
        let ep = encoder.encode(&tokens, &HashMap::new())?;
        samples.extend((0..ep.len()).map(|m| ep.row(m)));
    }
    Ok(samples)
}
