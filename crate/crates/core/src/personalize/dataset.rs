use crate::diffuser::{FeatureGrid, ToyPipeline};
use crate::error::{ensure, Error, Result};
use crate::personalize::train::render_traced;
use crate::personalize::{init_concept, render_clean, ConceptWeights};
use crate::rng::{normal_vector, stream, stream_rng};
use crate::textenc::{tokenize, INIT_TEMPLATE, PLACEHOLDER, TRAINING_TEMPLATES};

/// One training example: a prompt containing `S*`, the ground-truth clean
/// features, and a per-pixel loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub prompt: Vec<String>,
    pub target: FeatureGrid,
    /// Pixel-major weights, normalized so the maximum is 1.
    pub mask: Vec<f64>,
}

impl TrainingSample {
    pub fn new(prompt: Vec<String>, target: FeatureGrid, mask: Vec<f64>) -> Result<Self> {
        ensure(prompt.iter().any(|t| t == PLACEHOLDER), || format!("training prompt lacks {PLACEHOLDER}"))?;
        Ok(Self {
            prompt,
            mask: normalize_mask(&mask, target.pixels())?,
            target,
        })
    }
}

/// Divides a nonnegative mask by its maximum.
pub fn normalize_mask(mask: &[f64], pixels: usize) -> Result<Vec<f64>> {
    ensure(mask.len() == pixels, || format!("mask has {} entries, grid has {pixels} pixels", mask.len()))?;
    ensure(mask.iter().all(|m| m.is_finite() && *m >= 0.0), || "mask entries must be finite and nonnegative".into())?;
    let max = mask.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::Degenerate("mask is zero everywhere".into()));
    }
    Ok(mask.iter().map(|m| m / max).collect())
}

/// Soft ellipse centered on the grid, covering roughly the middle 70%.
pub fn elliptical_mask(height: usize, width: usize) -> Vec<f64> {
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let (ry, rx) = (0.35 * height as f64, 0.35 * width as f64);
    let mut mask = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let d = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
            mask.push(1.0 / (1.0 + ((d - 1.0) / 0.15).exp()));
        }
    }
    let max = mask.iter().copied().fold(0.0, f64::max);
    mask.iter().map(|m| m / max).collect()
}

/// How far the hidden concept behind the synthetic targets sits from its
/// superclass.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Per-coordinate value offset, relative to the RMS of the superclass value.
    pub value_shift: f64,
    /// Per-coordinate key offset, relative to the RMS of the superclass key.
    pub key_shift: f64,
    /// Random key offsets tried; the one whose placeholder attention is
    /// broadest is kept.
    pub key_candidates: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            value_shift: 3.0,
            key_shift: 1.2,
            key_candidates: 512,
        }
    }
}

/// Weights of the hidden concept that renders the synthetic targets.
pub fn teacher_weights(pipeline: &ToyPipeline, superclass: &str, seed: u64, cfg: SyntheticConfig) -> Result<ConceptWeights> {
    let base = init_concept(pipeline, "teacher", superclass)?.weights;
    let mut rng = stream_rng(seed, stream::DATASET);
    let mut w = base.clone();
    for v in &mut w.value_targets {
        let rms = v.norm() / (v.len() as f64).sqrt();
        *v += normal_vector(&mut rng, v.len(), cfg.value_shift * rms);
    }
    let prompt = tokenize(INIT_TEMPLATE);
    let mut best: Option<(f64, Vec<_>)> = None;
    for _ in 0..cfg.key_candidates.max(1) {
        let keys: Vec<_> = base
            .key_targets
            .iter()
            .map(|k| {
                let rms = k.norm() / (k.len() as f64).sqrt();
                k + normal_vector(&mut rng, k.len(), cfg.key_shift * rms)
            })
            .collect();
        let candidate = ConceptWeights {
            key_targets: keys.clone(),
            ..w.clone()
        };
        let (_, spread) = render_traced(pipeline, &candidate, &prompt)?;
        if best.as_ref().is_none_or(|(s, _)| spread > *s) {
            best = Some((spread, keys));
        }
    }
    w.key_targets = best.expect("at least one candidate").1;
    Ok(w)
}

/// The bundled synthetic concept: one sample per training template (or the
/// first template only, in one-shot mode). Each target is the clean features
/// a hidden concept produces for that sample's prompt.
pub fn synthetic_dataset(
    pipeline: &ToyPipeline,
    superclass: &str,
    seed: u64,
    cfg: SyntheticConfig,
    one_shot: bool,
) -> Result<Vec<TrainingSample>> {
    let teacher = teacher_weights(pipeline, superclass, seed, cfg)?;
    let dc = pipeline.denoiser().config();
    let mask = elliptical_mask(dc.height, dc.width);
    let templates = if one_shot { &TRAINING_TEMPLATES[..1] } else { &TRAINING_TEMPLATES[..] };
    templates
        .iter()
        .map(|t| {
            let prompt = tokenize(t);
            let target = render_clean(pipeline, &teacher, &prompt)?;
            TrainingSample::new(prompt, target, mask.clone())
        })
        .collect()
}
