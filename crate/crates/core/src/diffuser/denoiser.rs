use std::sync::Arc;

use crate::diffuser::attention::softmax_rows;
use crate::diffuser::{AttentionMaps, CrossAttentionLayer, FeatureGrid, Schedule};
use crate::error::{ensure, Result};
use crate::metric::MetricSpace;
use crate::rank1::EditedProjection;
use crate::rng::{normal_matrix, stream, stream_rng};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub d_f: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub height: usize,
    pub width: usize,
    pub train_steps: usize,
    /// Weight of the noisy input in the first feature map.
    pub input_gain: f64,
    /// Prior variance of clean features around the content prediction.
    pub prior_var: f64,
    /// Amplitude of the sinusoidal timestep embedding.
    pub time_gain: f64,
    /// Standard deviation multiplier of the key projections.
    pub key_gain: f64,
    /// Standard deviation multiplier of the attention output projections.
    pub out_gain: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            d_f: 16,
            d_k: 16,
            d_v: 16,
            height: 8,
            width: 8,
            train_steps: 50,
            input_gain: 0.02,
            prior_var: 0.003,
            time_gain: 0.1,
            key_gain: 3.0,
            out_gain: 3.0,
        }
    }
}

/// Per-layer key and value rows (one row per prompt token).
#[derive(Debug, Clone, PartialEq)]
pub struct KvSequences {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl KvSequences {
    pub fn tokens(&self) -> usize {
        self.keys.first().map_or(0, |k| k.nrows())
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    t: usize,
    /// `h_0 … h_L`.
    features: Vec<Matrix>,
    queries: Vec<Matrix>,
    attention: Vec<Matrix>,
    pub x0_hat: Matrix,
    pub eps_hat: Matrix,
}

impl Trace {
    pub fn attention(&self) -> &[Matrix] {
        &self.attention
    }

    /// Feature maps entering each layer, then the final one.
    pub fn features(&self) -> &[Matrix] {
        &self.features
    }

    pub fn t(&self) -> usize {
        self.t
    }
}

/// Stack of residual cross-attention layers with a linear content readout.
///
/// The layers predict clean features `x̂0` from positional/time features (and
/// a small share of the noisy input); noise is then predicted as the
/// posterior mean under a Gaussian prior `x0 ~ N(x̂0, σ²I)`:
/// `ε̂ = √(1 − ᾱ)·(x_t − √ᾱ·x̂0) / (ᾱσ² + 1 − ᾱ)`.
#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    cfg: DenoiserConfig,
    layers: Vec<CrossAttentionLayer>,
    positional: Matrix,
    time_embed: Matrix,
    head: Matrix,
    schedule: Schedule,
}

impl ToyDenoiser {
    pub fn new(cfg: DenoiserConfig, metric: Arc<MetricSpace>, schedule: Schedule, seed: u64) -> Result<Self> {
        ensure(cfg.layers > 0 && cfg.d_f > 0 && cfg.d_k > 0 && cfg.d_v > 0, || "denoiser dimensions must be positive".into())?;
        ensure(cfg.height > 0 && cfg.width > 0, || "grid must be nonempty".into())?;
        ensure(cfg.prior_var > 0.0, || "prior variance must be positive".into())?;
        ensure(schedule.steps() == cfg.train_steps, || {
            format!("schedule has {} steps, config expects {}", schedule.steps(), cfg.train_steps)
        })?;
        let d_e = metric.dim();
        let mut rng = stream_rng(seed, stream::DENOISER);
        let pixels = cfg.height * cfg.width;
        let positional = normal_matrix(&mut rng, pixels, cfg.d_f, 1.0);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let w_q = normal_matrix(&mut rng, cfg.d_k, cfg.d_f, 1.0 / (cfg.d_f as f64).sqrt());
            let w_k = normal_matrix(&mut rng, cfg.d_k, d_e, cfg.key_gain / (d_e as f64).sqrt());
            let w_v = normal_matrix(&mut rng, cfg.d_v, d_e, 1.0 / (d_e as f64).sqrt());
            let w_out = normal_matrix(&mut rng, cfg.d_f, cfg.d_v, cfg.out_gain / (cfg.d_v as f64).sqrt());
            layers.push(CrossAttentionLayer::new(
                w_q,
                EditedProjection::new(w_k, metric.clone())?,
                EditedProjection::new(w_v, metric.clone())?,
                w_out,
            )?);
        }
        let head = normal_matrix(&mut rng, cfg.d_f, cfg.d_f, 1.0 / (cfg.d_f as f64).sqrt());
        let time_embed = Matrix::from_fn(cfg.train_steps, cfg.d_f, |t, k| {
            let freq = 1.0 / 10_000f64.powf((2 * (k / 2)) as f64 / cfg.d_f as f64);
            let phase = t as f64 * freq;
            cfg.time_gain * if k % 2 == 0 { phase.sin() } else { phase.cos() }
        });
        Ok(Self {
            cfg,
            layers,
            positional,
            time_embed,
            head,
            schedule,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[CrossAttentionLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CrossAttentionLayer] {
        &mut self.layers
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn pixels(&self) -> usize {
        self.cfg.height * self.cfg.width
    }

    /// Noise-prediction gain `√(1 − ᾱ)/(ᾱσ² + 1 − ᾱ)`.
    pub fn noise_gain(&self, t: usize) -> f64 {
        let a = self.schedule.alpha_bar(t);
        (1.0 - a).sqrt() / (a * self.cfg.prior_var + 1.0 - a)
    }

    fn check_kv(&self, kv: &KvSequences) -> Result<()> {
        ensure(kv.keys.len() == self.layers.len() && kv.values.len() == self.layers.len(), || {
            format!("expected key/value rows for {} layers", self.layers.len())
        })?;
        let m = kv.tokens();
        ensure(m > 0, || "empty key/value sequences".into())?;
        for (l, layer) in self.layers.iter().enumerate() {
            ensure(kv.keys[l].shape() == (m, layer.d_k()) && kv.values[l].shape() == (m, layer.d_v()), || {
                format!("layer {l} key/value shapes do not match")
            })?;
        }
        Ok(())
    }

    fn check_grid(&self, x: &Matrix) -> Result<()> {
        ensure(x.shape() == (self.pixels(), self.cfg.d_f), || {
            format!("grid is {}x{}, denoiser expects {}x{}", x.nrows(), x.ncols(), self.pixels(), self.cfg.d_f)
        })
    }

    /// Runs the stack on a noisy grid at step `t`.
    pub fn forward(&self, x_t: &Matrix, t: usize, kv: &KvSequences) -> Result<Trace> {
        self.schedule.check_step(t)?;
        self.check_grid(x_t)?;
        self.check_kv(kv)?;
        let mut h = &self.positional + x_t * self.cfg.input_gain;
        let temb = self.time_embed.row(t);
        for mut row in h.row_iter_mut() {
            row += &temb;
        }
        let mut features = Vec::with_capacity(self.layers.len() + 1);
        let mut queries = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let q = &h * layer.w_q.transpose();
            let attn = softmax_rows(&(&q * kv.keys[l].transpose() * layer.scale()));
            let next = &h + (&attn * &kv.values[l]) * layer.w_out.transpose();
            features.push(h);
            queries.push(q);
            attention.push(attn);
            h = next;
        }
        let x0_hat = &h * self.head.transpose();
        features.push(h);
        let a = self.schedule.alpha_bar(t);
        let eps_hat = (x_t - &x0_hat * a.sqrt()) * self.noise_gain(t);
        Ok(Trace {
            t,
            features,
            queries,
            attention,
            x0_hat,
            eps_hat,
        })
    }

    pub fn predict_eps(&self, x_t: &Matrix, t: usize, kv: &KvSequences) -> Result<Matrix> {
        Ok(self.forward(x_t, t, kv)?.eps_hat)
    }

    /// Back-propagates `dL/dε̂` to the key and value rows of every layer.
    pub fn backward(&self, trace: &Trace, kv: &KvSequences, d_eps: &Matrix) -> KvSequences {
        let t = trace.t;
        let a = self.schedule.alpha_bar(t);
        let d_x0 = d_eps * (-self.noise_gain(t) * a.sqrt());
        let mut dh = d_x0 * &self.head;
        let mut d_keys = vec![Matrix::zeros(0, 0); self.layers.len()];
        let mut d_values = vec![Matrix::zeros(0, 0); self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let attn = &trace.attention[l];
            let d_out = &dh * &layer.w_out;
            d_values[l] = attn.tr_mul(&d_out);
            let d_attn = &d_out * kv.values[l].transpose();
            let mut d_logits = d_attn.component_mul(attn);
            for (p, mut row) in d_logits.row_iter_mut().enumerate() {
                let inner = attn.row(p).dot(&d_attn.row(p));
                row -= attn.row(p) * inner;
            }
            let d_q = &d_logits * &kv.keys[l] * layer.scale();
            d_keys[l] = d_logits.tr_mul(&trace.queries[l]) * layer.scale();
            dh += d_q * &layer.w_q;
        }
        KvSequences {
            keys: d_keys,
            values: d_values,
        }
    }

    /// Attention maps of every layer for one forward pass.
    pub fn attention_maps(&self, trace: &Trace) -> Vec<AttentionMaps> {
        trace
            .attention
            .iter()
            .map(|w| AttentionMaps {
                height: self.cfg.height,
                width: self.cfg.width,
                weights: w.clone(),
            })
            .collect()
    }

    pub fn grid(&self, data: Matrix) -> Result<FeatureGrid> {
        FeatureGrid::new(self.cfg.height, self.cfg.width, data)
    }
}
