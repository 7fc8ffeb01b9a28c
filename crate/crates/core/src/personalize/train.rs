use std::collections::HashMap;

use rand::Rng;

use crate::diffuser::{attention_spread, FeatureGrid, KvSequences, ToyPipeline};
use crate::error::{ensure, Error, Result};
use crate::personalize::conditioning::{prepare_layers, Pathway, PreparedLayers};
use crate::personalize::{Concept, ConceptSlot, ConceptWeights, TrainingSample};
use crate::rank1::{ema_update, rome_closed_form, GateParams};
use crate::rng::{normal_matrix, stream, stream_rng};
use crate::textenc::{EncodedPrompt, PLACEHOLDER};
use crate::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_o: f64,
    pub lr_embed: f64,
    pub steps: usize,
    pub batch: usize,
    pub gate: GateParams,
    pub seed: u64,
    /// Return the concept after this many steps instead of the last one.
    pub select_step: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_o: 0.03,
            lr_embed: 0.006,
            steps: 400,
            batch: 16,
            gate: GateParams::TRAINING,
            seed: 0,
            select_step: None,
        }
    }
}

/// How the concept's edit enters the key and value rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditPath {
    /// Logistic-gated reformulated pass on every token.
    Gated,
    /// Linear-ratio reformulated pass on every token.
    Ungated,
    /// Target-outputs substituted at the placeholder rows only.
    Replacement,
    /// Closed-form updated weights applied to every token.
    ClosedForm,
}

/// One loss evaluation: which sample, which timestep, which noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub sample: usize,
    pub t: usize,
    pub eps: Matrix,
}

/// Gradients with respect to a concept's learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptGrad {
    pub embedding: Vector,
    pub key_targets: Vec<Vector>,
    pub value_targets: Vec<Vector>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    /// Mean value-gate activation at the placeholder (the ratio for linear
    /// paths, 1 for replacement).
    pub gate_mean: f64,
    pub i_star_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub concept: Concept,
    pub log: Vec<StepLog>,
}

/// Mean over pixels and channels of `mask·(pred − true)²`; the mask is
/// normalized by its maximum first.
pub fn masked_loss(pred: &FeatureGrid, truth: &FeatureGrid, mask: &[f64]) -> Result<f64> {
    pred.check_same_shape(truth, "masked loss")?;
    let mask = super::normalize_mask(mask, pred.pixels())?;
    Ok(masked_loss_raw(pred.data(), truth.data(), &mask))
}

fn masked_loss_raw(pred: &Matrix, truth: &Matrix, mask: &[f64]) -> f64 {
    let mut total = 0.0;
    for (p, w) in mask.iter().enumerate() {
        let d = pred.row(p) - truth.row(p);
        total += w * d.norm_squared();
    }
    total / (pred.nrows() * pred.ncols()) as f64
}

/// Timestep and noise draws for a batch.
pub fn random_draws<R: Rng>(rng: &mut R, pipeline: &ToyPipeline, samples: usize, count: usize) -> Vec<Draw> {
    let dc = pipeline.denoiser().config();
    (0..count)
        .map(|_| Draw {
            sample: rng.random_range(0..samples),
            t: rng.random_range(0..dc.train_steps),
            eps: normal_matrix(rng, dc.height * dc.width, dc.d_f, 1.0),
        })
        .collect()
}

/// Fixed held-out draws used to compare losses across steps and variants.
pub fn validation_draws(pipeline: &ToyPipeline, samples: usize, count: usize, seed: u64) -> Vec<Draw> {
    random_draws(&mut stream_rng(seed, stream::VALIDATION), pipeline, samples, count)
}

enum EditForm {
    Passes(PreparedLayers),
    Replacement,
    ClosedForm { keys: Vec<Matrix>, values: Vec<Matrix> },
}

struct Prepared<'a> {
    pipeline: &'a ToyPipeline,
    weights: &'a ConceptWeights,
    form: EditForm,
}

impl<'a> Prepared<'a> {
    fn new(pipeline: &'a ToyPipeline, weights: &'a ConceptWeights, path: EditPath, gate: GateParams) -> Result<Self> {
        let slot = ConceptSlot {
            placeholder: PLACEHOLDER.to_string(),
            weights,
            superclass: None,
            beta: gate.beta,
        };
        let form = match path {
            EditPath::Gated => EditForm::Passes(prepare_layers(pipeline, &[slot], gate.tau, Pathway::Gated, Pathway::Gated, None)?),
            EditPath::Ungated => {
                EditForm::Passes(prepare_layers(pipeline, &[slot], gate.tau, Pathway::Ungated, Pathway::Ungated, None)?)
            }
            EditPath::Replacement => EditForm::Replacement,
            EditPath::ClosedForm => {
                let m = pipeline.metric();
                let mut keys = Vec::new();
                let mut values = Vec::new();
                for l in 0..pipeline.layer_count() {
                    keys.push(rome_closed_form(pipeline.w_k(l), &weights.i_star, &weights.key_targets[l], m)?);
                    values.push(rome_closed_form(pipeline.w_v(l), &weights.i_star, &weights.value_targets[l], m)?);
                }
                EditForm::ClosedForm { keys, values }
            }
        };
        Ok(Self {
            pipeline,
            weights,
            form,
        })
    }

    fn encode(&self, prompt: &[String]) -> Result<EncodedPrompt> {
        let overrides = HashMap::from([(PLACEHOLDER.to_string(), self.weights.embedding.clone())]);
        self.pipeline.encoder().encode(prompt, &overrides)
    }

    fn positions(ep: &EncodedPrompt) -> Vec<usize> {
        (0..ep.len()).filter(|&m| ep.tokens[m] == PLACEHOLDER).collect()
    }

    /// Key/value rows and the gate statistic at the first placeholder.
    fn kv(&self, ep: &EncodedPrompt) -> (KvSequences, f64) {
        let first = ep.concept_index;
        match &self.form {
            EditForm::Passes(layers) => {
                let keys = layers.keys.iter().map(|p| p.forward_rows(&ep.encodings)).collect();
                let values = layers.values.iter().map(|p| p.forward_rows(&ep.encodings)).collect();
                let gate = first.map_or(0.0, |s| layers.values[0].forward_row(&ep.row(s)).gates[0]);
                (KvSequences { keys, values }, gate)
            }
            EditForm::Replacement => {
                let mut kv = self.pipeline.base_kv(ep);
                for s in Self::positions(ep) {
                    for l in 0..kv.keys.len() {
                        kv.keys[l].set_row(s, &self.weights.key_targets[l].transpose());
                        kv.values[l].set_row(s, &self.weights.value_targets[l].transpose());
                    }
                }
                (kv, 1.0)
            }
            EditForm::ClosedForm { keys, values } => {
                let kv = KvSequences {
                    keys: keys.iter().map(|w| &ep.encodings * w.transpose()).collect(),
                    values: values.iter().map(|w| &ep.encodings * w.transpose()).collect(),
                };
                let ratio = first.map_or(0.0, |s| {
                    let e = ep.row(s);
                    let m = self.pipeline.metric();
                    m.sim(&self.weights.i_star, &e).unwrap_or(0.0) / m.energy(&self.weights.i_star).unwrap_or(1.0)
                });
                (kv, ratio)
            }
        }
    }

    /// Accumulates `dL/d(params)` from the key/value row gradients.
    fn backward(&self, ep: &EncodedPrompt, dkv: &KvSequences, grad: &mut ConceptGrad) -> Result<()> {
        let d_e = self.pipeline.encoder().d_e();
        let positions = Self::positions(ep);
        let mut d_enc = Matrix::zeros(ep.len(), d_e);
        match &self.form {
            EditForm::Passes(layers) => {
                for l in 0..layers.keys.len() {
                    for m in 0..ep.len() {
                        let e = ep.row(m);
                        let (de_k, do_k) = layers.keys[l].backward_row(&e, &dkv.keys[l].row(m).transpose());
                        let (de_v, do_v) = layers.values[l].backward_row(&e, &dkv.values[l].row(m).transpose());
                        let mut row = d_enc.row_mut(m);
                        row += (de_k + de_v).transpose();
                        if let Some(g) = do_k.first() {
                            grad.key_targets[l] += g;
                        }
                        if let Some(g) = do_v.first() {
                            grad.value_targets[l] += g;
                        }
                    }
                }
            }
            EditForm::Replacement => {
                for l in 0..dkv.keys.len() {
                    for m in 0..ep.len() {
                        let dk = dkv.keys[l].row(m).transpose();
                        let dv = dkv.values[l].row(m).transpose();
                        if positions.contains(&m) {
                            grad.key_targets[l] += dk;
                            grad.value_targets[l] += dv;
                        } else {
                            let de = self.pipeline.w_k(l).tr_mul(&dk) + self.pipeline.w_v(l).tr_mul(&dv);
                            let mut row = d_enc.row_mut(m);
                            row += de.transpose();
                        }
                    }
                }
            }
            EditForm::ClosedForm { keys, values } => {
                let metric = self.pipeline.metric();
                let covector = metric.apply(&self.weights.i_star)? / metric.energy(&self.weights.i_star)?;
                for l in 0..keys.len() {
                    for m in 0..ep.len() {
                        let e = ep.row(m);
                        let r = covector.dot(&e);
                        let dk = dkv.keys[l].row(m).transpose();
                        let dv = dkv.values[l].row(m).transpose();
                        grad.key_targets[l].axpy(r, &dk, 1.0);
                        grad.value_targets[l].axpy(r, &dv, 1.0);
                        let de = keys[l].tr_mul(&dk) + values[l].tr_mul(&dv);
                        let mut row = d_enc.row_mut(m);
                        row += de.transpose();
                    }
                }
            }
        }
        if positions.is_empty() {
            return Ok(());
        }
        // encodings = Mix · X · Pᵀ, and only the placeholder rows of X are learned.
        let encoder = self.pipeline.encoder();
        let mix = encoder.mix_matrix(ep.len())?;
        for &s in &positions {
            let mut d_lifted = Vector::zeros(d_e);
            for m in s..ep.len() {
                let w = mix[(m, s)];
                if w != 0.0 {
                    d_lifted.axpy(w, &d_enc.row(m).transpose(), 1.0);
                }
            }
            grad.embedding += encoder.projection().tr_mul(&d_lifted);
        }
        Ok(())
    }
}

impl ConceptGrad {
    fn zeros(w: &ConceptWeights) -> Self {
        Self {
            embedding: Vector::zeros(w.embedding.len()),
            key_targets: w.key_targets.iter().map(|v| Vector::zeros(v.len())).collect(),
            value_targets: w.value_targets.iter().map(|v| Vector::zeros(v.len())).collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        self.embedding *= s;
        self.key_targets.iter_mut().for_each(|v| *v *= s);
        self.value_targets.iter_mut().for_each(|v| *v *= s);
    }
}

/// Mean loss and gate statistic over the draws, plus gradients when asked.
fn run_draws(
    pipeline: &ToyPipeline,
    weights: &ConceptWeights,
    dataset: &[TrainingSample],
    draws: &[Draw],
    path: EditPath,
    gate: GateParams,
    want_grad: bool,
) -> Result<(f64, f64, Option<ConceptGrad>)> {
    ensure(!dataset.is_empty(), || "empty dataset".into())?;
    ensure(!draws.is_empty(), || "no loss draws".into())?;
    let prepared = Prepared::new(pipeline, weights, path, gate)?;
    let denoiser = pipeline.denoiser();
    let schedule = denoiser.schedule();
    let mut grad = want_grad.then(|| ConceptGrad::zeros(weights));
    let (mut loss, mut gate_sum) = (0.0, 0.0);
    for d in draws {
        let sample = dataset
            .get(d.sample)
            .ok_or_else(|| Error::Contract(format!("draw refers to sample {} of {}", d.sample, dataset.len())))?;
        let ep = prepared.encode(&sample.prompt)?;
        let (kv, g) = prepared.kv(&ep);
        let a = schedule.alpha_bar(d.t);
        let x0 = sample.target.data();
        let x_t = x0 * a.sqrt() + &d.eps * (1.0 - a).sqrt();
        let trace = denoiser.forward(&x_t, d.t, &kv)?;
        loss += masked_loss_raw(&trace.eps_hat, &d.eps, &sample.mask);
        gate_sum += g;
        if let Some(grad) = grad.as_mut() {
            let norm = 2.0 / (x0.nrows() * x0.ncols()) as f64;
            let mut d_eps = &trace.eps_hat - &d.eps;
            for (p, mut row) in d_eps.row_iter_mut().enumerate() {
                row *= norm * sample.mask[p];
            }
            let dkv = denoiser.backward(&trace, &kv, &d_eps);
            prepared.backward(&ep, &dkv, grad)?;
        }
    }
    let n = draws.len() as f64;
    if let Some(g) = grad.as_mut() {
        g.scale(1.0 / n);
    }
    Ok((loss / n, gate_sum / n, grad))
}

/// Mean masked noise-prediction loss over the draws.
pub fn evaluate(
    pipeline: &ToyPipeline,
    weights: &ConceptWeights,
    dataset: &[TrainingSample],
    draws: &[Draw],
    path: EditPath,
    gate: GateParams,
) -> Result<f64> {
    Ok(run_draws(pipeline, weights, dataset, draws, path, gate, false)?.0)
}

/// Mean loss over the draws and its gradient with respect to the embedding
/// and every target-output (`i*` is held fixed).
pub fn loss_and_grad(
    pipeline: &ToyPipeline,
    weights: &ConceptWeights,
    dataset: &[TrainingSample],
    draws: &[Draw],
    path: EditPath,
    gate: GateParams,
) -> Result<(f64, ConceptGrad)> {
    let (loss, _, grad) = run_draws(pipeline, weights, dataset, draws, path, gate, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

/// Clean features the stack predicts for a prompt conditioned on the concept
/// through the gated pass with the training gate, at the middle timestep
/// with a zero noisy input.
pub fn render_clean(pipeline: &ToyPipeline, weights: &ConceptWeights, prompt: &[String]) -> Result<FeatureGrid> {
    Ok(render_traced(pipeline, weights, prompt)?.0)
}

/// [`render_clean`] plus the mean spread of the placeholder's attention
/// over layers.
pub(crate) fn render_traced(pipeline: &ToyPipeline, weights: &ConceptWeights, prompt: &[String]) -> Result<(FeatureGrid, f64)> {
    let prepared = Prepared::new(pipeline, weights, EditPath::Gated, GateParams::TRAINING)?;
    let ep = prepared.encode(prompt)?;
    let (kv, _) = prepared.kv(&ep);
    let denoiser = pipeline.denoiser();
    let t = denoiser.config().train_steps / 2;
    let x_t = Matrix::zeros(denoiser.pixels(), denoiser.config().d_f);
    let trace = denoiser.forward(&x_t, t, &kv)?;
    let spread = match ep.concept_index {
        Some(s) => {
            let maps = denoiser.attention_maps(&trace);
            let mut total = 0.0;
            for m in &maps {
                total += attention_spread(&m.map(s))?;
            }
            total / maps.len() as f64
        }
        None => 0.0,
    };
    Ok((denoiser.grid(trace.x0_hat)?, spread))
}

fn check_dataset(pipeline: &ToyPipeline, dataset: &[TrainingSample]) -> Result<()> {
    ensure(!dataset.is_empty(), || "empty dataset".into())?;
    let dc = pipeline.denoiser().config();
    for (i, s) in dataset.iter().enumerate() {
        ensure(s.prompt.iter().any(|t| t == PLACEHOLDER), || format!("sample {i} prompt lacks {PLACEHOLDER}"))?;
        ensure(
            s.target.height() == dc.height && s.target.width() == dc.width && s.target.channels() == dc.d_f,
            || format!("sample {i} target does not match the denoiser grid"),
        )?;
    }
    Ok(())
}

/// Gradient descent on the value target-outputs and the placeholder
/// embedding (and the key target-outputs when they are not locked), with the
/// edit entering through the gated pass.
pub fn train_concept(concept: &Concept, dataset: &[TrainingSample], cfg: &TrainConfig, pipeline: &ToyPipeline) -> Result<TrainOutcome> {
    train_concept_with(concept, dataset, cfg, pipeline, EditPath::Gated)
}

/// [`train_concept`] through an arbitrary edit path.
pub fn train_concept_with(
    concept: &Concept,
    dataset: &[TrainingSample],
    cfg: &TrainConfig,
    pipeline: &ToyPipeline,
    path: EditPath,
) -> Result<TrainOutcome> {
    check_dataset(pipeline, dataset)?;
    GateParams::new(cfg.gate.beta, cfg.gate.tau)?;
    ensure(cfg.batch > 0, || "batch size must be positive".into())?;
    ensure(cfg.lr_o >= 0.0 && cfg.lr_embed >= 0.0, || "learning rates must be nonnegative".into())?;
    if let Some(k) = cfg.select_step {
        ensure(k <= cfg.steps, || format!("selected step {k} is past the last step {}", cfg.steps))?;
    }
    let mut current = concept.clone();
    current.train_gate = cfg.gate;
    current.weights.beta = cfg.gate.beta;
    let mut selected = (cfg.select_step == Some(0)).then(|| current.clone());
    let mut rng = stream_rng(cfg.seed, stream::TRAINING);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let draws = random_draws(&mut rng, pipeline, dataset.len(), cfg.batch);

        let overrides = HashMap::from([(PLACEHOLDER.to_string(), current.weights.embedding.clone())]);
        let mut mean = Vector::zeros(current.weights.i_star.len());
        for d in &draws {
            let ep = pipeline.encoder().encode(&dataset[d.sample].prompt, &overrides)?;
            let s = ep.concept_index.expect("checked above");
            mean += ep.row(s);
        }
        mean /= draws.len() as f64;
        current.weights.i_star = ema_update(&current.weights.i_star, &mean);
        if !current.weights.i_star.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }

        // Overflowing weights surface as degenerate metric quantities.
        let (loss, gate_mean, grad) = run_draws(pipeline, &current.weights, dataset, &draws, path, cfg.gate, true)
            .map_err(|e| match e {
                Error::Degenerate(_) if step > 0 => Error::Diverged { step, loss: f64::NAN },
                e => e,
            })?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        log.push(StepLog {
            step,
            loss,
            gate_mean,
            i_star_norm: current.weights.i_star.norm(),
        });
        let grad = grad.expect("gradient requested");
        let w = &mut current.weights;
        for (o, g) in w.value_targets.iter_mut().zip(&grad.value_targets) {
            o.axpy(-cfg.lr_o, g, 1.0);
        }
        if current.keys_trainable {
            for (o, g) in w.key_targets.iter_mut().zip(&grad.key_targets) {
                o.axpy(-cfg.lr_o, g, 1.0);
            }
        }
        w.embedding.axpy(-cfg.lr_embed, &grad.embedding, 1.0);
        if !w.is_finite() {
            return Err(Error::Diverged { step, loss: f64::NAN });
        }
        if cfg.select_step == Some(step + 1) {
            selected = Some(current.clone());
        }
    }
    Ok(TrainOutcome {
        concept: selected.unwrap_or(current),
        log,
    })
}
