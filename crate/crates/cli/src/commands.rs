use std::path::Path;

use klr_core::diffuser::ToyPipeline;
use klr_core::personalize::{
    condition, generate, init_concept, masked_loss, reproduce_mismatch, synthetic_dataset, train_concept, Concept,
    ConceptSlot, ConceptWeights, Conditioning, Generation,
};
use klr_core::store::{
    decode_concept, decode_grid, decode_metric, load_concept, load_metric, read_concept_header, save_concept, save_grid,
    save_metric, CONCEPT_MAGIC, COVARIANCE_MAGIC, GRID_MAGIC,
};
use klr_core::textenc::{tokenize, PLACEHOLDER};
use klr_core::{attention_spread, Error as CoreError, Vocabulary};

use crate::config::{RunConfig, MANIFEST};
use crate::error::{CliError, Result};
use crate::outputs::{CsvOut, Outputs};

fn pipeline(cfg: &RunConfig) -> Result<ToyPipeline> {
    Ok(match &cfg.metric {
        Some(path) => ToyPipeline::with_metric(Vocabulary::default(), cfg.pipeline.clone(), load_metric(path)?)?,
        None => ToyPipeline::new(cfg.pipeline.clone())?,
    })
}

fn start(cfg: &RunConfig) -> Result<Outputs> {
    let mut out = Outputs::create(cfg.out_dir()?)?;
    out.write(MANIFEST, cfg.to_toml()?.as_bytes())?;
    Ok(out)
}

/// Concept files named by the config, checked against the model's dims.
fn load_concepts(cfg: &RunConfig, p: &ToyPipeline) -> Result<Vec<ConceptWeights>> {
    cfg.concepts
        .iter()
        .map(|c| {
            let w = load_concept(&c.path)?;
            let (d_w, d_e) = (p.encoder().d_w(), p.encoder().d_e());
            if w.embedding.len() != d_w || w.i_star.len() != d_e || w.layer_count() != p.layer_count() {
                return Err(CliError::Core(CoreError::Contract(format!(
                    "{}: concept has d_w {}, d_e {}, {} layers; model has d_w {d_w}, d_e {d_e}, {} layers",
                    c.path.display(),
                    w.embedding.len(),
                    w.i_star.len(),
                    w.layer_count(),
                    p.layer_count()
                ))));
            }
            Ok(w)
        })
        .collect()
}

fn slots<'a>(cfg: &RunConfig, weights: &'a [ConceptWeights], beta: f64) -> Vec<ConceptSlot<'a>> {
    cfg.concepts
        .iter()
        .zip(weights)
        .map(|(c, w)| ConceptSlot {
            placeholder: c.placeholder.clone(),
            weights: w,
            superclass: Some(c.superclass.clone().unwrap_or_else(|| cfg.superclass.clone())),
            beta,
        })
        .collect()
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn covstats(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let mut out = start(cfg)?;
    let m = p.metric();
    save_metric(m, &out.file("covariance.klr"))?;
    let eig = m.covariance_eigenvalues();
    let mut csv = out.csv("covstats.csv", &["d_e", "condition_number", "min_eigenvalue", "max_eigenvalue"])?;
    csv.row([m.dim().to_string(), fmt(m.condition_number()), fmt(eig[0]), fmt(eig[eig.len() - 1])])?;
    csv.finish()?;
    println!("d_e = {}, condition number = {:.3e}", m.dim(), m.condition_number());
    out.commit();
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let ds = synthetic_dataset(&p, &cfg.superclass, cfg.seed, cfg.synthetic, cfg.one_shot)?;
    let init = Concept {
        keys_trainable: cfg.keys_trainable,
        ..init_concept(&p, PLACEHOLDER, &cfg.superclass)?
    };
    let mut out = start(cfg)?;
    let trained = train_concept(&init, &ds, &cfg.train, &p)?;
    let mut log = out.csv("train_log.csv", &["step", "loss", "gate_mean", "i_star_norm"])?;
    for s in &trained.log {
        log.row([s.step.to_string(), fmt(s.loss), fmt(s.gate_mean), fmt(s.i_star_norm)])?;
    }
    log.finish()?;
    let bytes = save_concept(&trained.concept.weights, &out.file("concept.klc"), cfg.precision)?;
    if let Some(last) = trained.log.last() {
        println!("step {} loss {:.6}; concept.klc {bytes} bytes", last.step, last.loss);
    }
    out.commit();
    Ok(())
}

fn gate_rows(csv: &mut CsvOut, cfg: &RunConfig, cond: &Conditioning, tokens: &[String]) -> Result<()> {
    for (m, token) in tokens.iter().enumerate() {
        for (j, c) in cfg.concepts.iter().enumerate() {
            csv.row([
                m.to_string(),
                token.clone(),
                c.placeholder.clone(),
                fmt(cond.ratios[m][j]),
                fmt(cond.gates[m][j]),
            ])?;
        }
    }
    Ok(())
}

const GATE_HEADER: [&str; 5] = ["token_index", "token", "concept", "ratio", "gate"];
const ATTENTION_HEADER: [&str; 7] = ["layer", "token_index", "token", "x", "y", "weight", "spread"];

fn attention_rows(csv: &mut CsvOut, g: &Generation, tokens: &[String], layer: usize) -> Result<()> {
    let maps = &g.attention[layer];
    for (m, token) in tokens.iter().enumerate() {
        let map = maps.map(m);
        let spread = attention_spread(&map)?;
        for (px, w) in map.iter().enumerate() {
            csv.row([
                layer.to_string(),
                m.to_string(),
                token.clone(),
                (px % maps.width).to_string(),
                (px / maps.width).to_string(),
                fmt(*w),
                fmt(spread),
            ])?;
        }
    }
    Ok(())
}

fn run_generation(cfg: &RunConfig, p: &ToyPipeline, weights: &[ConceptWeights]) -> Result<(Vec<String>, Generation)> {
    let tokens = tokenize(&cfg.prompt);
    let gate = cfg.inference_gate()?;
    let g = generate(p, &tokens, &slots(cfg, weights, gate.beta), &cfg.generate)?;
    Ok((tokens, g))
}

/// `combine` is `generate` that insists on several concepts.
pub fn generate_cmd(cfg: &RunConfig, min_concepts: usize) -> Result<()> {
    if cfg.concepts.len() < min_concepts {
        return Err(CliError::Config(format!(
            "needs at least {min_concepts} concepts, got {}",
            cfg.concepts.len()
        )));
    }
    let p = pipeline(cfg)?;
    let weights = load_concepts(cfg, &p)?;
    let mut out = start(cfg)?;
    let (tokens, g) = run_generation(cfg, &p, &weights)?;
    save_grid(&g.grid, &out.file("grid.klg"), cfg.precision)?;
    for l in 0..g.attention.len() {
        let mut csv = out.csv(&format!("attention_layer{l}.csv"), &ATTENTION_HEADER)?;
        attention_rows(&mut csv, &g, &tokens, l)?;
        csv.finish()?;
    }
    let mut gates = out.csv("gates.csv", &GATE_HEADER)?;
    gate_rows(&mut gates, cfg, &g.conditioning, &tokens)?;
    gates.finish()?;
    out.commit();
    Ok(())
}

pub fn attn_dump(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let weights = load_concepts(cfg, &p)?;
    let mut out = start(cfg)?;
    let (tokens, g) = run_generation(cfg, &p, &weights)?;
    let mut csv = out.csv("attention.csv", &ATTENTION_HEADER)?;
    for l in 0..g.attention.len() {
        attention_rows(&mut csv, &g, &tokens, l)?;
    }
    csv.finish()?;
    out.commit();
    Ok(())
}

/// Gate ratios and values per token, to `--out` when given, else stdout.
pub fn inspect_gates(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let weights = load_concepts(cfg, &p)?;
    if weights.is_empty() {
        return Err(CliError::Config("inspect-gates needs a concept (pass --concept)".into()));
    }
    let tokens = tokenize(&cfg.prompt);
    let gate = cfg.inference_gate()?;
    let cond = condition(&p, &tokens, &slots(cfg, &weights, gate.beta), cfg.lock, gate.tau)?;
    match cfg.out {
        Some(_) => {
            let mut out = start(cfg)?;
            let mut csv = out.csv("gates.csv", &GATE_HEADER)?;
            gate_rows(&mut csv, cfg, &cond, &tokens)?;
            csv.finish()?;
            out.commit();
        }
        None => {
            let mut csv = CsvOut::stdout(&GATE_HEADER)?;
            gate_rows(&mut csv, cfg, &cond, &tokens)?;
            csv.finish()?;
        }
    }
    Ok(())
}

/// One row per `(τ, β)`: mean gate at the first concept's placeholder, its
/// mean attention spread over layers, and the masked reconstruction error of
/// the sample against the synthetic target for the run seed.
pub fn sweep(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let weights = load_concepts(cfg, &p)?;
    let Some(first) = cfg.concepts.first() else {
        return Err(CliError::Config("sweep needs a concept (pass --concept)".into()));
    };
    let target = synthetic_dataset(&p, &cfg.superclass, cfg.seed, cfg.synthetic, true)?.remove(0);
    let tokens = tokenize(&cfg.prompt);
    let positions: Vec<usize> = (0..tokens.len()).filter(|&m| tokens[m] == first.placeholder).collect();
    let mut out = start(cfg)?;
    let mut csv = out.csv("sweep.csv", &["tau", "beta", "gate_mean", "spread", "recon_error"])?;
    for &tau in &cfg.taus {
        for &beta in &cfg.betas {
            let gen_cfg = klr_core::personalize::GenerateConfig { tau, ..cfg.generate };
            let g = generate(&p, &tokens, &slots(cfg, &weights, beta), &gen_cfg)?;
            let gate_mean = positions.iter().map(|&m| g.conditioning.gates[m][0]).sum::<f64>() / positions.len() as f64;
            let mut spread = 0.0;
            for maps in &g.attention {
                for &m in &positions {
                    spread += attention_spread(&maps.map(m))?;
                }
            }
            spread /= (g.attention.len() * positions.len()) as f64;
            let err = masked_loss(&g.grid, &target.target, &target.mask)?;
            csv.row([fmt(tau), fmt(beta), fmt(gate_mean), fmt(spread), fmt(err)])?;
        }
    }
    csv.finish()?;
    out.commit();
    Ok(())
}

pub fn mismatch(cfg: &RunConfig) -> Result<()> {
    let p = pipeline(cfg)?;
    let ds = synthetic_dataset(&p, &cfg.superclass, cfg.seed, cfg.synthetic, cfg.one_shot)?;
    let mut out = start(cfg)?;
    let r = reproduce_mismatch(&p, &ds, &cfg.superclass, &cfg.train)?;
    let mut csv = out.csv(
        "mismatch.csv",
        &["seed", "mixing", "a_train_view", "a_eval", "b_loss", "b_gated", "gap", "train_view_gap"],
    )?;
    csv.row([
        cfg.seed.to_string(),
        fmt(cfg.pipeline.encoder.alpha),
        fmt(r.a_train_view),
        fmt(r.a_eval),
        fmt(r.b_loss),
        fmt(r.b_gated),
        fmt(r.gap()),
        fmt(r.train_view_gap()),
    ])?;
    csv.finish()?;
    println!(
        "A (closed form) {:.6}, B (end to end) {:.6}, gap {:.3e}",
        r.a_eval,
        r.b_loss,
        r.gap()
    );
    out.commit();
    Ok(())
}

/// Prints a file's header as `key = value` lines. Concept headers are
/// printed even when the payload fails its checksum.
pub fn inspect(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    println!("file = {}", path.display());
    println!("bytes = {}", bytes.len());
    if magic == CONCEPT_MAGIC {
        let h = read_concept_header(&bytes)?;
        println!("kind = concept");
        println!("version = {}", h.version);
        println!("precision = {}", h.precision);
        println!("d_w = {}", h.dims.d_w);
        println!("d_e = {}", h.dims.d_e);
        println!("layers = {}", h.dims.layers.len());
        for (l, (k, v)) in h.dims.layers.iter().enumerate() {
            println!("layer{l}.d_k = {k}");
            println!("layer{l}.d_v = {v}");
        }
        println!(
            "predicted_bytes = {}",
            klr_core::store::predicted_size(&h.dims, h.precision)
        );
        let w = decode_concept(&bytes);
        println!("checksum = {}", if w.is_ok() { "ok" } else { "mismatch" });
        let w = w?;
        println!("beta = {}", w.beta);
    } else if magic == COVARIANCE_MAGIC {
        let m = decode_metric(&bytes)?;
        println!("kind = covariance");
        println!("d_e = {}", m.dim());
        println!("condition_number = {}", m.condition_number());
    } else if magic == GRID_MAGIC {
        let g = decode_grid(&bytes)?;
        println!("kind = grid");
        println!("height = {}", g.height());
        println!("width = {}", g.width());
        println!("channels = {}", g.channels());
    } else {
        return Err(CoreError::Format(format!("{}: unrecognized magic {magic:?}", path.display())).into());
    }
    Ok(())
}
