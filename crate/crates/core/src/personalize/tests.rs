use std::collections::HashMap;

use super::*;
use crate::diffuser::{ddim_sample, FeatureGrid, PipelineConfig, ToyPipeline};
use crate::error::Error;
use crate::rank1::{gate_value, GateParams};
use crate::store::{encode_concept, Precision};
use crate::textenc::{substitute, tokenize, INIT_TEMPLATE, PLACEHOLDER};
use crate::{Matrix, Vector};

fn pipeline(seed: u64) -> ToyPipeline {
    ToyPipeline::new(PipelineConfig::with_seed(seed)).unwrap()
}

fn identity_pipeline(seed: u64) -> ToyPipeline {
    ToyPipeline::new(PipelineConfig::with_seed(seed).without_mixing()).unwrap()
}

fn dataset(p: &ToyPipeline, seed: u64) -> Vec<TrainingSample> {
    synthetic_dataset(p, "teddy", seed, SyntheticConfig::default(), false).unwrap()
}

fn short(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn init_copies_the_superclass() {
    let p = pipeline(1);
    let c = init_concept(&p, "mine", "teddy").unwrap();
    assert_eq!(&c.weights.embedding, p.encoder().embedding("teddy").unwrap());
    assert!(!c.keys_trainable);
    assert_eq!(c.train_gate, GateParams::TRAINING);

    // The superclass encoding inside the init prompt, then o* = W·i* by loops.
    let tokens = substitute(&tokenize(INIT_TEMPLATE), PLACEHOLDER, "teddy");
    let ep = p.encoder().encode(&tokens, &HashMap::new()).unwrap();
    let s = ep.position_of("teddy").unwrap();
    let e: Vec<f64> = (0..ep.encodings.ncols()).map(|j| ep.encodings[(s, j)]).collect();
    for (j, v) in e.iter().enumerate() {
        assert_eq!(c.weights.i_star[j], *v);
    }
    for l in 0..p.layer_count() {
        for (w, target) in [(p.w_k(l), &c.weights.key_targets[l]), (p.w_v(l), &c.weights.value_targets[l])] {
            for r in 0..w.nrows() {
                let by_hand: f64 = (0..w.ncols()).map(|j| w[(r, j)] * e[j]).sum();
                assert!((target[r] - by_hand).abs() <= 1e-12 * by_hand.abs().max(1.0));
            }
        }
    }
}

#[test]
fn init_is_deterministic_and_checks_the_vocabulary() {
    let p = pipeline(2);
    assert_eq!(init_concept(&p, "a", "cat").unwrap(), init_concept(&p, "a", "cat").unwrap());
    assert!(matches!(init_concept(&p, "a", "zebra"), Err(Error::Vocabulary(_))));
}

#[test]
fn fresh_concept_with_saturated_gate_conditions_like_the_superclass() {
    let p = identity_pipeline(3);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let tokens = tokenize("a photo of a S*");
    let mut slot = ConceptSlot::new(&c);
    slot.beta = 0.5;
    let edited = condition(&p, &tokens, &[slot], LockMode::Local, 1e-4).unwrap();
    let plain = condition(&p, &substitute(&tokens, PLACEHOLDER, "teddy"), &[], LockMode::Local, 1e-4).unwrap();
    for l in 0..p.layer_count() {
        assert!((&edited.kv.keys[l] - &plain.kv.keys[l]).amax() < 1e-12);
        assert!((&edited.kv.values[l] - &plain.kv.values[l]).amax() < 1e-12);
    }
}

#[test]
fn masked_loss_examples() {
    let mut rng = crate::rng::stream_rng(4, 0);
    let a = FeatureGrid::random(&mut rng, 4, 4, 3);
    let b = FeatureGrid::random(&mut rng, 4, 4, 3);
    let mse = (a.data() - b.data()).norm_squared() / 48.0;
    let ones = vec![1.0; 16];
    assert!((masked_loss(&a, &b, &ones).unwrap() - mse).abs() < 1e-15);
    assert_eq!(masked_loss(&a, &b, &[0.5; 16]).unwrap(), masked_loss(&a, &b, &ones).unwrap());

    let mut region = vec![0.0; 16];
    region[5] = 1.0;
    region[6] = 0.3;
    let mut perturbed = a.data().clone();
    perturbed[(0, 0)] += 10.0;
    perturbed[(15, 2)] -= 4.0;
    let perturbed = FeatureGrid::new(4, 4, perturbed).unwrap();
    assert_eq!(masked_loss(&a, &b, &region).unwrap(), masked_loss(&perturbed, &b, &region).unwrap());

    assert!(matches!(masked_loss(&a, &b, &[0.0; 16]), Err(Error::Degenerate(_))));
    let c = FeatureGrid::zeros(4, 4, 2);
    assert!(matches!(masked_loss(&a, &c, &ones), Err(Error::Contract(_))));
}

#[test]
fn training_samples_normalize_their_mask() {
    let t = FeatureGrid::zeros(2, 2, 1);
    let s = TrainingSample::new(tokenize("a S*"), t.clone(), vec![0.0, 2.0, 1.0, 0.5]).unwrap();
    assert_eq!(s.mask, vec![0.0, 1.0, 0.5, 0.25]);
    assert!(TrainingSample::new(tokenize("a cat"), t, vec![1.0; 4]).is_err());
    let m = elliptical_mask(8, 8);
    assert_eq!(m.iter().cloned().fold(0.0, f64::max), 1.0);
    assert!(m[0] < 0.1 && m[27] > 0.9);
}

#[test]
fn synthetic_dataset_shapes() {
    let p = pipeline(5);
    let full = dataset(&p, 5);
    assert_eq!(full.len(), 9);
    let one = synthetic_dataset(&p, "teddy", 5, SyntheticConfig::default(), true).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0], full[0]);
    for s in &full {
        assert_eq!((s.target.height(), s.target.width(), s.target.channels()), (8, 8, 16));
    }
}

#[test]
fn zero_steps_returns_the_initial_concept() {
    let p = pipeline(6);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let out = train_concept(&c, &dataset(&p, 6), &short(0, 6), &p).unwrap();
    assert_eq!(out.concept, c);
    assert!(out.log.is_empty());
}

#[test]
fn keys_stay_frozen_and_istar_stays_finite() {
    let p = pipeline(7);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let out = train_concept(&c, &dataset(&p, 7), &short(12, 7), &p).unwrap();
    assert_eq!(out.log.len(), 12);
    for l in 0..p.layer_count() {
        assert_eq!(
            out.concept.weights.key_targets[l].as_slice(),
            c.weights.key_targets[l].as_slice(),
            "layer {l} key target moved"
        );
        assert_ne!(out.concept.weights.value_targets[l], c.weights.value_targets[l]);
    }
    let i = &out.concept.weights.i_star;
    assert!(i.iter().all(|v| v.is_finite()) && i.norm() > 0.0);
    assert_ne!(out.concept.weights.embedding, c.weights.embedding);
}

#[test]
fn trainable_keys_move() {
    let p = pipeline(7);
    let c = Concept {
        keys_trainable: true,
        ..init_concept(&p, "S*", "teddy").unwrap()
    };
    let out = train_concept(&c, &dataset(&p, 7), &short(5, 7), &p).unwrap();
    assert_ne!(out.concept.weights.key_targets, c.weights.key_targets);
}

#[test]
fn training_is_bitwise_deterministic() {
    let p = pipeline(8);
    let ds = dataset(&p, 8);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let a = train_concept(&c, &ds, &short(10, 8), &p).unwrap().concept;
    let b = train_concept(&c, &ds, &short(10, 8), &p).unwrap().concept;
    assert_eq!(
        encode_concept(&a.weights, Precision::F64).unwrap(),
        encode_concept(&b.weights, Precision::F64).unwrap()
    );
    let other = train_concept(&c, &ds, &short(10, 9), &p).unwrap().concept;
    assert_ne!(other.weights, a.weights);
}

#[test]
fn select_step_returns_the_intermediate_concept() {
    let p = pipeline(9);
    let ds = dataset(&p, 9);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let early = train_concept(&c, &ds, &short(3, 9), &p).unwrap().concept;
    let cfg = TrainConfig {
        select_step: Some(3),
        ..short(8, 9)
    };
    let selected = train_concept(&c, &ds, &cfg, &p).unwrap();
    assert_eq!(selected.concept, early);
    assert_eq!(selected.log.len(), 8);
    let bad = TrainConfig {
        select_step: Some(9),
        ..short(8, 9)
    };
    assert!(train_concept(&c, &ds, &bad, &p).is_err());
}

#[test]
fn closed_gate_freezes_the_value_targets() {
    let p = pipeline(10);
    let ds = dataset(&p, 10);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let gate = GateParams::new(1e6, 0.1).unwrap();
    let cfg = TrainConfig { gate, ..short(6, 10) };
    let out = train_concept(&c, &ds, &cfg, &p).unwrap();
    assert_eq!(out.concept.weights.value_targets, c.weights.value_targets);
    assert!(out.log.iter().all(|s| s.gate_mean == 0.0));

    // With the gate shut, the concept's target-outputs cannot reach the output.
    let draws = validation_draws(&p, ds.len(), 4, 10);
    let mut blank = out.concept.weights.clone();
    blank.value_targets.iter_mut().chain(blank.key_targets.iter_mut()).for_each(|v| v.fill(0.0));
    let shut = evaluate(&p, &out.concept.weights, &ds, &draws, EditPath::Gated, gate).unwrap();
    let without = evaluate(&p, &blank, &ds, &draws, EditPath::Gated, gate).unwrap();
    assert!((shut - without).abs() <= 1e-8 * without);
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let p = pipeline(11);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let cfg = TrainConfig {
        lr_o: 1e12,
        lr_embed: 1e12,
        ..short(50, 11)
    };
    match train_concept(&c, &dataset(&p, 11), &cfg, &p) {
        Err(Error::Diverged { step, .. }) => assert!(step < 50),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn empty_or_placeholderless_data_is_rejected() {
    let p = pipeline(12);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    assert!(matches!(train_concept(&c, &[], &short(1, 0), &p), Err(Error::Contract(_))));
    let mut ds = dataset(&p, 12);
    ds[0].prompt = tokenize("a photo of a cat");
    assert!(matches!(train_concept(&c, &ds, &short(1, 0), &p), Err(Error::Contract(_))));
}

/// Central differences of the validation loss against the analytic gradient.
fn check_gradient(p: &ToyPipeline, concept: &Concept, path: EditPath, coords: usize) {
    let ds = dataset(p, 13);
    let draws = validation_draws(p, ds.len(), 3, 13);
    let gate = concept.train_gate;
    let (_, grad) = loss_and_grad(p, &concept.weights, &ds, &draws, path, gate).unwrap();
    let h = 1e-5;
    let loss = |w: &ConceptWeights| evaluate(p, w, &ds, &draws, path, gate).unwrap();
    let mut checked = 0;
    for k in 0..coords {
        let layer = k % p.layer_count();
        let (idx, which) = (k * 7 % 16, k % 3);
        let mut plus = concept.weights.clone();
        let mut minus = concept.weights.clone();
        let analytic = match which {
            0 => {
                plus.value_targets[layer][idx] += h;
                minus.value_targets[layer][idx] -= h;
                grad.value_targets[layer][idx]
            }
            1 => {
                let j = k * 5 % plus.embedding.len();
                plus.embedding[j] += h;
                minus.embedding[j] -= h;
                grad.embedding[j]
            }
            _ => {
                plus.key_targets[layer][idx] += h;
                minus.key_targets[layer][idx] -= h;
                grad.key_targets[layer][idx]
            }
        };
        let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-6);
        assert!(
            (analytic - numeric).abs() <= 1e-5 * scale,
            "{path:?} coordinate {k}: analytic {analytic}, numeric {numeric}"
        );
        checked += 1;
    }
    assert_eq!(checked, coords);
}

#[test]
fn gradients_match_finite_differences_on_every_path() {
    let p = pipeline(13);
    let mut c = init_concept(&p, "S*", "teddy").unwrap();
    // Move off the superclass so the gate sits on its slope.
    c.weights.embedding[26] += 0.4;
    c.weights.value_targets[0][3] += 0.5;
    for path in [EditPath::Gated, EditPath::Ungated, EditPath::Replacement, EditPath::ClosedForm] {
        check_gradient(&p, &c, path, 12);
    }
}

#[test]
fn global_lock_uses_superclass_keys_and_keeps_values() {
    let p = pipeline(14);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let tokens = tokenize("a S* on the beach");
    let gate = GateParams::new(0.5, 0.15).unwrap();
    let kv = global_key_lock(&p, &tokens, &c, gate).unwrap();
    let sup = p.encoder().encode(&substitute(&tokens, PLACEHOLDER, "teddy"), &HashMap::new()).unwrap();
    let mut slot = ConceptSlot::new(&c);
    slot.beta = 0.5;
    let local = condition(&p, &tokens, &[slot], LockMode::Local, 0.15).unwrap();
    for l in 0..p.layer_count() {
        let expected: Matrix = &sup.encodings * p.w_k(l).transpose();
        assert_eq!(kv.keys[l], expected);
        assert_eq!(kv.values[l], local.kv.values[l]);
    }
    assert!(matches!(
        global_key_lock(&p, &tokenize("a photo of a cat"), &c, gate),
        Err(Error::Contract(_))
    ));
}

#[test]
fn global_lock_keeps_other_keys_under_identity_mixing() {
    let p = identity_pipeline(15);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let tokens = tokenize("a S* on the beach");
    let global = global_key_lock(&p, &tokens, &c, GateParams::new(0.5, 0.15).unwrap()).unwrap();
    let plain = condition(&p, &tokens, &[ConceptSlot::new(&c)], LockMode::None, 0.15).unwrap();
    for l in 0..p.layer_count() {
        for m in (0..tokens.len()).filter(|&m| tokens[m] != PLACEHOLDER) {
            let diff = (global.keys[l].row(m) - plain.kv.keys[l].row(m)).amax();
            assert!(diff < 1e-12, "layer {l} token {m}: {diff}");
        }
    }
}

#[test]
fn global_lock_needs_a_superclass() {
    let p = pipeline(16);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let mut slot = ConceptSlot::new(&c);
    slot.superclass = None;
    assert!(matches!(
        condition(&p, &tokenize("a S*"), &[slot], LockMode::Global, 0.15),
        Err(Error::Contract(_))
    ));
}

#[test]
fn local_lock_key_at_placeholder_is_the_superclass_key_when_saturated() {
    let p = pipeline(17);
    let ds = dataset(&p, 17);
    let c = init_concept(&p, "S*", "teddy").unwrap();
    let trained = train_concept(&c, &ds, &short(5, 17), &p).unwrap().concept;
    let tokens = tokenize(INIT_TEMPLATE);
    let ep = p.encoder().encode(&tokens, &overrides(&[ConceptSlot::new(&trained)])).unwrap();
    let s = ep.concept_index.unwrap();
    // Saturate: place i* at the placeholder encoding so e⊥ vanishes and the gate is 1.
    let mut w = trained.weights.clone();
    w.i_star = ep.row(s);
    let slot = ConceptSlot {
        placeholder: PLACEHOLDER.into(),
        weights: &w,
        superclass: Some("teddy".into()),
        beta: 0.0,
    };
    let cond = condition(&p, &tokens, &[slot], LockMode::Local, 1e-3).unwrap();
    let e_sup = p.encoder().superclass_encoding(INIT_TEMPLATE, "teddy").unwrap();
    for l in 0..p.layer_count() {
        let expected = p.w_k(l) * &e_sup;
        let got = cond.kv.keys[l].row(s).transpose();
        assert!((&got - &expected).norm() <= 1e-8 * expected.norm());
    }
}

#[test]
fn condition_without_concepts_is_the_base_model() {
    let p = pipeline(18);
    let tokens = tokenize("a photo of a dog");
    let cond = condition(&p, &tokens, &[], LockMode::Local, 0.15).unwrap();
    let ep = p.encoder().encode(&tokens, &HashMap::new()).unwrap();
    assert_eq!(cond.kv, p.base_kv(&ep));
}

#[test]
fn generation_without_concepts_is_base_sampling() {
    let p = pipeline(19);
    let tokens = tokenize("a photo of a dog");
    let cfg = GenerateConfig {
        seed: 4,
        guidance: 3.0,
        ..Default::default()
    };
    let g = generate(&p, &tokens, &[], &cfg).unwrap();
    let kv = p.base_kv(&p.encoder().encode(&tokens, &HashMap::new()).unwrap());
    let uncond = p.base_kv(&p.unconditional_prompt().unwrap());
    let d = p.denoiser();
    let base = ddim_sample(
        |x: &Matrix, t, b| match b {
            crate::diffuser::Branch::Conditional => d.predict_eps(x, t, &kv),
            crate::diffuser::Branch::Unconditional => d.predict_eps(x, t, &uncond),
        },
        8,
        8,
        16,
        d.schedule(),
        cfg.steps,
        cfg.guidance,
        cfg.seed,
    )
    .unwrap();
    assert_eq!(g.grid, base);
    assert_eq!(g.attention.len(), p.layer_count());
    assert_eq!(g.attention[0].tokens(), tokens.len());
}

#[test]
fn two_concepts_match_a_brute_force_multi_pass() {
    let p = pipeline(20);
    let a = init_concept(&p, "a", "teddy").unwrap();
    let mut b = init_concept(&p, "b", "cat").unwrap();
    b.weights.value_targets[1][2] += 1.0;
    let slots = [
        ConceptSlot {
            placeholder: "S1".into(),
            ..ConceptSlot::new(&a)
        },
        ConceptSlot {
            placeholder: "S2".into(),
            beta: 0.6,
            ..ConceptSlot::new(&b)
        },
    ];
    let tokens = tokenize("a S1 next to a S2");
    let tau = 0.15;
    let cond = condition(&p, &tokens, &slots, LockMode::Local, tau).unwrap();
    let m = p.metric();
    let c_inv = m.c_inv();

    // Gram-Schmidt in the C⁻¹ inner product, written out directly.
    let ip = |x: &Vector, y: &Vector| (x.transpose() * c_inv * y)[(0, 0)];
    let mut basis: Vec<Vector> = Vec::new();
    for s in &slots {
        let mut u = s.weights.i_star.clone();
        for q in &basis {
            u -= q * ip(q, &u);
        }
        let n = ip(&u, &u).sqrt();
        basis.push(u / n);
    }
    for l in 0..p.layer_count() {
        for (w, targets, got) in [
            (p.w_k(l), slots.iter().map(|s| &s.weights.key_targets[l]).collect::<Vec<_>>(), &cond.kv.keys[l]),
            (p.w_v(l), slots.iter().map(|s| &s.weights.value_targets[l]).collect(), &cond.kv.values[l]),
        ] {
            for row in 0..tokens.len() {
                let e = cond.prompt.row(row);
                let mut e_perp = e.clone();
                for q in &basis {
                    e_perp -= q * ip(q, &e);
                }
                let mut h = w * e_perp;
                for (j, s) in slots.iter().enumerate() {
                    let r = ip(&s.weights.i_star, &e) / ip(&s.weights.i_star, &s.weights.i_star);
                    h += targets[j] * gate_value(r, GateParams { beta: s.beta, tau });
                }
                let diff = (got.row(row).transpose() - &h).norm();
                assert!(diff <= 1e-10 * h.norm().max(1.0), "layer {l} row {row}: {diff}");
            }
        }
    }
}

#[test]
fn mismatch_collapses_without_mixing() {
    let p = identity_pipeline(21);
    let ds = dataset(&p, 21);
    let r = reproduce_mismatch(&p, &ds, "teddy", &short(20, 21)).unwrap();
    assert!(r.gap().abs() < 1e-6, "{r:?}");
    assert!(r.train_view_gap().abs() < 1e-6, "{r:?}");
}

#[test]
fn mismatch_report_is_deterministic() {
    let p = pipeline(22);
    let ds = dataset(&p, 22);
    let cfg = short(10, 22);
    assert_eq!(
        reproduce_mismatch(&p, &ds, "teddy", &cfg).unwrap(),
        reproduce_mismatch(&p, &ds, "teddy", &cfg).unwrap()
    );
}

#[test]
fn lock_mode_text_round_trip() {
    for m in [LockMode::None, LockMode::Local, LockMode::Global] {
        assert_eq!(m.to_string().parse::<LockMode>().unwrap(), m);
    }
    assert!("both".parse::<LockMode>().is_err());
    assert_eq!(LockMode::Local.default_beta(), 0.675);
    assert_eq!(LockMode::Global.default_beta(), 0.5);
}
