use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::testutil::{random_matrix, rel_diff};
use crate::Matrix;

fn pipeline() -> ToyPipeline {
    ToyPipeline::new(PipelineConfig::with_seed(3)).unwrap()
}

#[test]
fn softmax_of_a_single_token_is_one() {
    let logits = Matrix::from_column_slice(4, 1, &[3.0, -7.0, 0.0, 1e3]);
    let a = attention::softmax_rows(&logits);
    assert!(a.iter().all(|&v| v == 1.0));
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let a = attention::softmax_rows(&Matrix::from_element(2, 5, 0.7));
    for v in a.iter() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn attention_matches_a_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = pipeline();
    let layer = &p.denoiser().layers()[0];
    let feats = random_matrix(&mut rng, 6, layer.d_f());
    let keys = random_matrix(&mut rng, 4, layer.d_k());
    let values = random_matrix(&mut rng, 4, layer.d_v());
    let (out, attn) = layer.attend(&feats, &keys, &values).unwrap();
    for px in 0..6 {
        let q: Vec<f64> = (0..layer.d_k())
            .map(|k| (0..layer.d_f()).map(|f| layer.w_q[(k, f)] * feats[(px, f)]).sum())
            .collect();
        let logits: Vec<f64> = (0..4)
            .map(|m| (0..layer.d_k()).map(|k| q[k] * keys[(m, k)]).sum::<f64>() / (layer.d_k() as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| (l - max).exp() / z).collect();
        let mixed: Vec<f64> = (0..layer.d_v()).map(|v| (0..4).map(|m| w[m] * values[(m, v)]).sum()).collect();
        for m in 0..4 {
            assert!((attn[(px, m)] - w[m]).abs() < 1e-12);
        }
        for f in 0..layer.d_f() {
            let expected = feats[(px, f)] + (0..layer.d_v()).map(|v| layer.w_out[(f, v)] * mixed[v]).sum::<f64>();
            assert!((out[(px, f)] - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let p = pipeline();
    let ep = p.encoder().encode_text("a photo of a cat", &Default::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let grid = FeatureGrid::random(&mut rng, 8, 8, 16);
    for layer in p.denoiser().layers() {
        let (_, maps) = cross_attention(layer, &grid, &ep, AttentionMode::Base, None).unwrap();
        for row in maps.weights.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn cross_attention_mode_and_basis_must_agree() {
    let p = pipeline();
    let ep = p.encoder().encode_text("a cat", &Default::default()).unwrap();
    let grid = FeatureGrid::zeros(8, 8, 16);
    let layer = &p.denoiser().layers()[0];
    assert!(matches!(
        cross_attention(layer, &grid, &ep, AttentionMode::GatedMulti, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn noisify_endpoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = FeatureGrid::random(&mut rng, 2, 3, 4);
    let eps = FeatureGrid::random(&mut rng, 2, 3, 4);
    assert_eq!(noisify_at(&x0, 1.0, &eps).unwrap(), x0);
    assert_eq!(noisify_at(&x0, 0.0, &eps).unwrap(), eps);
    let half = noisify_at(&x0, 0.25, &eps).unwrap();
    let expected = x0.data() * 0.5 + eps.data() * 0.75f64.sqrt();
    assert!((half.data() - expected).amax() < 1e-15);
    assert!(noisify_at(&x0, 1.5, &eps).is_err());
}

#[test]
fn schedule_is_linear_and_decreasing() {
    let s = Schedule::default();
    assert_eq!(s.steps(), 50);
    assert!((s.alpha_bar(0) - 0.999).abs() < 1e-15);
    assert!((s.alpha_bar(49) - 0.05).abs() < 1e-15);
    assert!(s.values().windows(2).all(|w| w[1] < w[0]));
    assert!(Schedule::from_alpha_bar(vec![0.9, 0.95]).is_err());
}

#[test]
fn ddim_timesteps_are_evenly_spaced() {
    assert_eq!(ddim_timesteps(50, 10).unwrap(), vec![49, 44, 39, 34, 29, 24, 19, 14, 9, 4]);
    assert!(ddim_timesteps(50, 0).is_err());
}

#[test]
fn ddim_with_zero_noise_prediction_rescales_the_start() {
    let s = Schedule::default();
    let steps = ddim_timesteps(50, 10).unwrap();
    let zero = |x: &Matrix, _: usize, _: Branch| Ok(Matrix::zeros(x.nrows(), x.ncols()));
    let out = ddim_sample(zero, 2, 2, 3, &s, 10, 1.0, 5).unwrap();
    let mut rng = crate::rng::stream_rng(5, crate::rng::stream::SAMPLING);
    let start = FeatureGrid::random(&mut rng, 2, 2, 3);
    // with ε̂ = 0 every step multiplies by √(ᾱ_prev/ᾱ_t); the product telescopes.
    let expected = start.data() / s.alpha_bar(steps[0]).sqrt();
    assert!((out.data() - expected).amax() < 1e-12);
}

#[test]
fn unit_guidance_skips_the_unconditional_branch() {
    let s = Schedule::default();
    let mut uncond_calls = 0;
    let predict = |x: &Matrix, _: usize, b: Branch| {
        if b == Branch::Unconditional {
            uncond_calls += 1;
        }
        Ok(x * 0.1)
    };
    ddim_sample(predict, 2, 2, 2, &s, 5, 1.0, 0).unwrap();
    assert_eq!(uncond_calls, 0);
}

#[test]
fn guidance_combines_branches() {
    let s = Schedule::default();
    let predict = |x: &Matrix, _: usize, b: Branch| {
        Ok(match b {
            Branch::Conditional => x * 0.3,
            Branch::Unconditional => x * 0.1,
        })
    };
    let guided = ddim_sample(predict, 2, 2, 2, &s, 5, 2.0, 0).unwrap();
    let direct = ddim_sample(|x: &Matrix, _, _| Ok(x * 0.5), 2, 2, 2, &s, 5, 1.0, 0).unwrap();
    assert!((guided.data() - direct.data()).amax() < 1e-12);
}

#[test]
fn sampling_is_deterministic() {
    let p = pipeline();
    let ep = p.encoder().encode_text("a photo of a dog", &Default::default()).unwrap();
    let kv = p.base_kv(&ep);
    let run = || {
        ddim_sample(
            |x: &Matrix, t, _| p.denoiser().predict_eps(x, t, &kv),
            8,
            8,
            16,
            p.denoiser().schedule(),
            10,
            1.0,
            11,
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn spread_of_reference_maps() {
    assert!((attention_spread(&[0.25; 64]).unwrap() - 1.0).abs() < 1e-12);
    let mut one_hot = vec![0.0; 64];
    one_hot[17] = 3.0;
    assert_eq!(attention_spread(&one_hot).unwrap(), 0.0);
    let mut two = vec![0.0; 64];
    two[0] = 1.0;
    two[63] = 1.0;
    assert!(rel_diff(attention_spread(&two).unwrap(), 2f64.ln() / 64f64.ln()) < 1e-12);
    assert!(matches!(attention_spread(&[0.0; 4]), Err(Error::Degenerate(_))));
}

#[test]
fn denoiser_backward_matches_finite_differences() {
    let p = pipeline();
    let d = p.denoiser();
    let ep = p.encoder().encode_text("a photo of a cat", &Default::default()).unwrap();
    let kv = p.base_kv(&ep);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random_matrix(&mut rng, 64, 16);
    let target = random_matrix(&mut rng, 64, 16);
    let t = 20;
    let loss = |kv: &KvSequences| (d.predict_eps(&x, t, kv).unwrap() - &target).norm_squared();
    let trace = d.forward(&x, t, &kv).unwrap();
    let grads = d.backward(&trace, &kv, &((&trace.eps_hat - &target) * 2.0));
    let h = 1e-5;
    for l in 0..d.layers().len() {
        for (is_key, m, c) in [(true, 1, 3), (false, 2, 5), (true, 4, 0), (false, 0, 7)] {
            let mut plus = kv.clone();
            let mut minus = kv.clone();
            let (analytic, p_m, m_m) = if is_key {
                (grads.keys[l][(m, c)], &mut plus.keys[l], &mut minus.keys[l])
            } else {
                (grads.values[l][(m, c)], &mut plus.values[l], &mut minus.values[l])
            };
            p_m[(m, c)] += h;
            m_m[(m, c)] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1e-3),
                "layer {l} key={is_key} ({m},{c}): {analytic} vs {numeric}"
            );
        }
    }
}
