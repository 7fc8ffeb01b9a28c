use crate::diffuser::{FeatureGrid, Schedule};
use crate::error::{ensure, Result};
use crate::rng::{stream, stream_rng};
use crate::Matrix;

/// Which noise prediction the sampler is asking for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Evenly spaced sampling timesteps, descending, ending at the first
/// training step's neighborhood: `(k+1)·T/n − 1` for `k = n−1 … 0`.
pub fn ddim_timesteps(train_steps: usize, n_steps: usize) -> Result<Vec<usize>> {
    ensure(n_steps >= 1 && n_steps <= train_steps, || {
        format!("{n_steps} sampling steps for a {train_steps}-step schedule")
    })?;
    Ok((0..n_steps).rev().map(|k| (k + 1) * train_steps / n_steps - 1).collect())
}

/// Deterministic DDIM sampling with scalar guidance
/// `ε̂ = ε_u + guidance·(ε_c − ε_u)`. At guidance 1 only the conditional
/// branch is evaluated. The last update targets `ᾱ = 1`, returning the clean
/// estimate.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<F>(
    mut predict: F,
    height: usize,
    width: usize,
    channels: usize,
    s: &Schedule,
    n_steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<FeatureGrid>
where
    F: FnMut(&Matrix, usize, Branch) -> Result<Matrix>,
{
    ensure(guidance.is_finite(), || "guidance must be finite".into())?;
    let steps = ddim_timesteps(s.steps(), n_steps)?;
    let mut rng = stream_rng(seed, stream::SAMPLING);
    let mut x = FeatureGrid::random(&mut rng, height, width, channels).into_data();
    for (k, &t) in steps.iter().enumerate() {
        let cond = predict(&x, t, Branch::Conditional)?;
        let eps = if guidance == 1.0 {
            cond
        } else {
            let uncond = predict(&x, t, Branch::Unconditional)?;
            &uncond + (cond - &uncond) * guidance
        };
        ensure(eps.shape() == x.shape(), || "noise prediction has the wrong shape".into())?;
        let a_t = s.alpha_bar(t);
        let a_prev = steps.get(k + 1).map_or(1.0, |&p| s.alpha_bar(p));
        x = ddim_step(&x, &eps, a_t, a_prev);
    }
    FeatureGrid::new(height, width, x)
}

/// `x_prev = √ᾱ_prev·x̂0 + √(1 − ᾱ_prev)·ε̂` with `x̂0 = (x_t − √(1 − ᾱ_t)·ε̂)/√ᾱ_t`.
pub fn ddim_step(x_t: &Matrix, eps: &Matrix, a_t: f64, a_prev: f64) -> Matrix {
    let x0 = (x_t - eps * (1.0 - a_t).sqrt()) / a_t.sqrt();
    x0 * a_prev.sqrt() + eps * (1.0 - a_prev).sqrt()
}
