use crate::error::{ensure, Result};
use crate::diffuser::FeatureGrid;

/// Cumulative signal fractions `ᾱ_t`, strictly decreasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
}

impl Schedule {
    /// `ᾱ` linear from `first` to `last` over `steps` points.
    pub fn linear(steps: usize, first: f64, last: f64) -> Result<Self> {
        ensure(steps >= 2, || format!("schedule needs at least 2 steps, got {steps}"))?;
        ensure(first <= 1.0 && first > last && last > 0.0, || {
            format!("invalid schedule endpoints {first} → {last}")
        })?;
        let span = (first - last) / (steps - 1) as f64;
        Self::from_alpha_bar((0..steps).map(|t| first - span * t as f64).collect())
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        ensure(!alpha_bar.is_empty(), || "empty schedule".into())?;
        ensure(alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0), || "ᾱ values must lie in (0, 1]".into())?;
        ensure(alpha_bar.windows(2).all(|w| w[1] < w[0]), || "ᾱ must be strictly decreasing".into())?;
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        ensure(t < self.steps(), || format!("timestep {t} outside schedule of {} steps", self.steps()))
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::linear(50, 0.999, 0.05).expect("default schedule is valid")
    }
}

/// Forward diffusion: `√ᾱ_t·x0 + √(1 − ᾱ_t)·ε`.
pub fn noisify(x0: &FeatureGrid, t: usize, eps: &FeatureGrid, s: &Schedule) -> Result<FeatureGrid> {
    s.check_step(t)?;
    noisify_at(x0, s.alpha_bar(t), eps)
}

/// Forward diffusion at an explicit `ᾱ ∈ [0, 1]`.
pub fn noisify_at(x0: &FeatureGrid, a: f64, eps: &FeatureGrid) -> Result<FeatureGrid> {
    ensure((0.0..=1.0).contains(&a), || format!("ᾱ = {a} outside [0, 1]"))?;
    x0.check_same_shape(eps, "noise")?;
    let data = x0.data() * a.sqrt() + eps.data() * (1.0 - a).sqrt();
    FeatureGrid::new(x0.height(), x0.width(), data)
}
