use std::path::{Path, PathBuf};

use klr_core::diffuser::PipelineConfig;
use klr_core::personalize::{GenerateConfig, LockMode, SyntheticConfig, TrainConfig, INFERENCE_TAU};
use klr_core::textenc::{is_placeholder, INIT_TEMPLATE, PLACEHOLDER};
use klr_core::{GateParams, Precision};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const SEED_ENV: &str = "KLR1_SEED";
pub const MANIFEST: &str = "manifest.toml";

/// A concept file bound to a placeholder token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRef {
    pub path: PathBuf,
    pub placeholder: String,
    /// Only global key-locking needs it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superclass: Option<String>,
}

impl ConceptRef {
    /// `[PLACEHOLDER[:SUPERCLASS]=]PATH`; the placeholder defaults to the
    /// `index`-th of `S*` (single concept) or `S1`, `S2`, ... (several).
    pub fn parse(spec: &str, index: usize, total: usize) -> Result<Self> {
        let (binding, path) = match spec.split_once('=') {
            Some((b, p)) => (Some(b), p),
            None => (None, spec),
        };
        let (placeholder, superclass) = match binding {
            Some(b) => match b.split_once(':') {
                Some((p, s)) => (p.to_string(), Some(s.to_string())),
                None => (b.to_string(), None),
            },
            None if total == 1 => (PLACEHOLDER.to_string(), None),
            None => (format!("S{}", index + 1), None),
        };
        if !is_placeholder(&placeholder) {
            return Err(CliError::Config(format!("{placeholder:?} is not a placeholder token (use S* or S1, S2, ...)")));
        }
        if path.is_empty() {
            return Err(CliError::Config(format!("concept {spec:?} has no path")));
        }
        Ok(Self {
            path: PathBuf::from(path),
            placeholder,
            superclass,
        })
    }
}

/// Everything a run depends on. Written back as the run's manifest so the
/// same command with `--config manifest.toml` reproduces it bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the dataset, training draws, and sampling noise.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub superclass: String,
    pub prompt: String,
    pub lock: LockMode,
    /// Inference gate overrides; unset means the lock mode's default bias
    /// and the inference temperature.
    pub beta: Option<f64>,
    pub tau: Option<f64>,
    pub precision: Precision,
    pub one_shot: bool,
    pub keys_trainable: bool,
    /// Covariance cache to use instead of re-estimating.
    pub metric: Option<PathBuf>,
    pub concepts: Vec<ConceptRef>,
    /// Sweep grids. Empty means the defaults.
    pub betas: Vec<f64>,
    pub taus: Vec<f64>,
    /// The frozen model. Its seed identifies the model, not the run.
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            superclass: "teddy".into(),
            prompt: INIT_TEMPLATE.into(),
            lock: LockMode::Local,
            beta: None,
            tau: None,
            precision: Precision::F32,
            one_shot: false,
            keys_trainable: false,
            metric: None,
            concepts: Vec::new(),
            betas: Vec::new(),
            taus: Vec::new(),
            pipeline: PipelineConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

pub const DEFAULT_SWEEP_BETAS: [f64; 7] = [0.3, 0.4, 0.5, 0.6, 0.675, 0.75, 0.9];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|source| CliError::ConfigParse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize manifest: {e}")))
    }

    /// Replaces the seed with `KLR1_SEED` when it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(raw) = std::env::var(SEED_ENV) {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={raw:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Copies the run seed and inference gate into the per-stage configs
    /// and fills in defaults, so the manifest states every value used.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.generate.seed = self.seed;
        self.generate.lock = self.lock;
        self.beta = Some(self.beta.unwrap_or(self.lock.default_beta()));
        self.tau = Some(self.tau.unwrap_or(INFERENCE_TAU));
        self.generate.tau = self.tau.expect("set above");
        self.inference_gate()?;
        if self.taus.is_empty() {
            self.taus = vec![GateParams::TRAINING.tau, INFERENCE_TAU];
        }
        if self.betas.is_empty() {
            self.betas = DEFAULT_SWEEP_BETAS.to_vec();
        }
        if let Some(bad) = self.taus.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(CliError::Config(format!("sweep temperature {bad} must be positive")));
        }
        if self.betas.iter().any(|b| b.is_nan()) {
            return Err(CliError::Config("sweep bias is NaN".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.concepts {
            if !seen.insert(c.placeholder.as_str()) {
                return Err(CliError::Config(format!("placeholder {} is bound twice", c.placeholder)));
            }
        }
        Ok(self)
    }

    pub fn inference_gate(&self) -> Result<GateParams> {
        let beta = self.beta.unwrap_or(self.lock.default_beta());
        let tau = self.tau.unwrap_or(INFERENCE_TAU);
        GateParams::new(beta, tau).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Config("no output directory (pass --out)".into()))
    }
}
