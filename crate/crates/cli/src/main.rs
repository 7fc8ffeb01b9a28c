//! `klr`: covariance statistics, concept training, generation with
//! key-locked concepts, gate sweeps, and the train/inference mismatch
//! experiment.

mod commands;
mod config;
mod error;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use klr_core::personalize::LockMode;
use klr_core::Precision;

use config::{ConceptRef, RunConfig};
use error::Result;

#[derive(Parser)]
#[command(name = "klr", version, about = "Key-locked rank-1 concept editing on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the encoding covariance, cache it, and report its spectrum.
    Covstats(RunArgs),
    /// Train a concept on the synthetic dataset.
    Train(RunArgs),
    /// Sample a feature grid from a prompt with zero or more concepts.
    Generate(RunArgs),
    /// Like generate, for two or more concepts in one prompt.
    Combine(RunArgs),
    /// Tabulate gate, attention spread, and reconstruction error over a β×τ grid.
    Sweep(RunArgs),
    /// Print the header of a concept, covariance, or grid file.
    Inspect {
        path: PathBuf,
    },
    /// Per-token similarity ratios and gate values for a prompt.
    InspectGates(RunArgs),
    /// Per-layer, per-token attention maps of a generation as CSV.
    AttnDump(RunArgs),
    /// Train the placeholder-only and end-to-end variants and compare them.
    Mismatch(RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Start from this config or a previous run's manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the frozen toy model.
    #[arg(long)]
    model_seed: Option<u64>,
    #[arg(long)]
    superclass: Option<String>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    lock: Option<LockMode>,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// `[PLACEHOLDER[:SUPERCLASS]=]PATH`, repeatable.
    #[arg(long = "concept")]
    concepts: Vec<String>,
    /// Covariance cache written by `covstats`.
    #[arg(long)]
    metric: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    select_step: Option<usize>,
    #[arg(long)]
    keys_trainable: bool,
    #[arg(long)]
    one_shot: bool,
    /// Comma-separated sweep biases.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    betas: Vec<f64>,
    /// Comma-separated sweep temperatures.
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    #[arg(long)]
    guidance: Option<f64>,
    #[arg(long)]
    sampling_steps: Option<usize>,
    /// Turn off the text encoder's token mixing.
    #[arg(long)]
    identity_mixing: bool,
}

impl RunArgs {
    /// Config file (if any), then `KLR1_SEED`, then flags.
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply_seed_env()?;
        macro_rules! set {
            ($flag:expr => $($field:tt)+) => {
                if let Some(v) = $flag {
                    cfg.$($field)+ = v;
                }
            };
        }
        set!(self.seed => seed);
        set!(self.model_seed => pipeline.seed);
        set!(self.superclass => superclass);
        set!(self.prompt => prompt);
        set!(self.lock => lock);
        set!(self.precision => precision);
        set!(self.steps => train.steps);
        set!(self.batch => train.batch);
        set!(self.guidance => generate.guidance);
        set!(self.sampling_steps => generate.steps);
        if self.out.is_some() {
            cfg.out = self.out;
        }
        if self.beta.is_some() {
            cfg.beta = self.beta;
        } else if self.lock.is_some() && self.config.is_some() {
            // A new lock mode brings its own default bias.
            cfg.beta = None;
        }
        if self.tau.is_some() {
            cfg.tau = self.tau;
        }
        if self.metric.is_some() {
            cfg.metric = self.metric;
        }
        if self.select_step.is_some() {
            cfg.train.select_step = self.select_step;
        }
        cfg.keys_trainable |= self.keys_trainable;
        cfg.one_shot |= self.one_shot;
        if self.identity_mixing {
            cfg.pipeline = cfg.pipeline.without_mixing();
        }
        if !self.concepts.is_empty() {
            let n = self.concepts.len();
            cfg.concepts = self
                .concepts
                .iter()
                .enumerate()
                .map(|(i, s)| ConceptRef::parse(s, i, n))
                .collect::<Result<_>>()?;
        }
        if !self.betas.is_empty() {
            cfg.betas = self.betas;
        }
        if !self.taus.is_empty() {
            cfg.taus = self.taus;
        }
        cfg.resolve()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Inspect { path } => commands::inspect(&path),
        Command::Covstats(a) => commands::covstats(&a.into_config()?),
        Command::Train(a) => commands::train(&a.into_config()?),
        Command::Generate(a) => commands::generate_cmd(&a.into_config()?, 0),
        Command::Combine(a) => commands::generate_cmd(&a.into_config()?, 2),
        Command::Sweep(a) => commands::sweep(&a.into_config()?),
        Command::InspectGates(a) => commands::inspect_gates(&a.into_config()?),
        Command::AttnDump(a) => commands::attn_dump(&a.into_config()?),
        Command::Mismatch(a) => commands::mismatch(&a.into_config()?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("klr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
