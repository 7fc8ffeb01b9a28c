//! Toy conditional denoiser: cross-attention layers over a small feature
//! grid, a linear noise schedule, and a DDIM sampler.

mod attention;
mod denoiser;
mod grid;
mod pipeline;
mod sampler;
mod schedule;

pub use attention::{attention_spread, cross_attention, AttentionMaps, AttentionMode, CrossAttentionLayer};
pub use denoiser::{DenoiserConfig, KvSequences, ToyDenoiser, Trace};
pub use grid::FeatureGrid;
pub use pipeline::{covariance_samples, PipelineConfig, ToyPipeline};
pub use sampler::{ddim_sample, ddim_step, ddim_timesteps, Branch};
pub use schedule::{noisify, noisify_at, Schedule};

#[cfg(test)]
mod tests;
