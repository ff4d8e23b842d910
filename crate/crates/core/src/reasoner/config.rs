use rand::Rng;
use serde::{Deserialize, Serialize};

use super::depth::sample_depth;
use crate::error::{Error, Result};

/// How the previous latent state and the anchor are merged before the
/// recurrence normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// `T + H`
    Add,
    /// `[T, H] W + b` with a learned `2d → d` projection.
    Concat,
}

/// Block family used for the pre-block and the core-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    /// Pre-norm causal self-attention + feed-forward layers.
    Transformer,
    /// Passes its input through unchanged; used to isolate the recurrence
    /// in tests.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Model width; also the item embedding width.
    pub embed_dim: usize,
    /// Inner width of each feed-forward sub-layer.
    pub ffn_dim: usize,
    pub pre_layers: usize,
    pub core_layers: usize,
    pub heads: usize,
    /// Mean depth is `k_bar + 1`; inference runs exactly `k_bar + 1` steps.
    pub k_bar: usize,
    /// Std of the initial latent state.
    pub sigma1: f64,
    /// Std of the log-normal depth sampler.
    pub sigma2: f64,
    pub aggregation: Aggregation,
    pub dropout: f64,
    pub pre_backbone: Backbone,
    pub core_backbone: Backbone,
    /// Rows of the position table.
    pub max_len: usize,
    /// Overrides both the training draw and the inference depth.
    pub fixed_depth: Option<usize>,
    /// Only the last `n` core steps receive gradient when set.
    pub backprop_steps: Option<usize>,
    pub init_std: f64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            ffn_dim: 256,
            pre_layers: 1,
            core_layers: 1,
            heads: 2,
            k_bar: 3,
            sigma1: 1.0,
            sigma2: 0.5,
            aggregation: Aggregation::Add,
            dropout: 0.5,
            pre_backbone: Backbone::Transformer,
            core_backbone: Backbone::Transformer,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            fixed_depth: None,
            backprop_steps: None,
            init_std: 0.02,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.embed_dim == 0 || self.ffn_dim == 0 {
            return fail("embed_dim and ffn_dim must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail("embed_dim must be divisible by heads");
        }
        if self.pre_layers == 0 || self.core_layers == 0 {
            return fail("pre_layers and core_layers must be >= 1");
        }
        if self.k_bar == 0 {
            return fail("k_bar must be >= 1");
        }
        if !(self.sigma1 >= 0.0 && self.sigma2 >= 0.0) {
            return fail("sigma1 and sigma2 must be >= 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.max_len == 0 {
            return fail("max_len must be positive");
        }
        if self.fixed_depth == Some(0) || self.backprop_steps == Some(0) {
            return fail("fixed_depth and backprop_steps must be >= 1 when set");
        }
        if !(self.init_std >= 0.0) {
            return fail("init_std must be >= 0");
        }
        Ok(())
    }

    /// Depth used for evaluation, rollouts and data selection.
    pub fn inference_depth(&self) -> usize {
        self.fixed_depth.unwrap_or(self.k_bar + 1)
    }

    /// Depth for one training step.
    pub fn draw_training_depth(&self, rng: &mut impl Rng) -> usize {
        match self.fixed_depth {
            Some(k) => k,
            None => sample_depth(self.k_bar, self.sigma2, rng),
        }
    }
}
