use serde::{Deserialize, Serialize};

use crate::attention::{FeatureKind, WindowMode, DEFAULT_ROPE_BASE};
use crate::{Error, Result};

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

/// Shape of one linearized attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridSpec {
    pub window_size: usize,
    pub mode: WindowMode,
    pub feature: FeatureKind,
    /// Projection width `d'`; Hedgehog outputs `2·d'` features.
    pub feature_dim: usize,
}

impl HybridSpec {
    /// Spec with the feature kind's default projection width.
    pub fn new(window_size: usize, mode: WindowMode, feature: FeatureKind, head_dim: usize) -> Self {
        Self {
            window_size,
            mode,
            feature,
            feature_dim: feature.default_feature_dim(head_dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AttentionKind {
    Softmax,
    Hybrid(HybridSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// MLP hidden width as a multiple of the model width.
    pub mlp_mult: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub seed: u64,
    /// One entry per layer.
    pub attention: Vec<AttentionKind>,
}

impl ModelConfig {
    /// Softmax-attention model with byte vocabulary and defaults for the rest.
    pub fn new(n_layers: usize, n_heads: usize, head_dim: usize) -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            n_layers,
            n_heads,
            head_dim,
            mlp_mult: 4,
            max_seq_len: 256,
            rope_base: DEFAULT_ROPE_BASE,
            norm_eps: 1e-5,
            seed: 0,
            attention: vec![AttentionKind::Softmax; n_layers],
        }
    }

    pub fn model_dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_mult * self.model_dim()
    }

    pub fn is_converted(&self) -> bool {
        self.attention.iter().any(|a| matches!(a, AttentionKind::Hybrid(_)))
    }

    /// Parameters of the unconverted model without adapters.
    pub fn base_param_count(&self) -> usize {
        let (v, d, h) = (self.vocab_size, self.model_dim(), self.mlp_hidden());
        2 * v * d + d + self.n_layers * (2 * d + 4 * d * d + 3 * d * h)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers < 1 || self.n_heads < 1 || self.head_dim < 1 {
            return bad("layers, heads and head_dim must be positive".into());
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::OddHeadDim(self.head_dim));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.mlp_mult < 1 || self.max_seq_len < 1 {
            return bad("mlp_mult and max_seq_len must be positive".into());
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return bad("rope_base and norm_eps must be positive".into());
        }
        if self.attention.len() != self.n_layers {
            return bad(format!(
                "{} attention entries for {} layers",
                self.attention.len(),
                self.n_layers
            ));
        }
        for a in &self.attention {
            if let AttentionKind::Hybrid(s) = a {
                if s.window_size < 1 {
                    return Err(Error::WindowTooSmall(s.window_size));
                }
                if s.feature_dim < 1 {
                    return bad("feature_dim must be positive".into());
                }
            }
        }
        Ok(())
    }
}
