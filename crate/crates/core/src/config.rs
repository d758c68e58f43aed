//! Run configuration read from a TOML file; every key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{FeatureKind, WindowMode, DEFAULT_ROPE_BASE};
use crate::bench::BenchConfig;
use crate::model::{AttentionKind, HybridSpec, ModelConfig, BYTE_VOCAB};
use crate::train::{synthetic_text, AdjustConfig, Corpus, PretrainConfig, TransferConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_mult: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            n_layers: 2,
            n_heads: 2,
            head_dim: 16,
            mlp_mult: 4,
            max_seq_len: 256,
            rope_base: DEFAULT_ROPE_BASE,
            norm_eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub window_size: usize,
    pub mode: WindowMode,
    pub feature: FeatureKind,
    /// Projection width; 0 picks the feature kind's default.
    pub feature_dim: usize,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self {
            window_size: 8,
            mode: WindowMode::Standard,
            feature: FeatureKind::Hedgehog,
            feature_dim: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Plain text split into documents at blank lines.
    pub text: Option<PathBuf>,
    /// Raw little-endian `u32` token ids; takes precedence over `text`.
    pub tokens: Option<PathBuf>,
    /// Documents of generated text used when no file is given.
    pub synthetic_docs: usize,
    /// Fraction of the corpus held out for evaluation.
    pub eval_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            text: None,
            tokens: None,
            synthetic_docs: 600,
            eval_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization, data sampling and every stage.
    pub seed: u64,
    pub model: ModelSection,
    pub attention: AttentionSection,
    pub data: DataSection,
    pub pretrain: PretrainConfig,
    pub transfer: TransferConfig,
    pub adjust: AdjustConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::BadConfig(e.message().to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::BadConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::BadConfig(m) => Error::BadConfig(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    /// Overrides the run seed and every stage seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.transfer.seed = seed;
        self.adjust.seed = seed;
    }

    /// The configuration with all defaults filled in, as TOML.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            vocab_size: m.vocab_size,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            head_dim: m.head_dim,
            mlp_mult: m.mlp_mult,
            max_seq_len: m.max_seq_len,
            rope_base: m.rope_base,
            norm_eps: m.norm_eps,
            seed: self.seed,
            attention: vec![AttentionKind::Softmax; m.n_layers],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hybrid_spec(&self) -> HybridSpec {
        let a = &self.attention;
        let mut spec = HybridSpec::new(a.window_size, a.mode, a.feature, self.model.head_dim);
        if a.feature_dim > 0 {
            spec.feature_dim = a.feature_dim;
        }
        spec
    }

    /// Training and evaluation corpora.
    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let d = &self.data;
        let corpus = match (&d.tokens, &d.text) {
            (Some(p), _) => Corpus::load(p)?,
            (None, Some(p)) => Corpus::from_text(&std::fs::read(p).map_err(|e| Error::io(p, e))?),
            (None, None) => Corpus::from_text(&synthetic_text(self.seed, d.synthetic_docs)),
        };
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return Err(Error::BadConfig(format!("eval_fraction {} not in (0, 1)", d.eval_fraction)));
        }
        Ok(corpus.split(d.eval_fraction))
    }
}
