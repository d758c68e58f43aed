//! A small pre-norm decoder (RMSNorm, rotary attention, SwiGLU MLP, untied head)
//! whose attention layers can be swapped for hybrid window + linear layers.

pub mod checkpoint;
mod config;
mod inference;
mod lora;
mod params;
mod tokenizer;

use linearize_tensor::{Gradients, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::graph::{hybrid_attention_graph, softmax_attention_graph, HybridVars};
use crate::attention::{rope_graph, FeatureMapParams, HybridAttnConfig, DEFAULT_GAMMA_RAW};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AttentionKind, HybridSpec, ModelConfig, BOS, BYTE_VOCAB, EOS};
pub use inference::{generate_greedy, InferenceSession, PrefillMode};
pub use lora::{LoraAdapter, LoraConfig, Projection};
pub use params::{Param, ParamKind, ParamStore};
pub use tokenizer::{detokenize, tokenize};

/// Seed offset so feature maps built alongside base weights use their own stream.
const HYBRID_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    lora: Option<LoraConfig>,
}

/// Which attention a forward pass runs in each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnPath {
    /// Each layer's configured attention.
    Native,
    /// Softmax attention everywhere, i.e. the original model.
    Softmax,
}

/// Model parameters placed on a tape, indexed like [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Per-layer values from a teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct LayerRecord {
    /// Residual stream entering the layer, `[batch, seq, model_dim]`.
    pub x: Var,
    /// Softmax attention output per head, `[batch, heads, seq, head_dim]`.
    pub y: Var,
    /// Hybrid attention output per head on the same q, k, v.
    pub y_hat: Var,
    pub weights: Var,
    pub weights_hat: Var,
}

fn layer(m: usize, suffix: &str) -> String {
    format!("layers.{m}.{suffix}")
}

fn proj_name(m: usize, p: Projection) -> String {
    layer(m, &format!("attn.{}", p.name()))
}

fn normal(rng: &mut impl Rng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, h) = (config.vocab_size, config.model_dim(), config.mlp_hidden());
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut p = ParamStore::default();
        p.insert("embed", ParamKind::Embedding, normal(&mut rng, vec![v, d], 1.0))?;
        for m in 0..config.n_layers {
            p.insert(layer(m, "attn_norm"), ParamKind::Norm, Tensor::full(vec![d], 1.0))?;
            for proj in Projection::ALL {
                p.insert(proj_name(m, proj), ParamKind::Projection, normal(&mut rng, vec![d, d], inv(d)))?;
            }
            p.insert(layer(m, "mlp_norm"), ParamKind::Norm, Tensor::full(vec![d], 1.0))?;
            p.insert(layer(m, "mlp.w_gate"), ParamKind::Mlp, normal(&mut rng, vec![d, h], inv(d)))?;
            p.insert(layer(m, "mlp.w_up"), ParamKind::Mlp, normal(&mut rng, vec![d, h], inv(d)))?;
            p.insert(layer(m, "mlp.w_down"), ParamKind::Mlp, normal(&mut rng, vec![h, d], inv(h)))?;
        }
        p.insert("final_norm", ParamKind::Norm, Tensor::full(vec![d], 1.0))?;
        p.insert("head", ParamKind::Head, normal(&mut rng, vec![d, v], inv(d)))?;
        let mut model = Self {
            config,
            params: p,
            lora: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed.wrapping_add(HYBRID_SEED_OFFSET));
        for m in 0..model.config.n_layers {
            if let AttentionKind::Hybrid(spec) = model.config.attention[m] {
                model.add_hybrid_params(m, spec, &mut rng)?;
            }
        }
        Ok(model)
    }

    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore, lora: Option<LoraConfig>) -> Self {
        Self {
            config,
            params,
            lora,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn lora(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn is_converted(&self) -> bool {
        self.config.is_converted()
    }

    fn add_hybrid_params(&mut self, m: usize, spec: HybridSpec, rng: &mut impl Rng) -> Result<()> {
        let (h, d) = (self.config.n_heads, self.config.head_dim);
        for which in ["fmap_q", "fmap_k"] {
            let fm = FeatureMapParams::<f32>::init(spec.feature, h, d, spec.feature_dim, rng);
            self.params.insert(
                layer(m, &format!("attn.{which}.weight")),
                ParamKind::FeatureMap,
                fm.weight().clone(),
            )?;
            if let Some(b) = fm.bias() {
                self.params
                    .insert(layer(m, &format!("attn.{which}.bias")), ParamKind::FeatureMap, b.clone())?;
            }
        }
        self.params.insert(
            layer(m, "attn.gamma_raw"),
            ParamKind::Gamma,
            Tensor::full(vec![h], DEFAULT_GAMMA_RAW as f32),
        )?;
        Ok(())
    }

    /// Swaps every softmax layer for a hybrid layer with fresh feature maps.
    ///
    /// The projections are kept, so the softmax path stays available as the
    /// teacher during attention transfer.
    pub fn convert(&mut self, spec: HybridSpec, seed: u64) -> Result<()> {
        if self.is_converted() {
            return Err(Error::AlreadyConverted);
        }
        let mut config = self.config.clone();
        config.attention = vec![AttentionKind::Hybrid(spec); config.n_layers];
        config.validate()?;
        self.config = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in 0..self.config.n_layers {
            self.add_hybrid_params(m, spec, &mut rng)?;
        }
        Ok(())
    }

    /// Adds rank-`r` adapters (`B = 0`) to the chosen projections of every layer.
    pub fn attach_lora(&mut self, cfg: LoraConfig, seed: u64) -> Result<()> {
        cfg.validate()?;
        if let Some(existing) = &self.lora {
            if let Some(t) = cfg.targets.iter().find(|t| existing.targets.contains(t)) {
                return Err(Error::DuplicateAdapter(t.name().into()));
            }
            if existing.rank != cfg.rank || existing.alpha != cfg.alpha {
                return Err(Error::InvalidConfig(
                    "additional adapters must share rank and alpha".into(),
                ));
            }
        }
        let d = self.config.model_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for m in 0..self.config.n_layers {
            for &t in &cfg.targets {
                let base = proj_name(m, t);
                let a = Tensor::from_fn(vec![cfg.rank, d], |_| rng.random_range(-bound..bound) as f32);
                self.params.insert(format!("{base}.lora_a"), ParamKind::LoraA, a)?;
                self.params
                    .insert(format!("{base}.lora_b"), ParamKind::LoraB, Tensor::zeros(vec![d, cfg.rank]))?;
            }
        }
        match &mut self.lora {
            Some(existing) => existing.targets.extend(cfg.targets),
            None => self.lora = Some(cfg),
        }
        Ok(())
    }

    /// Adapter of one projection, if attached.
    pub fn adapter(&self, m: usize, p: Projection) -> Option<LoraAdapter> {
        let lora = self.lora.as_ref()?;
        if !lora.targets.contains(&p) {
            return None;
        }
        let base = proj_name(m, p);
        Some(LoraAdapter {
            a: self.params.get(&format!("{base}.lora_a")).clone(),
            b: self.params.get(&format!("{base}.lora_b")).clone(),
            alpha: lora.alpha,
        })
    }

    /// Kernel-side configuration of a hybrid layer.
    pub fn hybrid_config(&self, m: usize) -> Result<HybridAttnConfig<f32>> {
        let AttentionKind::Hybrid(spec) = self.config.attention[m] else {
            return Err(Error::NotConverted);
        };
        let fm = |which: &str| {
            let w = self.params.get(&layer(m, &format!("attn.{which}.weight"))).clone();
            let b = spec
                .feature
                .has_bias()
                .then(|| self.params.get(&layer(m, &format!("attn.{which}.bias"))).clone());
            FeatureMapParams::from_parts(spec.feature, w, b)
        };
        Ok(HybridAttnConfig {
            window_size: spec.window_size,
            mode: spec.mode,
            gamma_raw: self.params.get(&layer(m, "attn.gamma_raw")).data().to_vec(),
            fq: fm("fmap_q")?,
            fk: fm("fmap_k")?,
            rope_base: self.config.rope_base,
        })
    }

    // ── tape forward ────────────────────────────────────────────────

    /// Places every parameter on `tape`; `trainable` decides which ones get gradients.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, trainable: impl Fn(ParamKind) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.cast::<T>(), trainable(p.kind)))
            .collect();
        Bound { vars }
    }

    /// Gradients per parameter in store order; parameters without one get `None`.
    pub fn collect_grads<T: Scalar>(&self, grads: &Gradients<T>, bound: &Bound) -> Vec<Option<Tensor<T>>> {
        bound.vars.iter().map(|&v| grads.get(v).cloned()).collect()
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        bound.var(self.params.id(name).unwrap_or_else(|| panic!("no parameter named {name}")))
    }

    pub(crate) fn check_tokens(&self, tokens: &[Vec<u32>]) -> Result<(usize, usize)> {
        let b = tokens.len();
        let n = tokens.first().map_or(0, Vec::len);
        if b == 0 || n == 0 || tokens.iter().any(|t| t.len() != n) {
            return Err(Error::shape("token batch must be non-empty with equal lengths"));
        }
        if n > self.config.max_seq_len {
            return Err(Error::PromptTooLong {
                len: n,
                limit: self.config.max_seq_len,
            });
        }
        for &id in tokens.iter().flatten() {
            if id as usize >= self.config.vocab_size {
                return Err(Error::UnknownId {
                    id,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok((b, n))
    }

    fn embed<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, tokens: &[Vec<u32>], b: usize, n: usize) -> Result<Var> {
        let ids: Vec<usize> = tokens.iter().flatten().map(|&t| t as usize).collect();
        let e = tape.embedding(self.var(bound, "embed"), &ids)?;
        Ok(tape.reshape(e, &[b, n, self.config.model_dim()])?)
    }

    fn rmsnorm<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, name: &str) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let axis = shape.len() - 1;
        let sq = tape.mul(x, x)?;
        let ms = tape.mean(sq, axis)?;
        let ms = tape.add_scalar(ms, T::lit(self.config.norm_eps))?;
        let rms = tape.sqrt(ms)?;
        let rms = tape.expand(rms, &shape)?;
        let xn = tape.div(x, rms)?;
        Ok(tape.mul(xn, self.var(bound, name))?)
    }

    fn projection<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: usize, p: Projection, x: Var) -> Result<Var> {
        let base = proj_name(m, p);
        let y = tape.matmul(x, self.var(bound, &base))?;
        match &self.lora {
            Some(l) if l.targets.contains(&p) => {
                let a = tape.transpose(self.var(bound, &format!("{base}.lora_a")))?;
                let bt = tape.transpose(self.var(bound, &format!("{base}.lora_b")))?;
                let t = tape.matmul(x, a)?;
                let delta = tape.matmul(t, bt)?;
                let delta = tape.mul_scalar(delta, T::lit(l.scale()))?;
                Ok(tape.add(y, delta)?)
            }
            _ => Ok(y),
        }
    }

    /// Rotated queries and keys plus values, each `[batch, heads, seq, head_dim]`.
    fn qkv<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: usize, x: Var) -> Result<[Var; 3]> {
        let (h, d) = (self.config.n_heads, self.config.head_dim);
        let [b, n, _] = <[usize; 3]>::try_from(tape.shape(x)).expect("rank-3 stream");
        let xn = self.rmsnorm(tape, bound, x, &layer(m, "attn_norm"))?;
        let mut out = [xn; 3];
        for (slot, p) in out.iter_mut().zip([Projection::Wq, Projection::Wk, Projection::Wv]) {
            let y = self.projection(tape, bound, m, p, xn)?;
            let y = tape.reshape(y, &[b, n, h, d])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            *slot = if p == Projection::Wv {
                y
            } else {
                rope_graph(tape, y, self.config.rope_base)?
            };
        }
        Ok(out)
    }

    fn hybrid_vars(&self, bound: &Bound, m: usize, spec: &HybridSpec) -> HybridVars {
        let opt = |which: &str| {
            spec.feature
                .has_bias()
                .then(|| self.var(bound, &layer(m, &format!("attn.{which}.bias"))))
        };
        HybridVars {
            kind: spec.feature,
            fq_weight: self.var(bound, &layer(m, "attn.fmap_q.weight")),
            fq_bias: opt("fmap_q"),
            fk_weight: self.var(bound, &layer(m, "attn.fmap_k.weight")),
            fk_bias: opt("fmap_k"),
            gamma_raw: self.var(bound, &layer(m, "attn.gamma_raw")),
        }
    }

    /// Finishes a block given the per-head attention output `y`.
    fn finish_block<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: usize, x: Var, y: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let y = tape.permute(y, &[0, 2, 1, 3])?;
        let y = tape.reshape(y, &shape)?;
        let o = self.projection(tape, bound, m, Projection::Wo, y)?;
        let h = tape.add(x, o)?;
        let hn = self.rmsnorm(tape, bound, h, &layer(m, "mlp_norm"))?;
        let gate = tape.matmul(hn, self.var(bound, &layer(m, "mlp.w_gate")))?;
        let up = tape.matmul(hn, self.var(bound, &layer(m, "mlp.w_up")))?;
        let gate = tape.silu(gate)?;
        let act = tape.mul(gate, up)?;
        let down = tape.matmul(act, self.var(bound, &layer(m, "mlp.w_down")))?;
        Ok(tape.add(h, down)?)
    }

    /// Next-token logits `[batch, seq, vocab]`.
    pub fn logits_graph<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[Vec<u32>],
        path: AttnPath,
    ) -> Result<Var> {
        let (b, n) = self.check_tokens(tokens)?;
        let mut x = self.embed(tape, bound, tokens, b, n)?;
        for m in 0..self.config.n_layers {
            let [q, k, v] = self.qkv(tape, bound, m, x)?;
            let y = match (path, &self.config.attention[m]) {
                (AttnPath::Native, AttentionKind::Hybrid(spec)) => {
                    let vars = self.hybrid_vars(bound, m, spec);
                    hybrid_attention_graph(tape, q, k, v, spec.window_size, spec.mode, &vars)?.y
                }
                _ => softmax_attention_graph(tape, q, k, v)?.y,
            };
            x = self.finish_block(tape, bound, m, x, y)?;
        }
        let xn = self.rmsnorm(tape, bound, x, "final_norm")?;
        Ok(tape.matmul(xn, self.var(bound, "head"))?)
    }

    /// Runs both attentions in every layer on shared q, k, v and propagates
    /// only the softmax output, so each layer sees the original model's inputs.
    pub fn teacher_forced_graph<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[Vec<u32>],
    ) -> Result<Vec<LayerRecord>> {
        if !self.is_converted() {
            return Err(Error::NotConverted);
        }
        let (b, n) = self.check_tokens(tokens)?;
        let mut x = self.embed(tape, bound, tokens, b, n)?;
        let mut records = Vec::with_capacity(self.config.n_layers);
        for m in 0..self.config.n_layers {
            let AttentionKind::Hybrid(spec) = self.config.attention[m] else {
                return Err(Error::NotConverted);
            };
            let [q, k, v] = self.qkv(tape, bound, m, x)?;
            let teacher = softmax_attention_graph(tape, q, k, v)?;
            let vars = self.hybrid_vars(bound, m, &spec);
            let student = hybrid_attention_graph(tape, q, k, v, spec.window_size, spec.mode, &vars)?;
            records.push(LayerRecord {
                x,
                y: teacher.y,
                y_hat: student.y,
                weights: teacher.weights,
                weights_hat: student.weights,
            });
            if m + 1 < self.config.n_layers {
                x = self.finish_block(tape, bound, m, x, teacher.y)?;
            }
        }
        Ok(records)
    }
}
