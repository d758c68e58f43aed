//! Tape-free incremental inference: prefill, then one token at a time.

use linearize_tensor::{kernels, Tensor};

use super::lora::add_delta;
use super::{layer, proj_name, AttentionKind, AttnPath, Model, Projection};
use crate::attention::{
    hybrid_attention_prefill, hybrid_decode_step, rope_row, terraced_prefill_chunked,
    HybridAttnConfig, RecurrentState, WindowMode,
};
use crate::{Error, Result};

/// How hybrid layers process a prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefillMode {
    /// Tile-by-tile kernel for terraced windows; standard windows use the full-sequence kernel.
    #[default]
    Chunked,
    /// Full-sequence kernel.
    Naive,
    /// Feed the prompt through the decoder one token at a time.
    Stepwise,
}

enum LayerCache {
    Softmax {
        /// Per head, rotated keys and values appended row by row.
        keys: Vec<Vec<f32>>,
        values: Vec<Vec<f32>>,
    },
    Hybrid {
        cfg: HybridAttnConfig<f32>,
        states: Vec<RecurrentState<f32>>,
    },
}

/// Decoding state for one sequence.
pub struct InferenceSession<'m> {
    model: &'m Model,
    caches: Vec<LayerCache>,
    position: usize,
}

fn rmsnorm(x: &[f32], w: &[f32], eps: f64, out: &mut [f32]) {
    let d = w.len();
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
        let inv = 1.0 / (ms + eps as f32).sqrt();
        for ((o, &v), &g) in o.iter_mut().zip(row).zip(w) {
            *o = v * inv * g;
        }
    }
}

fn matmul(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / inp;
    let mut y = vec![0.0; rows * out];
    kernels::matmul_acc(x, w.data(), &mut y, rows, inp, out);
    y
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl<'m> InferenceSession<'m> {
    pub fn new(model: &'m Model, path: AttnPath) -> Result<Self> {
        let cfg = model.config();
        let mut caches = Vec::with_capacity(cfg.n_layers);
        for m in 0..cfg.n_layers {
            caches.push(match (path, cfg.attention[m]) {
                (AttnPath::Native, AttentionKind::Hybrid(_)) => {
                    let hc = model.hybrid_config(m)?;
                    let states = (0..cfg.n_heads)
                        .map(|_| RecurrentState::new(&hc))
                        .collect::<Result<_>>()?;
                    LayerCache::Hybrid { cfg: hc, states }
                }
                _ => LayerCache::Softmax {
                    keys: vec![Vec::new(); cfg.n_heads],
                    values: vec![Vec::new(); cfg.n_heads],
                },
            });
        }
        Ok(Self {
            model,
            caches,
            position: 0,
        })
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// Bytes in recurrent sums across hybrid layers.
    pub fn state_bytes(&self) -> usize {
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Hybrid { states, .. } => states.iter().map(|s| s.kv().size_bytes()).sum(),
                LayerCache::Softmax { .. } => 0,
            })
            .sum()
    }

    /// Bytes in key/value caches: window rings for hybrid layers, full history for softmax layers.
    pub fn cache_bytes(&self) -> usize {
        let f = std::mem::size_of::<f32>();
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Hybrid { states, .. } => {
                    states.iter().map(|s| s.size_bytes() - s.kv().size_bytes()).sum::<usize>()
                }
                LayerCache::Softmax { keys, values } => {
                    keys.iter().chain(values).map(|v| v.len() * f).sum()
                }
            })
            .sum()
    }

    fn linear(&self, m: usize, p: Projection, x: &[f32]) -> Vec<f32> {
        let w = self.model.params().get(&proj_name(m, p));
        let mut y = matmul(x, w);
        if let Some(a) = self.model.adapter(m, p) {
            add_delta(x, &a.a, &a.b, a.scale(), x.len() / w.shape()[0], &mut y);
        }
        y
    }

    /// Runs `tokens` (continuing from the current position) and returns the
    /// logits after the last one.
    pub fn feed(&mut self, tokens: &[u32], mode: PrefillMode) -> Result<Vec<f32>> {
        let model = self.model;
        let cfg = model.config();
        let (h, hd, dm) = (cfg.n_heads, cfg.head_dim, cfg.model_dim());
        let n = tokens.len();
        if n == 0 {
            return Err(Error::shape("no tokens to feed"));
        }
        let embed = model.params().get("embed");
        let mut x = Vec::with_capacity(n * dm);
        for &t in tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::UnknownId {
                    id: t,
                    vocab: cfg.vocab_size,
                });
            }
            x.extend_from_slice(&embed.data()[t as usize * dm..(t as usize + 1) * dm]);
        }
        let start = self.position;
        let mut xn = vec![0.0; n * dm];
        for m in 0..cfg.n_layers {
            let p = model.params();
            rmsnorm(&x, p.get(&layer(m, "attn_norm")).data(), cfg.norm_eps, &mut xn);
            let mut q = self.linear(m, Projection::Wq, &xn);
            let mut k = self.linear(m, Projection::Wk, &xn);
            let v = self.linear(m, Projection::Wv, &xn);
            for i in 0..n {
                for head in 0..h {
                    let r = i * dm + head * hd..i * dm + (head + 1) * hd;
                    rope_row(&mut q[r.clone()], start + i, cfg.rope_base)?;
                    rope_row(&mut k[r], start + i, cfg.rope_base)?;
                }
            }
            let attn = self.attend(m, &q, &k, &v, n, start, mode)?;
            let o = self.linear(m, Projection::Wo, &attn);
            for (a, b) in x.iter_mut().zip(&o) {
                *a += b;
            }
            let p = model.params();
            rmsnorm(&x, p.get(&layer(m, "mlp_norm")).data(), cfg.norm_eps, &mut xn);
            let gate = matmul(&xn, p.get(&layer(m, "mlp.w_gate")));
            let up = matmul(&xn, p.get(&layer(m, "mlp.w_up")));
            let act: Vec<f32> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
            let down = matmul(&act, p.get(&layer(m, "mlp.w_down")));
            for (a, b) in x.iter_mut().zip(&down) {
                *a += b;
            }
        }
        self.position += n;
        let last = &x[(n - 1) * dm..];
        let mut ln = vec![0.0; dm];
        rmsnorm(last, model.params().get("final_norm").data(), cfg.norm_eps, &mut ln);
        Ok(matmul(&ln, model.params().get("head")))
    }

    /// Attention for rows `q/k/v[n, model_dim]`, returning `[n, model_dim]`.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &mut self,
        m: usize,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        n: usize,
        start: usize,
        mode: PrefillMode,
    ) -> Result<Vec<f32>> {
        let cfg = self.model.config();
        let (h, hd, dm) = (cfg.n_heads, cfg.head_dim, cfg.model_dim());
        let head_rows = |x: &[f32], head: usize| -> Vec<f32> {
            (0..n).flat_map(|i| x[i * dm + head * hd..i * dm + (head + 1) * hd].iter().copied()).collect()
        };
        let mut out = vec![0.0; n * dm];
        match &mut self.caches[m] {
            LayerCache::Softmax { keys, values } => {
                let scale = 1.0 / (hd as f32).sqrt();
                for head in 0..h {
                    keys[head].extend(head_rows(k, head));
                    values[head].extend(head_rows(v, head));
                    let (kh, vh) = (&keys[head], &values[head]);
                    let mut logits = Vec::with_capacity(start + n);
                    for i in 0..n {
                        let qi = &q[i * dm + head * hd..i * dm + (head + 1) * hd];
                        logits.clear();
                        logits.extend((0..=start + i).map(|j| kernels::dot(qi, &kh[j * hd..(j + 1) * hd]) * scale));
                        kernels::softmax_in_place(&mut logits);
                        let o = &mut out[i * dm + head * hd..i * dm + (head + 1) * hd];
                        for (j, &a) in logits.iter().enumerate() {
                            kernels::axpy(a, &vh[j * hd..(j + 1) * hd], o);
                        }
                    }
                }
            }
            LayerCache::Hybrid { cfg: hc, states } => {
                let whole = start == 0 && mode != PrefillMode::Stepwise;
                if whole {
                    let stack = |x: &[f32]| -> Result<Tensor<f32>> {
                        let data = (0..h).flat_map(|head| head_rows(x, head)).collect();
                        Ok(Tensor::new(vec![1, h, n, hd], data)?)
                    };
                    let (qt, kt, vt) = (stack(q)?, stack(k)?, stack(v)?);
                    let y = if mode == PrefillMode::Chunked && hc.mode == WindowMode::Terraced {
                        terraced_prefill_chunked(&qt, &kt, &vt, hc)?
                    } else {
                        hybrid_attention_prefill(&qt, &kt, &vt, hc)?
                    };
                    for head in 0..h {
                        for i in 0..n {
                            let src = (head * n + i) * hd;
                            out[i * dm + head * hd..i * dm + (head + 1) * hd]
                                .copy_from_slice(&y.data()[src..src + hd]);
                            states[head].absorb(&kt.data()[src..src + hd], &vt.data()[src..src + hd], hc, head);
                        }
                    }
                } else {
                    for i in 0..n {
                        for (head, state) in states.iter_mut().enumerate() {
                            let r = i * dm + head * hd..i * dm + (head + 1) * hd;
                            let y = hybrid_decode_step(state, start + i, &q[r.clone()], &k[r.clone()], &v[r.clone()], hc, head)?;
                            out[r].copy_from_slice(&y);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn argmax(x: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation of `prompt` by `n_new` tokens.
pub fn generate_greedy(model: &Model, prompt: &[u32], n_new: usize, mode: PrefillMode) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::shape("prompt must not be empty"));
    }
    let limit = model.config().max_seq_len;
    if prompt.len() > limit {
        return Err(Error::PromptTooLong {
            len: prompt.len(),
            limit,
        });
    }
    let mut out = prompt.to_vec();
    if n_new == 0 {
        return Ok(out);
    }
    let mut session = InferenceSession::new(model, AttnPath::Native)?;
    let mut logits = session.feed(prompt, mode)?;
    for i in 0..n_new {
        let next = argmax(&logits);
        out.push(next);
        if i + 1 < n_new {
            logits = session.feed(&[next], mode)?;
        }
    }
    Ok(out)
}
