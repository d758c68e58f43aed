//! Sliding-window softmax mixed with linear attention over older tokens.
//!
//! For query `n` with window `W(n)` and linear set `L(n)` (everything older
//! than the window):
//!
//! ```text
//!        Σ_{j∈W} γ exp(q·k_j/√d − c_n) v_j + φq(q)ᵀ Σ_{j∈L} φk(k_j) v_jᵀ
//! ŷ_n = ─────────────────────────────────────────────────────────────────
//!        Σ_{j∈W} γ exp(q·k_j/√d − c_n)     + φq(q)ᵀ Σ_{j∈L} φk(k_j)  + eps
//! ```
//!
//! where `c_n` is the largest window logit and `γ = sigmoid(gamma_raw)` per head.

use linearize_tensor::{kernels, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::linear::{map_rows, KvState};
use super::{check_maps, check_qkv, FeatureMapParams, EPS};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    /// The last `w` tokens, ending at the query.
    Standard,
    /// The query's aligned block of `w` tokens, up to the query.
    Terraced,
}

/// First window position (0-based) for the query at 0-based position `pos`.
pub fn window_start(pos: usize, window: usize, mode: WindowMode) -> usize {
    match mode {
        WindowMode::Standard => (pos + 1).saturating_sub(window),
        WindowMode::Terraced => pos / window * window,
    }
}

pub const DEFAULT_GAMMA_RAW: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct HybridAttnConfig<T: Scalar = f32> {
    pub window_size: usize,
    pub mode: WindowMode,
    /// One raw mixing value per head; the window term is scaled by its sigmoid.
    pub gamma_raw: Vec<T>,
    pub fq: FeatureMapParams<T>,
    pub fk: FeatureMapParams<T>,
    pub rope_base: f64,
}

impl<T: Scalar> HybridAttnConfig<T> {
    pub fn new(
        window_size: usize,
        mode: WindowMode,
        fq: FeatureMapParams<T>,
        fk: FeatureMapParams<T>,
        rope_base: f64,
    ) -> Self {
        let heads = fq.heads();
        Self {
            window_size,
            mode,
            gamma_raw: vec![T::lit(DEFAULT_GAMMA_RAW); heads],
            fq,
            fk,
            rope_base,
        }
    }

    /// `sigmoid(gamma_raw)` per head.
    pub fn window_factors(&self) -> Vec<T> {
        self.gamma_raw
            .iter()
            .map(|&g| T::one() / (T::one() + (-g).exp()))
            .collect()
    }

    fn validate(&self, heads: usize, head_dim: usize) -> Result<usize> {
        if self.window_size < 1 {
            return Err(Error::WindowTooSmall(self.window_size));
        }
        if self.gamma_raw.len() != heads {
            return Err(Error::shape(format!(
                "{} mixing values for {heads} heads",
                self.gamma_raw.len()
            )));
        }
        check_maps(&self.fq, &self.fk, heads, head_dim)
    }
}

/// Accumulates the hybrid numerator into `out` and divides by the shared denominator.
///
/// `window` yields the (key, value) rows of the query's window; `logits` is
/// scratch space with room for every window entry.
fn mix<'a, T: Scalar + 'a>(
    q: &[T],
    window: impl Iterator<Item = (&'a [T], &'a [T])> + Clone,
    factor: T,
    phi_q: &[T],
    state: &KvState<T>,
    logits: &mut [T],
    out: &mut [T],
) {
    let scale = T::one() / T::lit(q.len() as f64).sqrt();
    let mut m = 0;
    let mut c = T::neg_infinity();
    for (key, _) in window.clone() {
        let l = kernels::dot(q, key) * scale;
        c = c.max(l);
        logits[m] = l;
        m += 1;
    }
    out.fill(T::zero());
    let mut den = T::zero();
    for ((_, value), &l) in window.zip(logits[..m].iter()) {
        let a = factor * (l - c).exp();
        den += a;
        kernels::axpy(a, value, out);
    }
    den += state.read(phi_q, out) + T::lit(EPS);
    out.iter_mut().for_each(|x| *x /= den);
}

/// Hybrid attention over a whole sequence, `q`/`k` already rotated.
pub fn hybrid_attention_prefill<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &HybridAttnConfig<T>,
) -> Result<Tensor<T>> {
    hybrid_prefill_with_factors(q, k, v, cfg, &cfg.window_factors())
}

/// As [`hybrid_attention_prefill`] with explicit per-head window factors
/// instead of `sigmoid(gamma_raw)`; a factor of exactly 0 removes the window term.
pub fn hybrid_prefill_with_factors<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &HybridAttnConfig<T>,
    factors: &[T],
) -> Result<Tensor<T>> {
    let [b, h, n, d] = check_qkv(q, k, v)?;
    let f = cfg.validate(h, d)?;
    if factors.len() != h {
        return Err(Error::shape(format!("{} window factors for {h} heads", factors.len())));
    }
    let w = cfg.window_size;
    let mut out = vec![T::zero(); b * h * n * d];
    let mut logits = vec![T::zero(); w.min(n)];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * n * d;
        let (qh, kh, vh) = (
            &q.data()[base..base + n * d],
            &k.data()[base..base + n * d],
            &v.data()[base..base + n * d],
        );
        let pq = map_rows(&cfg.fq, head, qh, d);
        let pk = map_rows(&cfg.fk, head, kh, d);
        let mut state = KvState::new(f, d);
        let mut folded = 0;
        for i in 0..n {
            let start = window_start(i, w, cfg.mode);
            while folded < start {
                state.fold(&pk[folded * f..(folded + 1) * f], &vh[folded * d..(folded + 1) * d]);
                folded += 1;
            }
            let window = (start..=i).map(|j| (&kh[j * d..(j + 1) * d], &vh[j * d..(j + 1) * d]));
            mix(
                &qh[i * d..(i + 1) * d],
                window,
                factors[head],
                &pq[i * f..(i + 1) * f],
                &state,
                &mut logits,
                &mut out[base + i * d..base + (i + 1) * d],
            );
        }
    }
    Ok(Tensor::new(vec![b, h, n, d], out)?)
}

/// Byte accounting for intermediate buffers of the chunked prefill.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScratchMeter {
    current: usize,
    peak: usize,
}

impl ScratchMeter {
    fn alloc<T>(&mut self, len: usize) -> Vec<T>
    where
        T: Scalar,
    {
        self.current += len * std::mem::size_of::<T>();
        self.peak = self.peak.max(self.current);
        vec![T::zero(); len]
    }

    fn free<T>(&mut self, buf: Vec<T>) {
        self.release(buf.len() * std::mem::size_of::<T>());
    }

    fn reserve(&mut self, bytes: usize) {
        self.current += bytes;
        self.peak = self.peak.max(self.current);
    }

    fn release(&mut self, bytes: usize) {
        self.current -= bytes;
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak
    }
}

/// Terraced hybrid attention computed tile by tile.
///
/// Each tile of `w` queries attends with softmax inside its own tile and reads
/// a running state built from all earlier tiles; the diagonal tile never goes
/// through the feature maps' linear term.
pub fn terraced_prefill_chunked<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &HybridAttnConfig<T>,
) -> Result<Tensor<T>> {
    terraced_prefill_instrumented(q, k, v, cfg).map(|(y, _)| y)
}

/// [`terraced_prefill_chunked`] that also reports its peak scratch usage.
pub fn terraced_prefill_instrumented<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &HybridAttnConfig<T>,
) -> Result<(Tensor<T>, ScratchMeter)> {
    let [b, h, n, d] = check_qkv(q, k, v)?;
    let f = cfg.validate(h, d)?;
    if cfg.mode != WindowMode::Terraced {
        return Err(Error::InvalidConfig(
            "chunked prefill requires the terraced window".into(),
        ));
    }
    let w = cfg.window_size;
    let factors = cfg.window_factors();
    let mut meter = ScratchMeter::default();
    let mut out = vec![T::zero(); b * h * n * d];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * n * d;
        let mut state = KvState::new(f, d);
        meter.reserve(state.size_bytes());
        let mut tile_start = 0;
        while tile_start < n {
            let len = w.min(n - tile_start);
            let rows = base + tile_start * d..base + (tile_start + len) * d;
            let mut pq = meter.alloc::<T>(len * f);
            let mut pk = meter.alloc::<T>(len * f);
            let mut logits = meter.alloc::<T>(len);
            for r in 0..len {
                let at = rows.start + r * d;
                cfg.fq.apply_row(head, &q.data()[at..at + d], &mut pq[r * f..(r + 1) * f]);
                cfg.fk.apply_row(head, &k.data()[at..at + d], &mut pk[r * f..(r + 1) * f]);
            }
            let (kt, vt) = (&k.data()[rows.clone()], &v.data()[rows.clone()]);
            for r in 0..len {
                let window = (0..=r).map(|j| (&kt[j * d..(j + 1) * d], &vt[j * d..(j + 1) * d]));
                let at = rows.start + r * d;
                mix(
                    &q.data()[at..at + d],
                    window,
                    factors[head],
                    &pq[r * f..(r + 1) * f],
                    &state,
                    &mut logits,
                    &mut out[at..at + d],
                );
            }
            for r in 0..len {
                state.fold(&pk[r * f..(r + 1) * f], &vt[r * d..(r + 1) * d]);
            }
            meter.free(pq);
            meter.free(pk);
            meter.free(logits);
            tile_start += len;
        }
        meter.release(state.size_bytes());
    }
    Ok((Tensor::new(vec![b, h, n, d], out)?, meter))
}

/// Per-head decoding state: linear-attention sums for evicted tokens plus a
/// fixed-capacity ring of the most recent rotated keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState<T: Scalar = f32> {
    kv: KvState<T>,
    keys: Vec<T>,
    values: Vec<T>,
    head_dim: usize,
    window: usize,
    mode: WindowMode,
    start: usize,
    len: usize,
    position: usize,
}

impl<T: Scalar> RecurrentState<T> {
    pub fn new(cfg: &HybridAttnConfig<T>) -> Result<Self> {
        if cfg.window_size < 1 {
            return Err(Error::WindowTooSmall(cfg.window_size));
        }
        let d = cfg.fq.head_dim();
        Ok(Self {
            kv: KvState::new(cfg.fk.output_dim(), d),
            keys: vec![T::zero(); cfg.window_size * d],
            values: vec![T::zero(); cfg.window_size * d],
            head_dim: d,
            window: cfg.window_size,
            mode: cfg.mode,
            start: 0,
            len: 0,
            position: 0,
        })
    }

    /// Index of the next token this state expects.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn cache_len(&self) -> usize {
        self.len
    }

    pub fn kv(&self) -> &KvState<T> {
        &self.kv
    }

    /// Bytes held by the running sums and the window ring.
    pub fn size_bytes(&self) -> usize {
        self.kv.size_bytes() + (self.keys.len() + self.values.len()) * std::mem::size_of::<T>()
    }

    fn slot(&self, i: usize) -> std::ops::Range<usize> {
        let s = (self.start + i) % self.window;
        s * self.head_dim..(s + 1) * self.head_dim
    }

    fn fold_oldest(&mut self, cfg: &HybridAttnConfig<T>, head: usize, phi: &mut [T]) {
        let r = self.slot(0);
        cfg.fk.apply_row(head, &self.keys[r.clone()], phi);
        self.kv.fold(phi, &self.values[r]);
        self.start = (self.start + 1) % self.window;
        self.len -= 1;
    }

    /// Appends a rotated key/value, folding whatever leaves the window.
    pub fn absorb(&mut self, k: &[T], v: &[T], cfg: &HybridAttnConfig<T>, head: usize) {
        let mut phi = vec![T::zero(); self.kv.dims().0];
        match self.mode {
            WindowMode::Standard => {
                if self.len == self.window {
                    self.fold_oldest(cfg, head, &mut phi);
                }
            }
            WindowMode::Terraced => {
                if self.position > 0 && self.position % self.window == 0 {
                    while self.len > 0 {
                        self.fold_oldest(cfg, head, &mut phi);
                    }
                }
            }
        }
        let r = self.slot(self.len);
        self.keys[r.clone()].copy_from_slice(k);
        self.values[r].copy_from_slice(v);
        self.len += 1;
        self.position += 1;
    }

    fn window(&self) -> impl Iterator<Item = (&[T], &[T])> + Clone {
        (0..self.len).map(move |i| {
            let r = self.slot(i);
            (&self.keys[r.clone()], &self.values[r])
        })
    }
}

/// Consumes the token at `position` for one head and returns its output.
pub fn hybrid_decode_step<T: Scalar>(
    state: &mut RecurrentState<T>,
    position: usize,
    q: &[T],
    k: &[T],
    v: &[T],
    cfg: &HybridAttnConfig<T>,
    head: usize,
) -> Result<Vec<T>> {
    if position != state.position {
        return Err(Error::OutOfOrderToken {
            expected: state.position,
            got: position,
        });
    }
    let d = state.head_dim;
    if q.len() != d || k.len() != d || v.len() != d || head >= cfg.gamma_raw.len() {
        return Err(Error::shape(format!("decode token of dim {} for head dim {d}", q.len())));
    }
    state.absorb(k, v, cfg, head);
    let factor = cfg.window_factors()[head];
    let mut phi_q = vec![T::zero(); state.kv.dims().0];
    cfg.fq.apply_row(head, q, &mut phi_q);
    let mut logits = vec![T::zero(); state.len];
    let mut out = vec![T::zero(); d];
    mix(q, state.window(), factor, &phi_q, &state.kv, &mut logits, &mut out);
    Ok(out)
}
