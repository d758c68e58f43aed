//! Differentiable attention on a tape, with weights materialized as `[batch, heads, seq, seq]`.

use std::sync::Arc;

use linearize_tensor::{Scalar, Tape, Var};

use super::feature_map::{feature_map_graph, FeatureKind};
use super::hybrid::{window_start, WindowMode};
use super::EPS;
use crate::{Error, Result};

/// Attention outputs `[batch, heads, seq, d]` and the row-normalized weights behind them.
#[derive(Clone, Copy, Debug)]
pub struct AttnGraph {
    pub y: Var,
    pub weights: Var,
}

/// Tape handles for one hybrid layer's learnable pieces.
#[derive(Clone, Copy, Debug)]
pub struct HybridVars {
    pub kind: FeatureKind,
    pub fq_weight: Var,
    pub fq_bias: Option<Var>,
    pub fk_weight: Var,
    pub fk_bias: Option<Var>,
    /// `[heads]`
    pub gamma_raw: Var,
}

fn dims<T: Scalar>(tape: &Tape<T>, q: Var, k: Var, v: Var) -> Result<[usize; 4]> {
    let s = tape.shape(q);
    if s.len() != 4 || tape.shape(k) != s || tape.shape(v) != s {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, v {:?}",
            s,
            tape.shape(k),
            tape.shape(v)
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

fn mask(n: usize, keep: impl Fn(usize, usize) -> bool) -> Arc<Vec<bool>> {
    Arc::new((0..n * n).map(|idx| !keep(idx / n, idx % n)).collect())
}

fn scores<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, d: usize) -> Result<Var> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    Ok(tape.mul_scalar(s, T::one() / T::lit(d as f64).sqrt())?)
}

/// Causal softmax attention.
pub fn softmax_attention_graph<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<AttnGraph> {
    let [_, _, n, d] = dims(tape, q, k, v)?;
    let s = scores(tape, q, k, d)?;
    let s = tape.masked_fill(s, mask(n, |i, j| j <= i), &[n, n], T::MASK_FILL)?;
    let weights = tape.softmax(s)?;
    let y = tape.matmul(weights, v)?;
    Ok(AttnGraph { y, weights })
}

/// Hybrid sliding-window + linear attention; `q`, `k` already rotated.
pub fn hybrid_attention_graph<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    window: usize,
    mode: WindowMode,
    vars: &HybridVars,
) -> Result<AttnGraph> {
    if window < 1 {
        return Err(Error::WindowTooSmall(window));
    }
    let [b, h, n, d] = dims(tape, q, k, v)?;
    let full = [b, h, n, n];
    let in_window = mask(n, |i, j| j <= i && j >= window_start(i, window, mode));
    let in_linear = mask(n, |i, j| j < window_start(i, window, mode));

    let s = scores(tape, q, k, d)?;
    let s = tape.masked_fill(s, in_window, &[n, n], T::MASK_FILL)?;
    let c = tape.max(s, 3)?;
    let c = tape.expand(c, &full)?;
    let shifted = tape.sub(s, c)?;
    let e = tape.exp(shifted)?;
    let g = tape.sigmoid(vars.gamma_raw)?;
    let g = tape.reshape(g, &[h, 1, 1])?;
    let g = tape.expand(g, &full)?;
    let window_part = tape.mul(e, g)?;

    let pq = feature_map_graph(tape, vars.kind, q, vars.fq_weight, vars.fq_bias)?;
    let pk = feature_map_graph(tape, vars.kind, k, vars.fk_weight, vars.fk_bias)?;
    let pkt = tape.transpose(pk)?;
    let lin = tape.matmul(pq, pkt)?;
    let lin = tape.masked_fill(lin, in_linear, &[n, n], T::zero())?;

    let u = tape.add(window_part, lin)?;
    let den = tape.sum(u, 3)?;
    let den = tape.add_scalar(den, T::lit(EPS))?;
    let den = tape.expand(den, &full)?;
    let weights = tape.div(u, den)?;
    let y = tape.matmul(weights, v)?;
    Ok(AttnGraph { y, weights })
}
