//! Training objectives built on the tape.

use std::sync::Arc;

use linearize_tensor::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Clamp applied to predicted weights before the logarithm.
pub const XENT_FLOOR: f64 = 1e-12;
const STOCHASTIC_TOL: f64 = 1e-4;

/// Stage-1 objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransferLoss {
    OutputMse,
    WeightXent,
    Combined { w_mse: f64, w_xent: f64 },
}

impl Default for TransferLoss {
    fn default() -> Self {
        TransferLoss::OutputMse
    }
}

impl TransferLoss {
    pub fn validate(&self) -> Result<()> {
        if let TransferLoss::Combined { w_mse, w_xent } = *self {
            if !(w_mse >= 0.0 && w_xent >= 0.0) {
                return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn uses_weights(&self) -> bool {
        !matches!(self, TransferLoss::OutputMse)
    }
}

fn sum_vars<T: Scalar>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| Error::shape("no loss terms"))?;
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Mean of `(ŷ − y)²` over every element of one layer's `[batch, heads, seq, dim]`
/// output, i.e. the average over heads of per-head means.
fn layer_mse<T: Scalar>(tape: &mut Tape<T>, y: Var, y_hat: Var) -> Result<Var> {
    if tape.shape(y) != tape.shape(y_hat) {
        return Err(Error::shape(format!("{:?} vs {:?}", tape.shape(y), tape.shape(y_hat))));
    }
    let d = tape.sub(y_hat, y)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq)?)
}

/// One loss per block of `block` consecutive layers, each normalized by `1/(b·H)`.
pub fn blockwise_mse<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)], block: usize) -> Result<Vec<Var>> {
    let layers = pairs.len();
    if block == 0 || layers == 0 || layers % block != 0 {
        return Err(Error::IndivisibleBlocks { layers, block });
    }
    let terms = pairs
        .iter()
        .map(|&(y, y_hat)| layer_mse(tape, y, y_hat))
        .collect::<Result<Vec<_>>>()?;
    terms
        .chunks(block)
        .map(|c| {
            let s = sum_vars(tape, c)?;
            Ok(tape.mul_scalar(s, T::lit(1.0 / block as f64))?)
        })
        .collect()
}

/// Output-matching loss averaged over layers and heads; `pairs` are `(y, ŷ)` per layer.
pub fn mse_attention_loss<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    Ok(blockwise_mse(tape, pairs, pairs.len())?[0])
}

fn check_stochastic<T: Scalar>(tape: &Tape<T>, w: Var) -> Result<()> {
    let t = tape.value(w);
    let n = t.last_dim().max(1);
    for (r, row) in t.data().chunks(n).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::NotStochastic { row: r, sum });
        }
    }
    Ok(())
}

/// `−Σ_i a_i ln max(â_i, 1e-12)` per row, averaged over rows, heads and layers;
/// `pairs` are `(a, â)` per layer, each `[batch, heads, seq, seq]`.
pub fn weight_xent_loss<T: Scalar>(tape: &mut Tape<T>, pairs: &[(Var, Var)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(a, a_hat) in pairs {
        if tape.shape(a) != tape.shape(a_hat) {
            return Err(Error::shape(format!("{:?} vs {:?}", tape.shape(a), tape.shape(a_hat))));
        }
        check_stochastic(tape, a)?;
        check_stochastic(tape, a_hat)?;
        let rank = tape.shape(a).len();
        let c = tape.clamp_min(a_hat, T::lit(XENT_FLOOR))?;
        let l = tape.log(c)?;
        let p = tape.mul(a, l)?;
        let rows = tape.sum(p, rank - 1)?;
        let m = tape.mean_all(rows)?;
        terms.push(tape.neg(m)?);
    }
    let s = sum_vars(tape, &terms)?;
    Ok(tape.mul_scalar(s, T::lit(1.0 / pairs.len() as f64))?)
}

/// `w_mse·mse + w_xent·xent`.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, mse: Var, xent: Var, w_mse: f64, w_xent: f64) -> Result<Var> {
    let a = tape.mul_scalar(mse, T::lit(w_mse))?;
    let b = tape.mul_scalar(xent, T::lit(w_xent))?;
    Ok(tape.add(a, b)?)
}

/// Mean cross-entropy of `logits[batch, seq, vocab]` against `targets[batch][seq]`.
///
/// `mask`, when given, marks the positions that count; at least one must.
pub fn next_token_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[Vec<u32>],
    mask: Option<&[Vec<bool>]>,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let [b, n, v] = <[usize; 3]>::try_from(shape.as_slice())
        .map_err(|_| Error::shape(format!("logits {shape:?} are not [batch, seq, vocab]")))?;
    if targets.len() != b || targets.iter().any(|t| t.len() != n) {
        return Err(Error::shape(format!("targets do not match logits {shape:?}")));
    }
    let ids: Vec<usize> = targets.iter().flatten().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= v) {
        return Err(Error::UnknownId { id: bad as u32, vocab: v });
    }
    let lp = tape.log_softmax(logits)?;
    let picked = tape.take_last(lp, &ids)?;
    let nll = tape.neg(picked)?;
    match mask {
        None => Ok(tape.mean_all(nll)?),
        Some(mask) => {
            if mask.len() != b || mask.iter().any(|m| m.len() != n) {
                return Err(Error::shape("mask does not match targets"));
            }
            let dropped: Vec<bool> = mask.iter().flatten().map(|&k| !k).collect();
            let count = dropped.iter().filter(|&&d| !d).count();
            if count == 0 {
                return Err(Error::shape("mask selects no positions"));
            }
            let zeroed = tape.masked_fill(nll, Arc::new(dropped), &[b, n], T::zero())?;
            let s = tape.sum_all(zeroed)?;
            Ok(tape.mul_scalar(s, T::lit(1.0 / count as f64))?)
        }
    }
}

/// Mask that drops positions after the first EOS target in each row.
pub fn mask_after_eos(targets: &[Vec<u32>], eos: u32) -> Vec<Vec<bool>> {
    targets
        .iter()
        .map(|row| {
            let mut seen = false;
            row.iter()
                .map(|&t| {
                    let keep = !seen;
                    seen |= t == eos;
                    keep
                })
                .collect()
        })
        .collect()
}
