//! Rotary position embedding over interleaved dimension pairs.

use linearize_tensor::{Scalar, Tape, Tensor, Var};

use crate::{Error, Result};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Angle for pair `i` at position `pos`: `pos · base^(-2i/d)`.
fn angle(pos: usize, i: usize, d: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * i as f64 / d as f64)
}

/// Rotates one head vector in place as if it sat at position `pos`.
pub fn rope_row<T: Scalar>(x: &mut [T], pos: usize, base: f64) -> Result<()> {
    let d = x.len();
    if d % 2 != 0 {
        return Err(Error::OddHeadDim(d));
    }
    for i in 0..d / 2 {
        let (sin, cos) = angle(pos, i, d, base).sin_cos();
        let (sin, cos) = (T::lit(sin), T::lit(cos));
        let (a, b) = (x[2 * i], x[2 * i + 1]);
        x[2 * i] = a * cos - b * sin;
        x[2 * i + 1] = a * sin + b * cos;
    }
    Ok(())
}

/// Applies rotary embedding to `x[..., seq, d]`, the first row sitting at `start_pos`.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, start_pos: usize, base: f64) -> Result<Tensor<T>> {
    if x.rank() < 2 {
        return Err(Error::shape(format!("rope needs [.., seq, d], got {:?}", x.shape())));
    }
    let d = x.last_dim();
    if d % 2 != 0 {
        return Err(Error::OddHeadDim(d));
    }
    let seq = x.shape()[x.rank() - 2];
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(d.max(1)).enumerate() {
        rope_row(row, start_pos + r % seq.max(1), base)?;
    }
    Ok(out)
}

/// Differentiable rotary embedding for `x[.., seq, d]` starting at position 0.
///
/// Written as `x ⊙ cos + swap_pairs(x) ⊙ signed_sin`, where the pair swap is a
/// fixed permutation matrix.
pub fn rope_graph<T: Scalar>(tape: &mut Tape<T>, x: Var, base: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let d = *shape.last().ok_or_else(|| Error::shape("rope on a scalar"))?;
    if d % 2 != 0 {
        return Err(Error::OddHeadDim(d));
    }
    let seq = shape[shape.len() - 2];
    let mut cos = Vec::with_capacity(seq * d);
    let mut sin = Vec::with_capacity(seq * d);
    for p in 0..seq {
        for i in 0..d / 2 {
            let (s, c) = angle(p, i, d, base).sin_cos();
            cos.extend([T::lit(c), T::lit(c)]);
            sin.extend([T::lit(-s), T::lit(s)]);
        }
    }
    let swap = Tensor::from_fn(vec![d, d], |idx| {
        let (r, c) = (idx / d, idx % d);
        if r ^ 1 == c {
            T::one()
        } else {
            T::zero()
        }
    });
    let cos = tape.constant(Tensor::new(vec![seq, d], cos)?);
    let sin = tape.constant(Tensor::new(vec![seq, d], sin)?);
    let swap = tape.constant(swap);
    let a = tape.mul(x, cos)?;
    let swapped = tape.matmul(x, swap)?;
    let b = tape.mul(swapped, sin)?;
    Ok(tape.add(a, b)?)
}
