use linearize_tensor::{kernels, Scalar, Tensor};

use super::check_qkv;
use crate::Result;

/// Causal softmax attention over `[batch, heads, seq, d]`.
///
/// Returns the outputs and, when requested, the `[batch, heads, seq, seq]`
/// weights (zero above the diagonal).
pub fn softmax_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    with_weights: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let [b, h, n, d] = check_qkv(q, k, v)?;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let mut out = vec![T::zero(); b * h * n * d];
    let mut weights = with_weights.then(|| vec![T::zero(); b * h * n * n]);
    let mut row = vec![T::zero(); n];
    for bh in 0..b * h {
        let base = bh * n * d;
        let (qh, kh, vh) = (
            &q.data()[base..base + n * d],
            &k.data()[base..base + n * d],
            &v.data()[base..base + n * d],
        );
        for i in 0..n {
            let logits = &mut row[..=i];
            for (j, l) in logits.iter_mut().enumerate() {
                *l = kernels::dot(&qh[i * d..(i + 1) * d], &kh[j * d..(j + 1) * d]) * scale;
            }
            kernels::softmax_in_place(logits);
            let y = &mut out[base + i * d..base + (i + 1) * d];
            for (j, &a) in logits.iter().enumerate() {
                kernels::axpy(a, &vh[j * d..(j + 1) * d], y);
            }
            if let Some(w) = weights.as_mut() {
                w[(bh * n + i) * n..(bh * n + i) * n + i + 1].copy_from_slice(logits);
            }
        }
    }
    let y = Tensor::new(vec![b, h, n, d], out)?;
    let w = weights
        .map(|w| Tensor::new(vec![b, h, n, n], w))
        .transpose()?;
    Ok((y, w))
}
