//! Attention kernels: softmax, linear, hybrid window + linear, and decoding state.
//!
//! Sequence tensors are laid out `[batch, heads, seq, head_dim]`. Kernels are
//! tape-free and generic over the scalar type; [`graph`] has differentiable
//! counterparts used during training.

mod feature_map;
pub mod graph;
mod hybrid;
mod linear;
pub mod metrics;
mod rope;
mod softmax;

use linearize_tensor::{Scalar, Tensor};

pub use feature_map::{feature_map_graph, FeatureKind, FeatureMapParams};
pub use hybrid::{
    hybrid_attention_prefill, hybrid_decode_step, hybrid_prefill_with_factors,
    terraced_prefill_chunked, terraced_prefill_instrumented, window_start, HybridAttnConfig,
    RecurrentState, ScratchMeter, WindowMode, DEFAULT_GAMMA_RAW,
};
pub use linear::{
    linear_attention_parallel, linear_attention_recurrent_step, linear_attention_state_form,
    KvState,
};
pub use metrics::{attention_entropy, effective_sequence_length, sample_esl};
pub use rope::{apply_rope, rope_graph, rope_row, DEFAULT_ROPE_BASE};
pub use softmax::softmax_attention;

use crate::{Error, Result};

/// Added to every linear-attention denominator.
pub const EPS: f64 = 1e-6;

pub(crate) fn check_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<[usize; 4]> {
    let s = q.shape();
    if s.len() != 4 || k.shape() != s || v.shape() != s {
        return Err(Error::shape(format!(
            "q {:?}, k {:?}, v {:?}; expected equal [batch, heads, seq, d]",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

/// Checks that both maps fit `heads × head_dim` and agree on output width.
pub(crate) fn check_maps<T: Scalar>(
    fq: &FeatureMapParams<T>,
    fk: &FeatureMapParams<T>,
    heads: usize,
    head_dim: usize,
) -> Result<usize> {
    for fm in [fq, fk] {
        if fm.heads() != heads || fm.head_dim() != head_dim {
            return Err(Error::shape(format!(
                "feature map for {}x{} used with {heads} heads of dim {head_dim}",
                fm.heads(),
                fm.head_dim()
            )));
        }
    }
    if fq.output_dim() != fk.output_dim() {
        return Err(Error::shape("query and key feature maps differ in width"));
    }
    Ok(fq.output_dim())
}
