//! Learnable non-negative feature maps for queries and keys.

use linearize_tensor::{kernels, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// `relu(x W + b)`
    T2r,
    /// `softmax(x W) ⊕ softmax(-x W)`
    Hedgehog,
}

impl FeatureKind {
    pub fn output_dim(self, feature_dim: usize) -> usize {
        match self {
            FeatureKind::T2r => feature_dim,
            FeatureKind::Hedgehog => 2 * feature_dim,
        }
    }

    pub fn has_bias(self) -> bool {
        matches!(self, FeatureKind::T2r)
    }

    /// Default projection width for a head of size `head_dim`.
    pub fn default_feature_dim(self, head_dim: usize) -> usize {
        match self {
            FeatureKind::T2r => head_dim,
            FeatureKind::Hedgehog => (head_dim / 2).max(1),
        }
    }
}

/// Per-head projection weights `[heads, head_dim, feature_dim]` and optional bias `[heads, feature_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapParams<T: Scalar = f32> {
    kind: FeatureKind,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Scalar> FeatureMapParams<T> {
    pub fn from_parts(kind: FeatureKind, weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if weight.rank() != 3 {
            return Err(Error::shape(format!(
                "feature map weight must be [heads, d, d'], got {:?}",
                weight.shape()
            )));
        }
        let (h, f) = (weight.shape()[0], weight.shape()[2]);
        match (&bias, kind.has_bias()) {
            (Some(b), true) if b.shape() == [h, f] => {}
            (None, _) => {}
            (Some(b), _) => {
                return Err(Error::shape(format!(
                    "bias {:?} does not fit weight {:?} of kind {kind:?}",
                    b.shape(),
                    weight.shape()
                )))
            }
        }
        Ok(Self { kind, weight, bias })
    }

    /// Weights drawn from `N(0, 1/head_dim)`, bias zero.
    pub fn init(
        kind: FeatureKind,
        heads: usize,
        head_dim: usize,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let normal = Normal::new(0.0, (1.0 / head_dim as f64).sqrt()).expect("finite std");
        let weight = Tensor::from_fn(vec![heads, head_dim, feature_dim], |_| {
            T::lit(normal.sample(rng))
        });
        let bias = kind
            .has_bias()
            .then(|| Tensor::zeros(vec![heads, feature_dim]));
        Self { kind, weight, bias }
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn heads(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_dim(&self) -> usize {
        self.kind.output_dim(self.feature_dim())
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor<T>> {
        self.bias.as_ref()
    }

    /// Maps one head vector `x[d]` into `out[output_dim]`.
    pub fn apply_row(&self, head: usize, x: &[T], out: &mut [T]) {
        let (d, f) = (self.head_dim(), self.feature_dim());
        debug_assert_eq!(x.len(), d);
        debug_assert_eq!(out.len(), self.output_dim());
        let w = &self.weight.data()[head * d * f..(head + 1) * d * f];
        let proj = &mut out[..f];
        proj.fill(T::zero());
        kernels::matmul_acc(x, w, proj, 1, d, f);
        match self.kind {
            FeatureKind::T2r => {
                if let Some(b) = &self.bias {
                    kernels::axpy(T::one(), &b.data()[head * f..(head + 1) * f], proj);
                }
                for v in proj.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
            FeatureKind::Hedgehog => {
                let (pos, neg) = out.split_at_mut(f);
                for (n, &p) in neg.iter_mut().zip(pos.iter()) {
                    *n = -p;
                }
                kernels::softmax_in_place(pos);
                kernels::softmax_in_place(neg);
            }
        }
    }

    /// Maps `x[.., heads, seq, d]` to `[.., heads, seq, output_dim]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.head_dim();
        let rank = x.rank();
        if rank < 3 || x.last_dim() != d || x.shape()[rank - 3] != self.heads() {
            return Err(Error::shape(format!(
                "feature map for {} heads of dim {d} applied to {:?}",
                self.heads(),
                x.shape()
            )));
        }
        let seq = x.shape()[rank - 2];
        let out_dim = self.output_dim();
        let rows = x.numel() / d.max(1);
        let mut out = vec![T::zero(); rows * out_dim];
        for r in 0..rows {
            let head = (r / seq.max(1)) % self.heads();
            self.apply_row(head, &x.data()[r * d..(r + 1) * d], &mut out[r * out_dim..(r + 1) * out_dim]);
        }
        let mut shape = x.shape().to_vec();
        shape[rank - 1] = out_dim;
        Ok(Tensor::new(shape, out)?)
    }
}

/// Differentiable feature map on `x[batch, heads, seq, d]` with weight `[heads, d, d']`.
pub fn feature_map_graph<T: Scalar>(
    tape: &mut Tape<T>,
    kind: FeatureKind,
    x: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let proj = tape.matmul(x, weight)?;
    match kind {
        FeatureKind::T2r => {
            let pre = match bias {
                Some(b) => {
                    let shape = tape.shape(proj).to_vec();
                    let (h, f) = (shape[1], shape[3]);
                    let b = tape.reshape(b, &[h, 1, f])?;
                    let b = tape.expand(b, &shape)?;
                    tape.add(proj, b)?
                }
                None => proj,
            };
            Ok(tape.relu(pre)?)
        }
        FeatureKind::Hedgehog => {
            let pos = tape.softmax(proj)?;
            let flipped = tape.neg(proj)?;
            let neg = tape.softmax(flipped)?;
            Ok(tape.concat(&[pos, neg])?)
        }
    }
}
