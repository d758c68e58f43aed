use linearize_tensor::{kernels, Scalar, Tensor};

use super::{check_qkv, check_maps, FeatureMapParams, EPS};
use crate::{Error, Result};

/// Applies a feature map to every row of one head's `[seq, d]` block.
pub(crate) fn map_rows<T: Scalar>(fm: &FeatureMapParams<T>, head: usize, x: &[T], d: usize) -> Vec<T> {
    let f = fm.output_dim();
    let n = x.len() / d;
    let mut out = vec![T::zero(); n * f];
    for i in 0..n {
        fm.apply_row(head, &x[i * d..(i + 1) * d], &mut out[i * f..(i + 1) * f]);
    }
    out
}

/// Linear attention in weight form: `ŷ_n = Σ_{i≤n} (φq_n·φk_i) v_i / (Σ_{i≤n} φq_n·φk_i + eps)`.
pub fn linear_attention_parallel<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    fq: &FeatureMapParams<T>,
    fk: &FeatureMapParams<T>,
) -> Result<Tensor<T>> {
    let [b, h, n, d] = check_qkv(q, k, v)?;
    let f = check_maps(fq, fk, h, d)?;
    let eps = T::lit(EPS);
    let mut out = vec![T::zero(); b * h * n * d];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * n * d;
        let pq = map_rows(fq, head, &q.data()[base..base + n * d], d);
        let pk = map_rows(fk, head, &k.data()[base..base + n * d], d);
        let vh = &v.data()[base..base + n * d];
        for i in 0..n {
            let y = &mut out[base + i * d..base + (i + 1) * d];
            let mut den = T::zero();
            for j in 0..=i {
                let a = kernels::dot(&pq[i * f..(i + 1) * f], &pk[j * f..(j + 1) * f]);
                den += a;
                kernels::axpy(a, &vh[j * d..(j + 1) * d], y);
            }
            let inv = T::one() / (den + eps);
            y.iter_mut().for_each(|x| *x *= inv);
        }
    }
    Ok(Tensor::new(vec![b, h, n, d], out)?)
}

/// Running linear-attention state: `s = Σ φk(k) vᵀ` (`[F, d]`) and `z = Σ φk(k)` (`[F]`).
#[derive(Clone, Debug, PartialEq)]
pub struct KvState<T: Scalar = f32> {
    s: Vec<T>,
    z: Vec<T>,
    feature_dim: usize,
    head_dim: usize,
}

impl<T: Scalar> KvState<T> {
    pub fn new(feature_dim: usize, head_dim: usize) -> Self {
        Self {
            s: vec![T::zero(); feature_dim * head_dim],
            z: vec![T::zero(); feature_dim],
            feature_dim,
            head_dim,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.feature_dim, self.head_dim)
    }

    pub fn s(&self) -> &[T] {
        &self.s
    }

    pub fn z(&self) -> &[T] {
        &self.z
    }

    pub fn size_bytes(&self) -> usize {
        (self.s.len() + self.z.len()) * std::mem::size_of::<T>()
    }

    /// Adds `φk ⊗ v` to `s` and `φk` to `z`.
    pub fn fold(&mut self, phi_k: &[T], v: &[T]) {
        let d = self.head_dim;
        for (r, &p) in phi_k.iter().enumerate() {
            if p != T::zero() {
                kernels::axpy(p, v, &mut self.s[r * d..(r + 1) * d]);
            }
            self.z[r] += p;
        }
    }

    /// Writes `φq · s` into `num` and returns `φq · z`.
    pub fn read(&self, phi_q: &[T], num: &mut [T]) -> T {
        let d = self.head_dim;
        for (r, &p) in phi_q.iter().enumerate() {
            if p != T::zero() {
                kernels::axpy(p, &self.s[r * d..(r + 1) * d], num);
            }
        }
        kernels::dot(phi_q, &self.z)
    }
}

/// Linear attention in state form: the prefix sums of `φk vᵀ` are carried forward.
pub fn linear_attention_state_form<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    fq: &FeatureMapParams<T>,
    fk: &FeatureMapParams<T>,
) -> Result<Tensor<T>> {
    let [b, h, n, d] = check_qkv(q, k, v)?;
    let f = check_maps(fq, fk, h, d)?;
    let eps = T::lit(EPS);
    let mut out = vec![T::zero(); b * h * n * d];
    for bh in 0..b * h {
        let head = bh % h;
        let base = bh * n * d;
        let pq = map_rows(fq, head, &q.data()[base..base + n * d], d);
        let pk = map_rows(fk, head, &k.data()[base..base + n * d], d);
        let mut state = KvState::new(f, d);
        for i in 0..n {
            state.fold(&pk[i * f..(i + 1) * f], &v.data()[base + i * d..base + (i + 1) * d]);
            let y = &mut out[base + i * d..base + (i + 1) * d];
            let den = state.read(&pq[i * f..(i + 1) * f], y) + eps;
            y.iter_mut().for_each(|x| *x /= den);
        }
    }
    Ok(Tensor::new(vec![b, h, n, d], out)?)
}

/// One token of recurrent linear attention for a single head.
pub fn linear_attention_recurrent_step<T: Scalar>(
    state: &mut KvState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    fq: &FeatureMapParams<T>,
    fk: &FeatureMapParams<T>,
    head: usize,
) -> Result<Vec<T>> {
    let expected = (fk.output_dim(), v.len());
    if state.dims() != expected || fq.output_dim() != fk.output_dim() {
        return Err(Error::StateDimMismatch {
            expected,
            got: state.dims(),
        });
    }
    if q.len() != fq.head_dim() || k.len() != fk.head_dim() || head >= fq.heads() {
        return Err(Error::shape(format!(
            "token of dim {} for feature map of dim {}",
            q.len(),
            fq.head_dim()
        )));
    }
    let f = fk.output_dim();
    let mut pk = vec![T::zero(); f];
    let mut pq = vec![T::zero(); f];
    fk.apply_row(head, k, &mut pk);
    fq.apply_row(head, q, &mut pq);
    state.fold(&pk, v);
    let mut y = vec![T::zero(); v.len()];
    let den = state.read(&pq, &mut y) + T::lit(EPS);
    y.iter_mut().for_each(|x| *x /= den);
    Ok(y)
}
