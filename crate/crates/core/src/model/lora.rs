//! Low-rank adapters on the attention projections.

use linearize_tensor::{kernels, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Wq, Projection::Wk, Projection::Wv, Projection::Wo];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: Projection::ALL.to_vec(),
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::InvalidConfig("LoRA rank must be at least 1".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::InvalidConfig("LoRA needs at least one target".into()));
        }
        for (i, t) in self.targets.iter().enumerate() {
            if self.targets[..i].contains(t) {
                return Err(Error::DuplicateAdapter(t.name().into()));
            }
        }
        Ok(())
    }
}

/// Adapter matrices for one projection: `a` is `[rank, in]`, `b` is `[out, rank]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn scale(&self) -> f32 {
        (self.alpha / self.rank() as f64) as f32
    }

    /// `x W + (α/r)·(x Aᵀ) Bᵀ` for `x[rows, in]` and `base[in, out]`.
    pub fn forward(&self, base: &Tensor<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (rows, inp) = (x.shape()[0], x.shape()[1]);
        let out = base.shape()[1];
        let r = self.rank();
        if base.shape()[0] != inp || self.a.shape() != [r, inp] || self.b.shape() != [out, r] {
            return Err(Error::shape(format!(
                "adapter A {:?}, B {:?} on base {:?} with input {:?}",
                self.a.shape(),
                self.b.shape(),
                base.shape(),
                x.shape()
            )));
        }
        let mut y = vec![0.0f32; rows * out];
        kernels::matmul_acc(x.data(), base.data(), &mut y, rows, inp, out);
        let mut delta = vec![0.0f32; rows * out];
        add_delta(x.data(), &self.a, &self.b, self.scale(), rows, &mut delta);
        for (a, d) in y.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(Tensor::new(vec![rows, out], y)?)
    }
}

/// Adds `scale · (x Aᵀ) Bᵀ` to `out[rows, out_dim]`.
pub(crate) fn add_delta(x: &[f32], a: &Tensor<f32>, b: &Tensor<f32>, scale: f32, rows: usize, out: &mut [f32]) {
    let (r, inp) = (a.shape()[0], a.shape()[1]);
    let out_dim = b.shape()[0];
    let mut t = vec![0.0f32; rows * r];
    kernels::matmul_nt_acc(x, a.data(), &mut t, rows, inp, r);
    t.iter_mut().for_each(|v| *v *= scale);
    kernels::matmul_nt_acc(&t, b.data(), out, rows, r, out_dim);
}
