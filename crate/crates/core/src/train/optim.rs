//! AdamW with global-norm clipping, and a reduce-on-plateau schedule.

use linearize_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::model::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer over a fixed subset of a [`ParamStore`], addressed by id.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    ids: Vec<usize>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ParamStore, ids: Vec<usize>) -> Self {
        let zeros = |id: &usize| vec![0.0; params.param(*id).tensor.numel()];
        Self {
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
            cfg,
            ids,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Applies one update from `grads` (aligned with `ids`) and returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor<f32>]) -> Result<f64> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape(format!("{} gradients for {} parameters", grads.len(), self.ids.len())));
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&g| g as f64 * g as f64)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::DivergedLoss { step: self.t as usize });
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (k, &id) in self.ids.iter().enumerate() {
            let p = params.tensor_mut(id);
            if p.shape() != grads[k].shape() {
                return Err(Error::shape(format!("gradient {:?} for parameter {:?}", grads[k].shape(), p.shape())));
            }
            if c.lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
                let g = g as f64 * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps) + c.weight_decay * *w as f64;
                *w = (*w as f64 - c.lr * update) as f32;
            }
        }
        Ok(norm)
    }
}

/// Halves the learning rate after `patience` evaluations without improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    bad: usize,
}

impl Default for Plateau {
    fn default() -> Self {
        Self::new(0.5, 10)
    }
}

impl Plateau {
    pub fn new(factor: f64, patience: usize) -> Self {
        Self {
            factor,
            patience,
            best: f64::INFINITY,
            bad: 0,
        }
    }

    /// Records an evaluation and returns the factor to apply to the learning rate.
    pub fn observe(&mut self, metric: f64) -> f64 {
        if metric < self.best {
            self.best = metric;
            self.bad = 0;
            return 1.0;
        }
        self.bad += 1;
        if self.bad > self.patience {
            self.bad = 0;
            self.factor
        } else {
            1.0
        }
    }
}
