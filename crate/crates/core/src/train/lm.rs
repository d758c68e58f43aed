//! Next-token training shared by pretraining and low-rank adjusting.

use std::time::Instant;

use linearize_tensor::{Tape, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Corpus;
use super::loss::next_token_loss;
use super::optim::{AdamW, AdamWConfig, Plateau};
use crate::model::{AttnPath, Model, ParamKind};
use crate::{Error, Result};

/// Loss of predicting `window[1..]` from `window[..n-1]` for each window in `batch`.
pub fn lm_loss_value(model: &Model, batch: &[Vec<u32>], path: AttnPath) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let bound = model.bind(&mut tape, |_| false);
    let (inputs, targets) = shift(batch)?;
    let logits = model.logits_graph(&mut tape, &bound, &inputs, path)?;
    let l = next_token_loss(&mut tape, logits, &targets, None)?;
    Ok(tape.value(l).data()[0] as f64)
}

/// Mean next-token loss over `batches`.
pub fn eval_lm_loss(model: &Model, batches: &[Vec<Vec<u32>>], path: AttnPath) -> Result<f64> {
    let mut total = 0.0;
    for b in batches {
        total += lm_loss_value(model, b, path)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

pub(crate) fn shift(batch: &[Vec<u32>]) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    if batch.iter().any(|w| w.len() < 2) {
        return Err(Error::shape("language-model windows need at least 2 tokens"));
    }
    Ok((
        batch.iter().map(|w| w[..w.len() - 1].to_vec()).collect(),
        batch.iter().map(|w| w[1..].to_vec()).collect(),
    ))
}

/// Next-token optimizer over the parameters selected by `trainable`.
pub struct LmTrainer {
    opt: AdamW,
    trainable: fn(ParamKind) -> bool,
    path: AttnPath,
    plateau: Plateau,
    step: usize,
}

impl LmTrainer {
    pub fn new(model: &Model, lr: f64, trainable: fn(ParamKind) -> bool, path: AttnPath) -> Self {
        let ids = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| trainable(p.kind))
            .map(|(id, _)| id)
            .collect();
        Self {
            opt: AdamW::new(AdamWConfig::with_lr(lr), model.params(), ids),
            trainable,
            path,
            plateau: Plateau::default(),
            step: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr()
    }

    pub fn step(&mut self, model: &mut Model, batch: &[Vec<u32>]) -> Result<f64> {
        let step = self.step;
        let div = |e: TensorError| match e {
            TensorError::NonFiniteResult { .. } => Error::DivergedLoss { step },
            e => Error::Tensor(e),
        };
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, self.trainable);
        let (inputs, targets) = shift(batch)?;
        let logits = model.logits_graph(&mut tape, &bound, &inputs, self.path)?;
        let loss = next_token_loss(&mut tape, logits, &targets, None)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let grads = tape.backward(loss).map_err(div)?;
        let g: Vec<_> = self
            .opt
            .ids()
            .iter()
            .map(|&id| grads.get(bound.var(id)).cloned().expect("trainable leaf has a gradient"))
            .collect();
        self.opt.step(model.params_mut(), &g).map_err(|_| Error::DivergedLoss { step })?;
        self.step += 1;
        Ok(value)
    }

    pub fn observe_eval(&mut self, metric: f64) {
        let f = self.plateau.observe(metric);
        self.opt.set_lr(self.opt.lr() * f);
    }
}

/// Settings shared by next-token training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmSchedule {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Input length; windows hold one extra token for the targets.
    pub seq_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub train_loss: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub wall_time_secs: f64,
}

pub(crate) fn run_lm(
    model: &mut Model,
    s: &LmSchedule,
    trainable: fn(ParamKind) -> bool,
    path: AttnPath,
    train: &Corpus,
    eval: &Corpus,
    label: &str,
) -> Result<LmReport> {
    if !(s.lr >= 0.0) || s.batch_size == 0 || s.seq_len == 0 {
        return Err(Error::InvalidConfig("lr ≥ 0, batch_size ≥ 1 and seq_len ≥ 1 required".into()));
    }
    let start = Instant::now();
    let eval_batches = eval.fixed_batches(s.eval_batches.max(1), s.batch_size, s.seq_len + 1)?;
    let initial = eval_lm_loss(model, &eval_batches, path)?;
    let mut trainer = LmTrainer::new(model, s.lr, trainable, path);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut train_loss = Vec::with_capacity(s.steps);
    for step in 0..s.steps {
        let batch = train.sample(&mut rng, s.batch_size, s.seq_len + 1)?;
        train_loss.push(trainer.step(model, &batch)?);
        if s.eval_every > 0 && (step + 1) % s.eval_every == 0 {
            let e = eval_lm_loss(model, &eval_batches, path)?;
            log::info!("{label} step {} loss {:.4} eval {:.4} lr {:.2e}", step + 1, train_loss[step], e, trainer.lr());
            trainer.observe_eval(e);
        }
    }
    Ok(LmReport {
        train_loss,
        initial_eval_loss: initial,
        final_eval_loss: eval_lm_loss(model, &eval_batches, path)?,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
