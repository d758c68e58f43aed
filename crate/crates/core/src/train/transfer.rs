//! Stage 1: train feature maps and window gates to match softmax attention.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use linearize_tensor::{Tape, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Corpus;
use super::loss::{blockwise_mse, combined_loss, mse_attention_loss, weight_xent_loss, TransferLoss};
use super::optim::{AdamW, AdamWConfig, Plateau};
use crate::attention::{attention_entropy, sample_esl};
use crate::model::{LayerRecord, Model, ParamKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Layers per independently trained block; `None` trains all layers jointly.
    pub block_size: Option<usize>,
    pub loss: TransferLoss,
    pub seed: u64,
    /// Steps between evaluations that drive the plateau schedule; 0 disables them.
    pub eval_every: usize,
    pub eval_batches: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            steps: 200,
            batch_size: 4,
            seq_len: 64,
            block_size: None,
            loss: TransferLoss::OutputMse,
            seed: 0,
            eval_every: 20,
            eval_batches: 2,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self, layers: usize) -> Result<usize> {
        self.loss.validate()?;
        if !(self.lr >= 0.0) || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::InvalidConfig("lr ≥ 0, batch_size ≥ 1 and seq_len ≥ 1 required".into()));
        }
        let b = self.block_size.unwrap_or(layers);
        if b == 0 || b > layers || layers % b != 0 {
            return Err(Error::IndivisibleBlocks { layers, block: b });
        }
        Ok(b)
    }
}

/// Layer index encoded in a parameter name.
fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layers.")?.split('.').next()?.parse().ok()
}

/// Converts tape failures from non-finite values into a divergence at `step`.
fn diverged(step: usize) -> impl Fn(TensorError) -> Error {
    move |e| match e {
        TensorError::NonFiniteResult { .. } => Error::DivergedLoss { step },
        e => Error::Tensor(e),
    }
}

/// Per-block loss values on the tape, in layer order.
pub fn transfer_block_losses(
    tape: &mut Tape<f32>,
    records: &[LayerRecord],
    loss: TransferLoss,
    block: usize,
) -> Result<Vec<Var>> {
    let outs: Vec<_> = records.iter().map(|r| (r.y, r.y_hat)).collect();
    let weights: Vec<_> = records.iter().map(|r| (r.weights, r.weights_hat)).collect();
    let mse = blockwise_mse(tape, &outs, block)?;
    if !loss.uses_weights() {
        return Ok(mse);
    }
    let xent = weights
        .chunks(block)
        .map(|c| weight_xent_loss(tape, c))
        .collect::<Result<Vec<_>>>()?;
    mse.into_iter()
        .zip(xent)
        .map(|(m, x)| match loss {
            TransferLoss::WeightXent => Ok(x),
            TransferLoss::Combined { w_mse, w_xent } => combined_loss(tape, m, x, w_mse, w_xent),
            TransferLoss::OutputMse => unreachable!("handled above"),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    /// Mean of the block losses, which for the output loss is the joint objective.
    pub loss: f64,
    pub block_losses: Vec<f64>,
}

/// Optimizer state for stage 1: one AdamW per block.
pub struct TransferTrainer {
    cfg: TransferConfig,
    block: usize,
    blocks: Vec<AdamW>,
    plateau: Plateau,
    step: usize,
}

impl TransferTrainer {
    pub fn new(model: &Model, cfg: TransferConfig) -> Result<Self> {
        if !model.is_converted() {
            return Err(Error::NotConverted);
        }
        let layers = model.config().n_layers;
        let block = cfg.validate(layers)?;
        let blocks = (0..layers / block)
            .map(|j| {
                let ids = model
                    .params()
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| {
                        p.kind.is_attention_transfer() && layer_of(&p.name).is_some_and(|m| m / block == j)
                    })
                    .map(|(id, _)| id)
                    .collect();
                AdamW::new(AdamWConfig::with_lr(cfg.lr), model.params(), ids)
            })
            .collect();
        Ok(Self {
            cfg,
            block,
            blocks,
            plateau: Plateau::default(),
            step: 0,
        })
    }

    pub fn config(&self) -> &TransferConfig {
        &self.cfg
    }

    pub fn lr(&self) -> f64 {
        self.blocks[0].lr()
    }

    /// One teacher-forced forward, then per block a backward pass and an update of
    /// that block's feature maps and gates.
    pub fn step(&mut self, model: &mut Model, batch: &[Vec<u32>]) -> Result<StepStats> {
        let step = self.step;
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, ParamKind::is_attention_transfer);
        let records = model
            .teacher_forced_graph(&mut tape, &bound, batch)
            .map_err(|e| match e {
                Error::Tensor(t) => diverged(step)(t),
                e => e,
            })?;
        let losses = transfer_block_losses(&mut tape, &records, self.cfg.loss, self.block)?;
        let values: Vec<f64> = losses.iter().map(|&l| tape.value(l).data()[0] as f64).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedLoss { step });
        }
        for (opt, &loss) in self.blocks.iter_mut().zip(&losses) {
            let grads = tape.backward(loss).map_err(diverged(step))?;
            let g: Vec<_> = opt
                .ids()
                .iter()
                .map(|&id| grads.get(bound.var(id)).cloned().expect("trainable leaf has a gradient"))
                .collect();
            opt.step(model.params_mut(), &g).map_err(|_| Error::DivergedLoss { step })?;
        }
        self.step += 1;
        Ok(StepStats {
            loss: values.iter().sum::<f64>() / values.len() as f64,
            block_losses: values,
        })
    }

    /// Feeds an evaluation metric to the plateau schedule.
    pub fn observe_eval(&mut self, metric: f64) {
        let f = self.plateau.observe(metric);
        if f != 1.0 {
            for o in &mut self.blocks {
                o.set_lr(o.lr() * f);
            }
        }
    }
}

/// Output-matching loss averaged over `batches`.
pub fn eval_transfer_loss(model: &Model, batches: &[Vec<Vec<u32>>]) -> Result<f64> {
    let mut total = 0.0;
    for batch in batches {
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, |_| false);
        let recs = model.teacher_forced_graph(&mut tape, &bound, batch)?;
        let pairs: Vec<_> = recs.iter().map(|r| (r.y, r.y_hat)).collect();
        let l = mse_attention_loss(&mut tape, &pairs)?;
        total += tape.value(l).data()[0] as f64;
    }
    Ok(total / batches.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub eval_mse: f64,
    /// Mean entropy of the softmax attention rows.
    pub mean_entropy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub layers: Vec<LayerDiagnostics>,
    /// Effective sequence length of the softmax attention, averaged over samples.
    pub mean_esl: f64,
}

impl Diagnostics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,eval_mse,mean_entropy\n");
        for l in &self.layers {
            writeln!(s, "{},{:e},{}", l.layer, l.eval_mse, l.mean_entropy).expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Per-layer output error and attention entropy on held-out batches.
pub fn layerwise_diagnostics(model: &Model, batches: &[Vec<Vec<u32>>]) -> Result<Diagnostics> {
    let layers = model.config().n_layers;
    let mut mse = vec![0.0; layers];
    let mut entropy = vec![0.0; layers];
    let mut esl = 0.0;
    let mut samples = 0usize;
    for batch in batches {
        let mut tape = Tape::<f64>::new();
        let bound = model.bind(&mut tape, |_| false);
        let recs = model.teacher_forced_graph(&mut tape, &bound, batch)?;
        for (m, r) in recs.iter().enumerate() {
            let (y, y_hat) = (tape.value(r.y), tape.value(r.y_hat));
            mse[m] += y.data().iter().zip(y_hat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.numel() as f64;
            let e = attention_entropy(tape.value(r.weights))?;
            entropy[m] += e.iter().sum::<f64>() / e.len() as f64;
        }
        for s in 0..batch.len() {
            let per_layer = recs
                .iter()
                .map(|r| {
                    let w = tape.value(r.weights);
                    let per = w.numel() / w.shape()[0];
                    let mut shape = w.shape().to_vec();
                    shape[0] = 1;
                    linearize_tensor::Tensor::new(shape, w.data()[s * per..(s + 1) * per].to_vec())
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            esl += sample_esl(&per_layer)?;
            samples += 1;
        }
    }
    let n = batches.len().max(1) as f64;
    Ok(Diagnostics {
        layers: (0..layers)
            .map(|m| LayerDiagnostics {
                layer: m,
                eval_mse: mse[m] / n,
                mean_entropy: entropy[m] / n,
            })
            .collect(),
        mean_esl: esl / samples.max(1) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub train_loss: Vec<f64>,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub diagnostics: Diagnostics,
    pub wall_time_secs: f64,
}

/// Runs `cfg.steps` transfer steps on random windows of `train`.
pub fn train_transfer(model: &mut Model, cfg: &TransferConfig, train: &Corpus, eval: &Corpus) -> Result<TransferReport> {
    let start = Instant::now();
    let mut trainer = TransferTrainer::new(model, cfg.clone())?;
    let eval_batches = eval.fixed_batches(cfg.eval_batches.max(1), cfg.batch_size, cfg.seq_len)?;
    let initial = eval_transfer_loss(model, &eval_batches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train_loss = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = train.sample(&mut rng, cfg.batch_size, cfg.seq_len)?;
        let stats = trainer.step(model, &batch)?;
        train_loss.push(stats.loss);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let e = eval_transfer_loss(model, &eval_batches)?;
            log::info!("transfer step {} loss {:.4e} eval {:.4e} lr {:.2e}", step + 1, stats.loss, e, trainer.lr());
            trainer.observe_eval(e);
        }
    }
    let diagnostics = layerwise_diagnostics(model, &eval_batches)?;
    Ok(TransferReport {
        train_loss,
        initial_eval_loss: initial,
        final_eval_loss: eval_transfer_loss(model, &eval_batches)?,
        diagnostics,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}
