//! Stage 2: next-token training of low-rank adapters on the linearized model.

use serde::{Deserialize, Serialize};

use super::data::Corpus;
use super::lm::{run_lm, LmReport, LmSchedule, LmTrainer};
use crate::model::{AttnPath, LoraConfig, Model, ParamKind, Projection};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        let lora = LoraConfig::default();
        Self {
            lr: 1e-3,
            steps: 200,
            batch_size: 8,
            seq_len: 64,
            rank: lora.rank,
            alpha: lora.alpha,
            targets: lora.targets,
            seed: 0,
            eval_every: 25,
            eval_batches: 2,
        }
    }
}

impl AdjustConfig {
    pub fn lora(&self) -> LoraConfig {
        LoraConfig {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
        }
    }
}

fn check_ready(model: &Model) -> Result<()> {
    if !model.is_converted() {
        return Err(Error::NotConverted);
    }
    if model.lora().is_none() {
        return Err(Error::AdaptersMissing);
    }
    Ok(())
}

/// Trainer that only updates adapter matrices; forward passes use hybrid attention.
pub fn adjust_trainer(model: &Model, lr: f64) -> Result<LmTrainer> {
    check_ready(model)?;
    Ok(LmTrainer::new(model, lr, ParamKind::is_adapter, AttnPath::Native))
}

/// Attaches adapters from `cfg` when none are present, then trains them.
pub fn train_adjust(model: &mut Model, cfg: &AdjustConfig, train: &Corpus, eval: &Corpus) -> Result<LmReport> {
    if !model.is_converted() {
        return Err(Error::NotConverted);
    }
    if model.lora().is_none() {
        model.attach_lora(cfg.lora(), cfg.seed)?;
    }
    check_ready(model)?;
    let s = LmSchedule {
        lr: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        eval_batches: cfg.eval_batches,
    };
    run_lm(model, &s, ParamKind::is_adapter, AttnPath::Native, train, eval, "adjust")
}
