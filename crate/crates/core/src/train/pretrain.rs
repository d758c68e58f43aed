//! Next-token training of a softmax model from scratch, producing the teacher.

use serde::{Deserialize, Serialize};

use super::data::Corpus;
use super::lm::{run_lm, LmReport, LmSchedule};
use crate::model::{AttnPath, Model, ParamKind};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 300,
            batch_size: 8,
            seq_len: 64,
            seed: 0,
            eval_every: 25,
            eval_batches: 2,
        }
    }
}

pub fn pretrain(model: &mut Model, cfg: &PretrainConfig, train: &Corpus, eval: &Corpus) -> Result<LmReport> {
    if model.is_converted() {
        return Err(Error::AlreadyConverted);
    }
    let s = LmSchedule {
        lr: cfg.lr,
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        seq_len: cfg.seq_len,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        eval_batches: cfg.eval_batches,
    };
    run_lm(model, &s, ParamKind::is_base, AttnPath::Native, train, eval, "pretrain")
}
