//! Training stages: pretraining the teacher, attention transfer, and low-rank adjusting.

pub mod adjust;
pub mod data;
pub mod lm;
pub mod loss;
pub mod optim;
pub mod pretrain;
pub mod transfer;

pub use adjust::{adjust_trainer, train_adjust, AdjustConfig};
pub use data::{synthetic_text, Corpus};
pub use lm::{eval_lm_loss, lm_loss_value, LmReport, LmTrainer};
pub use loss::{
    blockwise_mse, combined_loss, mask_after_eos, mse_attention_loss, next_token_loss, weight_xent_loss,
    TransferLoss,
};
pub use optim::{AdamW, AdamWConfig, Plateau};
pub use pretrain::{pretrain, PretrainConfig};
pub use transfer::{
    eval_transfer_loss, layerwise_diagnostics, train_transfer, transfer_block_losses, Diagnostics,
    LayerDiagnostics, StepStats, TransferConfig, TransferReport, TransferTrainer,
};
