//! Two-stage training: codebook pretraining on the reconstruction objective,
//! then classification finetuning with early stopping.

mod checkpoint;
mod config;
mod grid;
mod optimizer;
mod stage1;
mod stage2;

pub use checkpoint::{Checkpoint, Stage, CHECKPOINT_FORMAT};
pub use config::{TrainConfig, PRESETS};
pub use grid::{grid_search, GridOutcome, LeaderboardRow, SearchSpace};
pub use optimizer::AdamW;
pub use stage1::{init_stage1, stage1_eval_loss, train_stage1, Stage1Model, Stage1Outcome, Stage1Record};
pub use stage2::{
    bind_vecformer, build_vecformer, classification_loss, default_split, fit_classifier, inspect, predict, train_baseline,
    train_stage2, FitOutcome, Stage2Outcome, Stage2Record,
};
