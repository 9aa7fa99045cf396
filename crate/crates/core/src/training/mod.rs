//! Loss, optimisation, metrics, data, file formats and the training loop.

pub mod checkpoint;
pub mod data;
pub mod io;
mod loss;
pub mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use data::{synth_dataset, AugmentConfig, SegSample, SynthConfig, Transform};
pub use loss::{combined_loss, combined_loss_nhwc, soft_dice_loss, DICE_SMOOTH};
pub use metrics::{dice_score, hausdorff, DiceScores};
pub use optim::{AdamW, OptimState};
pub use schedule::lr_schedule;
pub use trainer::{
    aggregate, case_metrics, evaluate, evaluate_cases, predict, train, train_step, EpochRecord, EvalReport,
    TrainConfig, TrainState, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_LOG,
};
