//! Self-distillation with a momentum teacher.

pub mod loss;
pub mod optim;
pub mod schedule;
pub mod train;

pub use loss::{loss_global, loss_local, teacher_targets, total_loss, update_center};
pub use optim::AdamW;
pub use schedule::{ema_update, lr_schedule, momentum_schedule};
pub use train::{
    load_teacher, pretrain, resume, train_step, PretrainOptions, PretrainOutcome, Sample, Schedule,
    StepMetrics, TrainConfig, TrainState, Trainer, LAST_CHECKPOINT, METRICS_FILE,
};
