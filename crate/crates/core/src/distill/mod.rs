//! Distillation loss, optimizers and the student training loop.

mod loss;
mod optim;
mod train;

pub use loss::{kd_loss, kd_loss_with_grad, tempered_softmax, KdParams, KdTerms, LogitBatch};
pub use optim::{LrSchedule, Optimizer, OptimizerKind};
pub use train::{evaluate_ji, train, DistillConfig, EpochRecord, Sample, TrainHistory, TrainOutcome};
