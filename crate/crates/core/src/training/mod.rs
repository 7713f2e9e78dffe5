//! Optimizer, gradient checking, synthetic tasks, training and evaluation.

mod evaluate;
mod gradcheck;
mod optim;
mod tasks;
mod trainer;

pub use evaluate::{evaluate, score_decode, EvalReport};
pub use gradcheck::{
    batch_loss, batch_loss_and_gradient, grad_check, grad_check_with, relative_error,
    sample_coordinates, FaultInjection, GradCheckReport,
};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use tasks::{gen_task, Example, LanguageModel, TaskKind, TaskSpec};
pub use trainer::{check_compatible, train, StepRecord, TrainOptions, TrainOutcome};
