//! Optimizer, schedule, data sources and the training loop.

mod data;
mod optim;
mod schedule;
mod trainer;

pub use data::{
    needle_task, synthetic_corpus, CharCorpus, NeedleSample, NeedleSpec, Sequence, WindowSampler,
    NEEDLE_MARKER, NEEDLE_QUERY,
};
pub use optim::{clip_grad_norm, global_norm, AdamW};
pub use schedule::{lr_at, TrainConfig};
pub use trainer::{
    batch_loss_and_grads, needle_accuracy, train, DataSource, StepLog, TrainOutcome,
    NEEDLE_EVAL_SAMPLES,
};
