//! Objectives, trainer, samplers and checkpoints for the three training stages.

pub mod data;
pub mod losses;

pub use data::{Batch, Dataset, Prior};
pub use losses::*;
pub mod trainer;

pub use trainer::{
    draw_batch, init_params, stage_loss, train, train_observed, HeadKind, InitKind, LossReport, LrSchedule, MfVelocity,
    Stage, Teacher, TimeSampler, TrainConfig, TrainOutcome,
};
pub mod checkpoint;
pub mod sampling;

pub use checkpoint::Checkpoint;
pub use sampling::{cm_intermediate_times, sample, sample_cm_from, sample_mf_from, FewStepModel};
