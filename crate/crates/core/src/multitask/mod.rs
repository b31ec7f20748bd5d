//! Shared-private multi-task training with an optional adversarial task
//! discriminator and a shared/private difference penalty.

mod config;
mod export;
mod loss;
mod model;
mod train;

pub use config::{preset, Adversarial, LrEvent, LrSchedule, ModelConfig, TrainConfig, LOSS_WEIGHT_GRID, PRESETS};
pub use export::{export_encoders, private_role, BundleMeta, EncoderBundle, Manifest, ManifestEntry, MANIFEST_FILE};
pub use loss::{
    adv_loss, diff_loss, diff_loss_on, discriminator_forward, forward_task, step_loss, step_objective, total_loss, SideStates, StepLoss,
    TaskOutput,
};
pub use model::{Discriminator, DiscriminatorVars, Mlp, MlpVars, MtlModel, StepVars, TaskHead, TaskKind, TaskSpec};
pub use train::{accuracy, sgd_update, train, train_with, write_log, EpochLog, TrainOutcome, TrainState};
