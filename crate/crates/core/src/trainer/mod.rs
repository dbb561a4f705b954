//! Student model, loss terms, the three-flow training loop, checkpoints and
//! gradient verification.

pub mod checkpoint;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod train;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, relative_error, GradCheckReport};
pub use loss::{masked_consistency_loss, masked_target_loss, supervised_loss, total_loss, CeSum};
pub use model::{ConvNet, Logits, Real, StudentModel};
pub use train::{
    batch_objective, objective_with_targets, poly_lr, resolve_targets, train, train_observed, Batch, BatchSampler,
    EpochMetrics, FlowTargets, MetricHistory, StepLosses, TeacherSource, TrainConfig, TrainData,
};
