//! Shared-backbone multi-task networks, their losses and the optimizer.

mod checkpoint;
mod loss;
mod model;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_bytes, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use loss::{task_loss_var, LossKind, PixelWeights, Target, TargetMap};
pub use model::{
    build_model, multitask_loss, task_loss, uniform_weights, Forward, ModelConfig, Param, ParamMode,
    SharedBackboneModel, TaskSpec,
};
pub(crate) use model::validate_weights;
pub use optim::{sgd_step, OptimizerState, SgdConfig};
