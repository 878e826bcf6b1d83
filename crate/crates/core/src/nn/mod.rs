//! Dense network engine: tensors, layer stacks, forward/backward passes,
//! optimizers, schedules, initializers and checkpoints.

pub mod checkpoint;
pub mod init;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod spec;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use init::{glorot_init, init_params, kaiming_init, InitScheme};
pub use model::{argmax_rows, ForwardOutput, LayerParams, Mode, ModelState, ParamSlot};
pub use optim::{adamw_step, sgd_nesterov_step, Optimizer, OptimizerKind};
pub use schedule::{cosine_restart_lr, LrSchedule};
pub use spec::{build_mlp, build_mlp_tab, build_mlp_vis, LayerSpec, NetworkSpec};
pub use tensor::Tensor;
