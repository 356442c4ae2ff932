//! Dense tensors, the differentiation tape and the optimizer.

pub mod gradcheck;
mod optim;
mod scalar;
mod tape;
mod value;

pub use optim::{adamw_step, clip_global_norm, global_norm, lr_at, AdamWConfig, GradMap, LrSchedule, OptimState};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
