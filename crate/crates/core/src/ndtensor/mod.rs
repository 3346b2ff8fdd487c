//! Dense tensors with reverse-mode automatic differentiation, the Adam
//! optimizer, and the checkpoint container.

mod adam;
mod gradcheck;
pub mod checkpoint;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, GradCheck, REL_ERROR_FLOOR};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use params::{Init, ParamSet, ParamSpec};
pub use tape::{Tape, Var};
pub use tensor::{Result, Tensor, TensorError};
