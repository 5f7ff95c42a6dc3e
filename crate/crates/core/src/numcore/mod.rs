//! Dense `f64` arrays with reverse-mode gradients, parameter storage and
//! checkpoints, Adam, and a finite-difference gradient checker.

mod array;
mod gradcheck;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, GradCheckReport, GRADCHECK_FLOOR};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{init_params, name_seed, ParamStore, CHECKPOINT_VERSION};
pub use tape::{huber, sigmoid, LossKind, OpCount, Tape, Var};

/// Slope of the leaky-relu used inside attention scores.
pub const LEAKY_SLOPE: f64 = 0.2;
