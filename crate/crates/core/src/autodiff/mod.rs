//! Reverse-mode differentiation, the Adam optimizer and parameter checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{decode_params, encode_params, load_adam, load_params, save_adam, save_params};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{ParamSet, Tensor};
