//! Dense `f64` numerics with reverse-mode autodiff and Adam.

mod adam;
mod mlp;
mod tape;
mod tensor;
pub mod weights;

pub use adam::Adam;
pub use mlp::{init_weight, Activation, Mlp};
pub use tape::{AttentionLayout, Gradients, Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};
