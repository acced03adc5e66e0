//! Dense tensors, a define-by-run gradient tape, and Adagrad.

mod adagrad;
pub mod gradcheck;
pub mod layers;
mod params;
mod tape;
mod tensor;

pub use adagrad::AdagradState;
pub use layers::{Linear, Mlp};
pub use params::{glorot_uniform, uniform, Param, ParamId, ParamStore};
pub use tape::{bce_terms, Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;

pub(crate) use tensor::sigmoid;
