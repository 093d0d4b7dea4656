//! Dense tensors, a parameter registry, and a reverse-mode tape.
//!
//! All model computation is expressed as ops on a [`Graph`]. Model state is
//! `f32`; the same code runs in `f64` for finite-difference checks.

mod graph;
pub mod gradcheck;
pub(crate) mod kernels;
mod param;
mod tensor;

pub use graph::{Gradients, Graph, Var, GATHER_ZERO};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::{Real, Tensor};
