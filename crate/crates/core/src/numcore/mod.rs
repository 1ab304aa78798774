//! Dense tensors, a reverse-mode tape, parameter storage, seeded RNG and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod linear;
mod params;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport, ParamCheck, FD_STEP, REL_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use linear::Linear;
pub use tensor::{layernorm, matmul, softmax, softmax_slice, transpose, Tensor, LAYERNORM_EPS};
