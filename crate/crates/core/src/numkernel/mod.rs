//! Dense f64 tensors, graph-free kernels, a define-by-run autodiff graph and
//! the instrumented operation counter.

pub mod counter;
pub mod graph;
pub mod ops;
pub mod seq;
mod tensor;

pub use graph::{grad_of, Gradients, Graph, ScanInputs, Var};
pub use ops::{cross_entropy_logits, matmul, rms_norm, silu, softmax_rows, NORM_EPS};
pub use seq::{SeqLayout, SsmDims};
pub use tensor::{fingerprint_all, Tensor};
