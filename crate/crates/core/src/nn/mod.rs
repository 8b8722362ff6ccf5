//! Dense numeric kernel: matrices, activations, parameters, Adam and a gradient oracle.
//!
//! Backward passes are hand-written per operation rather than recorded on a tape;
//! every differentiable path is covered by [`finite_diff_grad_check`].

mod adam;
mod gradcheck;
mod matrix;
mod ops;
mod param;

pub use adam::{AdamState, Moments};
pub use gradcheck::{finite_diff_grad_check, GradCheck};
pub use matrix::Matrix;
pub(crate) use matrix::{axpy, dot, gemm_nn, gemm_nt, gemm_tn_acc};
pub use ops::{gelu, gelu_grad, layer_norm_rows, log_sum_exp, softmax_rows, LayerNormCache};
pub(crate) use ops::{layer_norm_backward, layer_norm_forward, softmax_backward_in_place, softmax_in_place};
pub use param::{clip_grad_norm, grad_norm, Parameter};
