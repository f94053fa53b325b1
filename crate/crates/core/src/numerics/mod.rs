//! Dense `f64` linear algebra, activations and normalization.
//!
//! Every forward operation here has a matching backward that is checked
//! against central finite differences in the unit tests.

mod activation;
mod matrix;
mod norm;
mod rng;

pub use activation::{gelu, gelu_grad, gelu_grad_scalar, gelu_scalar, softmax_rows};
pub use matrix::{matmul, Matrix};
pub use norm::{layernorm, layernorm_backward, LayerNormCache, LAYERNORM_EPS};
pub use rng::{rng_normal, Rng};

pub(crate) use activation::{gelu_backward, softmax_rows_backward, softmax_rows_in_place};
pub(crate) use matrix::{mm, mm_nt, mm_tn_acc};
