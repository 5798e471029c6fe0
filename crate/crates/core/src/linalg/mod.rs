//! Dense linear algebra and deterministic randomness.

mod matrix;
mod ops;
mod real;
mod rng;

pub use matrix::Matrix;
pub use ops::{
    gelu, gelu_backward, gemm, kron, layer_norm, layer_norm_backward, layer_norm_forward, linear, matmul, matmul_nt,
    matmul_tn, randn, softmax_rows, LayerNormCache,
};
pub use real::{Precision, Real};
pub use rng::Rng;
