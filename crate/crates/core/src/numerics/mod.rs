//! Dense linear algebra, activations, parameter bookkeeping and the
//! finite-difference gradient oracle.

mod gradcheck;
pub mod kinks;
mod layers;
mod ops;
mod param;
mod rng;
mod tensor;

pub use gradcheck::{
    check_gradients, relative_error, BlockError, GradCheckOptions, GradCheckReport,
};
pub use layers::{Linear, Mlp, MlpCache};
pub use ops::{
    affine, affine_backward, axpy, dot, gemm, linear_backward, linear_forward, matmul,
    relu_backward_inplace, relu_inplace, sigmoid, sigmoid_backward, sigmoid_tensor,
};
pub use param::{HasParams, ParamBlock};
pub use rng::{derive_seed, rng_from_seed, DrpRng};
pub use tensor::Tensor;
