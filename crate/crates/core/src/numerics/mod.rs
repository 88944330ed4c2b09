//! Dense `f64` tensors, loss kernels with analytic gradients, finite-difference
//! checking and the seeded random source.

mod gradcheck;
mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_difference_gradient, DEFAULT_EPS, RELATIVE_ERROR_FLOOR};
pub use ops::{
    conv2d, conv2d_backward, cross_entropy, l2_normalize, l2_normalize_backward, linear, linear_backward, log_sum_exp,
    pixel_cross_entropy, relu, relu_backward, softmax, upsample_nearest_2x, upsample_nearest_2x_backward, Conv2dGrads,
    ConvGeometry,
};
pub use rng::{derive_seed, RngState};
pub use tensor::{max_relative_error, relative_error, Tensor};
