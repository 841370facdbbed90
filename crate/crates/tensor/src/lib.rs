//! Dense NCHW tensors with reverse-mode gradients, sized for small
//! detection networks on a CPU.
//!
//! Every differentiable op records a backward rule when at least one input
//! tracks gradients. [`gradcheck`] provides the central finite-difference
//! oracle those rules are tested against.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod optim;
mod tensor;
pub mod weights;

pub use conv::{conv2d, conv2d_reference, count_macs, ConvSpec, Padding};
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradCheckReport};
pub use loss::{bce_with_logits, iou_loss};
pub use norm::{batch_norm, BatchNormState, NormMode};
pub use ops::{
    activation, add, avg_pool, concat_channels, elementwise, exp, global_avg_pool, max_pool, mean, mul,
    narrow_channels, pool, resize_nearest, scale, split_channels, sum, weighted_sum, Activation, ElementwiseKind,
    PoolKind,
};
pub use optim::{sgd_step, Sgd};
pub use tensor::{is_grad_enabled, no_grad, Tensor};
