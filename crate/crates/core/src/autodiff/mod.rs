//! Minimal reverse-mode differentiation over dense tensors.
//!
//! The networks here are fixed feed-forward chains, so there is no general
//! graph: each op owns its parameters and caches what its backward pass
//! needs. Production runs use `f32`; every op is generic over [`Scalar`] so
//! the gradient checker can run the same code in `f64`.
//!
//! Within-op parallelism (rayon over output channels) uses fixed-order
//! accumulation per task, so results are bitwise independent of the worker
//! count.

mod adam;
mod batchnorm;
mod conv;
mod gradcheck;
mod ops;
mod resblock;
mod tensor;

pub use adam::AdamState;
pub use batchnorm::BatchNorm;
pub use conv::{Conv, KernelExtent};
pub use gradcheck::{grad_check, grad_check_loss, GradCheckReport};
pub use ops::{relu, relu_backward, softmax_cross_entropy, Relu};
pub use resblock::ResidualBlock;
pub use tensor::{Tensor, TensorShape};

/// Training vs inference behavior (batch statistics and caching).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Element type of the engine: `f32` in production, `f64` for verification.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn from_f64<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 conversion")
}

#[inline]
pub(crate) fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().expect("f64 conversion")
}

/// A differentiable op, the unit the gradient checker drives.
pub trait DiffOp<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> crate::Result<Tensor<T>>;

    /// Propagate `gy` to the input, accumulating parameter gradients.
    fn backward(&mut self, gy: &Tensor<T>) -> crate::Result<Tensor<T>>;

    /// Learned parameters as (name, tensor-with-grad) pairs, fixed order.
    fn params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        Vec::new()
    }
}
