//! Dense (N, C, D, H, W) tensors with an optional gradient slot.

use super::Scalar;
use crate::error::{Error, Result};

/// Tensor extents. 2D data uses `d == 1` and the ops degenerate to planar
/// arithmetic; everything is stored z-major, x-fastest like volumes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, d: usize, h: usize, w: usize) -> TensorShape {
        TensorShape { n, c, d, h, w }
    }

    /// Voxels per channel.
    pub fn spatial(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_channels(&self, c: usize) -> TensorShape {
        TensorShape { c, ..*self }
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{},{})", self.n, self.c, self.d, self.h, self.w)
    }
}

/// Values plus an optional same-shape gradient accumulator; constants and
/// activations leave the slot empty.
#[derive(Clone, Debug)]
pub struct Tensor<T> {
    pub shape: TensorShape,
    pub data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: TensorShape) -> Tensor<T> {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
            grad: None,
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<T>) -> Result<Tensor<T>> {
        if data.len() != shape.len() {
            return Err(Error::InvalidConfig(format!(
                "tensor data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Turn on gradient accumulation (parameters).
    pub fn with_grad(mut self) -> Tensor<T> {
        self.grad = Some(vec![T::zero(); self.data.len()]);
        self
    }

    pub fn grad_slice(&self) -> &[T] {
        self.grad.as_deref().expect("tensor has no grad slot")
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        self.grad
            .get_or_insert_with(|| vec![T::zero(); self.data.len()])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(T::zero());
        }
    }

    /// One sample-channel block: the contiguous spatial slab of (n, c).
    #[inline]
    pub fn channel(&self, n: usize, c: usize) -> &[T] {
        let sp = self.shape.spatial();
        let start = (n * self.shape.c + c) * sp;
        &self.data[start..start + sp]
    }
}
