//! Pointwise ops and the two-channel softmax cross-entropy loss.

use super::{from_f64, to_f64, DiffOp, Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// max(0, x) elementwise.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape,
        data,
        grad: None,
    }
}

/// Pass gradient where the forward input was > 0; the subgradient at exactly
/// 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor {
        shape: x.shape,
        data,
        grad: None,
    }
}

/// Layer wrapper so the gradient checker can drive ReLU like any other op.
#[derive(Default)]
pub struct Relu<T> {
    cache_x: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Relu<T> {
        Relu { cache_x: None }
    }
}

impl<T: Scalar> DiffOp<T> for Relu<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if mode == Mode::Train {
            self.cache_x = Some(x.clone());
        }
        Ok(relu(x))
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("relu backward without train forward".into()))?;
        Ok(relu_backward(x, gy))
    }
}

/// Per-voxel softmax over the two output channels, mean negative
/// log-likelihood, stabilized by max subtraction. Returns the loss and the
/// logit gradient `(softmax - onehot) / count`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
) -> Result<(f64, Tensor<T>)> {
    let sh = logits.shape;
    if sh.c != 2 {
        return Err(Error::InvalidConfig(format!(
            "loss expects 2 channels, got {sh}"
        )));
    }
    let sp = sh.spatial();
    let count = sh.n * sp;
    if labels.len() != count {
        return Err(Error::InvalidConfig(format!(
            "loss got {} labels for {count} voxels",
            labels.len()
        )));
    }
    if let Some(&v) = labels.iter().find(|&&v| v > 1) {
        return Err(Error::InvalidConfig(format!(
            "label value {v} outside {{0,1}}"
        )));
    }

    let mut grad = Tensor::zeros(sh);
    let inv_count = 1.0 / count as f64;
    let mut loss = 0.0f64;
    for n in 0..sh.n {
        let base0 = (n * 2) * sp;
        let base1 = (n * 2 + 1) * sp;
        for i in 0..sp {
            let l0 = to_f64(logits.data[base0 + i]);
            let l1 = to_f64(logits.data[base1 + i]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let z = e0 + e1;
            let (p0, p1) = (e0 / z, e1 / z);
            let label = labels[n * sp + i];
            let l_true = if label == 1 { l1 } else { l0 };
            loss += z.ln() - (l_true - m);
            let (t0, t1) = if label == 1 { (0.0, 1.0) } else { (1.0, 0.0) };
            grad.data[base0 + i] = from_f64((p0 - t0) * inv_count);
            grad.data[base1 + i] = from_f64((p1 - t1) * inv_count);
        }
    }
    Ok((loss * inv_count, grad))
}
