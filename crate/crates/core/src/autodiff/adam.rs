//! Adam optimizer state and update step.

use super::{from_f64, to_f64, Scalar, Tensor};
use crate::error::{Error, Result};

/// First/second moment accumulators per parameter tensor, in the same fixed
/// order the model reports its parameters.
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_sizes: &[usize], lr: f64) -> AdamState<T> {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
            v: param_sizes.iter().map(|&s| vec![T::zero(); s]).collect(),
        }
    }

    /// One update over all parameters. A non-finite gradient anywhere
    /// rejects the whole step before any parameter moves.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::InvalidConfig(format!(
                "adam state tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (name, p) in params.iter() {
            let g = p.grad.as_deref().ok_or_else(|| {
                Error::InvalidConfig(format!("parameter {name} has no gradient"))
            })?;
            if g.len() != p.data.len() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name}: gradient length mismatch"
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NanGradient { name: name.clone() });
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (from_f64::<T>(self.beta1), from_f64::<T>(self.beta2));
        let one_m_b1 = from_f64::<T>(1.0 - self.beta1);
        let one_m_b2 = from_f64::<T>(1.0 - self.beta2);

        for (idx, (_, p)) in params.iter_mut().enumerate() {
            let g = p.grad.as_deref().expect("checked above");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_m_b1 * g[i];
                v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
                let mhat = to_f64(m[i]) / bc1;
                let vhat = to_f64(v[i]) / bc2;
                let update = self.lr * mhat / (vhat.sqrt() + self.eps);
                p.data[i] = p.data[i] - from_f64(update);
            }
        }
        Ok(())
    }
}
