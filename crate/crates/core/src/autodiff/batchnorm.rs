//! Batch normalization over (batch, spatial) per channel.

use super::{from_f64, to_f64, DiffOp, Mode, Scalar, Tensor, TensorShape};
use crate::error::{Error, Result};

struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

/// Learned per-channel scale/shift plus running statistics for inference.
/// Train mode normalizes with batch statistics and its backward implements
/// the full batch-statistics gradient; eval mode uses the running estimates.
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    channels: usize,
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> BatchNorm<T> {
        let param = |value: T| {
            Tensor::from_vec(TensorShape::new(1, 1, 1, 1, channels), vec![value; channels])
                .expect("param shape")
                .with_grad()
        };
        BatchNorm {
            gamma: param(T::one()),
            beta: param(T::zero()),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.9,
            epsilon: 1e-5,
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape.c != self.channels {
            return Err(Error::InvalidConfig(format!(
                "batchnorm expects {} channels, got {}",
                self.channels, x.shape
            )));
        }
        let sh = x.shape;
        let sp = sh.spatial();
        let m = sh.n * sp;
        let mut out = Tensor::zeros(sh);
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); self.channels];

        for c in 0..self.channels {
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0f64;
                    for n in 0..sh.n {
                        for &v in x.channel(n, c) {
                            sum += to_f64(v);
                        }
                    }
                    let mean = sum / m as f64;
                    let mut ss = 0.0f64;
                    for n in 0..sh.n {
                        for &v in x.channel(n, c) {
                            let d = to_f64(v) - mean;
                            ss += d * d;
                        }
                    }
                    let var = ss / m as f64;
                    // Running estimates; the variance update is unbiased
                    // when the batch allows it.
                    let var_update = if m > 1 { ss / (m - 1) as f64 } else { var };
                    self.running_mean[c] = from_f64(
                        self.momentum * to_f64(self.running_mean[c]) + (1.0 - self.momentum) * mean,
                    );
                    self.running_var[c] = from_f64(
                        self.momentum * to_f64(self.running_var[c])
                            + (1.0 - self.momentum) * var_update,
                    );
                    (mean, var)
                }
                Mode::Eval => (to_f64(self.running_mean[c]), to_f64(self.running_var[c])),
            };
            let istd = 1.0 / (var + self.epsilon).sqrt();
            inv_std[c] = from_f64(istd);
            let g = self.gamma.data[c];
            let b = self.beta.data[c];
            let mean_t = from_f64::<T>(mean);
            let istd_t = from_f64::<T>(istd);
            for n in 0..sh.n {
                let base = (n * sh.c + c) * sp;
                for i in 0..sp {
                    let xh = (x.data[base + i] - mean_t) * istd_t;
                    xhat[base + i] = xh;
                    out.data[base + i] = g * xh + b;
                }
            }
        }

        self.cache = Some(BnCache {
            xhat,
            inv_std,
            mode,
        });
        Ok(out)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("batchnorm backward without forward".into()))?;
        let sh = gy.shape;
        let sp = sh.spatial();
        let m = sh.n * sp;
        let mut gx = Tensor::zeros(sh);

        for c in 0..self.channels {
            let mut sum_gy = 0.0f64;
            let mut sum_gy_xhat = 0.0f64;
            for n in 0..sh.n {
                let base = (n * sh.c + c) * sp;
                for i in 0..sp {
                    let g = to_f64(gy.data[base + i]);
                    sum_gy += g;
                    sum_gy_xhat += g * to_f64(cache.xhat[base + i]);
                }
            }
            let gamma = to_f64(self.gamma.data[c]);
            let istd = to_f64(cache.inv_std[c]);
            match cache.mode {
                Mode::Train => {
                    let mean_gy = sum_gy / m as f64;
                    let mean_gy_xhat = sum_gy_xhat / m as f64;
                    for n in 0..sh.n {
                        let base = (n * sh.c + c) * sp;
                        for i in 0..sp {
                            let g = to_f64(gy.data[base + i]);
                            let xh = to_f64(cache.xhat[base + i]);
                            gx.data[base + i] =
                                from_f64(gamma * istd * (g - mean_gy - xh * mean_gy_xhat));
                        }
                    }
                }
                Mode::Eval => {
                    for n in 0..sh.n {
                        let base = (n * sh.c + c) * sp;
                        for i in 0..sp {
                            let g = to_f64(gy.data[base + i]);
                            gx.data[base + i] = from_f64(gamma * istd * g);
                        }
                    }
                }
            }
            let ggrad = self.gamma.grad_mut();
            ggrad[c] = ggrad[c] + from_f64(sum_gy_xhat);
            let bgrad = self.beta.grad_mut();
            bgrad[c] = bgrad[c] + from_f64(sum_gy);
        }
        Ok(gx)
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

impl<T: Scalar> DiffOp<T> for BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        BatchNorm::forward(self, x, mode)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        BatchNorm::backward(self, gy)
    }

    fn params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("gamma".to_string(), &mut self.gamma),
            ("beta".to_string(), &mut self.beta),
        ]
    }
}
