//! Residual unit: conv → ReLU → conv → BN → add skip → ReLU.
//!
//! The skip is the identity when input and output widths match, otherwise a
//! learned 1x1(x1) projection.

use rand::Rng;

use super::conv::KernelExtent;
use super::ops::{relu, relu_backward};
use super::{BatchNorm, Conv, DiffOp, Mode, Scalar, Tensor};
use crate::error::{Error, Result};

pub struct ResidualBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    pub bn: BatchNorm<T>,
    pub skip: Option<Conv<T>>,
    cache: Option<BlockCache<T>>,
}

struct BlockCache<T> {
    h1: Tensor<T>,
    pre_act: Tensor<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        dimensionality: u8,
        rng: &mut impl Rng,
    ) -> ResidualBlock<T> {
        let k3 = KernelExtent::k3(dimensionality);
        ResidualBlock {
            conv1: Conv::new(c_in, c_out, k3, rng),
            conv2: Conv::new(c_out, c_out, k3, rng),
            bn: BatchNorm::new(c_out),
            skip: (c_in != c_out).then(|| Conv::new(c_in, c_out, KernelExtent::k1(), rng)),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h1 = self.conv1.forward(x, mode)?;
        let a1 = relu(&h1);
        let h2 = self.conv2.forward(&a1, mode)?;
        let b = self.bn.forward(&h2, mode)?;
        let s = match &mut self.skip {
            Some(proj) => proj.forward(x, mode)?,
            None => x.clone(),
        };
        debug_assert_eq!(b.shape, s.shape);
        let mut pre_act = b;
        for (p, &q) in pre_act.data.iter_mut().zip(&s.data) {
            *p = *p + q;
        }
        let y = relu(&pre_act);
        if mode == Mode::Train {
            self.cache = Some(BlockCache { h1, pre_act });
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("block backward without train forward".into()))?;
        let g_pre = relu_backward(&cache.pre_act, gy);
        let gb = self.bn.backward(&g_pre)?;
        let ga1 = self.conv2.backward(&gb)?;
        let gh1 = relu_backward(&cache.h1, &ga1);
        let mut gx = self.conv1.backward(&gh1)?;
        let g_skip = match &mut self.skip {
            Some(proj) => proj.backward(&g_pre)?,
            None => g_pre,
        };
        for (a, &b) in gx.data.iter_mut().zip(&g_skip.data) {
            *a = *a + b;
        }
        Ok(gx)
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.bn.param_count()
            + self.skip.as_ref().map_or(0, Conv::param_count)
    }
}

impl<T: Scalar> DiffOp<T> for ResidualBlock<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        ResidualBlock::forward(self, x, mode)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        ResidualBlock::backward(self, gy)
    }

    fn params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("conv1.weight".to_string(), &mut self.conv1.weight),
            ("conv1.bias".to_string(), &mut self.conv1.bias),
            ("conv2.weight".to_string(), &mut self.conv2.weight),
            ("conv2.bias".to_string(), &mut self.conv2.bias),
            ("bn.gamma".to_string(), &mut self.bn.gamma),
            ("bn.beta".to_string(), &mut self.bn.beta),
        ];
        if let Some(proj) = &mut self.skip {
            out.push(("skip.weight".to_string(), &mut proj.weight));
            out.push(("skip.bias".to_string(), &mut proj.bias));
        }
        out
    }
}
