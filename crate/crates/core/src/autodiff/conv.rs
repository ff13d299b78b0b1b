//! Same-padding stride-1 convolution with 3- or 1-voxel kernel extent per
//! axis, plus its backward pass.
//!
//! The input is copied once into a zero-padded buffer; every output row is
//! then produced by fused multiply-adds over contiguous padded rows, with
//! the x-axis taps folded into one pass. Parallelism is over output (or
//! input, in the backward) channels with fixed-order accumulation, so
//! results do not depend on the worker count.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{from_f64, DiffOp, Mode, Scalar, Tensor, TensorShape};
use crate::error::{Error, Result};

/// Kernel extents per spatial axis; the architectures only use 3 (feature
/// convolutions) and 1 (skip projections).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct KernelExtent {
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelExtent {
    /// 3 per spatial axis; depth 1 for 2D models.
    pub fn k3(dimensionality: u8) -> KernelExtent {
        KernelExtent {
            kd: if dimensionality == 3 { 3 } else { 1 },
            kh: 3,
            kw: 3,
        }
    }

    /// 1x1(x1) projection.
    pub fn k1() -> KernelExtent {
        KernelExtent { kd: 1, kh: 1, kw: 1 }
    }

    pub fn volume(&self) -> usize {
        self.kd * self.kh * self.kw
    }
}

struct PaddedInput<T> {
    data: Vec<T>,
    shape: TensorShape, // of the unpadded input
}

/// Convolution layer: weights shaped (C_out, C_in, kd, kh, kw), one bias per
/// output channel, zero-fill same padding so spatial dims never shrink.
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub c_in: usize,
    pub c_out: usize,
    pub extent: KernelExtent,
    cache: Option<PaddedInput<T>>,
}

impl<T: Scalar> Conv<T> {
    /// He-normal fan-in initialization for the weights, zero bias.
    pub fn new(c_in: usize, c_out: usize, extent: KernelExtent, rng: &mut impl Rng) -> Conv<T> {
        let fan_in = c_in * extent.volume();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid stddev");
        let wlen = c_out * fan_in;
        let weight = (0..wlen)
            .map(|_| from_f64::<T>(normal.sample(rng)))
            .collect();
        Conv {
            weight: Tensor::from_vec(TensorShape::new(1, 1, 1, 1, wlen), weight)
                .expect("weight shape")
                .with_grad(),
            bias: Tensor::from_vec(TensorShape::new(1, 1, 1, 1, c_out), vec![T::zero(); c_out])
                .expect("bias shape")
                .with_grad(),
            c_in,
            c_out,
            extent,
            cache: None,
        }
    }

    fn pads(&self) -> (usize, usize, usize) {
        (self.extent.kd / 2, self.extent.kh / 2, self.extent.kw / 2)
    }

    /// Copy (n, c) channels into a zero-bordered buffer.
    fn pad(&self, x: &Tensor<T>) -> PaddedInput<T> {
        let sh = x.shape;
        let (pd, ph, pw) = self.pads();
        let (dp, hp, wp) = (sh.d + 2 * pd, sh.h + 2 * ph, sh.w + 2 * pw);
        let psp = dp * hp * wp;
        let mut data = vec![T::zero(); sh.n * sh.c * psp];
        for block in 0..sh.n * sh.c {
            let src = &x.data[block * sh.spatial()..(block + 1) * sh.spatial()];
            let dst = &mut data[block * psp..(block + 1) * psp];
            for z in 0..sh.d {
                for y in 0..sh.h {
                    let s = (z * sh.h + y) * sh.w;
                    let d = ((z + pd) * hp + (y + ph)) * wp + pw;
                    dst[d..d + sh.w].copy_from_slice(&src[s..s + sh.w]);
                }
            }
        }
        PaddedInput { data, shape: sh }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if x.shape.c != self.c_in {
            return Err(Error::InvalidConfig(format!(
                "conv expects {} input channels, got shape {}",
                self.c_in, x.shape
            )));
        }
        let sh = x.shape;
        let (kd, kh, kw) = (self.extent.kd, self.extent.kh, self.extent.kw);
        let (pd, ph, pw) = self.pads();
        let (hp, wp) = (sh.h + 2 * ph, sh.w + 2 * pw);
        let psp = (sh.d + 2 * pd) * hp * wp;
        let sp = sh.spatial();
        let kvol = self.extent.volume();
        let padded = self.pad(x);
        let xp = &padded.data;
        let weight = &self.weight.data;
        let bias = &self.bias.data;
        let (c_in, c_out) = (self.c_in, self.c_out);

        let nine_tap = kh == 3 && kw == 3;
        let mut out = Tensor::zeros(sh.with_channels(c_out));
        out.data
            .par_chunks_mut(sp)
            .enumerate()
            .for_each(|(block, out_ch)| {
                let n = block / c_out;
                let co = block % c_out;
                out_ch.fill(bias[co]);
                for ci in 0..c_in {
                    let ch = (n * c_in + ci) * psp;
                    let wbase = (co * c_in + ci) * kvol;
                    for kz in 0..kd {
                        if nine_tap {
                            let mut w9 = [T::zero(); 9];
                            w9.copy_from_slice(&weight[wbase + kz * 9..][..9]);
                            for z in 0..sh.d {
                                let plane = ch + (z + kz) * hp * wp;
                                for y in 0..sh.h {
                                    let p = &xp[plane + y * wp..][..2 * wp + sh.w + 2];
                                    let acc = &mut out_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                    fused_rows3(acc, p, wp, &w9);
                                }
                            }
                        } else {
                            for ky in 0..kh {
                                let wrow = &weight[wbase + (kz * kh + ky) * kw..][..kw];
                                for z in 0..sh.d {
                                    let plane = ch + ((z + kz) * hp + ky) * wp;
                                    for y in 0..sh.h {
                                        let prow = &xp[plane + y * wp..][..sh.w + 2 * pw];
                                        let acc =
                                            &mut out_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                        fused_row(acc, prow, wrow, false);
                                    }
                                }
                            }
                        }
                    }
                }
            });

        if mode == Mode::Train {
            self.cache = Some(padded);
        }
        Ok(out)
    }

    pub fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        let padded = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("conv backward without train forward".into()))?;
        let sh = padded.shape;
        let sp = sh.spatial();
        let (kd, kh, kw) = (self.extent.kd, self.extent.kh, self.extent.kw);
        let (pd, ph, pw) = self.pads();
        let (hp, wp) = (sh.h + 2 * ph, sh.w + 2 * pw);
        let psp = (sh.d + 2 * pd) * hp * wp;
        let kvol = self.extent.volume();
        let (c_in, c_out) = (self.c_in, self.c_out);
        let weight = &self.weight.data;
        let xp = &padded.data;

        // Input gradient: correlate padded gy with the mirrored kernel.
        let nine_tap = kh == 3 && kw == 3;
        let gyp = self.pad(gy);
        let gyp = &gyp.data;
        let mut gx = Tensor::zeros(sh);
        gx.data
            .par_chunks_mut(sp)
            .enumerate()
            .for_each(|(block, gx_ch)| {
                let n = block / c_in;
                let ci = block % c_in;
                for co in 0..c_out {
                    let ch = (n * c_out + co) * psp;
                    let wbase = (co * c_in + ci) * kvol;
                    for kz in 0..kd {
                        if nine_tap {
                            let mut w9 = [T::zero(); 9];
                            for (j, slot) in w9.iter_mut().enumerate() {
                                *slot = weight[wbase + kz * 9 + 8 - j];
                            }
                            for z in 0..sh.d {
                                let plane = ch + (z + kd - 1 - kz) * hp * wp;
                                for y in 0..sh.h {
                                    let p = &gyp[plane + y * wp..][..2 * wp + sh.w + 2];
                                    let acc = &mut gx_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                    fused_rows3(acc, p, wp, &w9);
                                }
                            }
                        } else {
                            for ky in 0..kh {
                                let wrow = &weight[wbase + (kz * kh + ky) * kw..][..kw];
                                for z in 0..sh.d {
                                    let plane =
                                        ch + ((z + kd - 1 - kz) * hp + kh - 1 - ky) * wp;
                                    for y in 0..sh.h {
                                        let prow = &gyp[plane + y * wp..][..sh.w + 2 * pw];
                                        let acc =
                                            &mut gx_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                        fused_row(acc, prow, wrow, true);
                                    }
                                }
                            }
                        }
                    }
                }
            });

        // Weight and bias gradients, parallel over output channels.
        let gw_gb: Vec<(Vec<T>, T)> = (0..c_out)
            .into_par_iter()
            .map(|co| {
                let mut gw = vec![T::zero(); c_in * kvol];
                let mut gb = T::zero();
                for n in 0..sh.n {
                    let gy_ch = gy.channel(n, co);
                    gb = gb + gy_ch.iter().fold(T::zero(), |a, &b| a + b);
                    for ci in 0..c_in {
                        let ch = (n * c_in + ci) * psp;
                        for kz in 0..kd {
                            if nine_tap {
                                let mut acc = [[T::zero(); 8]; 9];
                                for z in 0..sh.d {
                                    let plane = ch + (z + kz) * hp * wp;
                                    for y in 0..sh.h {
                                        let gy_row =
                                            &gy_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                        let p = &xp[plane + y * wp..][..2 * wp + sh.w + 2];
                                        row_dots9(&mut acc, gy_row, p, wp);
                                    }
                                }
                                let dst = &mut gw[ci * kvol + kz * 9..][..9];
                                for (d, lanes) in dst.iter_mut().zip(&acc) {
                                    *d = *d + lanes.iter().fold(T::zero(), |s, &v| s + v);
                                }
                            } else {
                                for ky in 0..kh {
                                    let dst_at = ci * kvol + (kz * kh + ky) * kw;
                                    for z in 0..sh.d {
                                        let plane = ch + ((z + kz) * hp + ky) * wp;
                                        for y in 0..sh.h {
                                            let gy_row =
                                                &gy_ch[(z * sh.h + y) * sh.w..][..sh.w];
                                            let prow =
                                                &xp[plane + y * wp..][..sh.w + 2 * pw];
                                            row_dots(
                                                &mut gw[dst_at..dst_at + kw],
                                                gy_row,
                                                prow,
                                            );
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                (gw, gb)
            })
            .collect();

        let wgrad = self.weight.grad_mut();
        for (co, (gw, _)) in gw_gb.iter().enumerate() {
            let base = co * c_in * kvol;
            for (i, &g) in gw.iter().enumerate() {
                wgrad[base + i] = wgrad[base + i] + g;
            }
        }
        let bgrad = self.bias.grad_mut();
        for (co, (_, gb)) in gw_gb.iter().enumerate() {
            bgrad[co] = bgrad[co] + *gb;
        }

        Ok(gx)
    }

    pub fn param_count(&self) -> usize {
        self.weight.data.len() + self.bias.data.len()
    }
}

/// All nine (ky, kx) taps in one pass: `p` holds three consecutive padded
/// rows of stride `wp`; the three per-row accumulation chains stay
/// independent so the FMA latency overlaps.
#[inline]
fn fused_rows3<T: Scalar>(acc: &mut [T], p: &[T], wp: usize, w: &[T; 9]) {
    let n = acc.len();
    let r0 = &p[..n + 2];
    let r1 = &p[wp..wp + n + 2];
    let r2 = &p[2 * wp..2 * wp + n + 2];
    for x in 0..n {
        let a = r0[x + 2].mul_add(w[2], r0[x + 1].mul_add(w[1], r0[x] * w[0]));
        let b = r1[x + 2].mul_add(w[5], r1[x + 1].mul_add(w[4], r1[x] * w[3]));
        let c = r2[x + 2].mul_add(w[8], r2[x + 1].mul_add(w[7], r2[x] * w[6]));
        acc[x] = acc[x] + ((a + b) + c);
    }
}

/// One row's contribution to all nine (ky, kx) taps, accumulated into
/// caller-held 8-lane partials (horizontally reduced once per channel pass,
/// so the hot loop is pure vertical FMA).
#[inline]
fn row_dots9<T: Scalar>(acc: &mut [[T; 8]; 9], a: &[T], p: &[T], wp: usize) {
    let n = a.len();
    let chunks = n / 8;
    for c in 0..chunks {
        let base = c * 8;
        let a8 = &a[base..base + 8];
        for ky in 0..3 {
            let r = &p[ky * wp + base..][..10];
            for lane in 0..8 {
                acc[ky * 3][lane] = a8[lane].mul_add(r[lane], acc[ky * 3][lane]);
                acc[ky * 3 + 1][lane] = a8[lane].mul_add(r[lane + 1], acc[ky * 3 + 1][lane]);
                acc[ky * 3 + 2][lane] = a8[lane].mul_add(r[lane + 2], acc[ky * 3 + 2][lane]);
            }
        }
    }
    for x in chunks * 8..n {
        let ax = a[x];
        let lane = x - chunks * 8;
        for ky in 0..3 {
            let r = &p[ky * wp..];
            acc[ky * 3][lane] = ax.mul_add(r[x], acc[ky * 3][lane]);
            acc[ky * 3 + 1][lane] = ax.mul_add(r[x + 1], acc[ky * 3 + 1][lane]);
            acc[ky * 3 + 2][lane] = ax.mul_add(r[x + 2], acc[ky * 3 + 2][lane]);
        }
    }
}

/// acc[x] += Σ_k w[k]·p[x + k] with the kernel optionally reversed; `p` is a
/// padded row one kernel overhang longer than `acc`.
#[inline]
fn fused_row<T: Scalar>(acc: &mut [T], p: &[T], w: &[T], reverse: bool) {
    let n = acc.len();
    match w.len() {
        3 => {
            let (w0, w1, w2) = if reverse {
                (w[2], w[1], w[0])
            } else {
                (w[0], w[1], w[2])
            };
            let p0 = &p[..n];
            let p1 = &p[1..n + 1];
            let p2 = &p[2..n + 2];
            for x in 0..n {
                acc[x] = p2[x].mul_add(w2, p1[x].mul_add(w1, p0[x].mul_add(w0, acc[x])));
            }
        }
        1 => {
            let w0 = w[0];
            let p0 = &p[..n];
            for x in 0..n {
                acc[x] = p0[x].mul_add(w0, acc[x]);
            }
        }
        _ => {
            let k = w.len();
            for x in 0..n {
                let mut s = acc[x];
                for (j, &wj) in w.iter().enumerate() {
                    let wj = if reverse { w[k - 1 - j] } else { wj };
                    s = p[x + j].mul_add(wj, s);
                }
                acc[x] = s;
            }
        }
    }
}

/// dst[k] += Σ_x a[x]·p[x + k]: the per-row contribution to the kx taps.
#[inline]
fn row_dots<T: Scalar>(dst: &mut [T], a: &[T], p: &[T]) {
    let n = a.len();
    match dst.len() {
        3 => {
            let mut d0 = T::zero();
            let mut d1 = T::zero();
            let mut d2 = T::zero();
            let p0 = &p[..n];
            let p1 = &p[1..n + 1];
            let p2 = &p[2..n + 2];
            for x in 0..n {
                d0 = a[x].mul_add(p0[x], d0);
                d1 = a[x].mul_add(p1[x], d1);
                d2 = a[x].mul_add(p2[x], d2);
            }
            dst[0] = dst[0] + d0;
            dst[1] = dst[1] + d1;
            dst[2] = dst[2] + d2;
        }
        1 => {
            let mut d0 = T::zero();
            let p0 = &p[..n];
            for x in 0..n {
                d0 = a[x].mul_add(p0[x], d0);
            }
            dst[0] = dst[0] + d0;
        }
        _ => {
            for (k, slot) in dst.iter_mut().enumerate() {
                let mut d = T::zero();
                for x in 0..n {
                    d = a[x].mul_add(p[x + k], d);
                }
                *slot = *slot + d;
            }
        }
    }
}

impl<T: Scalar> DiffOp<T> for Conv<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Conv::forward(self, x, mode)
    }

    fn backward(&mut self, gy: &Tensor<T>) -> Result<Tensor<T>> {
        Conv::backward(self, gy)
    }

    fn params(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("weight".to_string(), &mut self.weight),
            ("bias".to_string(), &mut self.bias),
        ]
    }
}
