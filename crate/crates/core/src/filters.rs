//! Separable Gaussian derivative filtering, Hessian and structure tensor
//! fields, and the closed-form symmetric 3x3 eigensolver.
//!
//! Boundary handling is reflect (mirror without repeating the edge sample)
//! everywhere. Derivative kernels are corrected to have an exact zero sum,
//! and the second-derivative kernel reproduces d²/dx² on x² exactly at the
//! center tap. Second derivatives are γ-normalized with exponent 2 (scaled
//! by σ²) so responses are comparable across scales.

use crate::error::{Error, Result};
use crate::volgrid::{Dims, Volume};

/// Feature scales used by the random-forest stack when nothing else is
/// configured: sub-voxel up to multi-fiber-radius structure at both pitches.
pub const DEFAULT_FEATURE_SCALES: [f32; 4] = [0.7, 1.0, 1.6, 3.5];

/// Symmetric 3x3 matrix, six unique entries.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SymMat3 {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub xz: f64,
    pub yz: f64,
}

impl SymMat3 {
    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn det(&self) -> f64 {
        self.xx * (self.yy * self.zz - self.yz * self.yz)
            - self.xy * (self.xy * self.zz - self.yz * self.xz)
            + self.xz * (self.xy * self.yz - self.yy * self.xz)
    }

    pub fn frobenius(&self) -> f64 {
        (self.xx * self.xx
            + self.yy * self.yy
            + self.zz * self.zz
            + 2.0 * (self.xy * self.xy + self.xz * self.xz + self.yz * self.yz))
            .sqrt()
    }
}

/// Per-voxel symmetric 3x3 field stored as six scalar volumes.
#[derive(Clone, Debug)]
pub struct SymMat3Field {
    pub dims: Dims,
    pub xx: Vec<f32>,
    pub yy: Vec<f32>,
    pub zz: Vec<f32>,
    pub xy: Vec<f32>,
    pub xz: Vec<f32>,
    pub yz: Vec<f32>,
}

impl SymMat3Field {
    #[inline]
    pub fn at(&self, i: usize) -> SymMat3 {
        SymMat3 {
            xx: self.xx[i] as f64,
            yy: self.yy[i] as f64,
            zz: self.zz[i] as f64,
            xy: self.xy[i] as f64,
            xz: self.xz[i] as f64,
            yz: self.yz[i] as f64,
        }
    }
}

/// Named per-voxel feature channels, channel-major storage.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub dims: Dims,
    pub names: Vec<String>,
    data: Vec<f32>,
}

impl FeatureStack {
    /// Assemble a stack from per-channel volumes (tests, debug dumps).
    pub fn from_channels(
        dims: Dims,
        names: Vec<String>,
        channels: Vec<Vec<f32>>,
    ) -> Result<FeatureStack> {
        if names.len() != channels.len() {
            return Err(Error::InvalidConfig(
                "channel name/data count mismatch".into(),
            ));
        }
        let len = dims.len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidConfig(
                "channel length does not match dims".into(),
            ));
        }
        let mut data = Vec::with_capacity(names.len() * len);
        for c in channels {
            data.extend_from_slice(&c);
        }
        Ok(FeatureStack { dims, names, data })
    }

    pub fn n_channels(&self) -> usize {
        self.names.len()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let len = self.dims.len();
        &self.data[c * len..(c + 1) * len]
    }

    /// Feature vector of one voxel across all channels.
    pub fn voxel_features(&self, voxel: usize, out: &mut [f32]) {
        let len = self.dims.len();
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.data[c * len + voxel];
        }
    }
}

/// Reflect an out-of-range index without repeating the edge sample
/// (`-1 -> 1`, `n -> n-2`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Sampled Gaussian tap values with the corrections described in the module
/// docs. `order` is the derivative order in {0, 1, 2}; the kernel is meant to
/// be applied as a correlation (`out[i] = Σ_t k[t+r]·in[i+t]`), so the
/// first-order kernel yields +1 on an increasing unit ramp.
pub fn gaussian_kernel(sigma: f64, order: u8) -> Result<Vec<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "gaussian kernel needs sigma > 0, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps = (2 * radius + 1) as usize;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let mut k = vec![0.0f64; taps];
    for (j, slot) in k.iter_mut().enumerate() {
        let t = (j as isize - radius) as f64;
        let g = norm * (-t * t / (2.0 * sigma * sigma)).exp();
        *slot = match order {
            0 => g,
            1 => t / (sigma * sigma) * g,
            2 => (t * t / sigma.powi(4) - 1.0 / (sigma * sigma)) * g,
            o => {
                return Err(Error::InvalidConfig(format!(
                    "unsupported derivative order {o}"
                )))
            }
        };
    }
    match order {
        0 => {
            let sum: f64 = k.iter().sum();
            for v in &mut k {
                *v /= sum;
            }
        }
        1 => {
            let mean = k.iter().sum::<f64>() / taps as f64;
            for v in &mut k {
                *v -= mean;
            }
            // Make the response on t equal d/dt(t) = 1 exactly; 3σ truncation
            // otherwise loses half a percent.
            let m1: f64 = k
                .iter()
                .enumerate()
                .map(|(j, &v)| (j as isize - radius) as f64 * v)
                .sum();
            for v in &mut k {
                *v /= m1;
            }
        }
        _ => {
            let mean = k.iter().sum::<f64>() / taps as f64;
            for v in &mut k {
                *v -= mean;
            }
            // Make the response on t² equal d²/dt²(t²) = 2 exactly.
            let m2: f64 = k
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let t = (j as isize - radius) as f64;
                    t * t * v
                })
                .sum();
            for v in &mut k {
                *v *= 2.0 / m2;
            }
        }
    }
    let mut out: Vec<f32> = k.into_iter().map(|v| v as f32).collect();
    if order > 0 {
        // Re-center the zero sum after rounding to f32.
        let residue: f32 = out.iter().sum();
        out[taps / 2] -= residue;
    }
    Ok(out)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    Z,
    Y,
    X,
}

/// Correlate one axis with a 1D kernel under reflect boundary handling.
fn convolve_axis(data: &[f32], dims: Dims, kernel: &[f32], axis: Axis) -> Vec<f32> {
    let radius = kernel.len() / 2;
    let (nz, ny, nx) = (dims.nz, dims.ny, dims.nx);
    let mut out = vec![0.0f32; data.len()];
    match axis {
        Axis::X => {
            let mut ext = vec![0.0f32; nx + 2 * radius];
            for row in 0..nz * ny {
                let src = &data[row * nx..(row + 1) * nx];
                for (j, slot) in ext.iter_mut().enumerate() {
                    *slot = src[reflect(j as isize - radius as isize, nx)];
                }
                let dst = &mut out[row * nx..(row + 1) * nx];
                for (i, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0f32;
                    for (j, &w) in kernel.iter().enumerate() {
                        acc += w * ext[i + j];
                    }
                    *d = acc;
                }
            }
        }
        Axis::Y => {
            for z in 0..nz {
                let plane = z * ny * nx;
                for y in 0..ny {
                    let dst = &mut out[plane + y * nx..plane + (y + 1) * nx];
                    for (j, &w) in kernel.iter().enumerate() {
                        let sy = reflect(y as isize + j as isize - radius as isize, ny);
                        let src = &data[plane + sy * nx..plane + (sy + 1) * nx];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
        Axis::Z => {
            let plane = ny * nx;
            for z in 0..nz {
                let dst = &mut out[z * plane..(z + 1) * plane];
                for (j, &w) in kernel.iter().enumerate() {
                    let sz = reflect(z as isize + j as isize - radius as isize, nz);
                    let src = &data[sz * plane..(sz + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
    }
    out
}

fn separable_filter(v: &Volume, orders: (u8, u8, u8), sigma_vox: f64) -> Result<Volume> {
    let kz = gaussian_kernel(sigma_vox, orders.0)?;
    let ky = gaussian_kernel(sigma_vox, orders.1)?;
    let kx = gaussian_kernel(sigma_vox, orders.2)?;
    let mut data = convolve_axis(&v.data, v.dims, &kx, Axis::X);
    data = convolve_axis(&data, v.dims, &ky, Axis::Y);
    data = convolve_axis(&data, v.dims, &kz, Axis::Z);
    Ok(Volume {
        dims: v.dims,
        voxel_size_um: v.voxel_size_um,
        data,
    })
}

/// Separable Gaussian smoothing, kernel truncated at 3σ and normalized to
/// unit sum.
pub fn gaussian_blur(v: &Volume, sigma_vox: f64) -> Result<Volume> {
    separable_filter(v, (0, 0, 0), sigma_vox)
}

/// Gaussian derivative along each axis; `orders` is (z, y, x) with entries in
/// {0, 1, 2}.
pub fn gaussian_derivatives(v: &Volume, sigma_vox: f64, orders: (u8, u8, u8)) -> Result<Volume> {
    separable_filter(v, orders, sigma_vox)
}

/// The six second Gaussian derivatives per voxel, each multiplied by σ²
/// (γ-normalized with γ = 2).
pub fn hessian_at_scale(v: &Volume, sigma_vox: f64) -> Result<SymMat3Field> {
    let s2 = (sigma_vox * sigma_vox) as f32;
    let scale = |mut vol: Volume| {
        for x in &mut vol.data {
            *x *= s2;
        }
        vol.data
    };
    Ok(SymMat3Field {
        dims: v.dims,
        xx: scale(gaussian_derivatives(v, sigma_vox, (0, 0, 2))?),
        yy: scale(gaussian_derivatives(v, sigma_vox, (0, 2, 0))?),
        zz: scale(gaussian_derivatives(v, sigma_vox, (2, 0, 0))?),
        xy: scale(gaussian_derivatives(v, sigma_vox, (0, 1, 1))?),
        xz: scale(gaussian_derivatives(v, sigma_vox, (1, 0, 1))?),
        yz: scale(gaussian_derivatives(v, sigma_vox, (1, 1, 0))?),
    })
}

/// Eigenvalues of a symmetric 3x3 matrix via the trigonometric closed form,
/// sorted by absolute value ascending.
pub fn eig3_symmetric(m: SymMat3) -> Result<[f64; 3]> {
    for v in [m.xx, m.yy, m.zz, m.xy, m.xz, m.yz] {
        if !v.is_finite() {
            return Err(Error::Degenerate("non-finite matrix entry".into()));
        }
    }
    let p1 = m.xy * m.xy + m.xz * m.xz + m.yz * m.yz;
    let mut eig = if p1 == 0.0 {
        [m.xx, m.yy, m.zz]
    } else {
        let q = m.trace() / 3.0;
        let p2 = (m.xx - q).powi(2) + (m.yy - q).powi(2) + (m.zz - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let b = SymMat3 {
            xx: (m.xx - q) / p,
            yy: (m.yy - q) / p,
            zz: (m.zz - q) / p,
            xy: m.xy / p,
            xz: m.xz / p,
            yz: m.yz / p,
        };
        let r = (b.det() / 2.0).clamp(-1.0, 1.0);
        let phi = r.acos() / 3.0;
        let e1 = q + 2.0 * p * phi.cos();
        let e3 = q + 2.0 * p * (phi + 2.0 * std::f64::consts::FRAC_PI_3 * 2.0).cos();
        let e2 = 3.0 * q - e1 - e3;
        [e1, e2, e3]
    };
    eig.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
    Ok(eig)
}

/// Outer product of Gaussian gradients at `sigma_grad`, componentwise
/// smoothed at `sigma_window`.
pub fn structure_tensor(v: &Volume, sigma_grad: f64, sigma_window: f64) -> Result<SymMat3Field> {
    let gx = gaussian_derivatives(v, sigma_grad, (0, 0, 1))?;
    let gy = gaussian_derivatives(v, sigma_grad, (0, 1, 0))?;
    let gz = gaussian_derivatives(v, sigma_grad, (1, 0, 0))?;
    let product = |a: &Volume, b: &Volume| -> Result<Vec<f32>> {
        let data = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(&p, &q)| p * q)
            .collect();
        let vol = Volume {
            dims: v.dims,
            voxel_size_um: v.voxel_size_um,
            data,
        };
        Ok(gaussian_blur(&vol, sigma_window)?.data)
    };
    Ok(SymMat3Field {
        dims: v.dims,
        xx: product(&gx, &gx)?,
        yy: product(&gy, &gy)?,
        zz: product(&gz, &gz)?,
        xy: product(&gx, &gy)?,
        xz: product(&gx, &gz)?,
        yz: product(&gy, &gz)?,
    })
}

/// Nine channels per scale in a fixed order: smoothing, gradient magnitude,
/// Laplacian of Gaussian, three Hessian eigenvalues, three structure tensor
/// eigenvalues. The structure tensor window is 2σ.
pub fn compute_feature_stack(v: &Volume, scales: &[f32]) -> Result<FeatureStack> {
    if scales.is_empty() {
        return Err(Error::InvalidConfig("empty feature scale list".into()));
    }
    let len = v.dims.len();
    let mut names = Vec::new();
    let mut data = Vec::with_capacity(scales.len() * 9 * len);
    for &scale in scales {
        let s = scale as f64;
        names.extend(
            ["smooth", "gradmag", "log", "hess_e1", "hess_e2", "hess_e3", "st_e1", "st_e2", "st_e3"]
                .iter()
                .map(|k| format!("{k}_s{scale}")),
        );

        data.extend_from_slice(&gaussian_blur(v, s)?.data);

        let gx = gaussian_derivatives(v, s, (0, 0, 1))?;
        let gy = gaussian_derivatives(v, s, (0, 1, 0))?;
        let gz = gaussian_derivatives(v, s, (1, 0, 0))?;
        data.extend(
            (0..len).map(|i| {
                (gx.data[i] * gx.data[i] + gy.data[i] * gy.data[i] + gz.data[i] * gz.data[i])
                    .sqrt()
            }),
        );

        let hess = hessian_at_scale(v, s)?;
        data.extend((0..len).map(|i| hess.xx[i] + hess.yy[i] + hess.zz[i]));

        let mut eigs = vec![[0.0f32; 3]; len];
        for (i, e) in eigs.iter_mut().enumerate() {
            let lam = eig3_symmetric(hess.at(i))?;
            *e = [lam[0] as f32, lam[1] as f32, lam[2] as f32];
        }
        for c in 0..3 {
            data.extend(eigs.iter().map(|e| e[c]));
        }

        let st = structure_tensor(v, s, 2.0 * s)?;
        for (i, e) in eigs.iter_mut().enumerate() {
            let lam = eig3_symmetric(st.at(i))?;
            *e = [lam[0] as f32, lam[1] as f32, lam[2] as f32];
        }
        for c in 0..3 {
            data.extend(eigs.iter().map(|e| e[c]));
        }
    }
    Ok(FeatureStack {
        dims: v.dims,
        names,
        data,
    })
}
