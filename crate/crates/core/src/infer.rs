//! Whole-volume prediction: slice-wise for 2D models, overlapping patches
//! with mean probability blending for 3D models.

use crate::autodiff::{Mode, Tensor, TensorShape};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::volgrid::{normalize, Dims, LabelVolume, PatchRef, Volume};

/// Softmax fiber probability per voxel of a two-channel logit tensor with
/// batch size 1.
fn fiber_probability(logits: &Tensor<f32>) -> Vec<f32> {
    let sp = logits.shape.spatial();
    debug_assert_eq!(logits.shape.n, 1);
    debug_assert_eq!(logits.shape.c, 2);
    let (bg, fg) = (&logits.data[..sp], &logits.data[sp..]);
    bg.iter()
        .zip(fg)
        .map(|(&l0, &l1)| {
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            e1 / (e0 + e1)
        })
        .collect()
}

fn seg_from_prob(prob: &Volume) -> LabelVolume {
    LabelVolume {
        dims: prob.dims,
        voxel_size_um: prob.voxel_size_um,
        data: prob.data.iter().map(|&p| u8::from(p >= 0.5)).collect(),
    }
}

/// Slice-by-slice eval-mode forward over the z axis.
pub fn predict_2d(model: &mut Model, v: &Volume) -> Result<(Volume, LabelVolume)> {
    if model.cfg.dimensionality != 2 {
        return Err(Error::InvalidConfig(
            "predict_2d needs a 2D model".into(),
        ));
    }
    let dims = v.dims;
    let mut prob = vec![0.0f32; dims.len()];
    let plane = dims.ny * dims.nx;
    for z in 0..dims.nz {
        let slice = v.slice2d(z)?;
        let x = Tensor::from_vec(TensorShape::new(1, 1, 1, dims.ny, dims.nx), slice.data)?;
        let logits = model.forward(&x, Mode::Eval)?;
        prob[z * plane..(z + 1) * plane].copy_from_slice(&fiber_probability(&logits));
    }
    let prob = Volume::new(dims, v.voxel_size_um, prob)?;
    let seg = seg_from_prob(&prob);
    Ok((prob, seg))
}

/// Patch origins along one axis: multiples of the stride plus a final
/// origin clamped so the last patch touches the boundary.
fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0usize;
    loop {
        if at + patch >= dim {
            out.push(dim - patch);
            break;
        }
        out.push(at);
        at += stride;
    }
    out
}

/// How many covering patches each voxel receives under the tiling rule.
pub fn coverage_counts(
    dims: Dims,
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Vec<u32> {
    let mut counts = vec![0u32; dims.len()];
    for &z0 in &axis_origins(dims.nz, patch.0, stride.0) {
        for &y0 in &axis_origins(dims.ny, patch.1, stride.1) {
            for &x0 in &axis_origins(dims.nx, patch.2, stride.2) {
                for z in z0..z0 + patch.0 {
                    for y in y0..y0 + patch.1 {
                        let row = dims.index(z, y, x0);
                        for c in &mut counts[row..row + patch.2] {
                            *c += 1;
                        }
                    }
                }
            }
        }
    }
    counts
}

/// Overlapping-patch prediction: per voxel the arithmetic mean of the
/// softmax fiber probability over all covering patches.
pub fn predict_3d(
    model: &mut Model,
    v: &Volume,
    patch: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Result<(Volume, LabelVolume)> {
    if model.cfg.dimensionality != 3 {
        return Err(Error::InvalidConfig("predict_3d needs a 3D model".into()));
    }
    let dims = v.dims;
    if patch.0 == 0 || patch.1 == 0 || patch.2 == 0 || stride.0 == 0 || stride.1 == 0 || stride.2 == 0
    {
        return Err(Error::InvalidConfig("patch and stride must be positive".into()));
    }
    if patch.0 > dims.nz || patch.1 > dims.ny || patch.2 > dims.nx {
        return Err(Error::InvalidConfig(format!(
            "patch {patch:?} exceeds volume {dims}"
        )));
    }
    if stride.0 > patch.0 || stride.1 > patch.1 || stride.2 > patch.2 {
        return Err(Error::InvalidConfig(
            "stride must not exceed the patch extent".into(),
        ));
    }

    let mut sum = vec![0.0f32; dims.len()];
    let mut count = vec![0u32; dims.len()];
    let shape = TensorShape::new(1, 1, patch.0, patch.1, patch.2);
    for &z0 in &axis_origins(dims.nz, patch.0, stride.0) {
        for &y0 in &axis_origins(dims.ny, patch.1, stride.1) {
            for &x0 in &axis_origins(dims.nx, patch.2, stride.2) {
                let block = v.patch(PatchRef::new((z0, y0, x0), patch))?;
                let x = Tensor::from_vec(shape, block.data)?;
                let logits = model.forward(&x, Mode::Eval)?;
                let p = fiber_probability(&logits);
                let mut i = 0usize;
                for z in z0..z0 + patch.0 {
                    for y in y0..y0 + patch.1 {
                        let row = dims.index(z, y, x0);
                        for off in 0..patch.2 {
                            sum[row + off] += p[i];
                            count[row + off] += 1;
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    for (s, &c) in sum.iter_mut().zip(&count) {
        *s /= c as f32;
    }
    let prob = Volume::new(dims, v.voxel_size_um, sum)?;
    let seg = seg_from_prob(&prob);
    Ok((prob, seg))
}

/// Default inference patch for a 3D model: the training patch of the pitch
/// regime (32³ below 6 µm, 16³ above), clamped to the volume.
pub fn default_patch_for(v: &Volume) -> (usize, usize, usize) {
    let side = if v.voxel_size_um < 6.0 { 32 } else { 16 };
    (
        side.min(v.dims.nz),
        side.min(v.dims.ny),
        side.min(v.dims.nx),
    )
}

/// The canonical entry point: normalize, then dispatch on the model's
/// dimensionality. 3D models blend overlapping patches at half-patch
/// stride unless told otherwise.
pub fn normalize_then_predict(
    model: &mut Model,
    raw: &Volume,
    patch: Option<(usize, usize, usize)>,
    stride: Option<(usize, usize, usize)>,
) -> Result<(Volume, LabelVolume)> {
    let v = normalize(raw)?;
    if model.cfg.dimensionality == 2 {
        predict_2d(model, &v)
    } else {
        let patch = patch.unwrap_or_else(|| default_patch_for(&v));
        let stride = stride.unwrap_or((
            (patch.0 / 2).max(1),
            (patch.1 / 2).max(1),
            (patch.2 / 2).max(1),
        ));
        predict_3d(model, &v, patch, stride)
    }
}
