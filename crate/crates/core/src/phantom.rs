//! Synthetic SFRP CT scans with ground-truth labels.
//!
//! A scene of straight, non-interpenetrating fiber capsules is sampled in
//! continuous micrometer space, rasterized into a clean partial-volume gray
//! image plus a binary label volume, and then degraded by a Gaussian PSF and
//! additive noise. Labels always come from the clean render: ground truth
//! reflects geometry, not degradation. One scene can be rendered at several
//! pitches, which is how matched MR/LR pairs are produced.

use rayon::prelude::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::filters::gaussian_blur;
use crate::volgrid::{Dims, LabelVolume, Volume};

/// RNG stream ids, so scene geometry and voxel noise never share a sequence.
const STREAM_SCENE: u64 = 0;
const STREAM_NOISE: u64 = 1;

/// One straight fiber: a line segment dilated by a radius, endpoints in
/// micrometer coordinates (x, y, z).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberCapsule {
    pub p0: [f64; 3],
    pub p1: [f64; 3],
    pub radius_um: f64,
}

impl FiberCapsule {
    /// Full fiber length including the hemispherical caps.
    pub fn length_um(&self) -> f64 {
        dist(self.p0, self.p1) + 2.0 * self.radius_um
    }

    /// Capsule volume: cylinder plus two half-ball caps.
    pub fn volume_um3(&self) -> f64 {
        let seg = dist(self.p0, self.p1);
        let r = self.radius_um;
        std::f64::consts::PI * r * r * seg + 4.0 / 3.0 * std::f64::consts::PI * r * r * r
    }

    pub fn axis(&self) -> [f64; 3] {
        let d = sub(self.p1, self.p0);
        let n = dist(self.p0, self.p1).max(f64::MIN_POSITIVE);
        [d[0] / n, d[1] / n, d[2] / n]
    }
}

/// Generation parameters. Orientations are always uniform on the sphere and
/// fibers are straight; everything else is configurable.
#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub voxel_size_um: f32,
    pub fiber_diameter_um: f64,
    pub target_volume_fraction: f64,
    /// Full fiber length range (min, max) in micrometers, caps included.
    pub length_range_um: (f64, f64),
    pub gray_matrix: f32,
    pub gray_fiber: f32,
    pub psf_sigma_um: f64,
    pub noise_sigma: f64,
    /// Odd subsample factor per axis for partial-volume occupancy.
    pub supersample: u32,
    pub seed: u64,
}

impl PhantomSpec {
    /// Defaults sized for the 10 wt% glass / PBT material: 13 µm fibers at
    /// 5.4 vol%, gray levels and degradation chosen so thresholding nearly
    /// works at 3.9 µm pitch and fails at 8.3 µm.
    pub fn new(dims: Dims, voxel_size_um: f32) -> PhantomSpec {
        PhantomSpec {
            dims,
            voxel_size_um,
            fiber_diameter_um: 13.0,
            target_volume_fraction: 0.054,
            length_range_um: (150.0, 400.0),
            gray_matrix: 0.2,
            gray_fiber: 0.8,
            psf_sigma_um: 3.0,
            noise_sigma: 0.05,
            supersample: 3,
            seed: 42,
        }
    }

    pub fn radius_um(&self) -> f64 {
        self.fiber_diameter_um / 2.0
    }

    /// Physical extent (x, y, z) in micrometers.
    pub fn extent_um(&self) -> [f64; 3] {
        let p = self.voxel_size_um as f64;
        [
            self.dims.nx as f64 * p,
            self.dims.ny as f64 * p,
            self.dims.nz as f64 * p,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.nz == 0 || self.dims.ny == 0 || self.dims.nx == 0 {
            return Err(Error::InvalidConfig("empty phantom dims".into()));
        }
        if !(self.voxel_size_um > 0.0) {
            return Err(Error::InvalidConfig("voxel pitch must be positive".into()));
        }
        if !(self.target_volume_fraction > 0.0 && self.target_volume_fraction < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "target_volume_fraction must be in (0, 0.5), got {}",
                self.target_volume_fraction
            )));
        }
        if !(self.gray_fiber > self.gray_matrix) {
            return Err(Error::InvalidConfig("gray_fiber must exceed gray_matrix".into()));
        }
        if self.supersample % 2 == 0 || self.supersample == 0 || self.supersample > 5 {
            return Err(Error::InvalidConfig(format!(
                "supersample must be 1, 3 or 5, got {}",
                self.supersample
            )));
        }
        if !(self.length_range_um.0 > self.fiber_diameter_um) {
            return Err(Error::InvalidConfig(
                "minimum fiber length must exceed the diameter".into(),
            ));
        }
        if self.length_range_um.1 < self.length_range_um.0 {
            return Err(Error::InvalidConfig("empty fiber length range".into()));
        }
        if self.psf_sigma_um < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("degradation parameters must be >= 0".into()));
        }
        Ok(())
    }

    /// Parse the flat key=value spec file format. Unknown keys are errors;
    /// missing keys keep their defaults. `dims` and `voxel_size_um` are
    /// required.
    pub fn parse(text: &str) -> Result<(PhantomSpec, PairHints)> {
        let mut dims = None;
        let mut pitch = None;
        let mut hints = PairHints::default();
        let mut pending: Vec<(String, String)> = Vec::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad spec line `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "dims" => dims = Some(parse_dims(value)?),
                "voxel_size_um" => pitch = Some(parse_num::<f32>(key, value)?),
                "lr_voxel_size_um" => {
                    hints.lr_voxel_size_um = Some(parse_num::<f32>(key, value)?)
                }
                "lr_dims" => hints.lr_dims = Some(parse_dims(value)?),
                _ => pending.push((key.to_string(), value.to_string())),
            }
        }
        let dims = dims.ok_or_else(|| Error::InvalidConfig("spec file needs dims=".into()))?;
        let pitch =
            pitch.ok_or_else(|| Error::InvalidConfig("spec file needs voxel_size_um=".into()))?;
        let mut spec = PhantomSpec::new(dims, pitch);
        for (key, value) in pending {
            let v = value.as_str();
            match key.as_str() {
                "fiber_diameter_um" => spec.fiber_diameter_um = parse_num(&key, v)?,
                "target_volume_fraction" => spec.target_volume_fraction = parse_num(&key, v)?,
                "length_range_um" => {
                    let (lo, hi) = v
                        .split_once(',')
                        .ok_or_else(|| Error::InvalidConfig("length_range_um needs min,max".into()))?;
                    spec.length_range_um =
                        (parse_num(&key, lo.trim())?, parse_num(&key, hi.trim())?);
                }
                "gray_matrix" => spec.gray_matrix = parse_num(&key, v)?,
                "gray_fiber" => spec.gray_fiber = parse_num(&key, v)?,
                "psf_sigma_um" => spec.psf_sigma_um = parse_num(&key, v)?,
                "noise_sigma" => spec.noise_sigma = parse_num(&key, v)?,
                "supersample" => spec.supersample = parse_num(&key, v)?,
                "seed" => spec.seed = parse_num(&key, v)?,
                other => {
                    return Err(Error::InvalidConfig(format!("unknown spec key `{other}`")))
                }
            }
        }
        spec.validate()?;
        Ok((spec, hints))
    }

    /// Derive the LR counterpart of this spec: same physical extent and
    /// degradation, pitch and dims swapped for the low-resolution grid.
    pub fn lr_counterpart(&self, hints: &PairHints) -> PhantomSpec {
        let lr_pitch = hints.lr_voxel_size_um.unwrap_or(8.3);
        let dims = hints.lr_dims.unwrap_or_else(|| {
            let p = self.voxel_size_um as f64 / lr_pitch as f64;
            Dims::new(
                ((self.dims.nz as f64 * p).round() as usize).max(1),
                ((self.dims.ny as f64 * p).round() as usize).max(1),
                ((self.dims.nx as f64 * p).round() as usize).max(1),
            )
        });
        PhantomSpec {
            dims,
            voxel_size_um: lr_pitch,
            ..self.clone()
        }
    }
}

/// Optional spec-file keys describing the LR half of a matched pair.
#[derive(Clone, Debug, Default)]
pub struct PairHints {
    pub lr_voxel_size_um: Option<f32>,
    pub lr_dims: Option<Dims>,
}

fn parse_dims(value: &str) -> Result<Dims> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig(format!("bad dims `{value}`")))?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!("dims needs nz,ny,nx, got `{value}`")));
    }
    Ok(Dims::new(parts[0], parts[1], parts[2]))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for {key}")))
}

/// A sampled set of non-interpenetrating capsules plus the box (in µm) they
/// were accounted against.
#[derive(Clone, Debug)]
pub struct FiberScene {
    pub capsules: Vec<FiberCapsule>,
    pub extent_um: [f64; 3],
    /// Analytic capsule volume inside the box, as a fraction of box volume.
    pub inside_fraction: f64,
}

/// Draw a direction uniformly distributed on the full sphere.
fn uniform_direction(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// Rejection-sample capsules until the analytic inside-the-box volume sum
/// reaches the target fraction. Centers are uniform over the box padded by
/// the maximum fiber length; candidates that interpenetrate an accepted
/// capsule are rejected (at most 200 consecutive rejections per fiber), and
/// candidates that do not reach into the box at all are discarded without
/// charging the budget.
pub fn sample_scene(spec: &PhantomSpec) -> Result<FiberScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_SCENE);

    let extent = spec.extent_um();
    let box_volume = extent[0] * extent[1] * extent[2];
    let target_inside = spec.target_volume_fraction * box_volume;
    let pad = spec.length_range_um.1;
    let radius = spec.radius_um();

    let mut capsules: Vec<FiberCapsule> = Vec::new();
    let mut inside_sum = 0.0f64;
    while inside_sum < target_inside {
        let mut attempts = 0u32;
        loop {
            let length = rng.random_range(spec.length_range_um.0..=spec.length_range_um.1);
            let dir = uniform_direction(&mut rng);
            let center = [
                rng.random_range(-pad..extent[0] + pad),
                rng.random_range(-pad..extent[1] + pad),
                rng.random_range(-pad..extent[2] + pad),
            ];
            let half_seg = (length - 2.0 * radius) / 2.0;
            let candidate = FiberCapsule {
                p0: [
                    center[0] - dir[0] * half_seg,
                    center[1] - dir[1] * half_seg,
                    center[2] - dir[2] * half_seg,
                ],
                p1: [
                    center[0] + dir[0] * half_seg,
                    center[1] + dir[1] * half_seg,
                    center[2] + dir[2] * half_seg,
                ],
                radius_um: radius,
            };
            let collides = capsules.iter().any(|c| {
                let min_gap = c.radius_um + candidate.radius_um;
                seg_seg_dist2(c.p0, c.p1, candidate.p0, candidate.p1) < min_gap * min_gap
            });
            if collides {
                attempts += 1;
                if attempts >= 200 {
                    return Err(Error::PlacementBudget {
                        achieved: inside_sum / box_volume,
                        target: spec.target_volume_fraction,
                    });
                }
                continue;
            }
            let inside = capsule_volume_inside(&candidate, extent);
            if inside <= 0.0 {
                continue;
            }
            capsules.push(candidate);
            inside_sum += inside;
            break;
        }
    }
    Ok(FiberScene {
        capsules,
        extent_um: extent,
        inside_fraction: inside_sum / box_volume,
    })
}

/// Approximate capsule ∩ box volume: cylinder along the clipped segment plus
/// a half-ball per endpoint that lies inside the box. Side slivers at the
/// walls are ignored; the bias is far below the ±0.5 pp fraction budget.
fn capsule_volume_inside(cap: &FiberCapsule, extent: [f64; 3]) -> f64 {
    let d = sub(cap.p1, cap.p0);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for a in 0..3 {
        if d[a].abs() < 1e-12 {
            if cap.p0[a] < 0.0 || cap.p0[a] > extent[a] {
                t0 = 1.0;
                t1 = 0.0;
                break;
            }
            continue;
        }
        let (mut lo, mut hi) = ((0.0 - cap.p0[a]) / d[a], (extent[a] - cap.p0[a]) / d[a]);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    let seg_len = dist(cap.p0, cap.p1);
    let inside_len = seg_len * (t1 - t0).max(0.0);
    let r = cap.radius_um;
    let mut vol = std::f64::consts::PI * r * r * inside_len;
    for p in [cap.p0, cap.p1] {
        let inside = (0..3).all(|a| p[a] >= 0.0 && p[a] <= extent[a]);
        if inside {
            vol += 2.0 / 3.0 * std::f64::consts::PI * r * r * r;
        }
    }
    vol
}

/// Render occupancy into a clean gray volume and the label volume.
///
/// Per voxel the occupancy is the fraction of supersample³ points within any
/// capsule; gray interpolates matrix→fiber linearly and the label is 1 iff
/// occupancy ≥ ½.
pub fn rasterize(scene: &FiberScene, spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    spec.validate()?;
    let dims = spec.dims;
    let pitch = spec.voxel_size_um as f64;
    let s = spec.supersample as usize;
    let s3 = s * s * s;
    let full: u128 = if s3 == 128 { u128::MAX } else { (1u128 << s3) - 1 };

    // Subsample offsets relative to the voxel center, in µm.
    let mut offsets = Vec::with_capacity(s3);
    for iz in 0..s {
        for iy in 0..s {
            for ix in 0..s {
                let f = |i: usize| ((i as f64 + 0.5) / s as f64 - 0.5) * pitch;
                offsets.push([f(ix), f(iy), f(iz)]);
            }
        }
    }
    // Farthest subsample point from the voxel center.
    let sub_reach = (3.0f64).sqrt() / 2.0 * pitch * (s as f64 - 1.0) / s as f64;

    // Voxel-index bounding boxes of the capsules that touch this grid.
    let margin = sub_reach + 1e-9;
    let clamp_lo = |v: f64| (v.floor().max(0.0)) as usize;
    let boxes: Vec<(&FiberCapsule, [usize; 6])> = scene
        .capsules
        .iter()
        .filter_map(|cap| {
            let r = cap.radius_um + margin;
            let lo = [
                (cap.p0[0].min(cap.p1[0]) - r) / pitch,
                (cap.p0[1].min(cap.p1[1]) - r) / pitch,
                (cap.p0[2].min(cap.p1[2]) - r) / pitch,
            ];
            let hi = [
                (cap.p0[0].max(cap.p1[0]) + r) / pitch,
                (cap.p0[1].max(cap.p1[1]) + r) / pitch,
                (cap.p0[2].max(cap.p1[2]) + r) / pitch,
            ];
            let (nx, ny, nz) = (dims.nx as f64, dims.ny as f64, dims.nz as f64);
            if hi[0] < 0.0 || hi[1] < 0.0 || hi[2] < 0.0 || lo[0] > nx || lo[1] > ny || lo[2] > nz
            {
                return None;
            }
            Some((
                cap,
                [
                    clamp_lo(lo[0]),
                    (hi[0].ceil() as usize).min(dims.nx),
                    clamp_lo(lo[1]),
                    (hi[1].ceil() as usize).min(dims.ny),
                    clamp_lo(lo[2]),
                    (hi[2].ceil() as usize).min(dims.nz),
                ],
            ))
        })
        .collect();

    let mut mask = vec![0u128; dims.len()];
    let plane = dims.ny * dims.nx;
    mask.par_chunks_mut(plane).enumerate().for_each(|(z, slab)| {
        let cz = (z as f64 + 0.5) * pitch;
        for (cap, b) in &boxes {
            if z < b[4] || z >= b[5] {
                continue;
            }
            let r = cap.radius_um;
            let outer = (r + sub_reach) * (r + sub_reach);
            let inner = if r > sub_reach {
                (r - sub_reach) * (r - sub_reach)
            } else {
                -1.0
            };
            for y in b[2]..b[3] {
                let cy = (y as f64 + 0.5) * pitch;
                let row = y * dims.nx;
                for x in b[0]..b[1] {
                    let m = &mut slab[row + x];
                    if *m == full {
                        continue;
                    }
                    let center = [(x as f64 + 0.5) * pitch, cy, cz];
                    let d2 = point_seg_dist2(center, cap.p0, cap.p1);
                    if d2 >= outer {
                        continue;
                    }
                    if d2 <= inner {
                        *m = full;
                        continue;
                    }
                    let r2 = r * r;
                    for (i, off) in offsets.iter().enumerate() {
                        if *m & (1u128 << i) != 0 {
                            continue;
                        }
                        let p = [center[0] + off[0], center[1] + off[1], center[2] + off[2]];
                        if point_seg_dist2(p, cap.p0, cap.p1) <= r2 {
                            *m |= 1u128 << i;
                        }
                    }
                }
            }
        }
    });

    let span = spec.gray_fiber - spec.gray_matrix;
    let inv_s3 = 1.0 / s3 as f32;
    let mut gray = Vec::with_capacity(dims.len());
    let mut label = Vec::with_capacity(dims.len());
    for &m in &mask {
        let hits = m.count_ones();
        gray.push(spec.gray_matrix + span * (hits as f32 * inv_s3));
        label.push(u8::from(2 * hits as usize >= s3 + 1));
    }
    Ok((
        Volume::new(dims, spec.voxel_size_um, gray)?,
        LabelVolume::new(dims, spec.voxel_size_um, label)?,
    ))
}

/// Gaussian PSF blur (σ in µm, converted to voxels) followed by i.i.d.
/// additive Gaussian noise drawn from the spec's seed.
pub fn degrade(v: &Volume, spec: &PhantomSpec) -> Result<Volume> {
    if spec.psf_sigma_um < 0.0 || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidConfig("degradation parameters must be >= 0".into()));
    }
    let mut out = if spec.psf_sigma_um > 0.0 {
        gaussian_blur(v, spec.psf_sigma_um / spec.voxel_size_um as f64)?
    } else {
        v.clone()
    };
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(STREAM_NOISE);
        let normal = Normal::new(0.0, spec.noise_sigma).expect("valid sigma");
        for x in &mut out.data {
            *x += normal.sample(&mut rng) as f32;
        }
    }
    Ok(out)
}

/// Scene sampling plus render plus degradation in one call.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(Volume, LabelVolume)> {
    let scene = sample_scene(spec)?;
    let (clean, label) = rasterize(&scene, spec)?;
    let gray = degrade(&clean, spec)?;
    Ok((gray, label))
}

/// Render one scene at two pitches (MR and LR). The specs must describe the
/// same physical extent to within one LR voxel per axis; the scene is sampled
/// from the MR spec with `seed` overriding both seeds.
pub fn generate_pair(
    spec_mr: &PhantomSpec,
    spec_lr: &PhantomSpec,
    seed: u64,
) -> Result<((Volume, LabelVolume), (Volume, LabelVolume))> {
    spec_mr.validate()?;
    spec_lr.validate()?;
    let (ext_mr, ext_lr) = (spec_mr.extent_um(), spec_lr.extent_um());
    for a in 0..3 {
        if (ext_mr[a] - ext_lr[a]).abs() >= spec_lr.voxel_size_um as f64 {
            return Err(Error::InvalidConfig(format!(
                "extent mismatch on axis {a}: {:.1} µm vs {:.1} µm exceeds one LR voxel",
                ext_mr[a], ext_lr[a]
            )));
        }
    }
    let mut mr = spec_mr.clone();
    mr.seed = seed;
    let mut lr = spec_lr.clone();
    lr.seed = seed;

    let scene = sample_scene(&mr)?;
    let (clean_mr, label_mr) = rasterize(&scene, &mr)?;
    let gray_mr = degrade(&clean_mr, &mr)?;
    let (clean_lr, label_lr) = rasterize(&scene, &lr)?;
    let gray_lr = degrade(&clean_lr, &lr)?;
    Ok(((gray_mr, label_mr), (gray_lr, label_lr)))
}

#[inline]
fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    dot(sub(a, b), sub(a, b)).sqrt()
}

/// Squared distance from a point to a segment.
fn point_seg_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = sub(b, a);
    let ap = sub(p, a);
    let denom = dot(ab, ab);
    let t = if denom > 0.0 {
        (dot(ap, ab) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let q = [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]];
    dot(sub(p, q), sub(p, q))
}

/// Squared minimum distance between two segments (clamped closest-point
/// iteration, the standard robust formulation).
fn seg_seg_dist2(p1: [f64; 3], q1: [f64; 3], p2: [f64; 3], q2: [f64; 3]) -> f64 {
    let d1 = sub(q1, p1);
    let d2 = sub(q2, p2);
    let r = sub(p1, p2);
    let a = dot(d1, d1);
    let e = dot(d2, d2);
    let f = dot(d2, r);

    let (mut s, mut t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return dot(r, r);
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = dot(d1, r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = dot(d1, d2);
            let denom = a * e - b * b;
            s = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
        }
    }
    let c1 = [p1[0] + d1[0] * s, p1[1] + d1[1] * s, p1[2] + d1[2] * s];
    let c2 = [p2[0] + d2[0] * t, p2[1] + d2[1] * t, p2[2] + d2[2] * t];
    dot(sub(c1, c2), sub(c1, c2))
}
