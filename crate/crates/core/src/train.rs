//! The training protocol: fiber-biased patch sampling, flip/rotate
//! augmentation, and the fixed-iteration Adam loop.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_cross_entropy, AdamState, Mode, Tensor, TensorShape};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::volgrid::{LabelVolume, PatchRef, Volume};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Patch extents (dz, dy, dx); dz = 1 trains a 2D model.
    pub patch_shape: (usize, usize, usize),
    pub augment: bool,
    /// Probability of centering a patch on a random fiber voxel instead of
    /// drawing its origin uniformly.
    pub fiber_biased_sampling_prob: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(patch_shape: (usize, usize, usize)) -> TrainConfig {
        TrainConfig {
            iterations: 8000,
            batch_size: 3,
            lr: 0.001,
            patch_shape,
            augment: true,
            fiber_biased_sampling_prob: 0.5,
            seed: 42,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "training needs iterations >= 1 and batch_size >= 1".into(),
            ));
        }
        let (dz, dy, dx) = self.patch_shape;
        if dz == 0 || dy == 0 || dx == 0 {
            return Err(Error::InvalidConfig("empty patch shape".into()));
        }
        if !(0.0..=1.0).contains(&self.fiber_biased_sampling_prob) {
            return Err(Error::InvalidConfig(
                "fiber_biased_sampling_prob must be in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

/// One experiment cell of the resolution x dimensionality x depth grid.
#[derive(Clone, Debug)]
pub struct Preset {
    pub name: &'static str,
    pub model: ModelConfig,
    pub patch_shape: (usize, usize, usize),
}

/// `mr2d-shallow`, `mr3d-deep`, `lr2d-shallow`, ... MR trains on 64x64 /
/// 32³ patches, LR on 32x32 / 16³.
pub fn preset(name: &str) -> Result<Preset> {
    let known: [(&'static str, u8, Variant, (usize, usize, usize)); 8] = [
        ("mr2d-shallow", 2, Variant::Shallow, (1, 64, 64)),
        ("mr2d-deep", 2, Variant::Deep, (1, 64, 64)),
        ("mr3d-shallow", 3, Variant::Shallow, (32, 32, 32)),
        ("mr3d-deep", 3, Variant::Deep, (32, 32, 32)),
        ("lr2d-shallow", 2, Variant::Shallow, (1, 32, 32)),
        ("lr2d-deep", 2, Variant::Deep, (1, 32, 32)),
        ("lr3d-shallow", 3, Variant::Shallow, (16, 16, 16)),
        ("lr3d-deep", 3, Variant::Deep, (16, 16, 16)),
    ];
    known
        .iter()
        .find(|(n, _, _, _)| *n == name)
        .map(|(n, dim, variant, patch)| Preset {
            name: n,
            model: ModelConfig::new(*dim, *variant),
            patch_shape: *patch,
        })
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown preset `{name}` (expected {{mr,lr}}{{2d,3d}}-{{shallow,deep}})"
            ))
        })
}

/// Draws co-located gray/label patches, optionally biased toward fiber
/// voxels so sparse-fiber volumes still see positives.
pub struct PatchSampler<'a> {
    gray: &'a Volume,
    labels: &'a LabelVolume,
    shape: (usize, usize, usize),
    bias: f64,
    fiber_voxels: Vec<u32>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(
        gray: &'a Volume,
        labels: &'a LabelVolume,
        shape: (usize, usize, usize),
        fiber_biased_sampling_prob: f64,
    ) -> Result<PatchSampler<'a>> {
        if gray.dims != labels.dims {
            return Err(Error::DimsMismatch {
                left: gray.dims,
                right: labels.dims,
            });
        }
        let dims = gray.dims;
        if shape.0 > dims.nz || shape.1 > dims.ny || shape.2 > dims.nx {
            return Err(Error::InvalidConfig(format!(
                "patch {shape:?} does not fit into volume {dims}"
            )));
        }
        let fiber_voxels = labels
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == 1).then_some(i as u32))
            .collect();
        Ok(PatchSampler {
            gray,
            labels,
            shape,
            bias: fiber_biased_sampling_prob,
            fiber_voxels,
        })
    }

    /// One patch reference; the RNG consumption order is fixed (bias coin,
    /// then either three origin draws or one fiber-voxel draw).
    pub fn sample_ref(&self, rng: &mut ChaCha8Rng) -> PatchRef {
        let dims = self.gray.dims;
        let (dz, dy, dx) = self.shape;
        let biased = self.bias > 0.0 && rng.random_bool(self.bias) && !self.fiber_voxels.is_empty();
        let origin = if biased {
            let v = self.fiber_voxels[rng.random_range(0..self.fiber_voxels.len())] as usize;
            let (z, y, x) = (
                v / (dims.ny * dims.nx),
                (v / dims.nx) % dims.ny,
                v % dims.nx,
            );
            (
                z.saturating_sub(dz / 2).min(dims.nz - dz),
                y.saturating_sub(dy / 2).min(dims.ny - dy),
                x.saturating_sub(dx / 2).min(dims.nx - dx),
            )
        } else {
            (
                rng.random_range(0..=dims.nz - dz),
                rng.random_range(0..=dims.ny - dy),
                rng.random_range(0..=dims.nx - dx),
            )
        };
        PatchRef::new(origin, self.shape)
    }

    /// Co-located gray and label patches.
    pub fn sample_pair(&self, rng: &mut ChaCha8Rng) -> (Volume, LabelVolume) {
        let r = self.sample_ref(rng);
        (
            self.gray.patch(r).expect("sampled ref fits"),
            self.labels.patch(r).expect("sampled ref fits"),
        )
    }
}

/// A lattice-preserving patch transform: per-axis flips followed by a
/// quarter-turn rotation in one coordinate plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flips: [bool; 3],
    /// Rotation plane as axis indices into (z, y, x); always (1, 2) for
    /// single-slice patches.
    pub plane: (usize, usize),
    pub quarter_turns: u8,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        flips: [false; 3],
        plane: (1, 2),
        quarter_turns: 0,
    };
}

/// Draw flips (z, y, x), then the rotation plane (uniform over the three
/// coordinate planes for cubic patches, the slice plane for 2D), then the
/// number of quarter turns.
pub fn sample_augmentation(
    shape: (usize, usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Augmentation> {
    let flips = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    let planes = [(0usize, 1usize), (0, 2), (1, 2)];
    let plane = if shape.0 == 1 {
        (1, 2)
    } else {
        planes[rng.random_range(0..3)]
    };
    let quarter_turns = rng.random_range(0..4u8);
    let extents = [shape.0, shape.1, shape.2];
    if quarter_turns % 2 == 1 && extents[plane.0] != extents[plane.1] {
        return Err(Error::InvalidConfig(format!(
            "rotation plane {plane:?} needs equal extents, patch is {shape:?}"
        )));
    }
    Ok(Augmentation {
        flips,
        plane,
        quarter_turns,
    })
}

fn transformed_index(
    shape: (usize, usize, usize),
    aug: Augmentation,
    out_pos: [usize; 3],
) -> usize {
    // Invert the rotation, then the flips, to find the source voxel.
    let extents = [shape.0, shape.1, shape.2];
    let (a, b) = aug.plane;
    let mut pos = out_pos;
    for _ in 0..aug.quarter_turns {
        // Inverse of out[a,b] = in[S-1-b, a] is in[a,b] = out[b, S-1-a].
        let (pa, pb) = (pos[a], pos[b]);
        pos[a] = pb;
        pos[b] = extents[a] - 1 - pa;
    }
    for k in 0..3 {
        if aug.flips[k] {
            pos[k] = extents[k] - 1 - pos[k];
        }
    }
    (pos[0] * shape.1 + pos[1]) * shape.2 + pos[2]
}

/// Apply the transform to a patch stored z-major, x-fastest.
pub fn apply_augmentation<T: Copy>(
    data: &[T],
    shape: (usize, usize, usize),
    aug: Augmentation,
) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for z in 0..shape.0 {
        for y in 0..shape.1 {
            for x in 0..shape.2 {
                out.push(data[transformed_index(shape, aug, [z, y, x])]);
            }
        }
    }
    out
}

/// Apply the inverse transform (rotation backed out first, then flips).
pub fn apply_inverse_augmentation<T: Copy>(
    data: &[T],
    shape: (usize, usize, usize),
    aug: Augmentation,
) -> Vec<T> {
    let unrotate = Augmentation {
        flips: [false; 3],
        plane: aug.plane,
        quarter_turns: (4 - aug.quarter_turns % 4) % 4,
    };
    let unflip = Augmentation {
        flips: aug.flips,
        plane: aug.plane,
        quarter_turns: 0,
    };
    apply_augmentation(&apply_augmentation(data, shape, unrotate), shape, unflip)
}

/// Per-iteration log entry plus the raw loss curve.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub losses: Vec<f64>,
    pub logged: Vec<LogEntry>,
}

#[derive(Clone, Copy, Debug)]
pub struct LogEntry {
    pub iteration: u64,
    pub loss: f64,
    pub secs: f64,
}

impl TrainRecord {
    /// Plain-text lines `iter=<n> loss=<f> secs=<f>`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.logged {
            out.push_str(&format!(
                "iter={} loss={:.6} secs={:.3}\n",
                e.iteration, e.loss, e.secs
            ));
        }
        out
    }
}

/// Fixed-iteration sample→augment→forward→loss→backward→Adam loop. The
/// gray volume must already be normalized; the model is trained in place.
pub fn train_loop(
    gray: &Volume,
    labels: &LabelVolume,
    model: &mut Model,
    cfg: &TrainConfig,
) -> Result<TrainRecord> {
    cfg.validate()?;
    let n = gray.data.len() as f64;
    let mean = gray.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = gray.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    if mean.abs() > 0.01 || (var.sqrt() - 1.0).abs() > 0.01 {
        return Err(Error::InvalidConfig(format!(
            "train_loop expects a normalized volume (mean {mean:.4}, std {:.4})",
            var.sqrt()
        )));
    }
    let (dz, dy, dx) = cfg.patch_shape;
    let want_dim: u8 = if dz == 1 { 2 } else { 3 };
    if model.cfg.dimensionality != want_dim {
        return Err(Error::InvalidConfig(format!(
            "{}D model cannot train on {:?} patches",
            model.cfg.dimensionality, cfg.patch_shape
        )));
    }
    if cfg.augment && dy != dx {
        return Err(Error::InvalidConfig(
            "rotation augmentation needs square patches".into(),
        ));
    }

    let sampler = PatchSampler::new(gray, labels, cfg.patch_shape, cfg.fiber_biased_sampling_prob)?;
    let sizes: Vec<usize> = model.params_mut().iter().map(|(_, p)| p.data.len()).collect();
    let mut adam = AdamState::new(&sizes, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);

    let patch_len = dz * dy * dx;
    let shape = TensorShape::new(cfg.batch_size, 1, dz, dy, dx);
    let started = Instant::now();
    let mut record = TrainRecord {
        losses: Vec::with_capacity(cfg.iterations as usize),
        logged: Vec::new(),
    };

    for it in 1..=cfg.iterations {
        let mut batch = vec![0.0f32; cfg.batch_size * patch_len];
        let mut batch_labels = vec![0u8; cfg.batch_size * patch_len];
        for b in 0..cfg.batch_size {
            let (gp, lp) = sampler.sample_pair(&mut rng);
            let (gdata, ldata) = if cfg.augment {
                let aug = sample_augmentation(cfg.patch_shape, &mut rng)?;
                (
                    apply_augmentation(&gp.data, cfg.patch_shape, aug),
                    apply_augmentation(&lp.data, cfg.patch_shape, aug),
                )
            } else {
                (gp.data, lp.data)
            };
            batch[b * patch_len..(b + 1) * patch_len].copy_from_slice(&gdata);
            batch_labels[b * patch_len..(b + 1) * patch_len].copy_from_slice(&ldata);
        }
        let x = Tensor::from_vec(shape, batch)?;

        model.zero_grads();
        let logits = model.forward(&x, Mode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&logits, &batch_labels)?;
        if !loss.is_finite() {
            return Err(Error::NanLoss {
                iteration: it,
                lr: cfg.lr,
            });
        }
        model.backward(&grad)?;
        adam.step(&mut model.params_mut())?;
        model.iterations += 1;

        record.losses.push(loss);
        if it % cfg.log_every == 0 || it == cfg.iterations || it == 1 {
            record.logged.push(LogEntry {
                iteration: it,
                loss,
                secs: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(record)
}
