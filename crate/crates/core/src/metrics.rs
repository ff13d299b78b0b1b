//! Dice evaluation, confusion tallies and error-map rendering.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volgrid::LabelVolume;

/// Voxel-level confusion tallies against a binary ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Dice score plus the tallies it was derived from.
#[derive(Clone, Debug)]
pub struct DiceReport {
    pub dice: f64,
    pub counts: ConfusionCounts,
    pub method: String,
    pub volume: String,
}

impl fmt::Display for DiceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "method={} volume={} dice={:.6} tp={} tn={} fp={} fn={}",
            self.method, self.volume, self.dice, self.counts.tp, self.counts.tn, self.counts.fp,
            self.counts.fn_
        )
    }
}

/// Exact voxel tallies; the intersection is the voxel-wise minimum, which for
/// binary masks is the AND of the two labels.
pub fn confusion(gt: &LabelVolume, pred: &LabelVolume) -> Result<ConfusionCounts> {
    if gt.dims != pred.dims {
        return Err(Error::DimsMismatch {
            left: gt.dims,
            right: pred.dims,
        });
    }
    let mut c = ConfusionCounts::default();
    for (&g, &p) in gt.data.iter().zip(&pred.data) {
        match (g, p) {
            (1, 1) => c.tp += 1,
            (0, 0) => c.tn += 1,
            (0, 1) => c.fp += 1,
            _ => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// `2·TP / (2·TP + FP + FN)`. Two empty masks match perfectly, so the 0/0
/// case is defined as 1.
pub fn dice(counts: ConfusionCounts) -> f64 {
    let denom = 2 * counts.tp + counts.fp + counts.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * counts.tp as f64 / denom as f64
    }
}

pub fn dice_report(
    gt: &LabelVolume,
    pred: &LabelVolume,
    method: &str,
    volume: &str,
) -> Result<DiceReport> {
    let counts = confusion(gt, pred)?;
    Ok(DiceReport {
        dice: dice(counts),
        counts,
        method: method.to_string(),
        volume: volume.to_string(),
    })
}

pub const TP_COLOR: [u8; 3] = [255, 255, 255];
pub const TN_COLOR: [u8; 3] = [0, 0, 0];
pub const FP_COLOR: [u8; 3] = [0, 200, 0];
pub const FN_COLOR: [u8; 3] = [255, 140, 0];

/// Render one z-slice of the confusion between `gt` and `pred` as a binary
/// portable pixmap (P6): TP white, TN black, FP green, FN orange.
pub fn render_error_map(
    gt: &LabelVolume,
    pred: &LabelVolume,
    z: usize,
    path: &Path,
) -> Result<()> {
    if gt.dims != pred.dims {
        return Err(Error::DimsMismatch {
            left: gt.dims,
            right: pred.dims,
        });
    }
    if z >= gt.dims.nz {
        return Err(Error::OutOfRange {
            what: format!("error-map slice z={} of {}", z, gt.dims),
        });
    }
    let (ny, nx) = (gt.dims.ny, gt.dims.nx);
    let mut pixels = Vec::with_capacity(ny * nx * 3);
    for y in 0..ny {
        for x in 0..nx {
            let color = match (gt.at(z, y, x), pred.at(z, y, x)) {
                (1, 1) => TP_COLOR,
                (0, 0) => TN_COLOR,
                (0, 1) => FP_COLOR,
                _ => FN_COLOR,
            };
            pixels.extend_from_slice(&color);
        }
    }
    let mut w = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    write!(w, "P6\n{nx} {ny}\n255\n")
        .and_then(|_| w.write_all(&pixels))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volgrid::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: Dims, data: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, 1.0, data).unwrap()
    }

    fn random_mask(dims: Dims, seed: u64) -> LabelVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..dims.len()).map(|_| rng.random_range(0..=1u8)).collect();
        mask(dims, data)
    }

    #[test]
    fn identical_masks_have_no_errors() {
        let m = random_mask(Dims::new(4, 4, 4), 1);
        let c = confusion(&m, &m).unwrap();
        assert_eq!(c.fp, 0);
        assert_eq!(c.fn_, 0);
        assert_eq!(dice(c), 1.0);
    }

    #[test]
    fn complement_masks_have_no_agreement() {
        let m = random_mask(Dims::new(4, 4, 4), 2);
        let inv = mask(m.dims, m.data.iter().map(|&v| 1 - v).collect());
        let c = confusion(&m, &inv).unwrap();
        assert_eq!(c.tp, 0);
        assert_eq!(c.tn, 0);
        assert_eq!(dice(c), 0.0);
    }

    #[test]
    fn confusion_matches_triple_loop_oracle() {
        let dims = Dims::new(8, 8, 8);
        let gt = random_mask(dims, 3);
        let pred = random_mask(dims, 4);
        let c = confusion(&gt, &pred).unwrap();

        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    match (gt.at(z, y, x), pred.at(z, y, x)) {
                        (1, 1) => tp += 1,
                        (0, 0) => tn += 1,
                        (0, 1) => fp += 1,
                        _ => fn_ += 1,
                    }
                }
            }
        }
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (tp, tn, fp, fn_));
        assert_eq!(c.total(), dims.len() as u64);
    }

    #[test]
    fn dice_formula_arithmetic() {
        let c = ConfusionCounts { tp: 2, tn: 0, fp: 2, fn_: 0 };
        assert!((dice(c) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_empty_dice_is_one() {
        let z = mask(Dims::new(2, 2, 2), vec![0; 8]);
        assert_eq!(dice(confusion(&z, &z).unwrap()), 1.0);
    }

    #[test]
    fn dice_is_symmetric_in_arguments() {
        let a = random_mask(Dims::new(6, 6, 6), 5);
        let b = random_mask(Dims::new(6, 6, 6), 6);
        let d_ab = dice(confusion(&a, &b).unwrap());
        let d_ba = dice(confusion(&b, &a).unwrap());
        assert_eq!(d_ab, d_ba);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let a = random_mask(Dims::new(2, 2, 2), 7);
        let b = random_mask(Dims::new(2, 2, 3), 8);
        assert!(confusion(&a, &b).is_err());
    }

    #[test]
    fn report_line_format() {
        let gt = mask(Dims::new(1, 1, 4), vec![1, 1, 0, 0]);
        let pred = mask(Dims::new(1, 1, 4), vec![1, 0, 1, 0]);
        let r = dice_report(&gt, &pred, "otsu", "lr1").unwrap();
        assert_eq!(
            r.to_string(),
            "method=otsu volume=lr1 dice=0.500000 tp=1 tn=1 fp=1 fn=1"
        );
    }

    #[test]
    fn error_map_pixels_match_tallies() {
        let dims = Dims::new(3, 5, 7);
        let gt = random_mask(dims, 9);
        let pred = random_mask(dims, 10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.ppm");
        render_error_map(&gt, &pred, 1, &path).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes
            .windows(4)
            .position(|w| w == b"255\n")
            .unwrap()
            + 4;
        let pixels = &bytes[header_end..];
        assert_eq!(pixels.len(), 5 * 7 * 3);

        let mut count = |color: [u8; 3]| {
            pixels
                .chunks_exact(3)
                .filter(|p| p == &color)
                .count() as u64
        };
        let (white, black, green, orange) = (
            count(TP_COLOR),
            count(TN_COLOR),
            count(FP_COLOR),
            count(FN_COLOR),
        );

        let slice_gt = gt.patch(crate::volgrid::PatchRef::new((1, 0, 0), (1, 5, 7))).unwrap();
        let slice_pred = pred.patch(crate::volgrid::PatchRef::new((1, 0, 0), (1, 5, 7))).unwrap();
        let c = confusion(&slice_gt, &slice_pred).unwrap();
        assert_eq!((white, black, green, orange), (c.tp, c.tn, c.fp, c.fn_));
    }

    #[test]
    fn all_false_positive_map_is_green() {
        let dims = Dims::new(1, 2, 2);
        let gt = mask(dims, vec![0; 4]);
        let pred = mask(dims, vec![1; 4]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ppm");
        render_error_map(&gt, &pred, 0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let pixels = &bytes[bytes.windows(4).position(|w| w == b"255\n").unwrap() + 4..];
        assert!(pixels.chunks_exact(3).all(|p| p == FP_COLOR));
    }
}
