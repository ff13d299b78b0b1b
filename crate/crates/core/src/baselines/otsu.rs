//! Histogram thresholding: Otsu's between-class-variance criterion and the
//! ground-truth best-Dice sweep over the same candidate set.
//!
//! Both methods binarize as `v >= threshold → fiber` and draw thresholds
//! from the same equal-width bin edges over `[min, max]`, so the oracle's
//! sweep always contains Otsu's cut. Bin membership is defined through the
//! comparison itself (`bin(v) >= i  ⇔  v >= edge[i]`), which keeps the
//! histogram arithmetic and a later scalar thresholding bit-consistent.

use crate::error::{Error, Result};
use crate::metrics::{dice, ConfusionCounts};
use crate::volgrid::{LabelVolume, Volume};

/// The candidate thresholds for a `[min, max]` range: `min + i·width` for
/// i in `0..bins`.
pub fn threshold_candidates(min: f32, max: f32, bins: usize) -> Vec<f32> {
    let (lo, hi) = (min as f64, max as f64);
    let width = (hi - lo) / bins as f64;
    (0..bins).map(|i| (lo + i as f64 * width) as f32).collect()
}

/// Comparison-consistent binning: the largest bin index i with
/// `v >= edges[i]`.
#[inline]
fn bin_of(v: f32, edges: &[f32]) -> usize {
    let bins = edges.len();
    let lo = edges[0];
    let width = (edges[bins - 1] - lo) / (bins - 1) as f32;
    let mut g = if width > 0.0 {
        (((v - lo) / width) as usize).min(bins - 1)
    } else {
        0
    };
    while g + 1 < bins && v >= edges[g + 1] {
        g += 1;
    }
    while g > 0 && v < edges[g] {
        g -= 1;
    }
    g
}

fn range(v: &Volume) -> Result<(f32, f32)> {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &x in &v.data {
        min = min.min(x);
        max = max.max(x);
    }
    if !(max > min) {
        return Err(Error::Degenerate(
            "histogram thresholding needs a non-constant volume".into(),
        ));
    }
    Ok((min, max))
}

/// Between-class variance of the cut after bin `t`, computed from exact
/// integer tallies so independently aggregated routes agree bitwise.
#[inline]
fn between_class_variance(w0: u64, s0: u64, w1: u64, s1: u64) -> f64 {
    if w0 == 0 || w1 == 0 {
        return 0.0;
    }
    let diff = s0 as f64 * w1 as f64 - s1 as f64 * w0 as f64;
    diff * diff / (w0 as f64 * w1 as f64)
}

/// The bin-edge threshold maximizing between-class variance, ties broken
/// toward the lower threshold.
pub fn otsu_threshold(v: &Volume, bins: usize) -> Result<f32> {
    if bins < 2 {
        return Err(Error::InvalidConfig("otsu needs at least 2 bins".into()));
    }
    let (min, max) = range(v)?;
    let edges = threshold_candidates(min, max, bins);
    let mut counts = vec![0u64; bins];
    for &x in &v.data {
        counts[bin_of(x, &edges)] += 1;
    }

    let total_w: u64 = counts.iter().sum();
    let total_s: u64 = counts
        .iter()
        .enumerate()
        .map(|(b, &c)| b as u64 * c)
        .sum();
    let mut w0 = 0u64;
    let mut s0 = 0u64;
    let mut best = (f64::NEG_INFINITY, 0usize);
    for t in 0..bins - 1 {
        w0 += counts[t];
        s0 += t as u64 * counts[t];
        let bcv = between_class_variance(w0, s0, total_w - w0, total_s - s0);
        if bcv > best.0 {
            best = (bcv, t);
        }
    }
    Ok(edges[best.1 + 1])
}

/// Binarization rule shared by every thresholding consumer.
pub struct Binarize;

impl Binarize {
    pub fn apply(v: &Volume, threshold: f32) -> LabelVolume {
        LabelVolume {
            dims: v.dims,
            voxel_size_um: v.voxel_size_um,
            data: v.data.iter().map(|&x| u8::from(x >= threshold)).collect(),
        }
    }
}

/// Sweep the same candidate edges and return the threshold with the best
/// Dice against the ground truth, plus that Dice. This is the upper bound
/// for threshold-based segmentation of this volume. With an empty ground
/// truth every candidate scores 0 and the lowest threshold is returned.
pub fn best_dice_threshold(v: &Volume, gt: &LabelVolume, bins: usize) -> Result<(f32, f64)> {
    if v.dims != gt.dims {
        return Err(Error::DimsMismatch {
            left: v.dims,
            right: gt.dims,
        });
    }
    let (min, max) = range(v)?;
    let edges = threshold_candidates(min, max, bins);
    let mut pos = vec![0u64; bins];
    let mut neg = vec![0u64; bins];
    for (&x, &l) in v.data.iter().zip(&gt.data) {
        let b = bin_of(x, &edges);
        if l == 1 {
            pos[b] += 1;
        } else {
            neg[b] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();

    // Suffix sums: prediction at edge i selects bins >= i.
    let mut tp: u64 = total_pos;
    let mut fp: u64 = neg.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for i in 0..bins {
        if i > 0 {
            tp -= pos[i - 1];
            fp -= neg[i - 1];
        }
        let counts = ConfusionCounts {
            tp,
            fp,
            fn_: total_pos - tp,
            tn: 0,
        };
        let d = if 2 * counts.tp + counts.fp + counts.fn_ == 0 {
            0.0
        } else {
            dice(counts)
        };
        if d > best.0 {
            best = (d, i);
        }
    }
    Ok((edges[best.1], best.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::confusion;
    use crate::volgrid::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(data: Vec<f32>) -> Volume {
        let n = data.len();
        Volume::new(Dims::new(1, 1, n), 1.0, data).unwrap()
    }

    fn random_bimodal(n: usize, seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.7 + 0.1 * rng.random::<f32>()
                } else {
                    0.2 + 0.1 * rng.random::<f32>()
                }
            })
            .collect();
        volume(data)
    }

    /// Exhaustive oracle: recompute class tallies from scratch per cut.
    fn otsu_oracle(v: &Volume, bins: usize) -> f32 {
        let mut min = f32::INFINITY;
        let mut max = f32::NEG_INFINITY;
        for &x in &v.data {
            min = min.min(x);
            max = max.max(x);
        }
        let edges = threshold_candidates(min, max, bins);
        let mut best = (f64::NEG_INFINITY, 0usize);
        for t in 0..bins - 1 {
            let (mut w0, mut s0, mut w1, mut s1) = (0u64, 0u64, 0u64, 0u64);
            for &x in &v.data {
                let b = bin_of(x, &edges);
                if b <= t {
                    w0 += 1;
                    s0 += b as u64;
                } else {
                    w1 += 1;
                    s1 += b as u64;
                }
            }
            let bcv = between_class_variance(w0, s0, w1, s1);
            if bcv > best.0 {
                best = (bcv, t);
            }
        }
        edges[best.1 + 1]
    }

    #[test]
    fn two_delta_peaks_threshold_separates_them() {
        let mut data = vec![0.2f32; 64];
        data.extend(vec![0.8f32; 64]);
        let v = volume(data);
        let t = otsu_threshold(&v, 256).unwrap();
        assert!(t > 0.2 && t <= 0.8, "threshold {t}");
        let seg = Binarize::apply(&v, t);
        assert_eq!(seg.data.iter().filter(|&&l| l == 1).count(), 64);
    }

    #[test]
    fn constant_volume_rejected() {
        let v = volume(vec![0.5; 32]);
        assert!(matches!(otsu_threshold(&v, 256), Err(Error::Degenerate(_))));
    }

    #[test]
    fn matches_exhaustive_sweep_exactly() {
        for seed in 0..10 {
            let v = random_bimodal(4096, seed);
            let got = otsu_threshold(&v, 256).unwrap();
            let want = otsu_oracle(&v, 256);
            assert_eq!(got.to_bits(), want.to_bits(), "seed {seed}");
        }
    }

    #[test]
    fn tie_rule_prefers_lower_threshold() {
        // Symmetric two-delta histogram: every interior cut has the same
        // between-class variance, so the first maximal cut must win in both
        // routes.
        let mut data = vec![0.0f32; 10];
        data.extend(vec![1.0f32; 10]);
        let v = volume(data);
        assert_eq!(
            otsu_threshold(&v, 256).unwrap().to_bits(),
            otsu_oracle(&v, 256).to_bits()
        );
    }

    #[test]
    fn perfect_separator_reaches_dice_one() {
        let v = random_bimodal(2048, 3);
        let t_star = otsu_threshold(&v, 256).unwrap();
        let gt = Binarize::apply(&v, t_star);
        let (t, d) = best_dice_threshold(&v, &gt, 256).unwrap();
        assert_eq!(d, 1.0);
        let seg = Binarize::apply(&v, t);
        assert_eq!(seg.data, gt.data);
    }

    #[test]
    fn empty_ground_truth_scores_zero() {
        let v = random_bimodal(256, 4);
        let gt = LabelVolume::new(v.dims, 1.0, vec![0; 256]).unwrap();
        let (_, d) = best_dice_threshold(&v, &gt, 256).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn best_dice_beats_random_thresholds() {
        let v = random_bimodal(4096, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gt = Binarize::apply(&v, 0.55);
        let (_, best) = best_dice_threshold(&v, &gt, 256).unwrap();
        for _ in 0..64 {
            let t = rng.random_range(0.1..0.9f32);
            let seg = Binarize::apply(&v, t);
            let d = dice(confusion(&gt, &seg).unwrap());
            assert!(best >= d, "best {best} < random-threshold dice {d}");
        }
    }

    #[test]
    fn sweep_dice_matches_direct_binarization() {
        // The suffix-sum Dice at the returned threshold must equal the Dice
        // of actually binarizing with it.
        let v = random_bimodal(4096, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt_data: Vec<u8> = (0..4096)
            .map(|i| u8::from(v.data[i] > 0.5 && rng.random_bool(0.9)))
            .collect();
        let gt = LabelVolume::new(v.dims, 1.0, gt_data).unwrap();
        let (t, d) = best_dice_threshold(&v, &gt, 256).unwrap();
        let seg = Binarize::apply(&v, t);
        let direct = dice(confusion(&gt, &seg).unwrap());
        assert_eq!(d, direct);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let v = random_bimodal(8, 9);
        let gt = LabelVolume::new(Dims::new(1, 1, 9), 1.0, vec![0; 9]).unwrap();
        assert!(best_dice_threshold(&v, &gt, 256).is_err());
    }
}
