//! Two-view stochastic perturbation of feature frames: a piecewise-linear
//! time warp followed by contiguous time and frequency masks.
//!
//! Masked amounts are drawn as whole frame (or feature) counts `k` with
//! `low * n < k <= high * n`, then split into up to `max_mask_blocks`
//! blocks. The time fraction and the frequency fraction are each kept inside
//! the ratio interval; they are reported separately.

use mddkit_tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMatrix {
    frames: Tensor,
    pub frame_rate: f64,
}

impl FrameMatrix {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let (n, d) = frames.dims2()?;
        if n == 0 || d == 0 {
            return Err(shape(format!("frame matrix must be non-empty, got {n}x{d}")));
        }
        if !frames.all_finite() {
            return Err(invalid("frame matrix has non-finite entries"));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_tensor(self) -> Tensor {
        self.frames
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Largest anchor shift. `None` picks `min(80, n / 4)` per utterance.
    pub warp_window: Option<usize>,
    /// Zero disables masking.
    pub max_mask_blocks: usize,
    /// Exclusive lower, inclusive upper bound on the masked fraction.
    pub mask_ratio_range: (f64, f64),
    pub min_time_mask_len: usize,
    pub min_freq_mask_len: usize,
    pub freq_masking: bool,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            warp_window: None,
            max_mask_blocks: 3,
            mask_ratio_range: (0.1, 0.3),
            min_time_mask_len: 4,
            min_freq_mask_len: 2,
            freq_masking: true,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// No warp, no masks.
    pub fn identity() -> Self {
        Self {
            warp_window: Some(0),
            max_mask_blocks: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.mask_ratio_range;
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(invalid(format!("mask ratio range ({lo}, {hi}] is not inside [0, 1]")));
        }
        if self.min_time_mask_len == 0 || self.min_freq_mask_len == 0 {
            return Err(invalid("minimum mask lengths must be at least 1"));
        }
        Ok(())
    }

    pub fn warp_for(&self, n: usize) -> usize {
        self.warp_window.unwrap_or((n / 4).min(80))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaskStats {
    pub time_fraction: f64,
    pub freq_fraction: f64,
    pub time_blocks: usize,
    pub freq_blocks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub a: FrameMatrix,
    pub b: FrameMatrix,
    pub stats: [MaskStats; 2],
    /// Set when the utterance was too short to mask.
    pub unmasked_warning: bool,
}

/// Draws two independently perturbed copies of `x`.
pub fn make_views<R: Rng>(x: &FrameMatrix, policy: &AugmentPolicy, rng: &mut R) -> Result<ViewPair> {
    policy.validate()?;
    let n = x.num_frames();
    let time_feasible = policy.max_mask_blocks == 0
        || mask_count_range(n, policy.mask_ratio_range, policy.min_time_mask_len).is_some();
    if !time_feasible {
        log::warn!(
            "utterance of {n} frames too short for time masks of >= {} frames; views left unmasked",
            policy.min_time_mask_len
        );
    }
    let (a, sa) = one_view(x, policy, time_feasible, rng);
    let (b, sb) = one_view(x, policy, time_feasible, rng);
    Ok(ViewPair {
        a,
        b,
        stats: [sa, sb],
        unmasked_warning: !time_feasible,
    })
}

fn one_view<R: Rng>(x: &FrameMatrix, policy: &AugmentPolicy, mask: bool, rng: &mut R) -> (FrameMatrix, MaskStats) {
    let (n, d) = (x.num_frames(), x.dim());
    let mut data = time_warp(x.frames.data(), n, d, policy.warp_for(n), rng);
    let mut stats = MaskStats::default();
    if mask && policy.max_mask_blocks > 0 {
        let blocks = sample_blocks(n, policy.mask_ratio_range, policy.min_time_mask_len, policy.max_mask_blocks, rng)
            .unwrap_or_default();
        for &(s, len) in &blocks {
            data[s * d..(s + len) * d].iter_mut().for_each(|v| *v = 0.0);
        }
        stats.time_blocks = blocks.len();
        stats.time_fraction = blocks.iter().map(|b| b.1).sum::<usize>() as f64 / n as f64;
        if policy.freq_masking {
            if let Some(blocks) =
                sample_blocks(d, policy.mask_ratio_range, policy.min_freq_mask_len, policy.max_mask_blocks, rng)
            {
                for &(s, len) in &blocks {
                    for row in data.chunks_mut(d) {
                        row[s..s + len].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                stats.freq_blocks = blocks.len();
                stats.freq_fraction = blocks.iter().map(|b| b.1).sum::<usize>() as f64 / d as f64;
            }
        }
    }
    let frames = Tensor::new(vec![n, d], data).expect("view keeps input shape");
    (
        FrameMatrix {
            frames,
            frame_rate: x.frame_rate,
        },
        stats,
    )
}

/// Admissible whole counts `k` with `lo < k/len <= hi` and `k >= min_len`.
fn mask_count_range(len: usize, (lo, hi): (f64, f64), min_len: usize) -> Option<(usize, usize)> {
    let frac = |k: usize| k as f64 / len as f64;
    let kmin = (min_len..=len).find(|&k| frac(k) > lo)?;
    let kmax = (kmin..=len).rev().find(|&k| frac(k) <= hi)?;
    (kmin <= kmax && frac(kmin) <= hi).then_some((kmin, kmax))
}

/// Non-overlapping `(start, len)` blocks covering exactly `k` cells.
fn sample_blocks<R: Rng>(
    len: usize,
    ratio: (f64, f64),
    min_len: usize,
    max_blocks: usize,
    rng: &mut R,
) -> Option<Vec<(usize, usize)>> {
    let (kmin, kmax) = mask_count_range(len, ratio, min_len)?;
    let k = rng.random_range(kmin..=kmax);
    let b = rng.random_range(1..=max_blocks.min(k / min_len).max(1));
    let mut sizes = vec![min_len; b];
    for _ in 0..k - b * min_len {
        sizes[rng.random_range(0..b)] += 1;
    }
    // Spread the unmasked cells over b + 1 gaps, interior gaps non-empty.
    let free = len - k;
    let mut gaps = vec![0usize; b + 1];
    let mut spare = free;
    for g in gaps.iter_mut().take(b).skip(1) {
        if spare > 0 {
            *g = 1;
            spare -= 1;
        }
    }
    for _ in 0..spare {
        gaps[rng.random_range(0..=b)] += 1;
    }
    let mut blocks = Vec::with_capacity(b);
    let mut pos = 0;
    for (i, &s) in sizes.iter().enumerate() {
        pos += gaps[i];
        blocks.push((pos, s));
        pos += s;
    }
    Some(blocks)
}

/// Moves a random interior anchor by up to `window` frames and resamples
/// both sides linearly. Length-preserving; identity when `window == 0`.
fn time_warp<R: Rng>(src: &[f64], n: usize, d: usize, window: usize, rng: &mut R) -> Vec<f64> {
    if window == 0 || n < 2 * window + 2 {
        return src.to_vec();
    }
    let c = rng.random_range(window..n - window);
    let shift = rng.random_range(-(window as i64)..=window as i64);
    let target = (c as i64 + shift).clamp(1, n as i64 - 2) as usize;
    if target == c {
        return src.to_vec();
    }
    let (c_f, t_f, last) = (c as f64, target as f64, (n - 1) as f64);
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let tf = t as f64;
        let s = if t <= target {
            tf * c_f / t_f
        } else {
            c_f + (tf - t_f) * (last - c_f) / (last - t_f)
        };
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let w = s - lo as f64;
        for j in 0..d {
            out[t * d + j] = (1.0 - w) * src[lo * d + j] + w * src[hi * d + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(n: usize, d: usize) -> FrameMatrix {
        let data = (0..n * d).map(|v| v as f64 * 0.1 + 1.0).collect();
        FrameMatrix::new(Tensor::new(vec![n, d], data).unwrap(), 100.0).unwrap()
    }

    #[test]
    fn identity_policy_copies_input() {
        let x = ramp(40, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = make_views(&x, &AugmentPolicy::identity(), &mut rng).unwrap();
        assert_eq!(v.a, x);
        assert_eq!(v.b, x);
    }

    #[test]
    fn seeded_views_repeat() {
        let x = ramp(50, 8);
        let p = AugmentPolicy::default();
        let v1 = make_views(&x, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let v2 = make_views(&x, &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(v1, v2);
        assert_ne!(v1.a, v1.b);
    }

    #[test]
    fn short_utterance_flagged() {
        let x = ramp(9, 4);
        let v = make_views(&x, &AugmentPolicy::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(v.unmasked_warning);
        assert_eq!(v.stats[0].time_fraction, 0.0);
    }

    #[test]
    fn count_range_respects_bounds() {
        assert_eq!(mask_count_range(30, (0.1, 0.3), 4), Some((4, 9)));
        assert_eq!(mask_count_range(10, (0.1, 0.3), 4), None);
        assert_eq!(mask_count_range(16, (0.1, 0.3), 2), Some((2, 4)));
    }
}
