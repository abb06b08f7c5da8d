//! Frame-index selection.
//!
//! Frame numbers are 1-based inside this module: a video of `T` frames has frames `1..=T`.
//! Callers that address frame buffers subtract one.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};

/// One random-interval draw: frames `start + interval * (j + 1)` for `j < frames`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplePlan {
    #[serde(rename = "T")]
    pub total_frames: usize,
    #[serde(rename = "N")]
    pub frames: usize,
    #[serde(rename = "g")]
    pub interval: usize,
    #[serde(rename = "s")]
    pub start: usize,
    pub indices: Vec<usize>,
    /// The video was too short for a regular draw and frames were cycled from the start.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub padded: bool,
}

/// Frame indices from the chunked baseline or from padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameIndices {
    pub indices: Vec<usize>,
    pub padded: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingStrategy {
    /// Constant random interval from a random start.
    #[default]
    Ris,
    /// One uniform frame per equal chunk.
    Restricted,
}

/// When the random interval is redrawn during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalRedraw {
    /// Each video holds its own interval for one epoch.
    #[default]
    PerVideoPerEpoch,
    /// A single interval per epoch shared by all videos (clamped to what each video admits).
    SharedPerEpoch,
}

/// Largest interval for which `[1, T - g*N]` is non-empty.
pub fn max_interval(total: usize, frames: usize) -> usize {
    if frames == 0 || total == 0 {
        0
    } else {
        (total - 1) / frames
    }
}

fn check_frames(frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::Argument("must draw at least one frame".into()));
    }
    Ok(())
}

/// Cycles through the video from its first frame until `frames` indices are produced.
pub fn pad_sample(total: usize, frames: usize) -> Result<FrameIndices> {
    check_frames(frames)?;
    if total == 0 {
        return Err(Error::Argument("video has no frames".into()));
    }
    Ok(FrameIndices { indices: (0..frames).map(|j| j % total + 1).collect(), padded: true })
}

fn padded_plan(total: usize, frames: usize) -> Result<SamplePlan> {
    let pad = pad_sample(total, frames)?;
    Ok(SamplePlan {
        total_frames: total,
        frames,
        interval: 1,
        start: 0,
        indices: pad.indices,
        padded: true,
    })
}

/// Random-interval draw: `g` uniform on `[1, (T-1)/N]`, then `s` uniform on `[1, T - g*N]`.
///
/// Videos with `T < N + 1` fall back to [`pad_sample`] and the plan is flagged.
pub fn ris_sample<R: Rng + ?Sized>(total: usize, frames: usize, rng: &mut R) -> Result<SamplePlan> {
    check_frames(frames)?;
    let g_max = max_interval(total, frames);
    if g_max == 0 {
        return padded_plan(total, frames);
    }
    let g = rng.gen_range(1..=g_max);
    ris_sample_with_interval(total, frames, g, rng)
}

/// Random-interval draw with the interval fixed by the caller (clamped to the feasible
/// range for this video).
pub fn ris_sample_with_interval<R: Rng + ?Sized>(
    total: usize,
    frames: usize,
    interval: usize,
    rng: &mut R,
) -> Result<SamplePlan> {
    check_frames(frames)?;
    let g_max = max_interval(total, frames);
    if g_max == 0 {
        return padded_plan(total, frames);
    }
    let g = interval.clamp(1, g_max);
    let s = rng.gen_range(1..=total - g * frames);
    Ok(plan_from(total, frames, g, s))
}

/// Deterministic plan for a given interval and start.
pub fn plan_from(total: usize, frames: usize, interval: usize, start: usize) -> SamplePlan {
    SamplePlan {
        total_frames: total,
        frames,
        interval,
        start,
        indices: (1..=frames).map(|j| start + interval * j).collect(),
        padded: false,
    }
}

/// Chunked baseline: the video is cut into `N` contiguous chunks (the first `T mod N`
/// chunks one frame longer) and one frame is drawn uniformly from each.
pub fn restricted_sample<R: Rng + ?Sized>(total: usize, frames: usize, rng: &mut R) -> Result<FrameIndices> {
    check_frames(frames)?;
    if total < frames {
        return pad_sample(total, frames);
    }
    let indices = chunk_bounds(total, frames)
        .into_iter()
        .map(|(lo, hi)| rng.gen_range(lo..=hi))
        .collect();
    Ok(FrameIndices { indices, padded: false })
}

/// Inclusive 1-based `(first, last)` frame of each chunk.
pub fn chunk_bounds(total: usize, frames: usize) -> Vec<(usize, usize)> {
    let base = total / frames;
    let rem = total % frames;
    let mut lo = 1;
    (0..frames)
        .map(|i| {
            let len = base + usize::from(i < rem);
            let b = (lo, lo + len - 1);
            lo += len;
            b
        })
        .collect()
}

/// Evenly spaced deterministic indices `round(1 + j*(T-1)/(N-1))`; repeats when `T < N`.
pub fn eval_sample(total: usize, frames: usize) -> Result<Vec<usize>> {
    check_frames(frames)?;
    if total == 0 {
        return Err(Error::Argument("video has no frames".into()));
    }
    if frames == 1 {
        return Ok(vec![1]);
    }
    let span = (total - 1) as f64 / (frames - 1) as f64;
    Ok((0..frames).map(|j| (1.0 + j as f64 * span).round() as usize).collect())
}

/// Pearson chi-square statistic and upper-tail p-value of `counts` against the uniform
/// distribution over its bins.
pub fn chi_square_uniform(counts: &[u64]) -> (f64, f64) {
    let bins = counts.len();
    let total: u64 = counts.iter().sum();
    if bins < 2 || total == 0 {
        return (0.0, 1.0);
    }
    let expected = total as f64 / bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive degrees of freedom");
    (stat, 1.0 - dist.cdf(stat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interval_range_for_average_length() {
        assert_eq!(max_interval(73, 6), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = [false; 13];
        for _ in 0..5000 {
            let p = ris_sample(73, 6, &mut rng).unwrap();
            assert!((1..=12).contains(&p.interval));
            seen[p.interval] = true;
        }
        assert!(seen[1..].iter().all(|&s| s));
    }

    #[test]
    fn short_video_intervals() {
        // (13 - 1) / 6 = 2, and g = 2 leaves exactly s = 1.
        assert_eq!(max_interval(13, 6), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p = ris_sample(13, 6, &mut rng).unwrap();
            match p.interval {
                1 => assert!((1..=7).contains(&p.start)),
                2 => assert_eq!(p.start, 1),
                g => panic!("interval {g} infeasible"),
            }
            assert!(*p.indices.last().unwrap() <= 13);
        }
    }

    #[test]
    fn plan_indices_follow_start_and_interval() {
        assert_eq!(plan_from(20, 4, 2, 3).indices, vec![5, 7, 9, 11]);
    }

    #[test]
    fn too_short_video_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ris_sample(4, 6, &mut rng).unwrap();
        assert!(p.padded);
        assert_eq!(p.indices, vec![1, 2, 3, 4, 1, 2]);
        // T = N also lacks room for the first offset.
        assert!(ris_sample(6, 6, &mut rng).unwrap().padded);
        let r = restricted_sample(3, 5, &mut rng).unwrap();
        assert!(r.padded);
        assert_eq!(r.indices, vec![1, 2, 3, 1, 2]);
    }

    #[test]
    fn restricted_forced_and_chunked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(restricted_sample(6, 6, &mut rng).unwrap().indices, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(chunk_bounds(12, 4), vec![(1, 3), (4, 6), (7, 9), (10, 12)]);
        assert_eq!(chunk_bounds(10, 4), vec![(1, 3), (4, 6), (7, 8), (9, 10)]);
        for _ in 0..500 {
            let idx = restricted_sample(12, 4, &mut rng).unwrap().indices;
            for (i, &(lo, hi)) in chunk_bounds(12, 4).iter().enumerate() {
                assert!(idx[i] >= lo && idx[i] <= hi);
            }
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn restricted_within_chunk_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut counts = vec![[0u64; 3]; 4];
        for _ in 0..10_000 {
            let idx = restricted_sample(12, 4, &mut rng).unwrap().indices;
            for (c, &i) in idx.iter().enumerate() {
                counts[c][(i - 1) % 3] += 1;
            }
        }
        for c in &counts {
            let (_, p) = chi_square_uniform(c);
            assert!(p > 0.01, "{c:?} p={p}");
        }
    }

    #[test]
    fn eval_sample_cases() {
        assert_eq!(eval_sample(11, 6).unwrap(), vec![1, 3, 5, 7, 9, 11]);
        assert_eq!(eval_sample(6, 6).unwrap(), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(eval_sample(3, 6).unwrap(), vec![1, 1, 2, 2, 3, 3]);
        assert_eq!(eval_sample(5, 1).unwrap(), vec![1]);
        assert!(eval_sample(0, 3).is_err());
    }

    #[test]
    fn chi_square_detects_skew() {
        let (_, p) = chi_square_uniform(&[100, 100, 100, 100]);
        assert!((p - 1.0).abs() < 1e-12);
        let (_, p) = chi_square_uniform(&[400, 0, 0, 0]);
        assert!(p < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn ris_plans_are_in_bounds(total in 1usize..300, frames in 1usize..12, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ris_sample(total, frames, &mut rng).unwrap();
            proptest::prop_assert_eq!(p.indices.len(), frames);
            proptest::prop_assert!(p.indices.iter().all(|&i| i >= 1 && i <= total));
            if !p.padded {
                proptest::prop_assert!(p.start >= 1 && p.start <= total - p.interval * frames);
                for w in p.indices.windows(2) {
                    proptest::prop_assert_eq!(w[1] - w[0], p.interval);
                }
            }
            let again = ris_sample(total, frames, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            proptest::prop_assert_eq!(again, p);
        }

        #[test]
        fn eval_indices_in_bounds(total in 1usize..200, frames in 1usize..16) {
            let idx = eval_sample(total, frames).unwrap();
            proptest::prop_assert!(idx.iter().all(|&i| i >= 1 && i <= total));
            proptest::prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
