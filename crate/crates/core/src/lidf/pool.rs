//! Reduction of the pair predictions of one ray to a single depth.

use super::PoolMode;
use crate::geom::Vec3;

/// Prediction for one ray-voxel pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairPrediction {
    /// Probability normalized along the ray.
    pub prob: f32,
    pub t_in: f32,
    /// Terminating position `d_in + δ·r`.
    pub position: Vec3,
}

/// Pooled prediction for one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayPrediction {
    /// Depth (z of the pooled position); 0 when invalid.
    pub depth: f32,
    pub valid: bool,
    /// Pair index with the highest probability.
    pub winner: Option<usize>,
}

impl RayPrediction {
    pub const INVALID: Self = Self {
        depth: 0.0,
        valid: false,
        winner: None,
    };
}

/// Index of the largest value; ties go to the earliest element.
pub(crate) fn first_argmax(values: impl IntoIterator<Item = f32>) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (k, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

pub fn ray_pool(pairs: &[PairPrediction], mode: PoolMode) -> RayPrediction {
    if pairs.is_empty() {
        return RayPrediction::INVALID;
    }
    // Ties are broken by the nearest entry point, independent of input order.
    let mut winner = 0;
    for (k, p) in pairs.iter().enumerate().skip(1) {
        let w = &pairs[winner];
        if p.prob > w.prob || (p.prob == w.prob && p.t_in < w.t_in) {
            winner = k;
        }
    }
    let depth = match mode {
        PoolMode::Argmax => pairs[winner].position.z,
        PoolMode::WeightedSum => pairs
            .iter()
            .fold(Vec3::ZERO, |acc, p| acc + p.position * p.prob)
            .z,
    };
    RayPrediction {
        depth,
        valid: true,
        winner: Some(winner),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs(probs: &[f32], depths: &[f32]) -> Vec<PairPrediction> {
        probs
            .iter()
            .zip(depths)
            .enumerate()
            .map(|(k, (&p, &z))| PairPrediction {
                prob: p,
                t_in: k as f32,
                position: Vec3::new(0.0, 0.0, z),
            })
            .collect()
    }

    #[test]
    fn spec_examples() {
        let ps = pairs(&[0.2, 0.7, 0.1], &[0.4, 0.6, 0.9]);
        assert_eq!(ray_pool(&ps, PoolMode::Argmax).depth, 0.6);
        assert!((ray_pool(&ps, PoolMode::WeightedSum).depth - 0.59).abs() < 1e-6);
        let one = pairs(&[1.0], &[0.8]);
        assert_eq!(ray_pool(&one, PoolMode::Argmax).depth, 0.8);
        assert_eq!(ray_pool(&one, PoolMode::WeightedSum).depth, 0.8);
    }

    #[test]
    fn empty_is_invalid() {
        let r = ray_pool(&[], PoolMode::Argmax);
        assert!(!r.valid);
        assert_eq!(r.depth, 0.0);
    }

    #[test]
    fn ties_go_to_nearest_entry() {
        let mut ps = pairs(&[0.5, 0.5], &[0.4, 0.6]);
        ps.swap(0, 1);
        let r = ray_pool(&ps, PoolMode::Argmax);
        assert_eq!(r.depth, 0.4);
    }

    #[test]
    fn first_argmax_prefers_earliest() {
        assert_eq!(first_argmax([1.0, 3.0, 3.0, 2.0]), Some(1));
        assert_eq!(first_argmax(std::iter::empty()), None);
    }

    proptest! {
        #[test]
        fn pooled_depth_within_pair_range(
            raw in prop::collection::vec((0.01f32..1.0, 0.2f32..1.2), 1..8),
            mode in prop_oneof![Just(PoolMode::Argmax), Just(PoolMode::WeightedSum)],
        ) {
            let total: f32 = raw.iter().map(|r| r.0).sum();
            let probs: Vec<f32> = raw.iter().map(|r| r.0 / total).collect();
            let depths: Vec<f32> = raw.iter().map(|r| r.1).collect();
            let r = ray_pool(&pairs(&probs, &depths), mode);
            let lo = depths.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = depths.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(r.depth >= lo - 1e-5 && r.depth <= hi + 1e-5);
        }
    }
}
