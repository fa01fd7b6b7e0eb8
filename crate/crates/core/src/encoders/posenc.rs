//! Frequency encoding γ(p) = (sin 2⁰πp, cos 2⁰πp, …, sin 2^{L−1}πp, cos 2^{L−1}πp).

use std::f32::consts::PI;

use crate::nn::{Graph, Var};

/// Positional encoding settings. With `enabled = false` coordinates pass
/// through unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PosEnc {
    pub freqs: usize,
    pub enabled: bool,
}

impl Default for PosEnc {
    fn default() -> Self {
        Self { freqs: 5, enabled: true }
    }
}

impl PosEnc {
    pub fn new(freqs: usize, enabled: bool) -> Self {
        Self { freqs, enabled }
    }

    /// Encoded width for `coords` input coordinates.
    pub fn dim(&self, coords: usize) -> usize {
        if self.enabled {
            2 * self.freqs * coords
        } else {
            coords
        }
    }

    /// Appends the encoding of `v` to `out`.
    pub fn encode_into(&self, v: &[f32], out: &mut Vec<f32>) {
        if self.enabled {
            for &p in v {
                for f in 0..self.freqs {
                    let a = (1u32 << f) as f32 * PI * p;
                    out.push(a.sin());
                    out.push(a.cos());
                }
            }
        } else {
            out.extend_from_slice(v);
        }
    }

    pub fn encode(&self, v: &[f32]) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.dim(v.len()));
        self.encode_into(v, &mut out);
        out
    }

    /// Differentiable encoding of a single-column input `[k, 1]`.
    pub fn encode_column(&self, g: &mut Graph, x: Var) -> Var {
        assert_eq!(g.dims(x).1, 1, "encode_column expects one column");
        if !self.enabled {
            return x;
        }
        let mut parts = Vec::with_capacity(2 * self.freqs);
        for f in 0..self.freqs {
            let a = g.scale(x, (1u32 << f) as f32 * PI);
            parts.push(g.sin(a));
            parts.push(g.cos(a));
        }
        g.concat_cols(&parts)
    }
}

/// γ with `L` frequency bands.
pub fn positional_encode(v: &[f32], l: usize) -> Vec<f32> {
    PosEnc::new(l, true).encode(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f32], b: &[f32]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-6)
    }

    #[test]
    fn spec_values() {
        assert!(close(&positional_encode(&[0.0], 2), &[0.0, 1.0, 0.0, 1.0]));
        assert!(close(&positional_encode(&[0.5], 1), &[1.0, 0.0]));
        assert!(close(&positional_encode(&[1.0], 1), &[0.0, -1.0]));
    }

    #[test]
    fn per_coordinate_layout() {
        let e = positional_encode(&[0.0, 0.5], 1);
        assert!(close(&e, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn disabled_passes_raw_values() {
        let pe = PosEnc::new(5, false);
        assert_eq!(pe.encode(&[0.25, -0.5]), vec![0.25, -0.5]);
        assert_eq!(pe.dim(3), 3);
    }

    #[test]
    fn column_matches_plain_encoding() {
        let pe = PosEnc::default();
        let mut g = Graph::inference();
        let x = g.constant_column(vec![0.1, -0.7]);
        let y = pe.encode_column(&mut g, x);
        assert!(close(&g.data(y)[..10], &pe.encode(&[0.1])));
        assert!(close(&g.data(y)[10..], &pe.encode(&[-0.7])));
    }

    proptest! {
        #[test]
        fn values_bounded(v in prop::collection::vec(-1.0f32..1.0, 1..6), l in 1usize..8) {
            let e = positional_encode(&v, l);
            prop_assert_eq!(e.len(), 2 * l * v.len());
            prop_assert!(e.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }
}
