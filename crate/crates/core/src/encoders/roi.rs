//! Region-of-interest pooling of the RGB feature map.
//!
//! An 8x8 window centered on the query pixel is split into 2x2 bins. Each
//! bin averages 2x2 bilinear samples placed at the quarter points of the
//! bin, so with integer pixel centers the samples sit at offsets
//! `-3, -1, +1, +3`. Samples outside the image read zero.

use std::sync::Arc;

use super::rgb::{FeatureMap, RGB_CHANNELS};
use crate::nn::{Graph, SparseRows, Var};

pub const ROI_WINDOW: usize = 8;
pub const ROI_BINS: usize = 2;
pub const ROI_SAMPLES: usize = 2;

/// Length of one pooled embedding.
pub const RGB_EMBED_DIM: usize = RGB_CHANNELS * ROI_BINS * ROI_BINS;

/// Bilinear taps `(pixel index, weight)` of a sample at `(x, y)`; taps
/// outside the image are dropped.
pub fn bilinear_taps(x: f32, y: f32, width: usize, height: usize, out: &mut Vec<(usize, f32)>) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let w = wx * wy;
            if w == 0.0 {
                continue;
            }
            let (px, py) = (x0 as i64 + dx, y0 as i64 + dy);
            if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                out.push((py as usize * width + px as usize, w));
            }
        }
    }
}

/// Sample offsets along one axis relative to the window center.
pub fn sample_offsets() -> Vec<f32> {
    let bin = (ROI_WINDOW / ROI_BINS) as f32;
    let half = ROI_WINDOW as f32 / 2.0;
    let mut out = Vec::new();
    for b in 0..ROI_BINS {
        for s in 0..ROI_SAMPLES {
            out.push(-half + bin * (b as f32 + (s as f32 + 0.5) / ROI_SAMPLES as f32));
        }
    }
    out
}

/// Sparse pooling operator: row `k*4 + by*2 + bx` averages the samples of
/// bin `(by, bx)` for pixel `k`.
pub fn roi_operator(pixels: &[(usize, usize)], width: usize, height: usize) -> SparseRows {
    let offs = sample_offsets();
    let per_bin = (ROI_SAMPLES * ROI_SAMPLES) as f32;
    let mut rows = Vec::with_capacity(pixels.len() * ROI_BINS * ROI_BINS);
    for &(u, v) in pixels {
        for by in 0..ROI_BINS {
            for bx in 0..ROI_BINS {
                let mut taps = Vec::new();
                for sy in 0..ROI_SAMPLES {
                    for sx in 0..ROI_SAMPLES {
                        let x = u as f32 + offs[bx * ROI_SAMPLES + sx];
                        let y = v as f32 + offs[by * ROI_SAMPLES + sy];
                        bilinear_taps(x, y, width, height, &mut taps);
                    }
                }
                taps.iter_mut().for_each(|t| t.1 /= per_bin);
                rows.push(taps);
            }
        }
    }
    rows
}

/// `[k, 128]` embeddings for the given pixels, laid out `(by, bx, channel)`.
/// Sorted feature-map rows that [`roi_pool`] reads for `pixels`.
pub fn roi_support(pixels: &[(usize, usize)], width: usize, height: usize) -> Vec<usize> {
    let mut used = vec![false; width * height];
    for taps in roi_operator(pixels, width, height) {
        for (i, _) in taps {
            used[i] = true;
        }
    }
    (0..width * height).filter(|&i| used[i]).collect()
}

pub fn roi_pool(g: &mut Graph, fmap: &FeatureMap, pixels: &[(usize, usize)]) -> Var {
    let op = roi_operator(pixels, fmap.width, fmap.height);
    let channels = g.dims(fmap.var).1;
    let pooled = g.sparse_rows(fmap.var, Arc::new(op));
    g.reshape(pooled, pixels.len(), channels * ROI_BINS * ROI_BINS)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(g: &mut Graph, w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f32) -> FeatureMap {
        let mut data = Vec::new();
        for v in 0..h {
            for u in 0..w {
                for c in 0..RGB_CHANNELS {
                    data.push(f(u, v, c));
                }
            }
        }
        let var = g.constant_matrix(w * h, RGB_CHANNELS, data);
        FeatureMap { var, width: w, height: h }
    }

    #[test]
    fn offsets_are_quarter_points() {
        assert_eq!(sample_offsets(), vec![-3.0, -1.0, 1.0, 3.0]);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let mut g = Graph::inference();
        let f = fmap(&mut g, 16, 12, |_, _, _| 0.75);
        let e = roi_pool(&mut g, &f, &[(8, 6)]);
        assert_eq!(g.dims(e), (1, RGB_EMBED_DIM));
        assert!(g.data(e).iter().all(|&x| (x - 0.75).abs() < 1e-6));
    }

    #[test]
    fn linear_map_gives_bin_centroids() {
        let mut g = Graph::inference();
        let f = fmap(&mut g, 20, 20, |u, v, c| 0.5 * u as f32 - 0.25 * v as f32 + c as f32);
        let (u, v) = (10usize, 9usize);
        let e = roi_pool(&mut g, &f, &[(u, v)]);
        let data = g.data(e);
        for by in 0..2 {
            for bx in 0..2 {
                let cx = u as f32 + if bx == 0 { -2.0 } else { 2.0 };
                let cy = v as f32 + if by == 0 { -2.0 } else { 2.0 };
                for c in 0..RGB_CHANNELS {
                    let want = 0.5 * cx - 0.25 * cy + c as f32;
                    let got = data[(by * 2 + bx) * RGB_CHANNELS + c];
                    assert!((got - want).abs() < 1e-5, "{got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn corner_pixel_uses_zero_padding() {
        let mut g = Graph::inference();
        let f = fmap(&mut g, 8, 8, |_, _, _| 1.0);
        let e = roi_pool(&mut g, &f, &[(0, 0)]);
        let data = g.data(e);
        assert!(data.iter().all(|x| x.is_finite()));
        assert!(data[..3 * RGB_CHANNELS].iter().all(|&x| x == 0.0));
        assert!((data[3 * RGB_CHANNELS] - 1.0).abs() < 1e-6);
        let e = roi_pool(&mut g, &f, &[(2, 2)]);
        let data = g.data(e);
        assert!((data[0] - 0.25).abs() < 1e-6);
        assert!((data[RGB_CHANNELS] - 0.5).abs() < 1e-6);
        assert!((data[3 * RGB_CHANNELS] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn fractional_sample_interpolates() {
        let mut taps = Vec::new();
        bilinear_taps(1.25, 0.5, 4, 4, &mut taps);
        let total: f32 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(taps.len(), 4);
    }
}
