//! Convolutional RGB encoder producing a full-resolution feature map.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;
use crate::nn::{Activation, Conv2d, Graph, Module, Parameter, Var};

/// Feature channels per pixel.
pub const RGB_CHANNELS: usize = 32;

const WIDTHS: [usize; 7] = [3, 16, 16, 32, 32, 32, RGB_CHANNELS];

/// Six stride-1 3x3 convolutions, ReLU between layers, linear output.
#[derive(Clone, Debug)]
pub struct RgbEncoder {
    pub convs: Vec<Conv2d>,
}

/// Channels-last feature map `[height*width, channels]` living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub var: Var,
    pub width: usize,
    pub height: usize,
}

impl RgbEncoder {
    pub fn new(name: &str, rng: &mut impl Rng) -> Self {
        let convs = WIDTHS
            .windows(2)
            .enumerate()
            .map(|(k, w)| Conv2d::new(&format!("{name}.conv{k}"), w[0], w[1], 1, rng))
            .collect();
        Self { convs }
    }

    pub fn forward(&self, g: &mut Graph, image: &RgbImage) -> Result<FeatureMap> {
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rgb encoder input".into()));
        }
        let (w, h) = (image.width, image.height);
        let x = g.constant_matrix(w * h, 3, image.data.clone());
        self.forward_var(g, x, w, h)
    }

    /// Same as [`forward`](Self::forward) on an image already on the graph.
    pub fn forward_var(&self, g: &mut Graph, mut x: Var, width: usize, height: usize) -> Result<FeatureMap> {
        let n = self.convs.len();
        let (mut hh, mut ww) = (height, width);
        for (k, conv) in self.convs.iter().enumerate() {
            let act = if k + 1 == n { Activation::None } else { Activation::Relu };
            let (y, ho, wo) = conv.forward(g, x, hh, ww, act)?;
            x = y;
            hh = ho;
            ww = wo;
        }
        Ok(FeatureMap {
            var: x,
            width: ww,
            height: hh,
        })
    }
}

impl RgbEncoder {
    /// Feature map that is exact at the pixel rows `support` (sorted flat
    /// indices) and unspecified elsewhere. Each layer runs only on the pixels
    /// the following layers read.
    pub fn forward_support(&self, g: &mut Graph, image: &RgbImage, support: &[usize]) -> Result<FeatureMap> {
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("rgb encoder input".into()));
        }
        let (w, h) = (image.width, image.height);
        let mut needed = vec![Arc::new(support.to_vec())];
        for _ in 1..self.convs.len() {
            let next = dilate(needed.last().unwrap(), w, h);
            needed.push(Arc::new(next));
        }
        needed.reverse();
        let mut x = g.constant_matrix(w * h, 3, image.data.clone());
        let n = self.convs.len();
        for (k, (conv, rows)) in self.convs.iter().zip(needed).enumerate() {
            let act = if k + 1 == n { Activation::None } else { Activation::Relu };
            x = conv.forward_rows(g, x, h, w, act, rows)?;
        }
        Ok(FeatureMap { var: x, width: w, height: h })
    }
}

/// Rows within one pixel (8-neighborhood) of `rows`, sorted.
fn dilate(rows: &[usize], width: usize, height: usize) -> Vec<usize> {
    let mut mark = vec![false; width * height];
    for &r in rows {
        let (u, v) = (r % width, r / width);
        for y in v.saturating_sub(1)..(v + 2).min(height) {
            for x in u.saturating_sub(1)..(u + 2).min(width) {
                mark[y * width + x] = true;
            }
        }
    }
    (0..width * height).filter(|&i| mark[i]).collect()
}

impl Module for RgbEncoder {
    fn params(&self) -> Vec<&Parameter> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_keeps_resolution() {
        let enc = RgbEncoder::new("rgb", &mut ChaCha8Rng::seed_from_u64(0));
        for (w, h) in [(8, 4), (12, 8), (16, 12)] {
            let img = RgbImage::filled(w, h, [0.2, 0.5, 0.9]);
            let mut g = Graph::inference();
            let f = enc.forward(&mut g, &img).unwrap();
            assert_eq!((f.width, f.height), (w, h));
            assert_eq!(g.dims(f.var), (w * h, RGB_CHANNELS));
        }
    }

    #[test]
    fn constant_image_gives_constant_interior() {
        let enc = RgbEncoder::new("rgb", &mut ChaCha8Rng::seed_from_u64(1));
        let (w, h) = (20, 16);
        let img = RgbImage::filled(w, h, [0.3, 0.6, 0.1]);
        let mut g = Graph::inference();
        let f = enc.forward(&mut g, &img).unwrap();
        let data = g.data(f.var);
        // Six 3x3 layers see 6 pixels past the border.
        let reference = &data[(7 * w + 7) * RGB_CHANNELS..(7 * w + 8) * RGB_CHANNELS];
        for v in 6..h - 6 {
            for u in 6..w - 6 {
                let i = (v * w + u) * RGB_CHANNELS;
                for c in 0..RGB_CHANNELS {
                    assert!((data[i + c] - reference[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn support_forward_matches_dense_forward() {
        let enc = RgbEncoder::new("rgb", &mut ChaCha8Rng::seed_from_u64(3));
        let (w, h) = (23, 17);
        let data: Vec<f32> = (0..w * h * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let img = RgbImage::new(w, h, data).unwrap();
        let support = vec![0, 5, 3 * w + 11, 9 * w + 22, w * h - 1];
        let mut g = Graph::inference();
        let dense = enc.forward(&mut g, &img).unwrap();
        let sparse = enc.forward_support(&mut g, &img, &support).unwrap();
        let (a, b) = (g.data(dense.var), g.data(sparse.var));
        for &r in &support {
            for c in 0..RGB_CHANNELS {
                let i = r * RGB_CHANNELS + c;
                assert!((a[i] - b[i]).abs() <= 1e-6 * (1.0 + a[i].abs()), "row {r} channel {c}");
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let enc = RgbEncoder::new("rgb", &mut ChaCha8Rng::seed_from_u64(2));
        let mut img = RgbImage::filled(4, 4, [0.0; 3]);
        img.data[5] = f32::NAN;
        assert!(enc.forward(&mut Graph::inference(), &img).is_err());
    }
}
