//! Photometric augmentation: Gaussian noise, linear motion blur, HSV jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Upper bound of the per-image noise standard deviation.
    pub noise_max: f32,
    /// Longest blur streak in pixels.
    pub blur_max: usize,
    /// Hue shift bound as a fraction of the color wheel.
    pub hue_max: f32,
    /// Additive saturation and value shift bound.
    pub sv_max: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_max: 0.02,
            blur_max: 5,
            hue_max: 0.03,
            sv_max: 0.1,
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    let s = if max > 0.0 { c / max } else { 0.0 };
    [h / 6.0, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(1.0) * 6.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn motion_blur(img: &RgbImage, length: usize, angle: f32) -> RgbImage {
    let (w, h) = (img.width, img.height);
    let (dy, dx) = angle.sin_cos();
    let taps: Vec<(isize, isize)> = (0..=length)
        .map(|s| {
            let t = s as f32 - length as f32 / 2.0;
            ((t * dx).round() as isize, (t * dy).round() as isize)
        })
        .collect();
    let mut out = vec![0.0f32; img.data.len()];
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0.0f32; 3];
            for &(ox, oy) in &taps {
                let su = (u as isize + ox).clamp(0, w as isize - 1) as usize;
                let sv = (v as isize + oy).clamp(0, h as isize - 1) as usize;
                let p = img.pixel(sv * w + su);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
            let i = (v * w + u) * 3;
            for c in 0..3 {
                out[i + c] = acc[c] / taps.len() as f32;
            }
        }
    }
    RgbImage { width: w, height: h, data: out }
}

/// Randomly perturbed copy of `rgb`, deterministic per seed, clamped to `[0, 1]`.
pub fn augment_rgb(rgb: &RgbImage, cfg: &AugmentConfig, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = rng.random_range(0.0..=cfg.noise_max);
    let length = rng.random_range(0..=cfg.blur_max);
    let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let dh = rng.random_range(-cfg.hue_max..=cfg.hue_max);
    let ds = rng.random_range(-cfg.sv_max..=cfg.sv_max);
    let dv = rng.random_range(-cfg.sv_max..=cfg.sv_max);

    let mut out = if length > 0 { motion_blur(rgb, length, angle) } else { rgb.clone() };
    if dh != 0.0 || ds != 0.0 || dv != 0.0 {
        for px in out.data.chunks_exact_mut(3) {
            let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
            let c = hsv_to_rgb([h + dh, (s + ds).clamp(0.0, 1.0), (v + dv).clamp(0.0, 1.0)]);
            px.copy_from_slice(&c);
        }
    }
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for x in &mut out.data {
            *x += noise.sample(&mut rng);
        }
    }
    for x in &mut out.data {
        *x = x.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(seed: u64, w: usize, h: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_magnitudes_are_identity() {
        let img = random_image(1, 16, 12);
        let cfg = AugmentConfig {
            noise_max: 0.0,
            blur_max: 0,
            hue_max: 0.0,
            sv_max: 0.0,
        };
        assert_eq!(augment_rgb(&img, &cfg, 7), img);
    }

    #[test]
    fn hsv_round_trip() {
        let img = random_image(2, 20, 20);
        for px in img.data.chunks_exact(3) {
            let p = [px[0], px[1], px[2]];
            let q = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mean_change_is_bounded_by_maxima() {
        let cfg = AugmentConfig {
            blur_max: 0,
            ..AugmentConfig::default()
        };
        // A hue rotation by a moves a channel by at most 6·a·chroma.
        let bound = cfg.noise_max + 6.0 * cfg.hue_max + 2.0 * cfg.sv_max;
        for seed in 0..20 {
            let img = random_image(100 + seed, 32, 24);
            let out = augment_rgb(&img, &cfg, seed);
            let mad: f32 =
                img.data.iter().zip(&out.data).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.data.len() as f32;
            assert!(mad <= bound, "seed {seed}: {mad} > {bound}");
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = RgbImage::filled(10, 10, [0.2, 0.4, 0.6]);
        let out = motion_blur(&img, 5, 0.7);
        for (a, b) in img.data.iter().zip(&out.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn output_stays_in_unit_range(seed in 0u64..10_000) {
            let img = random_image(seed, 12, 9);
            let out = augment_rgb(&img, &AugmentConfig::default(), seed);
            prop_assert!(out.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
