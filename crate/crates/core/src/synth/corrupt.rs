//! Sensor-style depth corruption.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::{Rendering, Surface};
use super::SynthConfig;
use crate::image::DepthImage;

/// Removes all glass depth, drops opaque-object pixels independently with
/// probability `cfg.opaque_dropout`, and punches elliptical holes into the
/// support plane. Surviving pixels keep their exact ground-truth value.
pub fn corrupt_depth(r: &Rendering, cfg: &SynthConfig, seed: u64) -> DepthImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (r.depth.width, r.depth.height);
    let mut out = r.depth.clone();
    for i in 0..out.data.len() {
        match r.surface[i] {
            _ if r.transparent.data[i] => out.data[i] = 0.0,
            Surface::Object(_) => {
                if rng.random_bool(cfg.opaque_dropout) {
                    out.data[i] = 0.0;
                }
            }
            _ => {}
        }
    }
    let holes = rng.random_range(cfg.holes_min..=cfg.holes_max);
    for _ in 0..holes {
        let cu = rng.random_range(0.0..w as f32);
        let cv = rng.random_range(0.0..h as f32);
        let ra = rng.random_range(cfg.hole_radius_min..=cfg.hole_radius_max);
        let rb = rng.random_range(cfg.hole_radius_min..=cfg.hole_radius_max);
        let angle: f32 = rng.random_range(0.0..std::f32::consts::PI);
        let (s, c) = angle.sin_cos();
        for v in 0..h {
            for u in 0..w {
                let (du, dv) = (u as f32 - cu, v as f32 - cv);
                let (x, y) = (c * du + s * dv, -s * du + c * dv);
                let i = v * w + u;
                if (x / ra).powi(2) + (y / rb).powi(2) <= 1.0 && r.surface[i] == Surface::Plane {
                    out.data[i] = 0.0;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::{Mask, RgbImage};

    fn labelled(surface: Vec<Surface>, transparent: Vec<bool>, w: usize, h: usize) -> Rendering {
        Rendering {
            rgb: RgbImage::filled(w, h, [0.5; 3]),
            depth: DepthImage {
                width: w,
                height: h,
                data: (0..w * h).map(|i| 0.5 + i as f32 * 1e-6).collect(),
            },
            surface,
            transparent: Mask { width: w, height: h, data: transparent },
        }
    }

    #[test]
    fn opaque_dropout_rate_matches_configuration() {
        let (w, h) = (1000, 1000);
        let r = labelled(vec![Surface::Object(0); w * h], vec![false; w * h], w, h);
        let cfg = SynthConfig::default();
        let out = corrupt_depth(&r, &cfg, 9);
        let dropped = out.data.iter().filter(|&&d| d == 0.0).count() as f64 / (w * h) as f64;
        assert!((dropped - 0.1).abs() <= 0.01, "rate {dropped}");
    }

    #[test]
    fn survivors_unchanged_and_glass_removed() {
        let (w, h) = (40, 30);
        let surface: Vec<Surface> = (0..w * h)
            .map(|i| match i % 3 {
                0 => Surface::Plane,
                1 => Surface::Object(0),
                _ => Surface::Object(1),
            })
            .collect();
        let transparent: Vec<bool> = (0..w * h).map(|i| i % 3 == 2).collect();
        let r = labelled(surface, transparent, w, h);
        for seed in 0..10 {
            let out = corrupt_depth(&r, &SynthConfig::default(), seed);
            for i in 0..w * h {
                if r.transparent.data[i] {
                    assert_eq!(out.data[i], 0.0);
                } else if out.data[i] != 0.0 {
                    assert_eq!(out.data[i], r.depth.data[i]);
                }
            }
        }
    }

    #[test]
    fn holes_only_touch_the_plane() {
        let (w, h) = (30, 30);
        let surface: Vec<Surface> = (0..w * h)
            .map(|i| if i % 2 == 0 { Surface::Plane } else { Surface::Nothing })
            .collect();
        let r = labelled(surface, vec![false; w * h], w, h);
        let cfg = SynthConfig {
            holes_min: 4,
            ..SynthConfig::default()
        };
        let out = corrupt_depth(&r, &cfg, 3);
        assert!((0..w * h).filter(|i| i % 2 == 1).all(|i| out.data[i] > 0.0));
        assert!((0..w * h).any(|i| out.data[i] == 0.0));
    }
}
