//! Nearest-valid-neighbor inpainting, the reference point for learned
//! completion.

use crate::image::DepthImage;

/// Fills every zero pixel with the depth of the nearest non-zero pixel in
/// Euclidean pixel distance; ties go to the smaller flat index. A map with no
/// valid pixel is returned unchanged.
pub fn nearest_valid_fill(depth: &DepthImage) -> DepthImage {
    let (w, h) = (depth.width as isize, depth.height as isize);
    let mut out = depth.clone();
    if !depth.data.iter().any(|&d| d > 0.0) {
        return out;
    }
    for y in 0..h {
        for x in 0..w {
            let i = (y * w + x) as usize;
            if depth.data[i] > 0.0 {
                continue;
            }
            let mut best: Option<(isize, usize)> = None;
            let mut ring = 1isize;
            loop {
                // Once a candidate is known, rings beyond its distance cannot win.
                if let Some((d2, _)) = best {
                    if (ring - 1) * (ring - 1) > d2 {
                        break;
                    }
                }
                if ring > w.max(h) {
                    break;
                }
                for dy in -ring..=ring {
                    for dx in -ring..=ring {
                        if dx.abs() != ring && dy.abs() != ring {
                            continue;
                        }
                        let (sx, sy) = (x + dx, y + dy);
                        if sx < 0 || sy < 0 || sx >= w || sy >= h {
                            continue;
                        }
                        let j = (sy * w + sx) as usize;
                        if depth.data[j] <= 0.0 {
                            continue;
                        }
                        let d2 = dx * dx + dy * dy;
                        if best.is_none_or(|(bd, bj)| d2 < bd || (d2 == bd && j < bj)) {
                            best = Some((d2, j));
                        }
                    }
                }
                ring += 1;
            }
            if let Some((_, j)) = best {
                out.data[i] = depth.data[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(depth: &DepthImage) -> DepthImage {
        let w = depth.width;
        let mut out = depth.clone();
        for i in 0..depth.data.len() {
            if depth.data[i] > 0.0 {
                continue;
            }
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            let best = (0..depth.data.len())
                .filter(|&j| depth.data[j] > 0.0)
                .min_by_key(|&j| {
                    let (dx, dy) = ((j % w) as isize - x, (j / w) as isize - y);
                    (dx * dx + dy * dy, j)
                });
            if let Some(j) = best {
                out.data[i] = depth.data[j];
            }
        }
        out
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..15));
            let p = rng.random_range(0.02..0.9);
            let data = (0..w * h)
                .map(|_| if rng.random_bool(p) { rng.random_range(0.3..1.0) } else { 0.0 })
                .collect();
            let d = DepthImage::new(w, h, data).unwrap();
            assert_eq!(nearest_valid_fill(&d), brute(&d));
        }
    }

    #[test]
    fn empty_map_stays_empty() {
        let d = DepthImage::zeros(5, 4);
        assert_eq!(nearest_valid_fill(&d), d);
    }
}
