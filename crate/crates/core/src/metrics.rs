//! Depth accuracy over a pixel mask: RMSE, REL, MAE and δ-threshold
//! percentages, computed in `f64`.

use std::fmt;

use crate::error::{contract, Result};
use crate::image::{DepthImage, Mask};

/// Evaluation resolution (width, height).
pub const EVAL_SIZE: (usize, usize) = (256, 144);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub rel: f64,
    pub mae: f64,
    pub delta_105: f64,
    pub delta_110: f64,
    pub delta_125: f64,
    pub count: usize,
    /// Evaluated pixels whose prediction was 0 (no depth produced).
    pub invalid: usize,
}

impl MetricReport {
    /// `rmse=… rel=… mae=… d105=… d110=… d125=… n=…`
    pub fn record(&self) -> String {
        format!(
            "rmse={:.6} rel={:.6} mae={:.6} d105={:.3} d110={:.3} d125={:.3} n={}",
            self.rmse, self.rel, self.mae, self.delta_105, self.delta_110, self.delta_125, self.count
        )
    }

    /// Parses a line produced by [`record`](Self::record). `invalid` is not
    /// part of the record and reads back as 0.
    pub fn parse_record(line: &str) -> Option<Self> {
        let mut r = MetricReport {
            rmse: 0.0,
            rel: 0.0,
            mae: 0.0,
            delta_105: 0.0,
            delta_110: 0.0,
            delta_125: 0.0,
            count: 0,
            invalid: 0,
        };
        let mut seen = 0;
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=')?;
            match k {
                "n" => r.count = v.parse().ok()?,
                _ => {
                    let x: f64 = v.parse().ok()?;
                    match k {
                        "rmse" => r.rmse = x,
                        "rel" => r.rel = x,
                        "mae" => r.mae = x,
                        "d105" => r.delta_105 = x,
                        "d110" => r.delta_110 = x,
                        "d125" => r.delta_125 = x,
                        _ => return None,
                    }
                }
            }
            seen += 1;
        }
        (seen == 7).then_some(r)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>10}", "metric", "value")?;
        writeln!(f, "{:<8} {:>10.4}", "RMSE", self.rmse)?;
        writeln!(f, "{:<8} {:>10.4}", "REL", self.rel)?;
        writeln!(f, "{:<8} {:>10.4}", "MAE", self.mae)?;
        writeln!(f, "{:<8} {:>10.2}", "δ1.05", self.delta_105)?;
        writeln!(f, "{:<8} {:>10.2}", "δ1.10", self.delta_110)?;
        writeln!(f, "{:<8} {:>10.2}", "δ1.25", self.delta_125)?;
        write!(f, "{:<8} {:>10}  ({} without prediction)", "pixels", self.count, self.invalid)
    }
}

/// Running sums over any number of images; pixels are pooled.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sq: f64,
    rel: f64,
    abs: f64,
    d: [usize; 3],
    count: usize,
    invalid: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, pred: &DepthImage, gt: &DepthImage, mask: &Mask) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) || (mask.width, mask.height) != (gt.width, gt.height) {
            return Err(contract("metrics: prediction, ground truth and mask sizes differ"));
        }
        for i in 0..gt.data.len() {
            if !mask.data[i] {
                continue;
            }
            let (d, t) = (pred.data[i] as f64, gt.data[i] as f64);
            if !(t > 0.0) {
                return Err(contract(format!("metrics: ground truth {t} at masked pixel {i}")));
            }
            let e = d - t;
            self.sq += e * e;
            self.abs += e.abs();
            self.rel += e.abs() / t;
            let ratio = if d > 0.0 { (d / t).max(t / d) } else { f64::INFINITY };
            for (k, x) in [1.05, 1.10, 1.25].into_iter().enumerate() {
                if ratio < x {
                    self.d[k] += 1;
                }
            }
            if d <= 0.0 {
                self.invalid += 1;
            }
            self.count += 1;
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.count == 0 {
            return Err(contract("metrics: empty mask"));
        }
        let n = self.count as f64;
        Ok(MetricReport {
            rmse: (self.sq / n).sqrt(),
            rel: self.rel / n,
            mae: self.abs / n,
            delta_105: 100.0 * self.d[0] as f64 / n,
            delta_110: 100.0 * self.d[1] as f64 / n,
            delta_125: 100.0 * self.d[2] as f64 / n,
            count: self.count,
            invalid: self.invalid,
        })
    }
}

pub fn compute_metrics(pred: &DepthImage, gt: &DepthImage, mask: &Mask) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, mask)?;
    acc.finish()
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64) as usize).min(src_len - 1)
}

fn resize_nearest<T: Copy>(data: &[T], w: usize, h: usize, tw: usize, th: usize) -> Vec<T> {
    let xs: Vec<usize> = (0..tw).map(|x| nearest_index(x, w, tw)).collect();
    (0..th)
        .flat_map(|y| {
            let row = nearest_index(y, h, th) * w;
            xs.iter().map(move |&x| data[row + x])
        })
        .collect()
}

pub fn resize_depth(map: &DepthImage, width: usize, height: usize) -> DepthImage {
    DepthImage {
        width,
        height,
        data: resize_nearest(&map.data, map.width, map.height, width, height),
    }
}

pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Mask {
    Mask {
        width,
        height,
        data: resize_nearest(&mask.data, mask.width, mask.height, width, height),
    }
}

/// Adds one image to `acc` after resizing everything to `size`.
pub fn accumulate_resized(
    acc: &mut MetricAccumulator,
    pred: &DepthImage,
    gt: &DepthImage,
    mask: &Mask,
    size: (usize, usize),
) -> Result<()> {
    let (w, h) = size;
    acc.add(&resize_depth(pred, w, h), &resize_depth(gt, w, h), &resize_mask(mask, w, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(data: Vec<f32>) -> DepthImage {
        DepthImage::new(data.len(), 1, data).unwrap()
    }

    fn all(n: usize) -> Mask {
        Mask::full(n, 1, true)
    }

    #[test]
    fn perfect_prediction() {
        let g = img(vec![0.5, 0.7, 1.1]);
        let r = compute_metrics(&g, &g, &all(3)).unwrap();
        assert_eq!((r.rmse, r.rel, r.mae), (0.0, 0.0, 0.0));
        assert_eq!((r.delta_105, r.delta_110, r.delta_125), (100.0, 100.0, 100.0));
    }

    #[test]
    fn two_pixel_example() {
        let r = compute_metrics(&img(vec![2.0, 2.0]), &img(vec![1.0, 2.0]), &all(2)).unwrap();
        assert_eq!(r.rmse, 0.5f64.sqrt());
        assert_eq!(r.rel, 0.5);
        assert_eq!(r.mae, 0.5);
        assert_eq!((r.delta_105, r.delta_110, r.delta_125), (50.0, 50.0, 50.0));
        assert_eq!(r.count, 2);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = img(vec![1.0]);
        assert!(compute_metrics(&g, &g, &Mask::full(1, 1, false)).is_err());
    }

    #[test]
    fn zero_prediction_fails_every_threshold() {
        let r = compute_metrics(&img(vec![0.0, 1.0]), &img(vec![1.0, 1.0]), &all(2)).unwrap();
        assert_eq!(r.invalid, 1);
        assert_eq!(r.delta_125, 50.0);
        assert_eq!(r.rel, 0.5);
    }

    #[test]
    fn record_round_trip() {
        let r = compute_metrics(&img(vec![2.0, 2.0]), &img(vec![1.0, 2.0]), &all(2)).unwrap();
        let line = r.record();
        assert_eq!(line, "rmse=0.707107 rel=0.500000 mae=0.500000 d105=50.000 d110=50.000 d125=50.000 n=2");
        let back = MetricReport::parse_record(&line).unwrap();
        assert_eq!(back.count, 2);
        assert!((back.rmse - r.rmse).abs() < 1e-6);
    }

    #[test]
    fn resize_identity_and_constant_downscale() {
        let d = DepthImage::new(4, 2, (0..8).map(|x| x as f32).collect()).unwrap();
        assert_eq!(resize_depth(&d, 4, 2), d);
        let c = DepthImage::new(8, 6, vec![0.7; 48]).unwrap();
        assert!(resize_depth(&c, 4, 3).data.iter().all(|&x| x == 0.7));
        let m = Mask::new(3, 3, (0..9).map(|i| i % 2 == 0).collect()).unwrap();
        let r = resize_mask(&m, 256, 144);
        assert_eq!(r.data.len(), 256 * 144);
        assert!(r.data.iter().any(|&b| b) && r.data.iter().any(|&b| !b));
    }

    #[test]
    fn random_instances_match_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.random_range(1..300);
            let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
            let pred: Vec<f32> = gt.iter().map(|&t| t * rng.random_range(0.7..1.4)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            if !mask.iter().any(|&b| b) {
                continue;
            }
            let r = compute_metrics(&img(pred.clone()), &img(gt.clone()), &Mask::new(n, 1, mask.clone()).unwrap()).unwrap();
            let sel = |v: &[f32]| -> Vec<f64> { v.iter().zip(&mask).filter(|p| *p.1).map(|p| *p.0 as f64).collect() };
            let want = crate::oracles::metrics_by_formula(&sel(&pred), &sel(&gt));
            let got = [r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125];
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
            }
        }
    }

    proptest! {
        #[test]
        fn scaling_and_ordering(
            v in proptest::collection::vec((0.2f32..2.0, 0.5f32..1.5), 1..60),
            s in 0.25f32..4.0,
        ) {
            let gt: Vec<f32> = v.iter().map(|p| p.0).collect();
            let pred: Vec<f32> = v.iter().map(|p| p.0 * p.1).collect();
            let m = all(gt.len());
            let a = compute_metrics(&img(pred.clone()), &img(gt.clone()), &m).unwrap();
            prop_assert!(a.rmse >= a.mae - 1e-12 && a.mae >= 0.0);
            prop_assert!(a.delta_105 <= a.delta_110 && a.delta_110 <= a.delta_125);
            prop_assert!(a.delta_125 <= 100.0);
            let gs: Vec<f32> = gt.iter().map(|x| x * s).collect();
            let ps: Vec<f32> = pred.iter().map(|x| x * s).collect();
            let b = compute_metrics(&img(ps), &img(gs), &m).unwrap();
            prop_assert!((b.rmse - s as f64 * a.rmse).abs() <= 1e-5 * (1.0 + b.rmse));
            prop_assert!((b.mae - s as f64 * a.mae).abs() <= 1e-5 * (1.0 + b.mae));
            prop_assert!((b.rel - a.rel).abs() <= 1e-5);
        }

        #[test]
        fn unmasked_pixels_do_not_matter(noise in proptest::collection::vec(0.0f32..5.0, 6)) {
            let gt = img(vec![1.0, 0.5, 0.8, 1.2, 0.9, 0.6]);
            let mut pred = img(vec![1.1, 0.4, 0.8, 1.0, 0.9, 0.7]);
            let mask = Mask::new(6, 1, vec![true, false, true, false, true, false]).unwrap();
            let a = compute_metrics(&pred, &gt, &mask).unwrap();
            for i in [1, 3, 5] {
                pred.data[i] = noise[i];
            }
            prop_assert_eq!(compute_metrics(&pred, &gt, &mask).unwrap(), a);
        }
    }
}
