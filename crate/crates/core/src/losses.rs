//! Training objectives: position L1, terminating cross-entropy, surface
//! normal cosine distance, their weighted sum, and hard-negative selection.
//!
//! Every loss exists twice: a plain `f64` evaluation used for reporting and
//! as a reference, and a graph version (`*_graph`) that training
//! differentiates.

use crate::camera::{estimate_normals, CameraIntrinsics, OrganizedPointCloud};
use crate::error::{contract, Error, Result};
use crate::geom::Vec3;
use crate::image::DepthImage;
use crate::lidf::{CandidateSet, RayBatch};
use crate::nn::{Graph, Var};

/// Training stage a weight preset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossStage {
    Stage1,
    RefineEarly,
    RefineLate,
}
text_enum!(LossStage { Stage1 => "stage1", RefineEarly => "refine-early", RefineLate => "refine-late" });

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub pos: f64,
    pub prob: f64,
    pub sn: f64,
    pub stage: LossStage,
}

impl LossWeights {
    pub fn for_stage(stage: LossStage) -> Self {
        let (pos, prob, sn) = match stage {
            LossStage::Stage1 => (100.0, 0.5, 10.0),
            LossStage::RefineEarly => (100.0, 0.0, 10.0),
            LossStage::RefineLate => (20.0, 0.0, 2.0),
        };
        Self { pos, prob, sn, stage }
    }

    /// Rejects negative or non-finite weights, and a non-zero probability
    /// weight outside stage 1.
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("pos", self.pos), ("prob", self.prob), ("sn", self.sn)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be finite and non-negative")));
            }
        }
        if self.stage != LossStage::Stage1 && self.prob != 0.0 {
            return Err(Error::Config(format!("{} stage has no probability loss", self.stage)));
        }
        Ok(())
    }
}

/// Values of the three loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub pos: f64,
    pub prob: f64,
    pub sn: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("L_pos", c.pos), ("L_prob", c.prob), ("L_sn", c.sn)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    Ok(w.pos * c.pos + w.prob * c.prob + w.sn * c.sn)
}

/// Mean absolute depth error over `mask`.
pub fn loss_pos(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(contract(format!(
            "loss_pos: lengths {} / {} / {}",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for i in 0..pred.len() {
        if mask[i] {
            sum += (pred[i] as f64 - gt[i] as f64).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(contract("loss_pos: empty mask"));
    }
    Ok(sum / n as f64)
}

/// Mean softmax cross-entropy over labeled rays. Ray `r` owns
/// `logits[offsets[r]..offsets[r + 1]]`; `targets[r]` indexes into that range.
/// Returns 0 when no ray is labeled.
pub fn loss_prob(logits: &[f32], offsets: &[usize], targets: &[Option<usize>]) -> Result<f64> {
    if offsets.len() != targets.len() + 1 || offsets.last() != Some(&logits.len()) {
        return Err(contract("loss_prob: offsets do not match logits and targets"));
    }
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let l = &logits[offsets[r]..offsets[r + 1]];
        if t >= l.len() {
            return Err(contract(format!("loss_prob: target {t} of a ray with {} candidates", l.len())));
        }
        let mx = l.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = mx + l.iter().map(|&x| (x as f64 - mx).exp()).sum::<f64>().ln();
        sum += lse - l[t] as f64;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Mean `1 − n_pred·n_gt` over masked pixels where both normals exist.
/// Returns 0 when no pixel qualifies.
pub fn loss_sn(pred: &OrganizedPointCloud, gt: &OrganizedPointCloud, mask: &[bool]) -> Result<f64> {
    let n = pred.width * pred.height;
    if (pred.width, pred.height) != (gt.width, gt.height) || mask.len() != n {
        return Err(contract("loss_sn: cloud or mask shapes differ"));
    }
    let (np, ng) = (estimate_normals(pred), estimate_normals(gt));
    let (mut sum, mut count) = (0.0f64, 0usize);
    for i in 0..n {
        if mask[i] && np.valid[i] && ng.valid[i] {
            let (a, b) = (np.normals[i], ng.normals[i]);
            let dot = a.x as f64 * b.x as f64 + a.y as f64 * b.y as f64 + a.z as f64 * b.z as f64;
            sum += 1.0 - dot;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Selects the `⌈fraction·N⌉` largest errors; ties go to the lower index.
pub fn hard_negative_mask(errors: &[f32], fraction: f64) -> Result<Vec<bool>> {
    if errors.is_empty() {
        return Err(contract("hard_negative_mask: no errors"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(contract(format!("hard_negative_mask: fraction {fraction} outside (0, 1]")));
    }
    let k = ((fraction * errors.len() as f64).ceil() as usize).min(errors.len());
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    let mut mask = vec![false; errors.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    Ok(mask)
}

/// Target pair of each ray, as an index into the ray's pairs.
///
/// The pair whose `[t_in, t_out]` holds the ground-truth hit is chosen;
/// otherwise the pair with the nearest segment midpoint, if that midpoint
/// lies within 1.5 voxel diagonals. Rays without ground truth stay unlabeled.
pub fn label_targets(batch: &RayBatch, gt_depth: &[f32], diagonal: f32) -> Vec<Option<usize>> {
    (0..batch.num_rays())
        .map(|r| {
            let z = gt_depth[r];
            if z <= 0.0 {
                return None;
            }
            let pairs = batch.pairs_of(r);
            let t = z / batch.rays[r].dir.z;
            if let Some(i) = pairs.iter().position(|p| p.t_in <= t && t <= p.t_out) {
                return Some(i);
            }
            let (i, dist) = pairs
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (0.5 * (p.t_in + p.t_out) - t).abs()))
                .min_by(|a, b| a.1.total_cmp(&b.1))?;
            (dist <= 1.5 * diagonal).then_some(i)
        })
        .collect()
}

/// Maps pair targets to candidate targets (relative to each ray's candidate
/// range). With several samples per pair, the sample nearest the
/// ground-truth hit wins.
pub fn candidate_targets(
    batch: &RayBatch,
    cands: &CandidateSet,
    pair_targets: &[Option<usize>],
    gt_depth: &[f32],
    samples: usize,
) -> Vec<Option<usize>> {
    (0..batch.num_rays())
        .map(|r| {
            let tp = pair_targets[r]?;
            let pair_index = batch.pair_offsets[r] + tp;
            let pair = &batch.pairs[pair_index];
            let t = gt_depth[r] / batch.rays[r].dir.z;
            let (a, b) = (cands.offsets[r], cands.offsets[r + 1]);
            (a..b)
                .filter(|&c| cands.pair[c] == pair_index)
                .min_by(|&x, &y| {
                    let pos = |c: usize| {
                        let f = crate::lidf::sample_fraction(cands.sample[c], samples);
                        (pair.t_in + f * pair.segment_length() - t).abs()
                    };
                    pos(x).total_cmp(&pos(y))
                })
                .map(|c| c - a)
        })
        .collect()
}

/// Graph L1 loss over the rows `rows` of the column `pred`.
pub fn loss_pos_graph(g: &mut Graph, pred: Var, gt: &[f32], rows: &[usize]) -> Result<Var> {
    if rows.is_empty() {
        return Err(contract("loss_pos: empty mask"));
    }
    let p = g.gather_rows(pred, rows.to_vec());
    let t = g.constant_column(rows.iter().map(|&r| gt[r]).collect());
    let d = g.sub(p, t);
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Graph softmax cross-entropy; `None` when no ray is labeled.
pub fn loss_prob_graph(g: &mut Graph, logits: Var, offsets: &[usize], targets: &[Option<usize>]) -> Option<Var> {
    let idx: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter_map(|(r, t)| t.map(|t| offsets[r] + t))
        .collect();
    if idx.is_empty() {
        return None;
    }
    let ls = g.segment_log_softmax(logits, offsets.to_vec());
    let picked = g.gather_rows(ls, idx);
    let m = g.mean(picked);
    Some(g.scale(m, -1.0))
}

/// Graph binary cross-entropy for independent per-candidate probabilities:
/// the target candidate is labeled 1, the others 0, summed per ray and
/// averaged over labeled rays. `None` when no ray is labeled.
pub fn loss_prob_sigmoid_graph(
    g: &mut Graph,
    logits: Var,
    offsets: &[usize],
    targets: &[Option<usize>],
) -> Option<Var> {
    let labeled: Vec<usize> = (0..targets.len()).filter(|&r| targets[r].is_some()).collect();
    if labeled.is_empty() {
        return None;
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for &r in &labeled {
        let t = targets[r].unwrap();
        for c in offsets[r]..offsets[r + 1] {
            rows.push(c);
            y.push(if c - offsets[r] == t { 1.0 } else { 0.0 });
        }
    }
    // BCE(l, y) = softplus(l) − y·l
    let l = g.gather_rows(logits, rows);
    let sp = g.softplus(l);
    let y = g.constant_column(y);
    let yl = g.mul(y, l);
    let per = g.sub(sp, yl);
    let total = g.sum(per);
    Some(g.scale(total, 1.0 / labeled.len() as f32))
}

/// Graph surface-normal loss.
///
/// `depth` is a `[H·W, 1]` column holding the full depth map (ground truth
/// with predictions scattered in). Normals follow the same central
/// differences as [`estimate_normals`]; the loss averages `1 − n·n_gt` over
/// `pixels` whose normals exist in both maps. `None` when no pixel qualifies.
pub fn loss_sn_graph(
    g: &mut Graph,
    depth: Var,
    k: &CameraIntrinsics,
    gt_cloud: &OrganizedPointCloud,
    pixels: &[usize],
) -> Result<Option<Var>> {
    let (w, h) = (k.width, k.height);
    if g.dims(depth) != (w * h, 1) || (gt_cloud.width, gt_cloud.height) != (w, h) {
        return Err(contract("loss_sn: depth column or cloud does not match the intrinsics"));
    }
    let gt_normals = estimate_normals(gt_cloud);
    let z = g.data(depth).to_vec();
    let ray = |i: usize| Vec3::new(((i % w) as f32 - k.cx) / k.fx, ((i / w) as f32 - k.cy) / k.fy, 1.0);
    let point = |i: usize| ray(i) * z[i];

    let mut centers = Vec::new();
    let mut nbr: [Vec<usize>; 4] = Default::default();
    let mut flips = Vec::new();
    let mut gt_n = [Vec::new(), Vec::new(), Vec::new()];
    for &i in pixels {
        let (u, v) = (i % w, i / w);
        if !gt_normals.valid[i] || u == 0 || v == 0 || u + 1 >= w || v + 1 >= h {
            continue;
        }
        let quad = [i + 1, i - 1, i + w, i - w];
        if z[i] <= 0.0 || quad.iter().any(|&j| z[j] <= 0.0) {
            continue;
        }
        let a = point(quad[0]) - point(quad[1]);
        let b = point(quad[2]) - point(quad[3]);
        let n = a.cross(b);
        if (n.norm() as f64) < crate::camera::NORMAL_EPS {
            continue;
        }
        flips.push(if n.dot(point(i)) > 0.0 { -1.0 } else { 1.0 });
        centers.push(i);
        for (s, &j) in nbr.iter_mut().zip(&quad) {
            s.push(j);
        }
        let gn = gt_normals.normals[i];
        gt_n[0].push(gn.x);
        gt_n[1].push(gn.y);
        gt_n[2].push(gn.z);
    }
    if centers.is_empty() {
        return Ok(None);
    }

    // Coordinate `axis` of the neighbor points in slot `s`.
    let coord = |g: &mut Graph, s: usize, axis: usize| -> Var {
        let zs = g.gather_rows(depth, nbr[s].clone());
        if axis == 2 {
            return zs;
        }
        let f: Vec<f32> = nbr[s].iter().map(|&j| ray(j)[axis]).collect();
        let f = g.constant_column(f);
        g.mul(zs, f)
    };
    let mut a = Vec::with_capacity(3);
    let mut b = Vec::with_capacity(3);
    for axis in 0..3 {
        let (r, l) = (coord(g, 0, axis), coord(g, 1, axis));
        a.push(g.sub(r, l));
        let (d, u) = (coord(g, 2, axis), coord(g, 3, axis));
        b.push(g.sub(d, u));
    }
    let cross = |g: &mut Graph, i: usize, j: usize| {
        let p = g.mul(a[i], b[j]);
        let q = g.mul(a[j], b[i]);
        g.sub(p, q)
    };
    let n = [cross(g, 1, 2), cross(g, 2, 0), cross(g, 0, 1)];
    let mut sq = g.mul(n[0], n[0]);
    for c in &n[1..] {
        let s = g.mul(*c, *c);
        sq = g.add(sq, s);
    }
    let len = g.sqrt(sq);
    let mut dot: Option<Var> = None;
    for (c, gn) in n.iter().zip(gt_n) {
        let gn: Vec<f32> = gn.iter().zip(&flips).map(|(x, f)| x * f).collect();
        let gn = g.constant_column(gn);
        let t = g.mul(*c, gn);
        dot = Some(match dot {
            Some(d) => g.add(d, t),
            None => t,
        });
    }
    let cos = g.div(dot.unwrap(), len);
    let m = g.mean(cos);
    let neg = g.scale(m, -1.0);
    Ok(Some(g.add_scalar(neg, 1.0)))
}

/// Full depth column for [`loss_sn_graph`]: `gt` with `pred` rows scattered
/// to `pixels`.
pub fn scatter_depth(g: &mut Graph, gt: &DepthImage, pred: Var, pixels: &[usize]) -> Var {
    let base = g.constant_column(gt.data.clone());
    g.scatter_rows(base, pixels.to_vec(), pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::backproject;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stage_presets() {
        let w = LossWeights::for_stage(LossStage::Stage1);
        assert_eq!((w.pos, w.prob, w.sn), (100.0, 0.5, 10.0));
        let w = LossWeights::for_stage(LossStage::RefineEarly);
        assert_eq!((w.pos, w.prob, w.sn), (100.0, 0.0, 10.0));
        let w = LossWeights::for_stage(LossStage::RefineLate);
        assert_eq!((w.pos, w.prob, w.sn), (20.0, 0.0, 2.0));
        let bad = LossWeights {
            prob: 0.5,
            ..LossWeights::for_stage(LossStage::RefineLate)
        };
        assert!(bad.validate().is_err());
        assert_eq!("refine-early".parse::<LossStage>().unwrap(), LossStage::RefineEarly);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::for_stage(LossStage::Stage1);
        let c = LossComponents { pos: 0.01, prob: 0.7, sn: 0.05 };
        assert!((total_loss(&c, &w).unwrap() - 1.85).abs() < 1e-12);
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let zero = LossWeights { pos: 0.0, prob: 0.0, sn: 0.0, stage: LossStage::Stage1 };
        assert_eq!(total_loss(&c, &zero).unwrap(), 0.0);
        let nan = LossComponents { sn: f64::NAN, ..c };
        let err = total_loss(&nan, &w).unwrap_err().to_string();
        assert!(err.contains("L_sn"), "{err}");
    }

    #[test]
    fn loss_pos_examples() {
        assert_eq!(loss_pos(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        assert_eq!(loss_pos(&[2.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.5);
        assert_eq!(loss_pos(&[2.0, 9.0], &[2.0, 1.0], &[true, false]).unwrap(), 0.0);
        assert!(loss_pos(&[1.0], &[1.0], &[false]).is_err());
    }

    #[test]
    fn loss_prob_examples() {
        let v = loss_prob(&[0.0, 0.0], &[0, 2], &[Some(0)]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = loss_prob(&[60.0, 0.0], &[0, 2], &[Some(0)]).unwrap();
        assert!(v < 1e-20);
        assert_eq!(loss_prob(&[1.0, 2.0], &[0, 2], &[None]).unwrap(), 0.0);
    }

    #[test]
    fn loss_prob_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rays = rng.random_range(1..6);
            let mut offsets = vec![0];
            let mut logits = Vec::new();
            let mut targets = Vec::new();
            for _ in 0..rays {
                let n = rng.random_range(1..7);
                for _ in 0..n {
                    logits.push(rng.random_range(-5.0f32..5.0));
                }
                offsets.push(logits.len());
                targets.push(rng.random_bool(0.8).then(|| rng.random_range(0..n)));
            }
            let mut want = 0.0f64;
            let mut count = 0;
            for r in 0..rays {
                if let Some(t) = targets[r] {
                    let l = &logits[offsets[r]..offsets[r + 1]];
                    let z: f64 = l.iter().map(|&x| (x as f64).exp()).sum();
                    want += -((l[t] as f64).exp() / z).ln();
                    count += 1;
                }
            }
            let want = if count == 0 { 0.0 } else { want / count as f64 };
            assert!((loss_prob(&logits, &offsets, &targets).unwrap() - want).abs() < 1e-6);

            let mut g = Graph::new();
            let lv = g.constant_column(logits.clone());
            let graph = loss_prob_graph(&mut g, lv, &offsets, &targets).map_or(0.0, |v| g.scalar(v) as f64);
            assert!((graph - want).abs() < 1e-5, "{graph} vs {want}");
        }
    }

    #[test]
    fn sigmoid_bce_matches_formula() {
        let logits = vec![0.3f32, -1.2, 2.0, 0.5, -0.5];
        let offsets = vec![0, 3, 5];
        let targets = vec![Some(2), Some(0)];
        let mut g = Graph::new();
        let l = g.constant_column(logits.clone());
        let loss = loss_prob_sigmoid_graph(&mut g, l, &offsets, &targets).unwrap();
        let v = g.scalar(loss) as f64;
        let bce = |x: f32, y: f64| {
            let p = 1.0 / (1.0 + (-(x as f64)).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        };
        let want = (bce(0.3, 0.0) + bce(-1.2, 0.0) + bce(2.0, 1.0) + bce(0.5, 1.0) + bce(-0.5, 0.0)) / 2.0;
        assert!((v - want).abs() < 1e-5);
    }

    fn plane_depth(k: &CameraIntrinsics, tilt: f32) -> DepthImage {
        // Plane through (0, 0, 1) with normal (0, sin, cos).
        let (s, c) = tilt.sin_cos();
        let data = (0..k.height)
            .flat_map(|v| {
                let b = (v as f32 - k.cy) / k.fy;
                (0..k.width).map(move |_| c / (s * b + c))
            })
            .collect();
        DepthImage::new(k.width, k.height, data).unwrap()
    }

    #[test]
    fn loss_sn_examples() {
        let k = CameraIntrinsics::centered(16, 12);
        let flat = backproject(&plane_depth(&k, 0.0), &k).unwrap();
        let tilted = backproject(&plane_depth(&k, 0.3), &k).unwrap();
        let mask = vec![true; 16 * 12];
        assert_eq!(loss_sn(&flat, &flat, &mask).unwrap(), 0.0);
        let v = loss_sn(&tilted, &flat, &mask).unwrap();
        assert!((v - (1.0 - 0.3f64.cos())).abs() < 1e-5, "{v}");

        // Points mirrored through the camera center face the other way.
        let opposed = OrganizedPointCloud {
            points: flat.points.iter().map(|&p| -p).collect(),
            ..flat.clone()
        };
        let v = loss_sn(&opposed, &flat, &mask).unwrap();
        assert!((v - 2.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn loss_sn_graph_matches_reference() {
        let k = CameraIntrinsics::centered(16, 12);
        let gt = plane_depth(&k, 0.2);
        let mut pred = gt.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pixels: Vec<usize> = (0..16 * 12).filter(|_| rng.random_bool(0.4)).collect();
        for &i in &pixels {
            pred.data[i] += rng.random_range(-0.02..0.02);
        }
        let mask: Vec<bool> = (0..16 * 12).map(|i| pixels.contains(&i)).collect();
        let gt_cloud = backproject(&gt, &k).unwrap();
        let want = loss_sn(&backproject(&pred, &k).unwrap(), &gt_cloud, &mask).unwrap();

        let mut g = Graph::new();
        let p = g.constant_column(pixels.iter().map(|&i| pred.data[i]).collect());
        let full = scatter_depth(&mut g, &gt, p, &pixels);
        let v = loss_sn_graph(&mut g, full, &k, &gt_cloud, &pixels).unwrap().unwrap();
        assert!((g.scalar(v) as f64 - want).abs() < 1e-5, "{} vs {want}", g.scalar(v));
    }

    #[test]
    fn hard_negative_examples() {
        let e: Vec<f32> = (1..=10).map(|x| x as f32).collect();
        let m = hard_negative_mask(&e, 0.1).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[9]);
        let m = hard_negative_mask(&[0.5; 25], 0.1).unwrap();
        assert_eq!(m, (0..25).map(|i| i < 3).collect::<Vec<_>>());
        assert!(hard_negative_mask(&[], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn hard_negatives_dominate(errors in proptest::collection::vec(0.0f32..10.0, 10..200)) {
            let m = hard_negative_mask(&errors, 0.1).unwrap();
            let sel = errors.iter().zip(&m).filter(|p| *p.1).map(|p| *p.0).fold(f32::INFINITY, f32::min);
            let rest = errors.iter().zip(&m).filter(|p| !*p.1).map(|p| *p.0).fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(sel >= rest);
            prop_assert_eq!(m.iter().filter(|&&b| b).count(), (errors.len() as f64 * 0.1).ceil() as usize);
        }

        #[test]
        fn loss_pos_ignores_order(v in proptest::collection::vec((0.1f32..2.0, 0.1f32..2.0), 1..50), seed in 0u64..100) {
            let (p, t): (Vec<f32>, Vec<f32>) = v.iter().copied().unzip();
            let mask = vec![true; p.len()];
            let a = loss_pos(&p, &t, &mask).unwrap();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let p2: Vec<f32> = idx.iter().map(|&i| p[i]).collect();
            let t2: Vec<f32> = idx.iter().map(|&i| t[i]).collect();
            prop_assert!((loss_pos(&p2, &t2, &mask).unwrap() - a).abs() < 1e-12);
        }
    }
}
