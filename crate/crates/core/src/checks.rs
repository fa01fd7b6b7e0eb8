//! Self-contained verification suites: pair generation against two
//! geometric oracles, finite-difference gradient checks of every trainable
//! path, and metrics against a formula oracle.
//!
//! Each suite returns [`CheckOutcome`]s so callers can print or assert them.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{backproject, CameraIntrinsics};
use crate::encoders::{roi_pool, FeatureMap, PointSet, PosEnc, RgbEncoder, VoxelPointNet, RGB_CHANNELS};
use crate::error::Result;
use crate::geom::Vec3;
use crate::image::{DepthImage, Mask, RgbImage};
use crate::lidf::{CompleteOptions, LidfConfig, PoolMode, QueryMode, RayBatch, SceneInput, Stage1Model};
use crate::losses::{loss_pos_graph, loss_prob_graph, loss_prob_sigmoid_graph, loss_sn_graph};
use crate::metrics::compute_metrics;
use crate::nn::{Graph, ParamList, Parameter, Tensor, Var};
use crate::oracles::{dda_crossings, dense_sampling_crossings, grad_check, metrics_by_formula, random_ray, Crossing};
use crate::refine::{RefineContext, RefineModel};
use crate::synth::{generate_sample, Sample, SynthConfig};
use crate::voxel::{generate_pairs, PairMethod, VoxelGrid, Workspace};

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<28} {} ({:.2} s)", self.name, self.detail, self.seconds)
    }
}

fn outcome(name: &str, start: Instant, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Compares [`generate_pairs`] with the dense-sampling and grid-walk oracles
/// on `rays` random rays for each of `grids` random occupancy grids.
pub fn geometry_oracles(rays: usize, grids: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_t, mut mismatches, mut compared) = (0.0f64, 0usize, 0usize);
    let mut first_failure = None;
    for gi in 0..grids {
        let n = rng.random_range(3..=12);
        let min = Vec3::new(
            rng.random_range(-0.6..-0.2),
            rng.random_range(-0.6..-0.2),
            rng.random_range(0.1..0.4),
        );
        let ext = Vec3::new(
            rng.random_range(0.4..1.2),
            rng.random_range(0.4..1.2),
            rng.random_range(0.4..1.2),
        );
        let ws = Workspace::new(min, min + ext).unwrap();
        let density = rng.random_range(0.15..0.6);
        let mut grid = VoxelGrid::empty(ws, n).unwrap();
        for v in 0..n * n * n {
            if rng.random_bool(density) {
                grid.insert(v, grid.voxel_center(v));
            }
        }
        for _ in 0..rays {
            let ray = random_ray(&mut rng, &ws);
            let pairs = generate_pairs(&ray, &grid);
            let occupied = |c: &&Crossing| grid.is_occupied(c.voxel);
            for (oracle, crossings) in [
                ("dense", dense_sampling_crossings(&ray, &ws, n)),
                ("dda", dda_crossings(&ray, &ws, n)),
            ] {
                let want: Vec<&Crossing> = crossings.iter().filter(occupied).collect();
                compared += 1;
                let same_voxels = want.len() == pairs.len() && want.iter().zip(&pairs).all(|(c, p)| c.voxel == p.voxel);
                if !same_voxels {
                    mismatches += 1;
                    first_failure.get_or_insert(format!(
                        "grid {gi} ({oracle}): {:?} vs {:?}",
                        want.iter().map(|c| c.voxel).collect::<Vec<_>>(),
                        pairs.iter().map(|p| p.voxel).collect::<Vec<_>>()
                    ));
                    continue;
                }
                for (c, p) in want.iter().zip(&pairs) {
                    worst_t = worst_t.max((c.t_in - p.t_in as f64).abs()).max((c.t_out - p.t_out as f64).abs());
                }
            }
        }
    }
    let passed = mismatches == 0 && worst_t <= 1e-4 && start.elapsed().as_secs_f64() < 10.0;
    let mut detail = format!(
        "{compared} ray/oracle comparisons, {mismatches} sequence mismatches, worst |dt| {worst_t:.2e}"
    );
    if let Some(f) = first_failure {
        detail.push_str(&format!("; first: {f}"));
    }
    outcome("geometry oracles", start, passed, detail)
}

/// Straight-formula metric oracle on `instances` random instances plus the
/// two-pixel hand example.
pub fn metric_oracle(instances: usize, seed: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..500);
        let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
        let pred: Vec<f32> = gt
            .iter()
            .map(|&t| if rng.random_bool(0.05) { 0.0 } else { t * rng.random_range(0.6..1.5) })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let r = compute_metrics(
            &DepthImage::new(n, 1, pred.clone()).unwrap(),
            &DepthImage::new(n, 1, gt.clone()).unwrap(),
            &Mask::new(n, 1, mask.clone()).unwrap(),
        )
        .unwrap();
        let sel = |v: &[f32]| -> Vec<f64> { v.iter().zip(&mask).filter(|p| *p.1).map(|p| *p.0 as f64).collect() };
        let want = metrics_by_formula(&sel(&pred), &sel(&gt));
        let got = [r.rmse, r.rel, r.mae, r.delta_105, r.delta_110, r.delta_125];
        for (a, b) in got.iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    let two = compute_metrics(
        &DepthImage::new(2, 1, vec![2.0, 2.0]).unwrap(),
        &DepthImage::new(2, 1, vec![1.0, 2.0]).unwrap(),
        &Mask::full(2, 1, true),
    )
    .unwrap();
    let exact = two.rmse == 0.5f64.sqrt()
        && two.rel == 0.5
        && two.mae == 0.5
        && [two.delta_105, two.delta_110, two.delta_125] == [50.0; 3];
    outcome(
        "metric oracle",
        start,
        worst <= 1e-9 && exact,
        format!("{instances} instances, worst deviation {worst:.1e}, two-pixel example exact: {exact}"),
    )
}

/// Fixed random weights turning any output into a scalar loss.
struct Projection(Vec<f32>);

impl Projection {
    fn new(len: usize, rng: &mut impl Rng) -> Self {
        Self((0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.dims(x);
        let w = g.constant_matrix(r, c, self.0.clone());
        let p = g.mul(x, w);
        g.sum(p)
    }
}

fn tiny_config(seed: u64) -> LidfConfig {
    LidfConfig {
        grid_n: 4,
        pe: PosEnc::new(2, true),
        c_v: 8,
        hidden: 16,
        ief_steps: 2,
        pool: if seed % 2 == 0 { PoolMode::Argmax } else { PoolMode::WeightedSum },
        ..Default::default()
    }
}

fn tiny_sample(seed: u64) -> Sample {
    let cfg = SynthConfig {
        width: 16,
        height: 12,
        ..Default::default()
    };
    generate_sample(&cfg, seed)
}

/// Up to `max` missing pixels of `sample` whose rays meet occupied voxels.
fn tiny_batch(sample: &Sample, scene: &SceneInput, max: usize) -> Result<RayBatch> {
    let d = &sample.input_depth;
    let queries: Vec<(usize, usize)> = (0..d.len())
        .filter(|&i| d.data[i] <= 0.0)
        .map(|i| (i % d.width, i / d.width))
        .collect();
    let (batch, _) = RayBatch::build(&queries, &sample.intrinsics, &scene.grid, PairMethod::Exhaustive)?;
    let keep: Vec<usize> = (0..batch.num_rays().min(max)).collect();
    Ok(batch.select(&keep))
}

/// Finite-difference step and per-parameter coordinate budget.
const FD_STEP: f32 = 1.6e-2;
const FD_COORDS: usize = 6;
const FD_TOLERANCE: f64 = 1e-3;

struct GradSuite {
    worst: f64,
    worst_at: String,
    checked: usize,
    skipped: usize,
    seeds: usize,
    error: Option<String>,
}

impl GradSuite {
    fn new() -> Self {
        Self {
            worst: 0.0,
            worst_at: String::new(),
            checked: 0,
            skipped: 0,
            seeds: 0,
            error: None,
        }
    }

    fn record(&mut self, seed: u64, r: Result<crate::oracles::GradCheckReport>) {
        match r {
            Ok(r) => {
                self.seeds += 1;
                self.checked += r.checked;
                self.skipped += r.skipped_kinks;
                if r.max_rel_error >= self.worst {
                    self.worst = r.max_rel_error;
                    self.worst_at = format!("{} (seed {seed})", r.worst);
                }
            }
            Err(e) => {
                self.error.get_or_insert(format!("seed {seed}: {e}"));
            }
        }
    }

    fn finish(self, name: &str, start: Instant) -> CheckOutcome {
        let passed = self.error.is_none() && self.worst < FD_TOLERANCE && self.checked > 0;
        let detail = match self.error {
            Some(e) => e,
            None => format!(
                "{} seeds, {} coordinates, {} kinks skipped, max rel error {:.2e} at {}",
                self.seeds, self.checked, self.skipped, self.worst, self.worst_at
            ),
        };
        outcome(name, start, passed, detail)
    }
}

fn check_rgb(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (7, 5);
    let img = RgbImage::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let mut enc = RgbEncoder::new("rgb", &mut rng);
    let support: Vec<usize> = (0..w * h).filter(|_| rng.random_bool(0.3)).chain([w + 1]).collect();
    let mut support = support;
    support.sort_unstable();
    support.dedup();
    let proj_dense = Projection::new(w * h * RGB_CHANNELS, &mut rng);
    let proj_rows = Projection::new(support.len() * RGB_CHANNELS, &mut rng);
    let use_support = seed % 2 == 1;
    grad_check(&mut enc, FD_STEP, FD_COORDS, &mut rng, |m, g| {
        if use_support {
            let f = m.forward_support(g, &img, &support)?;
            let rows = g.gather_rows(f.var, support.clone());
            Ok(proj_rows.apply(g, rows))
        } else {
            let f = m.forward(g, &img)?;
            Ok(proj_dense.apply(g, f.var))
        }
    })
}

fn check_roi(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (9, 7);
    let data: Vec<f32> = (0..w * h * RGB_CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut fm = ParamList(vec![Parameter::new("fmap", Tensor::new(vec![w * h, RGB_CHANNELS], data)?)]);
    let pixels: Vec<(usize, usize)> = (0..5).map(|_| (rng.random_range(0..w), rng.random_range(0..h))).collect();
    let proj = Projection::new(pixels.len() * RGB_CHANNELS * 4, &mut rng);
    grad_check(&mut fm, FD_STEP, 40, &mut rng, |m, g| {
        let var = g.param(&m.0[0]);
        let pooled = roi_pool(g, &FeatureMap { var, width: w, height: h }, &pixels);
        Ok(proj.apply(g, pooled))
    })
}

fn check_pointnet(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = tiny_sample(seed);
    let cloud = backproject(&s.input_depth, &s.intrinsics)?;
    let grid = crate::voxel::build_grid(&cloud, Workspace::default(), 4)?;
    let colors: Vec<[f32; 3]> = (0..s.rgb.width * s.rgb.height).map(|i| s.rgb.pixel(i)).collect();
    let set = PointSet::from_grid(&grid, &cloud.points, &colors);
    let mut net = VoxelPointNet::new("pn", 8, &mut rng);
    let proj = Projection::new(set.num_voxels * 8, &mut rng);
    grad_check(&mut net, FD_STEP, FD_COORDS, &mut rng, |m, g| {
        let out = m.forward(g, &set)?;
        Ok(proj.apply(g, out))
    })
}

/// Stage-1 model on a tiny frame; `depth_output` selects the pooled depth
/// (through F_pos) instead of the terminating logits (through F_prob).
fn check_stage1(seed: u64, depth_output: bool) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = tiny_sample(seed);
    let cfg = tiny_config(seed);
    let scene = SceneInput::new(&s.rgb, &s.input_depth, &s.intrinsics, cfg.workspace, cfg.grid_n)?;
    let batch = tiny_batch(&s, &scene, 6)?;
    let mut model = Stage1Model::new(cfg, &mut rng);
    let mut g = Graph::inference();
    let fwd = model.forward(&mut g, &s.rgb, &scene.points, &batch)?;
    let len = if depth_output { batch.num_rays() } else { fwd.candidates.len() };
    let proj = Projection::new(len, &mut rng);
    drop(g);
    grad_check(&mut model, FD_STEP, FD_COORDS, &mut rng, |m, g| {
        let fwd = m.forward(g, &s.rgb, &scene.points, &batch)?;
        Ok(proj.apply(g, if depth_output { fwd.depth } else { fwd.logits }))
    })
}

fn check_refine(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = tiny_sample(seed);
    let cfg = tiny_config(seed);
    let stage1 = Stage1Model::new(cfg.clone(), &mut rng);
    let opts = CompleteOptions {
        query: QueryMode::Missing,
        pair_method: PairMethod::Exhaustive,
    };
    let run = stage1.run(&s.rgb, &s.input_depth, &s.intrinsics, &opts)?;
    let ctx = RefineContext::from_run(&run);
    let mut model = RefineModel::new(cfg, &mut rng);
    let proj = Projection::new(ctx.num_rays(), &mut rng);
    let t0 = ctx.t0.clone();
    grad_check(&mut model, FD_STEP, FD_COORDS, &mut rng, |m, g| {
        let step = m.step(g, &ctx, &t0)?;
        Ok(proj.apply(g, step.depth))
    })
}

fn check_loss_pos(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 24;
    let gt: Vec<f32> = (0..n).map(|_| rng.random_range(0.3..1.2)).collect();
    let pred: Vec<f32> = gt.iter().map(|t| t + rng.random_range(-0.2..0.2)).collect();
    let rows: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.6)).chain([0]).collect();
    let mut p = ParamList(vec![Parameter::new("pred", Tensor::new(vec![n, 1], pred)?)]);
    grad_check(&mut p, 1e-3, n, &mut rng, |m, g| {
        let x = g.param(&m.0[0]);
        loss_pos_graph(g, x, &gt, &rows)
    })
}

fn check_loss_prob(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offsets = vec![0];
    let mut targets = Vec::new();
    for _ in 0..8 {
        let k = rng.random_range(1..6);
        targets.push(rng.random_bool(0.8).then(|| rng.random_range(0..k)));
        offsets.push(offsets.last().unwrap() + k);
    }
    targets[0] = Some(0);
    let total = *offsets.last().unwrap();
    let logits: Vec<f32> = (0..total).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut p = ParamList(vec![Parameter::new("logits", Tensor::new(vec![total, 1], logits)?)]);
    let sigmoid = seed % 2 == 1;
    grad_check(&mut p, FD_STEP, total, &mut rng, |m, g| {
        let x = g.param(&m.0[0]);
        let l = if sigmoid {
            loss_prob_sigmoid_graph(g, x, &offsets, &targets)
        } else {
            loss_prob_graph(g, x, &offsets, &targets)
        };
        Ok(l.expect("at least one labeled ray"))
    })
}

fn check_loss_sn(seed: u64) -> Result<crate::oracles::GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (8, 6);
    let k = CameraIntrinsics::centered(w, h);
    let (a, b, c) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(0.6..1.0));
    let plane = |u: usize, v: usize| c + a * (u as f32 - k.cx) / k.fx + b * (v as f32 - k.cy) / k.fy;
    let gt = DepthImage::new(w, h, (0..w * h).map(|i| plane(i % w, i / w)).collect())?;
    let gt_cloud = backproject(&gt, &k)?;
    let pred: Vec<f32> = gt.data.iter().map(|z| z + rng.random_range(-0.03..0.03)).collect();
    let pixels: Vec<usize> = (0..w * h).collect();
    let mut p = ParamList(vec![Parameter::new("depth", Tensor::new(vec![w * h, 1], pred)?)]);
    grad_check(&mut p, 1e-3, w * h, &mut rng, |m, g| {
        let x = g.param(&m.0[0]);
        Ok(loss_sn_graph(g, x, &k, &gt_cloud, &pixels)?.expect("interior pixels have normals"))
    })
}

/// Names of the trainable paths covered by [`gradient_checks`].
pub const GRADIENT_PATHS: [&str; 9] = [
    "rgb encoder",
    "roi pooling",
    "pointnet (two-stage)",
    "F_prob",
    "F_pos (unrolled)",
    "refinement step",
    "L_pos",
    "L_prob",
    "L_sn",
];

/// Central finite-difference checks of every trainable path on `seeds`
/// seeds each.
pub fn gradient_checks(seeds: usize) -> Vec<CheckOutcome> {
    GRADIENT_PATHS
        .iter()
        .map(|&name| {
            let start = Instant::now();
            let mut suite = GradSuite::new();
            for seed in 0..seeds as u64 {
                let r = match name {
                    "rgb encoder" => check_rgb(seed),
                    "roi pooling" => check_roi(seed),
                    "pointnet (two-stage)" => check_pointnet(seed),
                    "F_prob" => check_stage1(seed, false),
                    "F_pos (unrolled)" => check_stage1(seed, true),
                    "refinement step" => check_refine(seed),
                    "L_pos" => check_loss_pos(seed),
                    "L_prob" => check_loss_prob(seed),
                    _ => check_loss_sn(seed),
                };
                suite.record(seed, r);
            }
            suite.finish(&format!("gradient: {name}"), start)
        })
        .collect()
}

/// Everything `selftest` runs.
pub fn selftest() -> Vec<CheckOutcome> {
    let mut out = vec![geometry_oracles(1000, 3, 17)];
    out.extend(gradient_checks(10));
    out.push(metric_oracle(100, 23));
    out
}
