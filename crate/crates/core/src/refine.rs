//! Self-correcting refinement of stage-1 depth.
//!
//! Each iteration inserts the current predicted points into the input point
//! set, re-voxelizes, re-embeds every voxel with a separate PointNet and
//! regresses a signed correction along each query ray:
//! `d̂[k] = d̂[k−1] + δ̂[k]·r`, with the embedding
//! `H_rgb ⊕ Ĥ_vox ⊕ γ(r) ⊕ γ(d̂[k−1])` taken at the voxel holding `d̂[k−1]`.

use rand::Rng;

use crate::encoders::{PointSet, VoxelPointNet, RGB_EMBED_DIM};
use crate::error::{contract, Result};
use crate::geom::Vec3;
use crate::image::DepthImage;
use crate::lidf::{encode_direction, encode_position, LidfConfig, RayBatch, SceneInput, Stage1Run};
use crate::nn::{first_layer, Activation, Block, Graph, Mlp, Module, Parameter, Var};
use crate::voxel::{ray_aabb, VoxelGrid};

/// Frozen stage-1 data refinement works from.
#[derive(Clone, Debug)]
pub struct RefineContext {
    pub scene: SceneInput,
    pub batch: RayBatch,
    /// `[rays, 128]` pooled RGB features, or empty without RGB.
    pub rgb_embed: Vec<f32>,
    /// Stage-1 ray parameter of every query ray.
    pub t0: Vec<f32>,
    /// Admissible ray parameters: the part of each ray inside the workspace.
    pub t_range: Vec<(f32, f32)>,
}

impl RefineContext {
    /// Context from a stage-1 run; query rays that received no depth are
    /// dropped.
    pub fn from_run(run: &Stage1Run) -> Self {
        let depth = &run.completion.depth;
        let keep: Vec<usize> = (0..run.batch.num_rays())
            .filter(|&r| {
                let (u, v) = run.batch.pixels[r];
                depth.get(u, v) > 0.0
            })
            .collect();
        let batch = run.batch.select(&keep);
        let rgb_embed = if run.rgb_embed.is_empty() {
            Vec::new()
        } else {
            keep.iter()
                .flat_map(|&r| run.rgb_embed[r * RGB_EMBED_DIM..(r + 1) * RGB_EMBED_DIM].iter().copied())
                .collect()
        };
        let ws = run.scene.grid.workspace().aabb();
        let t_range: Vec<(f32, f32)> = batch
            .rays
            .iter()
            .map(|ray| {
                let (a, b) = ray_aabb(ray, &ws).unwrap_or((0.0, 0.0));
                // Keep points strictly inside so they always land in a voxel.
                let pad = 1e-5 * (b - a);
                (a.max(0.0) + pad, b - pad)
            })
            .collect();
        let t0 = batch
            .pixels
            .iter()
            .zip(&batch.rays)
            .zip(&t_range)
            .map(|((&(u, v), ray), &(lo, hi))| (depth.get(u, v) / ray.dir.z).clamp(lo, hi))
            .collect();
        Self {
            scene: run.scene.clone(),
            batch,
            rgb_embed,
            t0,
            t_range,
        }
    }

    pub fn num_rays(&self) -> usize {
        self.batch.num_rays()
    }

    /// Grid and point set over the valid input points plus one predicted
    /// point per query ray at parameter `t[r]`. Predicted point `r` has id
    /// `W·H + r` and the color of its pixel.
    pub fn augmented(&self, t: &[f32]) -> Result<(VoxelGrid, PointSet)> {
        let cloud = &self.scene.cloud;
        let n_px = cloud.width * cloud.height;
        let mut positions = cloud.points.clone();
        let mut colors = self.scene.colors.clone();
        for (r, &tr) in t.iter().enumerate() {
            let (u, v) = self.batch.pixels[r];
            positions.push(self.batch.rays[r].at(tr));
            colors.push(self.scene.colors[v * cloud.width + u]);
        }
        let valid = cloud.valid_points();
        let predicted = (0..t.len()).map(|r| (n_px + r, positions[n_px + r]));
        let grid = VoxelGrid::from_points(
            valid.chain(predicted),
            *self.scene.grid.workspace(),
            self.scene.grid.resolution(),
        )?;
        let points = PointSet::from_grid(&grid, &positions, &colors);
        Ok((grid, points))
    }
}

/// Graph outputs and diagnostics of one refinement iteration.
#[derive(Clone, Debug)]
pub struct RefineStep {
    /// `[rays, 1]` refined depth.
    pub depth: Var,
    /// Refined ray parameters (values of the graph output).
    pub t: Vec<f32>,
    /// Voxel that held `d̂[k−1]` for each ray.
    pub voxel: Vec<usize>,
    /// Rays whose update left the workspace and was clamped.
    pub clamped: Vec<bool>,
}

/// Refinement networks; parameters are separate from stage 1.
#[derive(Clone, Debug)]
pub struct RefineModel {
    pub cfg: LidfConfig,
    pub pointnet: VoxelPointNet,
    pub f_pos: Mlp,
}

impl RefineModel {
    pub fn new(cfg: LidfConfig, rng: &mut impl Rng) -> Self {
        let d = Self::embed_dim(&cfg);
        let h = cfg.hidden;
        let pointnet = VoxelPointNet::new("refine.pointnet", cfg.c_v, rng);
        let mut f_pos = Mlp::new("refine.f_pos", &[d + cfg.pe.dim(1), h, h, 1], Activation::None, rng);
        f_pos.scale_output(0.1);
        Self {
            pointnet,
            f_pos,
            cfg,
        }
    }

    /// Width of `H_rgb ⊕ Ĥ_vox ⊕ γ(r) ⊕ γ(d̂)`.
    pub fn embed_dim(cfg: &LidfConfig) -> usize {
        let ray_part = if cfg.ray_info { cfg.pe.dim(3) } else { 0 };
        (if cfg.use_rgb { RGB_EMBED_DIM } else { 0 }) + (if cfg.use_vox { cfg.c_v } else { 0 }) + 2 * ray_part
    }

    /// One iteration from ray parameters `t_prev`.
    pub fn step(&self, g: &mut Graph, ctx: &RefineContext, t_prev: &[f32]) -> Result<RefineStep> {
        let cfg = &self.cfg;
        let n = ctx.num_rays();
        if n == 0 || t_prev.len() != n {
            return Err(contract(format!("refine step on {} rays with {} positions", n, t_prev.len())));
        }
        let (grid, points) = ctx.augmented(t_prev)?;
        let diag = grid.cell_diagonal();
        let ws = *grid.workspace();

        let mut voxel = Vec::with_capacity(n);
        let mut slots = Vec::with_capacity(n);
        for (r, ray) in ctx.batch.rays.iter().enumerate() {
            let v = grid
                .voxel_of(ray.at(t_prev[r]))
                .ok_or_else(|| contract(format!("refined point of ray {r} left the workspace")))?;
            voxel.push(v);
            slots.push(grid.slot(v).expect("voxel holding a predicted point is occupied"));
        }

        let mut blocks = Vec::new();
        let mut row = 0;
        if cfg.use_rgb {
            if ctx.rgb_embed.len() != n * RGB_EMBED_DIM {
                return Err(contract("refine context lacks RGB features"));
            }
            let e = g.constant_matrix(n, RGB_EMBED_DIM, ctx.rgb_embed.clone());
            blocks.push(Block { input: e, rows: row..row + RGB_EMBED_DIM, index: None });
            row += RGB_EMBED_DIM;
        }
        if cfg.use_vox {
            let vox = self.pointnet.forward(g, &points)?;
            blocks.push(Block { input: vox, rows: row..row + cfg.c_v, index: Some(slots) });
            row += cfg.c_v;
        }
        if cfg.ray_info {
            let part = cfg.pe.dim(3);
            let mut data = Vec::with_capacity(n * 2 * part);
            for (r, ray) in ctx.batch.rays.iter().enumerate() {
                encode_direction(&cfg.pe, ray, &mut data);
                encode_position(&cfg.pe, &ws, ray.at(t_prev[r]), &mut data);
            }
            let e = g.constant_matrix(n, 2 * part, data);
            blocks.push(Block { input: e, rows: row..row + 2 * part, index: None });
        }
        let base = first_layer(g, &self.f_pos.layers[0], blocks, n)?;
        let delta = self.feedback(g, base, n, diag)?;

        let lo: Vec<f32> = ctx.t_range.iter().map(|r| r.0).collect();
        let hi: Vec<f32> = ctx.t_range.iter().map(|r| r.1).collect();
        let tp = g.constant_column(t_prev.to_vec());
        let moved = g.add(tp, delta);
        let raw = g.data(moved).to_vec();
        let t_var = g.clamp(moved, lo.clone(), hi.clone());
        let clamped = (0..n).map(|r| raw[r] < lo[r] || raw[r] > hi[r]).collect();
        let t = g.data(t_var).to_vec();
        let rz = g.constant_column(ctx.batch.rays.iter().map(|ray| ray.dir.z).collect());
        let depth = g.mul(t_var, rz);
        Ok(RefineStep { depth, t, voxel, clamped })
    }

    /// Signed iterative error feedback: `δ⁰ = 0`,
    /// `δ ← clamp(δ + diag·MLP(H ⊕ γ(δ/diag)), −diag, diag)`.
    fn feedback(&self, g: &mut Graph, base: Var, n: usize, diag: f32) -> Result<Var> {
        let d = Self::embed_dim(&self.cfg);
        let w = g.param(&self.f_pos.layers[0].weight);
        let w_step = g.gather_rows(w, (d..d + self.cfg.pe.dim(1)).collect());
        let mut delta = g.constant_column(vec![0.0; n]);
        for _ in 0..self.cfg.ief_steps {
            let rel = g.scale(delta, 1.0 / diag);
            let enc = self.cfg.pe.encode_column(g, rel);
            let extra = g.matmul(enc, w_step);
            let pre = g.add(base, extra);
            let mut x = g.relu(pre);
            let rest = &self.f_pos.layers[1..];
            for (k, layer) in rest.iter().enumerate() {
                let act = if k + 1 == rest.len() { Activation::None } else { Activation::Relu };
                x = layer.forward(g, x, act)?;
            }
            let step = g.scale(x, diag);
            let next = g.add(delta, step);
            delta = g.clamp(next, vec![-diag; n], vec![diag; n]);
        }
        Ok(delta)
    }

    /// Runs `iters` iterations without gradients.
    pub fn refine(&self, ctx: &RefineContext, iters: usize) -> Result<Refinement> {
        let mut t = ctx.t0.clone();
        let mut iterations = Vec::with_capacity(iters);
        for _ in 0..iters {
            if ctx.num_rays() == 0 {
                break;
            }
            let mut g = Graph::inference();
            let step = self.step(&mut g, ctx, &t)?;
            let moved = step.t.iter().zip(&t).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
            iterations.push(IterationStats {
                clamped: step.clamped.iter().filter(|&&c| c).count(),
                mean_abs_update: moved / ctx.num_rays() as f64,
            });
            t = step.t;
        }
        Ok(Refinement { t, iterations })
    }
}

impl Module for RefineModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.pointnet.params();
        out.extend(self.f_pos.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.pointnet.params_mut();
        out.extend(self.f_pos.params_mut());
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub clamped: usize,
    pub mean_abs_update: f64,
}

#[derive(Clone, Debug)]
pub struct Refinement {
    /// Final ray parameter of every context ray.
    pub t: Vec<f32>,
    pub iterations: Vec<IterationStats>,
}

impl Refinement {
    /// Stage-1 depth with the refined query pixels written in.
    pub fn apply(&self, ctx: &RefineContext, stage1: &DepthImage) -> DepthImage {
        let mut out = stage1.clone();
        if self.iterations.is_empty() {
            return out;
        }
        for (r, &(u, v)) in ctx.batch.pixels.iter().enumerate() {
            out.data[v * out.width + u] = self.t[r] * ctx.batch.rays[r].dir.z;
        }
        out
    }

    pub fn points(&self, ctx: &RefineContext) -> Vec<Vec3> {
        ctx.batch.rays.iter().zip(&self.t).map(|(ray, &t)| ray.at(t)).collect()
    }
}

/// Stage-1 run followed by `iters` refinement iterations.
pub fn refine_depth(run: &Stage1Run, model: &RefineModel, iters: usize) -> Result<(DepthImage, Refinement)> {
    let ctx = RefineContext::from_run(run);
    let r = model.refine(&ctx, iters)?;
    Ok((r.apply(&ctx, &run.completion.depth), r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidf::{CompleteOptions, Stage1Model};
    use crate::synth::{generate_sample, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> LidfConfig {
        LidfConfig {
            grid_n: 4,
            hidden: 16,
            c_v: 8,
            ..LidfConfig::default()
        }
    }

    fn stage1_run(seed: u64) -> (Stage1Run, RefineModel) {
        let cfg = SynthConfig {
            width: 32,
            height: 24,
            ..SynthConfig::default()
        };
        let s = generate_sample(&cfg, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage1 = Stage1Model::new(small_cfg(), &mut rng);
        let run = stage1
            .run(&s.rgb, &s.input_depth, &s.intrinsics, &CompleteOptions::default())
            .unwrap();
        (run, RefineModel::new(small_cfg(), &mut rng))
    }

    #[test]
    fn zero_iterations_keep_stage1_output() {
        let (run, model) = stage1_run(1);
        let (depth, r) = refine_depth(&run, &model, 0).unwrap();
        assert_eq!(depth, run.completion.depth);
        assert!(r.iterations.is_empty());
    }

    #[test]
    fn zero_weights_make_refinement_the_identity() {
        let (run, mut model) = stage1_run(2);
        model.f_pos.zero_weights();
        let ctx = RefineContext::from_run(&run);
        let r = model.refine(&ctx, 2).unwrap();
        assert_eq!(r.t, ctx.t0);
    }

    #[test]
    fn refined_points_stay_on_their_rays_inside_the_workspace() {
        let (run, model) = stage1_run(3);
        let ctx = RefineContext::from_run(&run);
        let r = model.refine(&ctx, 2).unwrap();
        let ws = run.scene.grid.workspace();
        for (ray, p) in ctx.batch.rays.iter().zip(r.points(&ctx)) {
            let c = (p - ray.origin).cross(ray.dir);
            assert!(c.norm() < 1e-5);
            assert!(ws.contains(p));
        }
    }

    #[test]
    fn augmentation_grows_occupancy_and_holds_predictions() {
        let (run, _) = stage1_run(4);
        let ctx = RefineContext::from_run(&run);
        let (grid, _) = ctx.augmented(&ctx.t0).unwrap();
        for &v in run.scene.grid.occupied() {
            assert!(grid.is_occupied(v));
        }
        for (ray, &t) in ctx.batch.rays.iter().zip(&ctx.t0) {
            assert!(grid.is_occupied(grid.voxel_of(ray.at(t)).unwrap()));
        }
        // Without predicted points the set equals a pass over valid points.
        let (empty, points) = ctx.augmented(&[]).unwrap();
        assert_eq!(empty.occupied(), run.scene.grid.occupied());
        assert_eq!(points.len(), run.scene.points.len());
    }

    #[test]
    fn ray_order_does_not_change_voxel_embeddings() {
        let (run, model) = stage1_run(5);
        let ctx = RefineContext::from_run(&run);
        let n = ctx.num_rays();
        let order: Vec<usize> = (0..n).rev().collect();
        let mut rev = ctx.clone();
        rev.batch = ctx.batch.select(&order);
        rev.t0 = order.iter().map(|&r| ctx.t0[r]).collect();
        let embed = |c: &RefineContext| {
            let (_, pts) = c.augmented(&c.t0).unwrap();
            let mut g = Graph::inference();
            let v = model.pointnet.forward(&mut g, &pts).unwrap();
            g.data(v).to_vec()
        };
        let (a, b) = (embed(&ctx), embed(&rev));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn valid_pixels_are_never_touched() {
        let (run, model) = stage1_run(6);
        let (depth, _) = refine_depth(&run, &model, 2).unwrap();
        let input = &run.completion;
        for i in 0..depth.data.len() {
            if !input.queried[i] {
                assert_eq!(depth.data[i], input.depth.data[i]);
            }
        }
    }
}
