//! End-to-end stage-1 depth completion for one frame.

use log::warn;

use super::model::{RayBatch, Stage1Model};
use super::{Candidates, ProbMode};
use crate::camera::{backproject, CameraIntrinsics, OrganizedPointCloud};
use crate::encoders::PointSet;
use crate::error::{contract, Result};
use crate::image::{DepthImage, RgbImage};
use crate::nn::Graph;
use crate::voxel::{build_grid, PairMethod, VoxelGrid, Workspace};

/// Which pixels are predicted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QueryMode {
    /// Only pixels without input depth; valid input depth is kept as is.
    #[default]
    Missing,
    /// Every pixel.
    All,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompleteOptions {
    pub query: QueryMode,
    pub pair_method: PairMethod,
}

/// Back-projected input of one frame: cloud, occupancy grid, per-pixel
/// colors and the grouped point set.
#[derive(Clone, Debug)]
pub struct SceneInput {
    pub cloud: OrganizedPointCloud,
    pub grid: VoxelGrid,
    pub colors: Vec<[f32; 3]>,
    pub points: PointSet,
}

impl SceneInput {
    pub fn new(rgb: &RgbImage, depth: &DepthImage, k: &CameraIntrinsics, ws: Workspace, n: usize) -> Result<Self> {
        if rgb.width != depth.width || rgb.height != depth.height {
            return Err(contract(format!(
                "rgb is {}x{} but depth is {}x{}",
                rgb.width, rgb.height, depth.width, depth.height
            )));
        }
        let cloud = backproject(depth, k)?;
        let grid = build_grid(&cloud, ws, n)?;
        let colors: Vec<[f32; 3]> = (0..rgb.width * rgb.height).map(|i| rgb.pixel(i)).collect();
        let points = PointSet::from_grid(&grid, &cloud.points, &colors);
        Ok(Self {
            cloud,
            grid,
            colors,
            points,
        })
    }
}

/// Completed depth map with per-pixel diagnostics.
#[derive(Clone, Debug)]
pub struct Completion {
    pub depth: DepthImage,
    /// Pixels that were predicted.
    pub queried: Vec<bool>,
    /// Flat index of the winning voxel for predicted pixels.
    pub chosen_voxel: Vec<Option<usize>>,
    /// Terminating probability of each pair along the pixel's ray, front to
    /// back; empty for pixels that were not predicted or met no voxel.
    pub probs: Vec<Vec<f32>>,
    /// Query rays that met no occupied voxel.
    pub missed: usize,
}

/// Stage-1 result plus the intermediate data refinement builds on.
#[derive(Clone, Debug)]
pub struct Stage1Run {
    pub completion: Completion,
    pub scene: SceneInput,
    pub batch: RayBatch,
    /// Pooled RGB features of `batch` rays, `[rays, 128]` row-major.
    pub rgb_embed: Vec<f32>,
}

impl Stage1Model {
    /// Full stage-1 pipeline: back-project, voxelize, embed, predict, pool.
    pub fn run(
        &self,
        rgb: &RgbImage,
        depth: &DepthImage,
        k: &CameraIntrinsics,
        opts: &CompleteOptions,
    ) -> Result<Stage1Run> {
        let scene = SceneInput::new(rgb, depth, k, self.cfg.workspace, self.cfg.grid_n)?;
        let n_px = depth.len();
        let queries: Vec<(usize, usize)> = (0..n_px)
            .filter(|&i| opts.query == QueryMode::All || depth.data[i] <= 0.0)
            .map(|i| (i % depth.width, i / depth.width))
            .collect();
        let mut out = Completion {
            depth: depth.clone(),
            queried: vec![false; n_px],
            chosen_voxel: vec![None; n_px],
            probs: vec![Vec::new(); n_px],
            missed: 0,
        };
        for &(u, v) in &queries {
            let i = v * depth.width + u;
            out.queried[i] = true;
            out.depth.data[i] = 0.0;
        }
        if scene.grid.num_occupied() == 0 && !queries.is_empty() {
            warn!("no occupied voxels: {} query pixels left without depth", queries.len());
        }
        let (batch, missed) = RayBatch::build(&queries, k, &scene.grid, opts.pair_method)?;
        out.missed = missed.len();
        if batch.num_rays() == 0 {
            return Ok(Stage1Run {
                completion: out,
                scene,
                batch,
                rgb_embed: Vec::new(),
            });
        }

        let mut g = Graph::inference();
        let fwd = self.forward(&mut g, rgb, &scene.points, &batch)?;
        let depths = g.data(fwd.depth).to_vec();
        let logits = g.data(fwd.logits).to_vec();
        let cands = &fwd.candidates;
        for r in 0..batch.num_rays() {
            let (u, v) = batch.pixels[r];
            let i = v * depth.width + u;
            let z = depths[r];
            if !z.is_finite() {
                return Err(crate::Error::NonFinite(format!("predicted depth at pixel ({u}, {v})")));
            }
            out.depth.data[i] = z.max(0.0);
            let winner = cands.pair[fwd.winners[r]];
            out.chosen_voxel[i] = Some(batch.pairs[winner].voxel);

            let (a, b) = (cands.offsets[r], cands.offsets[r + 1]);
            let p = normalize(&logits[a..b], self.cfg.prob);
            let n_pairs = batch.pair_offsets[r + 1] - batch.pair_offsets[r];
            let mut per_pair = vec![0.0f32; n_pairs];
            for (c, &pc) in (a..b).zip(&p) {
                per_pair[cands.pair[c] - batch.pair_offsets[r]] += pc;
            }
            out.probs[i] = per_pair;
        }
        let rgb_embed = fwd.rgb_embed.map(|e| g.data(e).to_vec()).unwrap_or_default();
        debug_assert!(self.cfg.candidates == Candidates::Sampled || cands.len() == batch.pairs.len());
        Ok(Stage1Run {
            completion: out,
            scene,
            batch,
            rgb_embed,
        })
    }
}

/// Ray-normalized probabilities from logits.
pub(crate) fn normalize(logits: &[f32], mode: ProbMode) -> Vec<f32> {
    match mode {
        ProbMode::Softmax => {
            let mx = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f32 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        }
        ProbMode::Sigmoid => {
            let s: Vec<f32> = logits.iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
            let t: f32 = s.iter().sum();
            s.iter().map(|x| x / t).collect()
        }
    }
}

/// Predicts the full depth map of one frame with a stage-1 model.
pub fn complete_depth(
    rgb: &RgbImage,
    depth: &DepthImage,
    k: &CameraIntrinsics,
    model: &Stage1Model,
    opts: &CompleteOptions,
) -> Result<Completion> {
    Ok(model.run(rgb, depth, k, opts)?.completion)
}
