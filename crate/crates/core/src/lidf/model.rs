//! Stage-1 network and its batched forward pass.
//!
//! The first dense layer of `F_prob` and `F_pos` is evaluated block by block:
//! `H·W = H_rgb·W_rgb + H_vox·W_vox + γ(r)·W_r + (γ(d_in) ⊕ γ(d_out))·W_seg`.
//! Per-ray and per-voxel blocks are multiplied once and gathered per pair,
//! which gives the same result as concatenating first and keeps the cost
//! per pair small.

use rand::Rng;

use super::pool::first_argmax;
use super::{encode_direction, encode_position, Candidates, EmbeddingLayout, LidfConfig, PoolMode, ProbMode};
use crate::camera::{pixel_ray, CameraIntrinsics, Ray};
use crate::encoders::{roi_pool, roi_support, PointSet, RgbEncoder, VoxelPointNet};
use crate::error::{contract, Result};
use crate::image::RgbImage;
use crate::nn::{first_layer, Activation, Block, Graph, Mlp, Module, Parameter, Var};
use crate::voxel::{pairs_for, PairMethod, RayVoxelPair, VoxelGrid};

/// Query rays of one image together with their pairs. Only rays with at
/// least one pair are kept.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub pixels: Vec<(usize, usize)>,
    pub rays: Vec<Ray>,
    /// Pairs of ray `r` are `pairs[pair_offsets[r]..pair_offsets[r + 1]]`.
    pub pair_offsets: Vec<usize>,
    pub pairs: Vec<RayVoxelPair>,
}

impl RayBatch {
    /// Builds pairs for each pixel; returns the batch and the pixels whose
    /// rays meet no occupied voxel.
    pub fn build(
        pixels: &[(usize, usize)],
        k: &CameraIntrinsics,
        grid: &VoxelGrid,
        method: PairMethod,
    ) -> Result<(Self, Vec<(usize, usize)>)> {
        let mut batch = RayBatch {
            pair_offsets: vec![0],
            ..Default::default()
        };
        let mut missed = Vec::new();
        for &(u, v) in pixels {
            let ray = pixel_ray(u, v, k)?;
            let pairs = pairs_for(&ray, grid, method);
            if pairs.is_empty() {
                missed.push((u, v));
                continue;
            }
            batch.pixels.push((u, v));
            batch.rays.push(ray);
            batch.pairs.extend(pairs);
            batch.pair_offsets.push(batch.pairs.len());
        }
        Ok((batch, missed))
    }

    pub fn num_rays(&self) -> usize {
        self.rays.len()
    }

    pub fn pairs_of(&self, r: usize) -> &[RayVoxelPair] {
        &self.pairs[self.pair_offsets[r]..self.pair_offsets[r + 1]]
    }

    pub fn ray_of_pair(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.pairs.len());
        for r in 0..self.num_rays() {
            out.extend(std::iter::repeat_n(r, self.pair_offsets[r + 1] - self.pair_offsets[r]));
        }
        out
    }

    /// Subset of rays, keeping their pairs.
    pub fn select(&self, rays: &[usize]) -> RayBatch {
        let mut out = RayBatch {
            pair_offsets: vec![0],
            ..Default::default()
        };
        for &r in rays {
            out.pixels.push(self.pixels[r]);
            out.rays.push(self.rays[r]);
            out.pairs.extend_from_slice(self.pairs_of(r));
            out.pair_offsets.push(out.pairs.len());
        }
        out
    }
}

/// Candidate terminating points scored by `F_prob`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateSet {
    /// Candidates of ray `r` are `offsets[r]..offsets[r + 1]`.
    pub offsets: Vec<usize>,
    /// Pair index of each candidate.
    pub pair: Vec<usize>,
    /// Sample index within the pair (always 0 for learned offsets).
    pub sample: Vec<usize>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.pair.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair.is_empty()
    }

    pub fn ray_of(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        for r in 0..self.offsets.len().saturating_sub(1) {
            out.extend(std::iter::repeat_n(r, self.offsets[r + 1] - self.offsets[r]));
        }
        out
    }
}

/// Graph outputs of one stage-1 forward pass.
#[derive(Clone, Debug)]
pub struct Stage1Forward {
    /// `[candidates, 1]` terminating logits.
    pub logits: Var,
    pub candidates: CandidateSet,
    /// Winning candidate of every ray.
    pub winners: Vec<usize>,
    /// `[rays, 1]` pooled depth.
    pub depth: Var,
    /// `[rays, 128]` pooled RGB features, when RGB is used.
    pub rgb_embed: Option<Var>,
}

/// Stage-1 model: RGB encoder, voxel PointNet, `F_prob` and `F_pos`.
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub cfg: LidfConfig,
    pub rgb: RgbEncoder,
    pub pointnet: VoxelPointNet,
    pub f_prob: Mlp,
    pub f_pos: Mlp,
}

impl Stage1Model {
    pub fn new(cfg: LidfConfig, rng: &mut impl Rng) -> Self {
        let layout = EmbeddingLayout::new(&cfg);
        let step_dim = cfg.pe.dim(1);
        let prob_in = layout.total()
            + match cfg.candidates {
                Candidates::Learned => 0,
                Candidates::Sampled => step_dim,
            };
        let h = cfg.hidden;
        let mut f_pos = Mlp::new("stage1.f_pos", &[layout.total() + step_dim, h, h, 1], Activation::None, rng);
        f_pos.scale_output(0.1);
        Self {
            rgb: RgbEncoder::new("stage1.rgb", rng),
            pointnet: VoxelPointNet::new("stage1.pointnet", cfg.c_v, rng),
            f_prob: Mlp::new("stage1.f_prob", &[prob_in, h, h, 1], Activation::None, rng),
            f_pos,
            cfg,
        }
    }

    pub fn layout(&self) -> EmbeddingLayout {
        EmbeddingLayout::new(&self.cfg)
    }

    /// `F_prob` on full embeddings `[k, D]` (D includes the sample encoding
    /// for sampled candidates).
    pub fn predict_prob(&self, g: &mut Graph, h: Var) -> Result<Var> {
        self.f_prob.forward(g, h)
    }

    /// Offset regression by iterative error feedback on full embeddings
    /// `[k, D]` for segments of the given lengths.
    pub fn predict_offset(&self, g: &mut Graph, h: Var, seg: &[f32]) -> Result<Var> {
        let d = self.layout().total();
        if g.dims(h) != (seg.len(), d) {
            return Err(contract(format!("offset input {:?} vs {} x {d}", g.dims(h), seg.len())));
        }
        let base = first_layer(g, &self.f_pos.layers[0], vec![Block { input: h, rows: 0..d, index: None }], seg.len())?;
        self.feedback(g, base, seg)
    }

    /// Unrolled feedback loop from pre-activation `base` of the first layer;
    /// each step moves δ by the network output times the segment length.
    fn feedback(&self, g: &mut Graph, base: Var, seg: &[f32]) -> Result<Var> {
        let d = self.layout().total();
        let step_rows = d..d + self.cfg.pe.dim(1);
        let w = g.param(&self.f_pos.layers[0].weight);
        let w_step = g.gather_rows(w, step_rows.collect());
        let inv: Vec<f32> = seg.iter().map(|s| 1.0 / s).collect();
        let inv = g.constant_column(inv);
        let seg_col = g.constant_column(seg.to_vec());
        let mut delta = g.constant_column(seg.iter().map(|s| 0.5 * s).collect());
        for _ in 0..self.cfg.ief_steps {
            let rel = g.mul(delta, inv);
            let enc = self.cfg.pe.encode_column(g, rel);
            let extra = g.matmul(enc, w_step);
            let pre = g.add(base, extra);
            let mut x = g.relu(pre);
            let rest = &self.f_pos.layers[1..];
            for (k, layer) in rest.iter().enumerate() {
                let act = if k + 1 == rest.len() { Activation::None } else { Activation::Relu };
                x = layer.forward(g, x, act)?;
            }
            let step = g.mul(x, seg_col);
            let next = g.add(delta, step);
            delta = g.clamp(next, vec![0.0; seg.len()], seg.to_vec());
        }
        Ok(delta)
    }

    /// Batched forward pass for the query rays of one image.
    ///
    /// `points` must be built from the same grid the pairs were generated on.
    pub fn forward(&self, g: &mut Graph, image: &RgbImage, points: &PointSet, batch: &RayBatch) -> Result<Stage1Forward> {
        let rgb_embed = if self.cfg.use_rgb {
            let support = roi_support(&batch.pixels, image.width, image.height);
            let fmap = self.rgb.forward_support(g, image, &support)?;
            Some(roi_pool(g, &fmap, &batch.pixels))
        } else {
            None
        };
        self.forward_with(g, rgb_embed, points, batch)
    }

    /// Forward pass with precomputed RGB embeddings `[rays, 128]`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        rgb_embed: Option<Var>,
        points: &PointSet,
        batch: &RayBatch,
    ) -> Result<Stage1Forward> {
        let cfg = &self.cfg;
        let layout = self.layout();
        let n_rays = batch.num_rays();
        if n_rays == 0 {
            return Err(contract("forward on an empty ray batch"));
        }
        if cfg.use_rgb != rgb_embed.is_some() {
            return Err(contract("RGB embedding presence does not match the configuration"));
        }
        let vox = if cfg.use_vox {
            Some(self.pointnet.forward(g, points)?)
        } else {
            None
        };
        let ray_of_pair = batch.ray_of_pair();
        let slot_of_pair: Vec<usize> = batch.pairs.iter().map(|p| p.slot).collect();

        let dir_enc = if cfg.ray_info {
            let mut data = Vec::with_capacity(n_rays * layout.ray_part);
            for ray in &batch.rays {
                encode_direction(&cfg.pe, ray, &mut data);
            }
            Some(g.constant_matrix(n_rays, layout.ray_part, data))
        } else {
            None
        };
        let seg_enc = |g: &mut Graph, pairs: &[usize]| -> Option<Var> {
            cfg.ray_info.then(|| {
                let mut data = Vec::with_capacity(pairs.len() * 2 * layout.ray_part);
                for &p in pairs {
                    let pair = &batch.pairs[p];
                    encode_position(&cfg.pe, &cfg.workspace, pair.d_in, &mut data);
                    encode_position(&cfg.pe, &cfg.workspace, pair.d_out, &mut data);
                }
                g.constant_matrix(pairs.len(), 2 * layout.ray_part, data)
            })
        };
        // Blocks shared by F_prob and F_pos, indexed by ray / slot / pair.
        let blocks = |g: &mut Graph, rays: Vec<usize>, slots: Vec<usize>, pairs: &[usize]| -> Vec<Block> {
            let mut out = Vec::new();
            if let Some(e) = rgb_embed {
                out.push(Block { input: e, rows: layout.rgb_rows(), index: Some(rays.clone()) });
            }
            if let Some(v) = vox {
                out.push(Block { input: v, rows: layout.vox_rows(), index: Some(slots) });
            }
            if let Some(d) = dir_enc {
                out.push(Block { input: d, rows: layout.dir_rows(), index: Some(rays) });
            }
            if let Some(s) = seg_enc(g, pairs) {
                out.push(Block { input: s, rows: layout.segment_rows(), index: None });
            }
            out
        };

        // Candidates.
        let samples = match cfg.candidates {
            Candidates::Learned => 1,
            Candidates::Sampled => cfg.samples.max(1),
        };
        let mut cands = CandidateSet {
            offsets: vec![0],
            ..Default::default()
        };
        for r in 0..n_rays {
            for p in batch.pair_offsets[r]..batch.pair_offsets[r + 1] {
                for s in 0..samples {
                    cands.pair.push(p);
                    cands.sample.push(s);
                }
            }
            cands.offsets.push(cands.pair.len());
        }
        let n_cand = cands.len();
        let cand_rays: Vec<usize> = cands.pair.iter().map(|&p| ray_of_pair[p]).collect();
        let cand_slots: Vec<usize> = cands.pair.iter().map(|&p| slot_of_pair[p]).collect();
        let mut prob_blocks = blocks(g, cand_rays, cand_slots, &cands.pair);
        if cfg.candidates == Candidates::Sampled {
            let mut data = Vec::new();
            for s in 0..samples {
                cfg.pe.encode_into(&[sample_fraction(s, samples)], &mut data);
            }
            let step_dim = cfg.pe.dim(1);
            let enc = g.constant_matrix(samples, step_dim, data);
            let d = layout.total();
            prob_blocks.push(Block { input: enc, rows: d..d + step_dim, index: Some(cands.sample.clone()) });
        }
        let pre = first_layer(g, &self.f_prob.layers[0], prob_blocks, n_cand)?;
        let mut x = g.relu(pre);
        let rest = &self.f_prob.layers[1..];
        for (k, layer) in rest.iter().enumerate() {
            let act = if k + 1 == rest.len() { Activation::None } else { Activation::Relu };
            x = layer.forward(g, x, act)?;
        }
        let logits = x;

        let logit_values = g.data(logits).to_vec();
        let winners: Vec<usize> = (0..n_rays)
            .map(|r| {
                let (a, b) = (cands.offsets[r], cands.offsets[r + 1]);
                a + first_argmax(logit_values[a..b].iter().copied()).expect("rays have candidates")
            })
            .collect();

        let depth = match (cfg.candidates, cfg.pool) {
            (Candidates::Learned, PoolMode::Argmax) => {
                let pairs: Vec<usize> = winners.iter().map(|&c| cands.pair[c]).collect();
                let delta = self.offsets_for(g, &blocks, &pairs, &ray_of_pair, &slot_of_pair, batch)?;
                depth_along(g, delta, &pairs, batch)
            }
            (Candidates::Learned, PoolMode::WeightedSum) => {
                let pairs: Vec<usize> = (0..batch.pairs.len()).collect();
                let delta = self.offsets_for(g, &blocks, &pairs, &ray_of_pair, &slot_of_pair, batch)?;
                let z = depth_along(g, delta, &pairs, batch);
                let p = self.probabilities(g, logits, &cands);
                let wz = g.mul(p, z);
                g.segment_sum(wz, cands.ray_of(), n_rays)
            }
            (Candidates::Sampled, mode) => {
                let z: Vec<f32> = (0..n_cand)
                    .map(|c| {
                        let pair = &batch.pairs[cands.pair[c]];
                        let f = sample_fraction(cands.sample[c], samples);
                        pair.ray.at(pair.t_in + f * pair.segment_length()).z
                    })
                    .collect();
                match mode {
                    PoolMode::Argmax => g.constant_column(winners.iter().map(|&c| z[c]).collect()),
                    PoolMode::WeightedSum => {
                        let z = g.constant_column(z);
                        let p = self.probabilities(g, logits, &cands);
                        let wz = g.mul(p, z);
                        g.segment_sum(wz, cands.ray_of(), n_rays)
                    }
                }
            }
        };

        Ok(Stage1Forward {
            logits,
            candidates: cands,
            winners,
            depth,
            rgb_embed,
        })
    }

    fn offsets_for(
        &self,
        g: &mut Graph,
        blocks: &dyn Fn(&mut Graph, Vec<usize>, Vec<usize>, &[usize]) -> Vec<Block>,
        pairs: &[usize],
        ray_of_pair: &[usize],
        slot_of_pair: &[usize],
        batch: &RayBatch,
    ) -> Result<Var> {
        let rays = pairs.iter().map(|&p| ray_of_pair[p]).collect();
        let slots = pairs.iter().map(|&p| slot_of_pair[p]).collect();
        let b = blocks(g, rays, slots, pairs);
        let base = first_layer(g, &self.f_pos.layers[0], b, pairs.len())?;
        let seg: Vec<f32> = pairs.iter().map(|&p| batch.pairs[p].segment_length()).collect();
        self.feedback(g, base, &seg)
    }

    /// Terminating probabilities normalized along each ray, `[candidates, 1]`.
    pub fn probabilities(&self, g: &mut Graph, logits: Var, cands: &CandidateSet) -> Var {
        match self.cfg.prob {
            ProbMode::Softmax => {
                let ls = g.segment_log_softmax(logits, cands.offsets.clone());
                g.exp(ls)
            }
            ProbMode::Sigmoid => {
                let s = g.sigmoid(logits);
                let rays = cands.ray_of();
                let total = g.segment_sum(s, rays.clone(), cands.offsets.len() - 1);
                let total = g.gather_rows(total, rays);
                g.div(s, total)
            }
        }
    }
}

/// Relative position of sample `s` of `n` within a segment.
pub fn sample_fraction(s: usize, n: usize) -> f32 {
    (s as f32 + 0.5) / n as f32
}

/// `z` of `d_in + δ·r` for the given pairs.
fn depth_along(g: &mut Graph, delta: Var, pairs: &[usize], batch: &RayBatch) -> Var {
    let rz = g.constant_column(pairs.iter().map(|&p| batch.pairs[p].ray.dir.z).collect());
    let z_in = g.constant_column(pairs.iter().map(|&p| batch.pairs[p].d_in.z).collect());
    let dz = g.mul(delta, rz);
    g.add(dz, z_in)
}

impl Module for Stage1Model {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.rgb.params();
        out.extend(self.pointnet.params());
        out.extend(self.f_prob.params());
        out.extend(self.f_pos.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.rgb.params_mut();
        out.extend(self.pointnet.params_mut());
        out.extend(self.f_prob.params_mut());
        out.extend(self.f_pos.params_mut());
        out
    }
}
