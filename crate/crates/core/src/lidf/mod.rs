//! The local implicit depth function.
//!
//! Each ray-voxel pair is embedded as `H = H_rgb ⊕ H_vox ⊕ γ(r) ⊕ γ(d_in) ⊕ γ(d_out)`.
//! `F_prob` maps the embedding to a terminating logit, `F_pos` regresses the
//! offset of the terminating point from `d_in` by iterative error feedback,
//! and ray pooling turns the per-pair predictions of a ray into one depth.

mod infer;
mod model;
mod pool;

pub use infer::{complete_depth, CompleteOptions, Completion, QueryMode, SceneInput, Stage1Run};
pub use model::{sample_fraction, CandidateSet, RayBatch, Stage1Forward, Stage1Model};
pub use pool::{ray_pool, PairPrediction, RayPrediction};

use crate::camera::Ray;
use crate::encoders::{PosEnc, RGB_EMBED_DIM};
use crate::error::{contract, Result};
use crate::geom::Vec3;
use crate::voxel::{PairMethod, Workspace};


#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolMode {
    #[default]
    Argmax,
    WeightedSum,
}
text_enum!(PoolMode { Argmax => "argmax", WeightedSum => "wsum" });

/// How candidate terminating points inside a voxel segment are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Candidates {
    /// One point per pair at a regressed offset.
    #[default]
    Learned,
    /// Fixed stratified samples per pair, each scored by `F_prob`.
    Sampled,
}
text_enum!(Candidates { Learned => "learned", Sampled => "sampled" });

/// Normalization of terminating logits along a ray.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ProbMode {
    #[default]
    Softmax,
    Sigmoid,
}
text_enum!(ProbMode { Softmax => "softmax", Sigmoid => "sigmoid" });

text_enum!(PairMethod { Exhaustive => "exhaustive", Traversal => "traversal" });

/// Architecture and geometry of a stage-1 model.
#[derive(Clone, Debug, PartialEq)]
pub struct LidfConfig {
    pub workspace: Workspace,
    pub grid_n: usize,
    pub pe: PosEnc,
    pub c_v: usize,
    pub hidden: usize,
    pub ief_steps: usize,
    pub ray_info: bool,
    pub use_rgb: bool,
    pub use_vox: bool,
    pub candidates: Candidates,
    pub samples: usize,
    pub prob: ProbMode,
    pub pool: PoolMode,
}

impl Default for LidfConfig {
    fn default() -> Self {
        Self {
            workspace: Workspace::default(),
            grid_n: 8,
            pe: PosEnc::default(),
            c_v: 64,
            hidden: 128,
            ief_steps: 3,
            ray_info: true,
            use_rgb: true,
            use_vox: true,
            candidates: Candidates::Learned,
            samples: 8,
            prob: ProbMode::Softmax,
            pool: PoolMode::Argmax,
        }
    }
}

/// Widths of the embedding blocks; a disabled block has width 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingLayout {
    pub rgb: usize,
    pub vox: usize,
    /// Width of each of γ(r), γ(d_in), γ(d_out).
    pub ray_part: usize,
}

impl EmbeddingLayout {
    pub fn new(cfg: &LidfConfig) -> Self {
        Self {
            rgb: if cfg.use_rgb { RGB_EMBED_DIM } else { 0 },
            vox: if cfg.use_vox { cfg.c_v } else { 0 },
            ray_part: if cfg.ray_info { cfg.pe.dim(3) } else { 0 },
        }
    }

    pub fn total(&self) -> usize {
        self.rgb + self.vox + 3 * self.ray_part
    }

    pub fn rgb_rows(&self) -> std::ops::Range<usize> {
        0..self.rgb
    }

    pub fn vox_rows(&self) -> std::ops::Range<usize> {
        self.rgb..self.rgb + self.vox
    }

    pub fn dir_rows(&self) -> std::ops::Range<usize> {
        let s = self.rgb + self.vox;
        s..s + self.ray_part
    }

    /// Rows of γ(d_in) ⊕ γ(d_out).
    pub fn segment_rows(&self) -> std::ops::Range<usize> {
        let s = self.rgb + self.vox + self.ray_part;
        s..s + 2 * self.ray_part
    }
}

/// Encodes a ray direction (already unit length).
pub fn encode_direction(pe: &PosEnc, ray: &Ray, out: &mut Vec<f32>) {
    pe.encode_into(&ray.dir.to_array(), out);
}

/// Encodes a position after mapping the workspace onto `[-1, 1]³`.
pub fn encode_position(pe: &PosEnc, ws: &Workspace, p: Vec3, out: &mut Vec<f32>) {
    pe.encode_into(&ws.normalize(p).to_array(), out);
}

/// Concatenates `H_rgb ⊕ H_vox ⊕ γ(r) ⊕ γ(d_in) ⊕ γ(d_out)` for one pair.
pub fn assemble_embedding(
    cfg: &LidfConfig,
    h_rgb: &[f32],
    h_vox: &[f32],
    ray: &Ray,
    d_in: Vec3,
    d_out: Vec3,
) -> Result<Vec<f32>> {
    let layout = EmbeddingLayout::new(cfg);
    if h_rgb.len() != layout.rgb || h_vox.len() != layout.vox {
        return Err(contract(format!(
            "embedding parts have lengths ({}, {}), expected ({}, {})",
            h_rgb.len(),
            h_vox.len(),
            layout.rgb,
            layout.vox
        )));
    }
    let mut out = Vec::with_capacity(layout.total());
    out.extend_from_slice(h_rgb);
    out.extend_from_slice(h_vox);
    if cfg.ray_info {
        encode_direction(&cfg.pe, ray, &mut out);
        encode_position(&cfg.pe, &cfg.workspace, d_in, &mut out);
        encode_position(&cfg.pe, &cfg.workspace, d_out, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_embedding_is_282_wide() {
        let cfg = LidfConfig::default();
        let layout = EmbeddingLayout::new(&cfg);
        assert_eq!(layout.total(), 128 + 64 + 90);
        assert_eq!(layout.segment_rows(), 222..282);
    }

    #[test]
    fn zero_parts_leave_only_cosine_slots() {
        let cfg = LidfConfig {
            workspace: Workspace::new(Vec3::splat(-1.0), Vec3::splat(1.0)).unwrap(),
            ..Default::default()
        };
        let ray = Ray {
            origin: Vec3::ZERO,
            dir: Vec3::ZERO,
        };
        let h = assemble_embedding(&cfg, &[0.0; 128], &[0.0; 64], &ray, Vec3::ZERO, Vec3::ZERO).unwrap();
        assert_eq!(h.len(), 282);
        assert!(h[..192].iter().all(|&x| x == 0.0));
        for (k, &x) in h[192..].iter().enumerate() {
            let want = if k % 2 == 0 { 0.0 } else { 1.0 };
            assert!((x - want).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_part_length_is_rejected() {
        let cfg = LidfConfig::default();
        let ray = Ray::new(Vec3::ZERO, Vec3::new(0.0, 0.0, 1.0));
        assert!(assemble_embedding(&cfg, &[0.0; 127], &[0.0; 64], &ray, Vec3::ZERO, Vec3::ZERO).is_err());
    }

    #[test]
    fn enums_round_trip_through_text() {
        for m in [PoolMode::Argmax, PoolMode::WeightedSum] {
            assert_eq!(m.to_string().parse::<PoolMode>().unwrap(), m);
        }
        assert!("mean".parse::<PoolMode>().is_err());
        assert_eq!("sampled".parse::<Candidates>().unwrap(), Candidates::Sampled);
        assert_eq!("sigmoid".parse::<ProbMode>().unwrap(), ProbMode::Sigmoid);
        assert_eq!("traversal".parse::<PairMethod>().unwrap(), PairMethod::Traversal);
    }
}
