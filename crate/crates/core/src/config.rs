//! Flat `key = value` run configuration.
//!
//! Lines hold one assignment each; `#` starts a comment. Every key has a
//! default, unknown and repeated keys are rejected, and
//! [`Config::reference`] prints the complete default file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::Vec3;
use crate::lidf::LidfConfig;
use crate::losses::{LossStage, LossWeights};
use crate::synth::{AugmentConfig, SynthConfig};
use crate::voxel::{PairMethod, Workspace};

/// Optimization schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub lr_late: f32,
    pub epochs: usize,
    /// Multiplies every epoch count; small values give quick desk runs.
    pub scale: f64,
    pub batch_images: usize,
    pub batch_rays: usize,
    pub hnm_fraction: f64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            lr_late: 1e-4,
            epochs: 60,
            scale: 1.0,
            batch_images: 4,
            batch_rays: 512,
            hnm_fraction: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    fn scaled(&self, epochs: f64) -> usize {
        ((epochs * self.scale).round() as usize).max(1)
    }

    pub fn stage1_epochs(&self) -> usize {
        self.scaled(self.epochs as f64)
    }

    /// Epochs of the two refinement phases (full loss, then hard negatives).
    pub fn refine_epochs(&self) -> (usize, usize) {
        let half = self.epochs as f64 / 2.0;
        (self.scaled(half), self.scaled(half))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: LidfConfig,
    pub pair_method: PairMethod,
    pub refine_iters: usize,
    pub train: TrainConfig,
    pub stage1_loss: LossWeights,
    pub refine_early_loss: LossWeights,
    pub refine_late_loss: LossWeights,
    pub data: SynthConfig,
    pub augment: AugmentConfig,
    pub eval_size: (usize, usize),
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: LidfConfig::default(),
            pair_method: PairMethod::default(),
            refine_iters: 2,
            train: TrainConfig::default(),
            stage1_loss: LossWeights::for_stage(LossStage::Stage1),
            refine_early_loss: LossWeights::for_stage(LossStage::RefineEarly),
            refine_late_loss: LossWeights::for_stage(LossStage::RefineLate),
            data: SynthConfig::default(),
            augment: AugmentConfig::default(),
            eval_size: crate::metrics::EVAL_SIZE,
            seed: 0,
        }
    }
}

const KEYS: &[(&str, &str)] = &[
    ("workspace.min", "lower workspace corner in camera coordinates (m)"),
    ("workspace.max", "upper workspace corner in camera coordinates (m)"),
    ("grid.n", "voxels per workspace axis"),
    ("pair.method", "ray-voxel pair generation: exhaustive | traversal"),
    ("enc.pe_freqs", "positional encoding frequencies per coordinate"),
    ("enc.posenc", "apply positional encoding (false passes raw coordinates)"),
    ("enc.c_v", "voxel embedding width"),
    ("model.hidden", "hidden width of F_prob and F_pos"),
    ("model.ief_steps", "iterative error feedback steps of F_pos"),
    ("model.ray_info", "append ray direction and segment end points to the embedding"),
    ("model.use_rgb", "append the RGB embedding"),
    ("model.use_vox", "append the voxel embedding"),
    ("model.candidates", "terminating candidates per pair: learned | sampled"),
    ("model.samples", "candidates per pair in sampled mode"),
    ("model.prob", "terminating probability normalization: softmax | sigmoid"),
    ("pool.mode", "ray pooling: argmax | wsum"),
    ("refine.iters", "refinement iterations at inference"),
    ("train.lr", "stage-1 and early refinement learning rate"),
    ("train.lr_late", "late refinement learning rate"),
    ("train.epochs", "stage-1 epochs; refinement runs half of them per phase"),
    ("train.scale", "multiplier on every epoch count"),
    ("train.batch_images", "images per optimization step"),
    ("train.batch_rays", "query rays per optimization step"),
    ("train.hnm_fraction", "share of highest-error rays kept in the late refinement phase"),
    ("train.augment", "augment RGB during training"),
    ("loss.stage1.pos", "stage-1 position weight"),
    ("loss.stage1.prob", "stage-1 terminating probability weight"),
    ("loss.stage1.sn", "stage-1 surface normal weight"),
    ("loss.refine_early.pos", "early refinement position weight"),
    ("loss.refine_early.prob", "early refinement probability weight (must be 0)"),
    ("loss.refine_early.sn", "early refinement surface normal weight"),
    ("loss.refine_late.pos", "late refinement position weight"),
    ("loss.refine_late.prob", "late refinement probability weight (must be 0)"),
    ("loss.refine_late.sn", "late refinement surface normal weight"),
    ("data.width", "image width (px)"),
    ("data.height", "image height (px)"),
    ("data.objects_min", "fewest objects per scene"),
    ("data.objects_max", "most objects per scene"),
    ("data.transparent_max", "most transparent objects per scene (at least one is)"),
    ("data.size_min", "smallest object size (m)"),
    ("data.size_max", "largest object size (m)"),
    ("data.plane_depth_min", "nearest plane distance on the optical axis (m)"),
    ("data.plane_depth_max", "farthest plane distance on the optical axis (m)"),
    ("data.tilt_max_deg", "largest plane tilt (degrees)"),
    ("data.glass_alpha", "opacity of transparent surfaces in RGB"),
    ("data.opaque_dropout", "probability of dropping an opaque-object depth pixel"),
    ("data.holes_min", "fewest elliptical holes"),
    ("data.holes_max", "most elliptical holes"),
    ("data.hole_radius_min", "smallest hole radius (px)"),
    ("data.hole_radius_max", "largest hole radius (px)"),
    ("data.noise_max", "largest Gaussian pixel noise sigma"),
    ("data.blur_max", "longest motion blur streak (px)"),
    ("data.hue_max", "largest hue shift"),
    ("data.sv_max", "largest saturation and value shift"),
    ("eval.width", "evaluation width (px)"),
    ("eval.height", "evaluation height (px)"),
    ("seed", "base seed for initialization, batching and augmentation"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::Config(format!("{key}: cannot parse `{v}`: {e}")))
}

fn parse_vec3(key: &str, v: &str) -> Result<Vec3> {
    let parts: Vec<f32> = v.split_whitespace().map(|p| parse(key, p)).collect::<Result<_>>()?;
    match parts[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(Error::Config(format!("{key}: expected three numbers, found `{v}`"))),
    }
}

fn vec3(v: Vec3) -> String {
    format!("{} {} {}", v.x, v.y, v.z)
}

impl Config {
    /// Every key with its one-line description, in file order.
    pub fn keys() -> impl Iterator<Item = (&'static str, &'static str)> {
        KEYS.iter().copied()
    }

    fn weights_mut(&mut self, stage: &str) -> &mut LossWeights {
        match stage {
            "stage1" => &mut self.stage1_loss,
            "refine_early" => &mut self.refine_early_loss,
            _ => &mut self.refine_late_loss,
        }
    }

    fn weights(&self, stage: &str) -> &LossWeights {
        match stage {
            "stage1" => &self.stage1_loss,
            "refine_early" => &self.refine_early_loss,
            _ => &self.refine_late_loss,
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let d = &mut self.data;
        let a = &mut self.augment;
        let t = &mut self.train;
        match key {
            "workspace.min" => m.workspace.min = parse_vec3(key, v)?,
            "workspace.max" => m.workspace.max = parse_vec3(key, v)?,
            "grid.n" => m.grid_n = parse(key, v)?,
            "pair.method" => self.pair_method = parse(key, v)?,
            "enc.pe_freqs" => m.pe.freqs = parse(key, v)?,
            "enc.posenc" => m.pe.enabled = parse(key, v)?,
            "enc.c_v" => m.c_v = parse(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.ief_steps" => m.ief_steps = parse(key, v)?,
            "model.ray_info" => m.ray_info = parse(key, v)?,
            "model.use_rgb" => m.use_rgb = parse(key, v)?,
            "model.use_vox" => m.use_vox = parse(key, v)?,
            "model.candidates" => m.candidates = parse(key, v)?,
            "model.samples" => m.samples = parse(key, v)?,
            "model.prob" => m.prob = parse(key, v)?,
            "pool.mode" => m.pool = parse(key, v)?,
            "refine.iters" => self.refine_iters = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.lr_late" => t.lr_late = parse(key, v)?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.scale" => t.scale = parse(key, v)?,
            "train.batch_images" => t.batch_images = parse(key, v)?,
            "train.batch_rays" => t.batch_rays = parse(key, v)?,
            "train.hnm_fraction" => t.hnm_fraction = parse(key, v)?,
            "train.augment" => t.augment = parse(key, v)?,
            "data.width" => d.width = parse(key, v)?,
            "data.height" => d.height = parse(key, v)?,
            "data.objects_min" => d.objects_min = parse(key, v)?,
            "data.objects_max" => d.objects_max = parse(key, v)?,
            "data.transparent_max" => d.transparent_max = parse(key, v)?,
            "data.size_min" => d.size_min = parse(key, v)?,
            "data.size_max" => d.size_max = parse(key, v)?,
            "data.plane_depth_min" => d.plane_depth_min = parse(key, v)?,
            "data.plane_depth_max" => d.plane_depth_max = parse(key, v)?,
            "data.tilt_max_deg" => d.tilt_max_deg = parse(key, v)?,
            "data.glass_alpha" => d.glass_alpha = parse(key, v)?,
            "data.opaque_dropout" => d.opaque_dropout = parse(key, v)?,
            "data.holes_min" => d.holes_min = parse(key, v)?,
            "data.holes_max" => d.holes_max = parse(key, v)?,
            "data.hole_radius_min" => d.hole_radius_min = parse(key, v)?,
            "data.hole_radius_max" => d.hole_radius_max = parse(key, v)?,
            "data.noise_max" => a.noise_max = parse(key, v)?,
            "data.blur_max" => a.blur_max = parse(key, v)?,
            "data.hue_max" => a.hue_max = parse(key, v)?,
            "data.sv_max" => a.sv_max = parse(key, v)?,
            "eval.width" => self.eval_size.0 = parse(key, v)?,
            "eval.height" => self.eval_size.1 = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            _ => {
                let Some(rest) = key.strip_prefix("loss.") else {
                    return Err(Error::Config(format!("unknown key `{key}`")));
                };
                let (stage, term) = rest
                    .split_once('.')
                    .filter(|(s, _)| ["stage1", "refine_early", "refine_late"].contains(s))
                    .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
                let w = self.weights_mut(stage);
                match term {
                    "pos" => w.pos = parse(key, v)?,
                    "prob" => w.prob = parse(key, v)?,
                    "sn" => w.sn = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let d = &self.data;
        let a = &self.augment;
        let t = &self.train;
        Some(match key {
            "workspace.min" => vec3(m.workspace.min),
            "workspace.max" => vec3(m.workspace.max),
            "grid.n" => m.grid_n.to_string(),
            "pair.method" => self.pair_method.to_string(),
            "enc.pe_freqs" => m.pe.freqs.to_string(),
            "enc.posenc" => m.pe.enabled.to_string(),
            "enc.c_v" => m.c_v.to_string(),
            "model.hidden" => m.hidden.to_string(),
            "model.ief_steps" => m.ief_steps.to_string(),
            "model.ray_info" => m.ray_info.to_string(),
            "model.use_rgb" => m.use_rgb.to_string(),
            "model.use_vox" => m.use_vox.to_string(),
            "model.candidates" => m.candidates.to_string(),
            "model.samples" => m.samples.to_string(),
            "model.prob" => m.prob.to_string(),
            "pool.mode" => m.pool.to_string(),
            "refine.iters" => self.refine_iters.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.lr_late" => t.lr_late.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.scale" => t.scale.to_string(),
            "train.batch_images" => t.batch_images.to_string(),
            "train.batch_rays" => t.batch_rays.to_string(),
            "train.hnm_fraction" => t.hnm_fraction.to_string(),
            "train.augment" => t.augment.to_string(),
            "data.width" => d.width.to_string(),
            "data.height" => d.height.to_string(),
            "data.objects_min" => d.objects_min.to_string(),
            "data.objects_max" => d.objects_max.to_string(),
            "data.transparent_max" => d.transparent_max.to_string(),
            "data.size_min" => d.size_min.to_string(),
            "data.size_max" => d.size_max.to_string(),
            "data.plane_depth_min" => d.plane_depth_min.to_string(),
            "data.plane_depth_max" => d.plane_depth_max.to_string(),
            "data.tilt_max_deg" => d.tilt_max_deg.to_string(),
            "data.glass_alpha" => d.glass_alpha.to_string(),
            "data.opaque_dropout" => d.opaque_dropout.to_string(),
            "data.holes_min" => d.holes_min.to_string(),
            "data.holes_max" => d.holes_max.to_string(),
            "data.hole_radius_min" => d.hole_radius_min.to_string(),
            "data.hole_radius_max" => d.hole_radius_max.to_string(),
            "data.noise_max" => a.noise_max.to_string(),
            "data.blur_max" => a.blur_max.to_string(),
            "data.hue_max" => a.hue_max.to_string(),
            "data.sv_max" => a.sv_max.to_string(),
            "eval.width" => self.eval_size.0.to_string(),
            "eval.height" => self.eval_size.1.to_string(),
            "seed" => self.seed.to_string(),
            _ => {
                let (stage, term) = key.strip_prefix("loss.")?.split_once('.')?;
                if !["stage1", "refine_early", "refine_late"].contains(&stage) {
                    return None;
                }
                let w = self.weights(stage);
                match term {
                    "pos" => w.pos.to_string(),
                    "prob" => w.prob.to_string(),
                    "sn" => w.sn.to_string(),
                    _ => return None,
                }
            }
        })
    }

    /// Parses configuration text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let content = line.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: `{k}` given twice", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.to_string().trim_start_matches("config: "))))
    }

    /// The full file for this configuration, one commented key per entry.
    pub fn reference(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for (key, doc) in KEYS {
            let head = key.split('.').next().unwrap();
            if head != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = head;
            }
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).unwrap()));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        Workspace::new(m.workspace.min, m.workspace.max).map_err(|e| Error::Config(e.to_string()))?;
        if m.grid_n == 0 || m.c_v == 0 || m.hidden == 0 || m.samples == 0 {
            return bad("grid.n, enc.c_v, model.hidden and model.samples must be positive".into());
        }
        if m.pe.enabled && m.pe.freqs == 0 {
            return bad("enc.pe_freqs must be positive when positional encoding is on".into());
        }
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr_late > 0.0 && t.lr.is_finite() && t.lr_late.is_finite()) {
            return bad("learning rates must be positive".into());
        }
        if !(t.scale > 0.0 && t.scale.is_finite()) || t.epochs == 0 {
            return bad("train.epochs and train.scale must be positive".into());
        }
        if t.batch_images == 0 || t.batch_rays == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(t.hnm_fraction > 0.0 && t.hnm_fraction <= 1.0) {
            return bad(format!("train.hnm_fraction {} outside (0, 1]", t.hnm_fraction));
        }
        self.stage1_loss.validate()?;
        self.refine_early_loss.validate()?;
        self.refine_late_loss.validate()?;
        let d = &self.data;
        if d.width < 3 || d.height < 3 {
            return bad("images must be at least 3x3".into());
        }
        if d.objects_min == 0 || d.objects_min > d.objects_max || d.transparent_max == 0 {
            return bad("need 1 <= data.objects_min <= data.objects_max and data.transparent_max >= 1".into());
        }
        if !(0.0 < d.size_min && d.size_min <= d.size_max) {
            return bad("need 0 < data.size_min <= data.size_max".into());
        }
        if !(0.0 < d.plane_depth_min && d.plane_depth_min <= d.plane_depth_max) {
            return bad("need 0 < data.plane_depth_min <= data.plane_depth_max".into());
        }
        if !(0.0..=1.0).contains(&d.opaque_dropout) || !(0.0..=1.0).contains(&d.glass_alpha) {
            return bad("data.opaque_dropout and data.glass_alpha must lie in [0, 1]".into());
        }
        if d.holes_min > d.holes_max || d.hole_radius_min > d.hole_radius_max || d.hole_radius_min < 0.0 {
            return bad("hole count and radius ranges must be ordered and non-negative".into());
        }
        if self.eval_size.0 == 0 || self.eval_size.1 == 0 {
            return bad("evaluation size must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lidf::PoolMode;

    #[test]
    fn reference_round_trips_and_covers_every_key() {
        let text = Config::default().reference();
        assert_eq!(Config::parse(&text).unwrap(), Config::default());
        for (key, _) in Config::keys() {
            assert!(text.contains(&format!("\n{key} = ")), "{key}");
        }
        assert!(text.contains("grid.n = 8"));
        assert!(text.contains("train.lr = 0.001"));
        assert!(text.contains("train.lr_late = 0.0001"));
        assert!(text.contains("pool.mode = argmax"));
    }

    #[test]
    fn modified_values_round_trip() {
        let mut cfg = Config::default();
        cfg.set("pool.mode", "wsum").unwrap();
        cfg.set("workspace.min", "-0.3 -0.2 0.1").unwrap();
        cfg.set("loss.refine_late.sn", "3.5").unwrap();
        cfg.set("train.scale", "0.125").unwrap();
        assert_eq!(cfg.model.pool, PoolMode::WeightedSum);
        assert_eq!(Config::parse(&cfg.reference()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = Config::parse("# header\n\ngrid.n = 4   # coarse\nseed=9\n").unwrap();
        assert_eq!(cfg.model.grid_n, 4);
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn rejections() {
        for text in [
            "grid.size = 4",
            "grid.n = four",
            "grid.n = 4\ngrid.n = 5",
            "loss.stage2.pos = 1",
            "loss.refine_early.prob = 0.5",
            "workspace.min = 1 2",
            "pool.mode = mean",
            "no equals sign",
            "train.hnm_fraction = 0",
        ] {
            let err = Config::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let err = Config::parse("\n\ngrid.size = 4").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("grid.size"), "{err}");
    }

    #[test]
    fn scaled_epochs() {
        let mut t = TrainConfig::default();
        assert_eq!(t.stage1_epochs(), 60);
        assert_eq!(t.refine_epochs(), (30, 30));
        t.scale = 0.1;
        assert_eq!(t.stage1_epochs(), 6);
        assert_eq!(t.refine_epochs(), (3, 3));
        t.scale = 0.001;
        assert_eq!(t.refine_epochs(), (1, 1));
    }
}
