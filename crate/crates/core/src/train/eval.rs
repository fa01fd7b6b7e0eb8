use rayon::prelude::*;

use super::Bundle;
use crate::camera::{backproject, CameraIntrinsics};
use crate::error::{contract, Result};
use crate::image::{DepthImage, Mask, RgbImage};
use crate::lidf::{CompleteOptions, Completion, QueryMode};
use crate::metrics::{accumulate_resized, MetricAccumulator, MetricReport};
use crate::refine::{refine_depth, Refinement};
use crate::synth::Sample;

/// Pixels a report covers; both modes require ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    #[default]
    Transparent,
    All,
}
text_enum!(MaskMode { Transparent => "transparent", All => "all" });

impl MaskMode {
    pub fn mask(self, sample_mask: &Mask, gt: &DepthImage) -> Mask {
        let data = gt
            .data
            .iter()
            .zip(&sample_mask.data)
            .map(|(&z, &m)| z > 0.0 && (m || self == MaskMode::All))
            .collect();
        Mask {
            width: gt.width,
            height: gt.height,
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub stage1: Completion,
    /// Final depth: the stage-1 completion refined `iters` times.
    pub depth: DepthImage,
    pub refinement: Option<Refinement>,
}

/// Completes one frame. Pixels with input depth keep it; refinement runs
/// only when the bundle has a refinement model and `iters > 0`.
pub fn predict(bundle: &Bundle, rgb: &RgbImage, depth: &DepthImage, k: &CameraIntrinsics, iters: usize) -> Result<Prediction> {
    let opts = CompleteOptions {
        query: QueryMode::Missing,
        pair_method: bundle.config.pair_method,
    };
    let run = bundle.stage1.run(rgb, depth, k, &opts)?;
    let (depth, refinement) = match (&bundle.refine, iters) {
        (Some(model), it) if it > 0 => {
            let (d, r) = refine_depth(&run, model, it)?;
            (d, Some(r))
        }
        _ => (run.completion.depth.clone(), None),
    };
    Ok(Prediction {
        stage1: run.completion,
        depth,
        refinement,
    })
}

/// Pooled metrics of given predictions against `samples` at `size`.
pub fn evaluate_depths(preds: &[DepthImage], samples: &[Sample], mode: MaskMode, size: (usize, usize)) -> Result<MetricReport> {
    if preds.len() != samples.len() {
        return Err(contract(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut acc = MetricAccumulator::default();
    for (p, s) in preds.iter().zip(samples) {
        if (p.width, p.height) != (s.gt_depth.width, s.gt_depth.height) {
            return Err(contract(format!(
                "prediction is {}x{} but the sample is {}x{}",
                p.width, p.height, s.gt_depth.width, s.gt_depth.height
            )));
        }
        accumulate_resized(&mut acc, p, &s.gt_depth, &mode.mask(&s.mask, &s.gt_depth), size)?;
    }
    acc.finish()
}

/// Predicts every sample and pools the metrics.
pub fn evaluate(bundle: &Bundle, samples: &[Sample], iters: usize, mode: MaskMode) -> Result<MetricReport> {
    let preds: Vec<DepthImage> = samples
        .par_iter()
        .map(|s| Ok(predict(bundle, &s.rgb, &s.input_depth, &s.intrinsics, iters)?.depth))
        .collect::<Result<_>>()?;
    evaluate_depths(&preds, samples, mode, bundle.config.eval_size)
}

/// Terminating-voxel classification of stage 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VoxelAccuracy {
    /// Pixels whose winning voxel is the ground-truth voxel.
    pub exact: usize,
    /// Pixels within one voxel (Chebyshev distance on grid coordinates).
    pub within_one: usize,
    /// Scored pixels: predicted transparent pixels whose ground-truth hit
    /// lies inside the workspace.
    pub total: usize,
}

impl VoxelAccuracy {
    pub fn within_one_rate(&self) -> f64 {
        self.within_one as f64 / self.total.max(1) as f64
    }
}

/// Compares each predicted transparent pixel's winning voxel with the voxel
/// holding its ground-truth point. Pixels without a winner count as misses.
pub fn voxel_accuracy(bundle: &Bundle, samples: &[Sample]) -> Result<VoxelAccuracy> {
    let parts: Vec<VoxelAccuracy> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(bundle, &s.rgb, &s.input_depth, &s.intrinsics, 0)?;
            let grid = crate::voxel::VoxelGrid::empty(bundle.config.model.workspace, bundle.config.model.grid_n)?;
            let gt_cloud = backproject(&s.gt_depth, &s.intrinsics)?;
            let mut acc = VoxelAccuracy::default();
            for i in 0..s.gt_depth.len() {
                if !s.mask.data[i] || !pred.stage1.queried[i] || s.gt_depth.data[i] <= 0.0 {
                    continue;
                }
                let (u, v) = (i % s.gt_depth.width, i / s.gt_depth.width);
                let Some(gt_voxel) = gt_cloud.point(u, v).and_then(|p| grid.voxel_of(p)) else {
                    continue;
                };
                acc.total += 1;
                if let Some(w) = pred.stage1.chosen_voxel[i] {
                    let (a, b) = (grid.coords(w), grid.coords(gt_voxel));
                    let dist = (0..3).map(|d| a[d].abs_diff(b[d])).max().unwrap();
                    acc.exact += (dist == 0) as usize;
                    acc.within_one += (dist <= 1) as usize;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(VoxelAccuracy::default(), |a, b| VoxelAccuracy {
        exact: a.exact + b.exact,
        within_one: a.within_one + b.within_one,
        total: a.total + b.total,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_modes_require_ground_truth() {
        let gt = DepthImage::new(3, 1, vec![1.0, 0.0, 2.0]).unwrap();
        let m = Mask::new(3, 1, vec![true, true, false]).unwrap();
        assert_eq!(MaskMode::Transparent.mask(&m, &gt).data, vec![true, false, false]);
        assert_eq!(MaskMode::All.mask(&m, &gt).data, vec![true, false, true]);
        assert_eq!("all".parse::<MaskMode>().unwrap(), MaskMode::All);
    }
}
