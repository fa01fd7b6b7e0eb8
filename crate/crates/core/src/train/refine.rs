use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::stage1::{combine, sample_rays, ImageLoss};
use super::{stream_rng, Bundle, EpochStats, EpochSums, Stream};
use crate::camera::{backproject, OrganizedPointCloud};
use crate::config::Config;
use crate::error::{contract, Result};
use crate::image::DepthImage;
use crate::lidf::{CompleteOptions, QueryMode};
use crate::losses::{hard_negative_mask, loss_pos_graph, loss_sn_graph, scatter_depth, total_loss, LossComponents, LossWeights};
use crate::nn::{Adam, Graph, Module};
use crate::refine::{RefineContext, RefineModel};
use crate::synth::Sample;

/// Frozen stage-1 output of one training image.
struct RefineItem {
    ctx: RefineContext,
    /// Ground-truth depth of every context ray.
    gt: Vec<f32>,
    /// Context rays with ground truth.
    labeled: Vec<usize>,
    gt_depth: DepthImage,
    gt_cloud: OrganizedPointCloud,
}

/// Which context rays a refinement loss covers.
enum RaySelection<'a> {
    Given(&'a [usize]),
    /// The hardest fraction of the labeled rays by final-iteration error.
    Hardest(f64),
}

#[allow(clippy::too_many_arguments)]
fn image_loss(
    model: &RefineModel,
    item: &RefineItem,
    weights: &LossWeights,
    iters: usize,
    k: &crate::camera::CameraIntrinsics,
    select: RaySelection,
    scale: f32,
) -> Result<Option<ImageLoss>> {
    let ctx = &item.ctx;
    let mut g = Graph::new();
    let mut t = ctx.t0.clone();
    let mut outputs = Vec::with_capacity(iters);
    for _ in 0..iters {
        let step = model.step(&mut g, ctx, &t)?;
        outputs.push(step.depth);
        t = step.t;
    }
    let rows: Vec<usize> = match select {
        RaySelection::Given(r) => r.to_vec(),
        RaySelection::Hardest(fraction) => {
            let last = g.data(*outputs.last().unwrap()).to_vec();
            let errors: Vec<f32> = item.labeled.iter().map(|&r| (last[r] - item.gt[r]).abs()).collect();
            if errors.len() < 10 {
                item.labeled.clone()
            } else {
                let mask = hard_negative_mask(&errors, fraction)?;
                item.labeled.iter().zip(mask).filter(|(_, m)| *m).map(|(&r, _)| r).collect()
            }
        }
    };
    if rows.is_empty() {
        return Ok(None);
    }
    let w = ctx.scene.cloud.width;
    let pixels: Vec<usize> = rows
        .iter()
        .map(|&r| {
            let (u, v) = ctx.batch.pixels[r];
            v * w + u
        })
        .collect();

    let mut total = None;
    let mut parts = LossComponents::default();
    for depth in outputs {
        let l_pos = loss_pos_graph(&mut g, depth, &item.gt, &rows)?;
        let l_sn = if weights.sn > 0.0 {
            let picked = g.gather_rows(depth, rows.clone());
            let col = scatter_depth(&mut g, &item.gt_depth, picked, &pixels);
            loss_sn_graph(&mut g, col, k, &item.gt_cloud, &pixels)?
        } else {
            None
        };
        let (it_total, it_parts) = combine(&mut g, [(Some(l_pos), weights.pos), (None, 0.0), (l_sn, weights.sn)])?;
        parts.pos += it_parts.pos / iters as f64;
        parts.sn += it_parts.sn / iters as f64;
        total = Some(match total {
            Some(acc) => g.add(acc, it_total),
            None => it_total,
        });
    }
    let value = total_loss(&parts, weights)?;
    let scaled = g.scale(total.unwrap(), scale / iters as f32);
    g.backward(scaled)?;
    Ok(Some(ImageLoss {
        graph: g,
        rays: rows.len(),
        total: value,
        parts,
    }))
}

/// Trains the refinement networks on top of the frozen stage 1 of `base`.
///
/// The first phase uses the early loss weights at `train.lr` on uniformly
/// sampled rays; the second uses the late weights at `train.lr_late` on the
/// hardest `train.hnm_fraction` of each image's rays. The returned bundle
/// carries both stages.
pub fn train_refine(
    base: &Bundle,
    samples: &[Sample],
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(Bundle, Vec<EpochStats>)> {
    let config: &Config = &base.config;
    config.validate()?;
    let iters = config.refine_iters;
    if iters == 0 {
        return Err(contract("refinement training needs refine.iters >= 1"));
    }
    let opts = CompleteOptions {
        query: QueryMode::Missing,
        pair_method: config.pair_method,
    };
    let items: Vec<Option<RefineItem>> = samples
        .par_iter()
        .map(|s| {
            let run = base.stage1.run(&s.rgb, &s.input_depth, &s.intrinsics, &opts)?;
            let ctx = RefineContext::from_run(&run);
            if ctx.num_rays() == 0 {
                return Ok(None);
            }
            let w = s.gt_depth.width;
            let gt: Vec<f32> = ctx.batch.pixels.iter().map(|&(u, v)| s.gt_depth.data[v * w + u]).collect();
            let labeled = (0..gt.len()).filter(|&r| gt[r] > 0.0).collect();
            Ok(Some(RefineItem {
                ctx,
                gt,
                labeled,
                gt_depth: s.gt_depth.clone(),
                gt_cloud: backproject(&s.gt_depth, &s.intrinsics)?,
            }))
        })
        .collect::<Result<_>>()?;
    let index: Vec<usize> = (0..items.len()).filter(|&i| items[i].is_some()).collect();
    if index.is_empty() {
        return Err(contract("no training image has rays for refinement"));
    }
    let labeled: Vec<Vec<usize>> = items
        .iter()
        .map(|it| it.as_ref().map(|it| it.labeled.clone()).unwrap_or_default())
        .collect();

    let mut model = Bundle::init_refine(config);
    let tc = &config.train;
    let (early, late) = tc.refine_epochs();
    let phases = [
        ("refine-early", early, tc.lr, config.refine_early_loss, false),
        ("refine-late", late, tc.lr_late, config.refine_late_loss, true),
    ];
    info!("refinement: {} images, {early}+{late} epochs", index.len());
    let mut adam = Adam::new(tc.lr);
    let mut history = Vec::new();
    let mut step = 1u64 << 32;
    let mut epoch_counter = 0u64;
    for (phase, epochs, lr, weights, hnm) in phases {
        adam.lr = lr;
        for epoch in 0..epochs {
            let start = Instant::now();
            let mut order = index.clone();
            order.shuffle(&mut stream_rng(config.seed, Stream::Order, (1 << 32) + epoch_counter));
            epoch_counter += 1;
            let mut sums = EpochSums::default();
            for chunk in order.chunks(tc.batch_images.max(1)) {
                let picks = if hnm {
                    chunk.iter().map(|&i| labeled[i].clone()).collect()
                } else {
                    sample_rays(chunk, &labeled, tc.batch_rays, config.seed, step)
                };
                step += 1;
                let total_rays: usize = if hnm {
                    picks
                        .iter()
                        .map(|p: &Vec<usize>| {
                            if p.len() < 10 {
                                p.len()
                            } else {
                                (tc.hnm_fraction * p.len() as f64).ceil() as usize
                            }
                        })
                        .sum()
                } else {
                    picks.iter().map(|p| p.len()).sum()
                };
                if total_rays == 0 {
                    continue;
                }
                let results: Vec<Option<ImageLoss>> = chunk
                    .par_iter()
                    .zip(&picks)
                    .map(|(&i, rays)| {
                        let item = items[i].as_ref().unwrap();
                        if rays.is_empty() {
                            return Ok(None);
                        }
                        let (select, n) = if hnm {
                            let n = if rays.len() < 10 { rays.len() } else { (tc.hnm_fraction * rays.len() as f64).ceil() as usize };
                            (RaySelection::Hardest(tc.hnm_fraction), n)
                        } else {
                            (RaySelection::Given(rays), rays.len())
                        };
                        let share = n as f32 / total_rays as f32;
                        image_loss(&model, item, &weights, iters, &samples[i].intrinsics, select, share)
                    })
                    .collect::<Result<_>>()?;
                for r in results.into_iter().flatten() {
                    r.graph.accumulate_into(&mut model);
                    sums.add(r.rays, r.total, r.parts.pos, r.parts.prob, r.parts.sn);
                }
                adam.step(model.params_mut())?;
            }
            let stats = sums.finish(phase, epoch, lr, start.elapsed().as_secs_f64());
            progress(&stats);
            history.push(stats);
        }
    }
    let mut out = base.clone();
    out.refine = Some(model);
    Ok((out, history))
}
