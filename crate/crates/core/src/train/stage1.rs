use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{stream_rng, Bundle, EpochStats, EpochSums, Stream};
use crate::camera::{backproject, OrganizedPointCloud};
use crate::config::Config;
use crate::error::{contract, Result};
use crate::image::RgbImage;
use crate::lidf::{Candidates, ProbMode, RayBatch, SceneInput, Stage1Model};
use crate::losses::{
    candidate_targets, label_targets, loss_pos_graph, loss_prob_graph, loss_prob_sigmoid_graph, loss_sn_graph,
    scatter_depth, total_loss, LossComponents, LossWeights,
};
use crate::nn::{Adam, Graph, Var};
use crate::synth::{augment_rgb, derive_seed, Sample};
use crate::voxel::VoxelGrid;

/// Pixels trained on: missing in the input and labeled in the ground truth.
pub(super) fn supervised_pixels(s: &Sample) -> Vec<usize> {
    (0..s.input_depth.len())
        .filter(|&i| s.input_depth.data[i] <= 0.0 && s.gt_depth.data[i] > 0.0)
        .collect()
}

/// Weighted sum of the loss terms present in the graph.
pub(super) fn combine(g: &mut Graph, terms: [(Option<Var>, f64); 3]) -> Result<(Var, LossComponents)> {
    let mut total: Option<Var> = None;
    let mut values = [0.0f64; 3];
    for (k, (term, w)) in terms.into_iter().enumerate() {
        let Some(v) = term else { continue };
        values[k] = g.scalar(v) as f64;
        if w == 0.0 {
            continue;
        }
        let s = g.scale(v, w as f32);
        total = Some(match total {
            Some(t) => g.add(t, s),
            None => s,
        });
    }
    let c = LossComponents {
        pos: values[0],
        prob: values[1],
        sn: values[2],
    };
    let total = match total {
        Some(t) => t,
        None => g.constant_matrix(1, 1, vec![0.0]),
    };
    Ok((total, c))
}

pub(super) struct ImageLoss {
    pub graph: Graph,
    pub rays: usize,
    pub total: f64,
    pub parts: LossComponents,
}

/// Stage-1 loss of one image over the query `pixels`. When `scale` is
/// given the graph is differentiated with the loss multiplied by it.
fn image_loss(
    model: &Stage1Model,
    cfg: &Config,
    weights: &LossWeights,
    sample: &Sample,
    rgb: &RgbImage,
    gt_cloud: &OrganizedPointCloud,
    pixels: &[usize],
    scale: Option<f32>,
) -> Result<Option<ImageLoss>> {
    let k = &sample.intrinsics;
    let m = &model.cfg;
    let scene = SceneInput::new(rgb, &sample.input_depth, k, m.workspace, m.grid_n)?;
    let w = k.width;
    let queries: Vec<(usize, usize)> = pixels.iter().map(|&i| (i % w, i / w)).collect();
    let (batch, _) = RayBatch::build(&queries, k, &scene.grid, cfg.pair_method)?;
    if batch.num_rays() == 0 {
        return Ok(None);
    }
    let mut g = if scale.is_some() { Graph::new() } else { Graph::inference() };
    let fwd = model.forward(&mut g, rgb, &scene.points, &batch)?;
    let flat: Vec<usize> = batch.pixels.iter().map(|&(u, v)| v * w + u).collect();
    let gt: Vec<f32> = flat.iter().map(|&i| sample.gt_depth.data[i]).collect();
    let rows: Vec<usize> = (0..batch.num_rays()).collect();

    let l_pos = loss_pos_graph(&mut g, fwd.depth, &gt, &rows)?;
    let diag = VoxelGrid::empty(m.workspace, m.grid_n)?.cell_diagonal();
    let mut targets = label_targets(&batch, &gt, diag);
    if m.candidates == Candidates::Sampled {
        targets = candidate_targets(&batch, &fwd.candidates, &targets, &gt, m.samples);
    }
    let offsets = &fwd.candidates.offsets;
    let l_prob = match m.prob {
        ProbMode::Softmax => loss_prob_graph(&mut g, fwd.logits, offsets, &targets),
        ProbMode::Sigmoid => loss_prob_sigmoid_graph(&mut g, fwd.logits, offsets, &targets),
    };
    let l_sn = if weights.sn > 0.0 {
        let col = scatter_depth(&mut g, &sample.gt_depth, fwd.depth, &flat);
        loss_sn_graph(&mut g, col, k, gt_cloud, &flat)?
    } else {
        None
    };
    let (total, parts) = combine(&mut g, [(Some(l_pos), weights.pos), (l_prob, weights.prob), (l_sn, weights.sn)])?;
    let value = total_loss(&parts, weights)?;
    if let Some(s) = scale {
        let scaled = g.scale(total, s);
        g.backward(scaled)?;
    }
    Ok(Some(ImageLoss {
        graph: g,
        rays: batch.num_rays(),
        total: value,
        parts,
    }))
}

/// Trains a stage-1 model from scratch on `samples`.
pub fn train_stage1(
    config: &Config,
    samples: &[Sample],
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<(Bundle, Vec<EpochStats>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(contract("training needs at least one sample"));
    }
    let mut bundle = Bundle::init(config.clone());
    let tc = &config.train;
    let supervised: Vec<Vec<usize>> = samples.iter().map(supervised_pixels).collect();
    let gt_clouds: Vec<OrganizedPointCloud> = samples
        .par_iter()
        .map(|s| backproject(&s.gt_depth, &s.intrinsics))
        .collect::<Result<_>>()?;
    let weights = config.stage1_loss;
    let mut adam = Adam::new(tc.lr);
    let mut history = Vec::new();
    let mut step = 0u64;
    let epochs = tc.stage1_epochs();
    info!("stage 1: {} samples, {epochs} epochs", samples.len());

    for epoch in 0..epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, Stream::Order, epoch as u64));
        let mut sums = EpochSums::default();
        for chunk in order.chunks(tc.batch_images.max(1)) {
            let picks = sample_rays(chunk, &supervised, tc.batch_rays, config.seed, step);
            step += 1;
            let total_rays: usize = picks.iter().map(|p| p.len()).sum();
            if total_rays == 0 {
                continue;
            }
            let model = &bundle.stage1;
            let results: Vec<Option<ImageLoss>> = chunk
                .par_iter()
                .zip(&picks)
                .map(|(&i, pixels)| {
                    if pixels.is_empty() {
                        return Ok(None);
                    }
                    let s = &samples[i];
                    let rgb = if tc.augment {
                        let aug_seed = derive_seed(
                            derive_seed(config.seed, Stream::Augment as u64),
                            (epoch * samples.len() + i) as u64,
                        );
                        augment_rgb(&s.rgb, &config.augment, aug_seed)
                    } else {
                        s.rgb.clone()
                    };
                    let share = pixels.len() as f32 / total_rays as f32;
                    image_loss(model, config, &weights, s, &rgb, &gt_clouds[i], pixels, Some(share))
                })
                .collect::<Result<_>>()?;
            for r in results.into_iter().flatten() {
                r.graph.accumulate_into(&mut bundle.stage1);
                sums.add(r.rays, r.total, r.parts.pos, r.parts.prob, r.parts.sn);
            }
            adam.step(crate::nn::Module::params_mut(&mut bundle.stage1))?;
        }
        let stats = sums.finish("stage1", epoch, tc.lr, start.elapsed().as_secs_f64());
        progress(&stats);
        history.push(stats);
    }
    Ok((bundle, history))
}

/// Uniform draw of up to `budget` supervised pixels across the images of
/// `chunk`; returned per image in ascending pixel order.
pub(super) fn sample_rays(chunk: &[usize], supervised: &[Vec<usize>], budget: usize, seed: u64, step: u64) -> Vec<Vec<usize>> {
    let pool: Vec<(usize, usize)> = chunk
        .iter()
        .enumerate()
        .flat_map(|(slot, &i)| supervised[i].iter().map(move |&p| (slot, p)))
        .collect();
    let mut picks = vec![Vec::new(); chunk.len()];
    let take = budget.min(pool.len());
    let mut rng = stream_rng(seed, Stream::Rays, step);
    let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
    chosen.sort_unstable();
    for c in chosen {
        let (slot, p) = pool[c];
        picks[slot].push(p);
    }
    picks
}

/// Ray-weighted mean stage-1 training objective over every supervised
/// pixel of `samples`, without augmentation.
pub fn training_loss(model: &Stage1Model, config: &Config, samples: &[Sample]) -> Result<f64> {
    let weights = config.stage1_loss;
    let parts: Vec<Option<(usize, f64)>> = samples
        .par_iter()
        .map(|s| {
            let cloud = backproject(&s.gt_depth, &s.intrinsics)?;
            let pixels = supervised_pixels(s);
            if pixels.is_empty() {
                return Ok(None);
            }
            let r = image_loss(model, config, &weights, s, &s.rgb, &cloud, &pixels, None)?;
            Ok(r.map(|r| (r.rays, r.total)))
        })
        .collect::<Result<_>>()?;
    let (n, sum) = parts
        .into_iter()
        .flatten()
        .fold((0usize, 0.0f64), |(n, s), (k, v)| (n + k, s + k as f64 * v));
    if n == 0 {
        return Err(contract("no supervised rays met an occupied voxel"));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PosEnc;
    use crate::synth::{generate_samples, SynthConfig};

    pub(crate) fn desk_config() -> Config {
        let mut c = Config::default();
        c.model.grid_n = 4;
        c.model.hidden = 16;
        c.model.c_v = 8;
        c.model.pe = PosEnc::new(2, true);
        c.train.epochs = 3;
        c.train.batch_rays = 128;
        c.data = SynthConfig {
            width: 32,
            height: 24,
            ..SynthConfig::default()
        };
        c.seed = 9;
        c
    }

    #[test]
    fn ray_sampling_is_uniform_and_bounded() {
        let supervised = vec![(0..50).collect::<Vec<_>>(), vec![], (100..110).collect()];
        let picks = sample_rays(&[0, 1, 2], &supervised, 20, 1, 0);
        assert_eq!(picks.iter().map(|p| p.len()).sum::<usize>(), 20);
        assert!(picks[1].is_empty());
        assert!(picks.iter().all(|p| p.windows(2).all(|w| w[0] < w[1])));
        let all = sample_rays(&[0, 2], &supervised, 1000, 1, 0);
        assert_eq!(all[0].len() + all[1].len(), 60);
        assert_eq!(picks, sample_rays(&[0, 1, 2], &supervised, 20, 1, 0));
    }

    #[test]
    fn training_reduces_the_objective_and_is_reproducible() {
        let cfg = desk_config();
        let samples = generate_samples(&cfg.data, 5, 0, 6);
        let init = Bundle::init(cfg.clone());
        let before = training_loss(&init.stage1, &cfg, &samples).unwrap();
        let (a, hist) = train_stage1(&cfg, &samples, &mut |_| {}).unwrap();
        let after = training_loss(&a.stage1, &cfg, &samples).unwrap();
        assert_eq!(hist.len(), 3);
        assert!(after < before, "loss {before} -> {after}");
        let (b, _) = train_stage1(&cfg, &samples, &mut |_| {}).unwrap();
        assert_eq!(a.encode(), b.encode());
    }
}
