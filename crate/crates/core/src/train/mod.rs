//! Training, evaluation and ablation drivers built on the model modules.
//!
//! Every random choice (initialization, image order, augmentation, ray
//! sampling) draws from a stream derived from the configured seed, and
//! per-image gradients are summed in image order, so a run is bitwise
//! reproducible regardless of the thread count.

mod ablate;
mod bundle;
mod eval;
mod refine;
mod stage1;

pub use ablate::{run_ablation, variants, AblationAxis, AblationRow};
pub use bundle::{Bundle, BundleKind};
pub use eval::{
    evaluate, evaluate_depths, predict, voxel_accuracy, MaskMode, Prediction, VoxelAccuracy,
};
pub use refine::train_refine;
pub use stage1::{train_stage1, training_loss};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::synth::derive_seed;

/// Loss values and throughput of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub phase: &'static str,
    pub epoch: usize,
    pub lr: f32,
    /// Ray-weighted mean of the weighted total loss.
    pub loss: f64,
    pub pos: f64,
    pub prob: f64,
    pub sn: f64,
    pub rays: usize,
    pub seconds: f64,
}

impl std::fmt::Display for EpochStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} epoch {:>3} lr {:.0e} loss {:.5} (pos {:.5} prob {:.4} sn {:.4}) {} rays {:.1}s",
            self.phase, self.epoch, self.lr, self.loss, self.pos, self.prob, self.sn, self.rays, self.seconds
        )
    }
}

/// Independent random streams of a run.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Stage1Init = 1,
    RefineInit,
    Order,
    Augment,
    Rays,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, stream as u64), index))
}

/// Running sums for [`EpochStats`].
#[derive(Default)]
struct EpochSums {
    loss: f64,
    pos: f64,
    prob: f64,
    sn: f64,
    rays: usize,
}

impl EpochSums {
    fn add(&mut self, rays: usize, loss: f64, pos: f64, prob: f64, sn: f64) {
        let w = rays as f64;
        self.loss += w * loss;
        self.pos += w * pos;
        self.prob += w * prob;
        self.sn += w * sn;
        self.rays += rays;
    }

    fn finish(&self, phase: &'static str, epoch: usize, lr: f32, seconds: f64) -> EpochStats {
        let n = self.rays.max(1) as f64;
        EpochStats {
            phase,
            epoch,
            lr,
            loss: self.loss / n,
            pos: self.pos / n,
            prob: self.prob / n,
            sn: self.sn / n,
            rays: self.rays,
            seconds,
        }
    }
}
