use std::time::Instant;

use super::{evaluate, train_stage1, EpochStats, MaskMode};
use crate::config::Config;
use crate::error::Result;
use crate::lidf::{Candidates, PoolMode};
use crate::metrics::MetricReport;
use crate::synth::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Pooling,
    RayInfo,
    PosEnc,
    Grid,
    Candidates,
}
text_enum!(AblationAxis {
    Pooling => "pooling",
    RayInfo => "rayinfo",
    PosEnc => "posenc",
    Grid => "grid",
    Candidates => "candidates",
});

/// Labeled configurations along one axis; everything else follows `base`.
pub fn variants(axis: AblationAxis, base: &Config) -> Vec<(String, Config)> {
    let with = |label: String, f: &dyn Fn(&mut Config)| {
        let mut c = base.clone();
        f(&mut c);
        (label, c)
    };
    match axis {
        AblationAxis::Pooling => [PoolMode::Argmax, PoolMode::WeightedSum]
            .into_iter()
            .map(|m| with(format!("pool={m}"), &|c| c.model.pool = m))
            .collect(),
        AblationAxis::RayInfo => [true, false]
            .into_iter()
            .map(|on| with(format!("ray_info={on}"), &|c| c.model.ray_info = on))
            .collect(),
        AblationAxis::PosEnc => [true, false]
            .into_iter()
            .map(|on| with(format!("posenc={on}"), &|c| c.model.pe.enabled = on))
            .collect(),
        AblationAxis::Grid => [4, 8, 16]
            .into_iter()
            .map(|n| with(format!("grid={n}"), &|c| c.model.grid_n = n))
            .collect(),
        AblationAxis::Candidates => [Candidates::Learned, Candidates::Sampled]
            .into_iter()
            .map(|m| with(format!("candidates={m}"), &|c| c.model.candidates = m))
            .collect(),
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub label: String,
    pub report: MetricReport,
    pub train_seconds: f64,
}

impl std::fmt::Display for AblationRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<22} {}  train {:.1}s", self.label, self.report.record(), self.train_seconds)
    }
}

/// Trains stage 1 for every variant of `axis` on `train` and evaluates it
/// on the transparent pixels of `test`.
pub fn run_ablation(
    axis: AblationAxis,
    base: &Config,
    train: &[Sample],
    test: &[Sample],
    progress: &mut dyn FnMut(&str, &EpochStats),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in variants(axis, base) {
        let start = Instant::now();
        let (bundle, _) = train_stage1(&cfg, train, &mut |s| progress(&label, s))?;
        let train_seconds = start.elapsed().as_secs_f64();
        let report = evaluate(&bundle, test, 0, MaskMode::Transparent)?;
        rows.push(AblationRow {
            label,
            report,
            train_seconds,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn each_axis_changes_exactly_its_setting() {
        let base = Config::default();
        let v = variants(AblationAxis::Grid, &base);
        assert_eq!(v.iter().map(|(_, c)| c.model.grid_n).collect::<Vec<_>>(), vec![4, 8, 16]);
        for axis in ["pooling", "rayinfo", "posenc", "candidates"] {
            let v = variants(axis.parse().unwrap(), &base);
            assert_eq!(v.len(), 2);
            assert_eq!(v[0].1, base, "{axis}: the first variant is the default");
            assert_ne!(v[1].1, base);
        }
    }
}
