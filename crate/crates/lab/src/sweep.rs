//! Complexity and Pareto sweeps over the distribution pipeline.

use rayon::prelude::*;

use semidiff_core::evaluation::{ParetoFront, ParetoPoint};
use semidiff_core::math;
use semidiff_core::pipeline::{LabeledDataset, PipelineConfig, StageOne, TrainedModel};
use semidiff_core::{LossEstimate, Result, Scalarization};

use crate::config::{scalarization_label, ParetoGrid, SweepGrid};
use crate::runner;

/// Generalist of one `(seed, n, N)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub seed: u64,
    pub n: usize,
    pub big_n: usize,
    pub specialist_lp: Vec<LossEstimate>,
    pub generalist: TrainedModel,
}

/// Labeled-only baseline of one `(seed, n)` pair; it does not depend on `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineCell {
    pub seed: u64,
    pub n: usize,
    pub model: TrainedModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub baselines: Vec<BaselineCell>,
}

/// Configuration of a single sweep cell.
pub fn cell_config(base: &PipelineConfig, seed: u64, n: usize, big_n: usize) -> PipelineConfig {
    PipelineConfig {
        seed,
        n_labeled: n,
        n_pseudo: big_n,
        n_labeled_per_task: None,
        n_pseudo_per_task: None,
        ..base.clone()
    }
}

/// Full factorial over `n_grid × big_n_grid × seeds`. Each cell reproduces
/// the generalist of a pipeline run with that cell's configuration; the
/// baseline, when enabled, is trained once per `(seed, n)`.
pub fn complexity_sweep(base: &PipelineConfig, grid: &SweepGrid, seeds: &[u64]) -> Result<SweepResult> {
    let mut jobs = Vec::new();
    for &seed in seeds {
        for &n in &grid.n_grid {
            for &big_n in &grid.big_n_grid {
                jobs.push((seed, n, big_n));
            }
        }
    }
    let cells = jobs
        .into_par_iter()
        .map(|(seed, n, big_n)| {
            let cfg = cell_config(base, seed, n, big_n);
            cfg.validate()?;
            let stage1 = runner::stage_one(&cfg)?;
            let generalist = runner::generalist(&cfg, &stage1, &cfg.scalarization)?;
            Ok(SweepCell { seed, n, big_n, specialist_lp: stage1.iter().map(|s| s.eval.lp).collect(), generalist })
        })
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(u64, usize)> = if base.baseline {
        seeds.iter().flat_map(|&s| grid.n_grid.iter().map(move |&n| (s, n))).collect()
    } else {
        vec![]
    };
    let baselines = pairs
        .into_par_iter()
        .map(|(seed, n)| {
            let cfg = cell_config(base, seed, n, grid.big_n_grid[0]);
            let labeled: Vec<LabeledDataset> = (0..cfg.k()).map(|k| cfg.labeled_data(k)).collect();
            Ok(BaselineCell { seed, n, model: runner::baseline(&cfg, &labeled, &cfg.scalarization)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { cells, baselines })
}

/// Relative checkpoint path of point `i` of a Pareto sweep.
pub fn pareto_checkpoint(seed: u64, i: usize) -> String {
    format!("checkpoints/seed{seed}_lambda{i}.ckpt")
}

/// One seed of a Pareto sweep: shared stage one and one generalist per
/// weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRun {
    pub seed: u64,
    pub stage1: Vec<StageOne>,
    pub models: Vec<TrainedModel>,
    pub front: ParetoFront,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoResult {
    pub runs: Vec<ParetoRun>,
    /// Seed-averaged front; std errors from seed replication when there are
    /// several seeds.
    pub front: ParetoFront,
}

/// Per-task margins `margin_z · max_i se_i[c]`.
fn margins(points: &[ParetoPoint], margin_z: f64) -> Vec<f64> {
    let k = points.first().map_or(0, |p| p.tv.len());
    (0..k).map(|c| margin_z * points.iter().map(|p| p.tv_std_err[c]).fold(0.0, f64::max)).collect()
}

pub fn pareto_sweep(base: &PipelineConfig, grid: &ParetoGrid, seeds: &[u64]) -> Result<ParetoResult> {
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = PipelineConfig { seed, ..base.clone() };
            cfg.validate()?;
            let stage1 = runner::stage_one(&cfg)?;
            let models = grid
                .weights
                .par_iter()
                .map(|w| runner::generalist(&cfg, &stage1, &Scalarization::linear(w.clone())?))
                .collect::<Result<Vec<_>>>()?;
            let points: Vec<ParetoPoint> = models
                .iter()
                .zip(&grid.weights)
                .enumerate()
                .map(|(i, (m, w))| {
                    let tv: Vec<&_> = m.report.per_task.iter().map(|e| e.tv.as_ref().expect("generalists are evaluated in TV")).collect();
                    ParetoPoint {
                        label: scalarization_label(&Scalarization::linear(w.clone()).expect("validated weights")),
                        weights: w.clone(),
                        tv: tv.iter().map(|t| t.value).collect(),
                        tv_std_err: tv.iter().map(|t| t.std_err).collect(),
                        lp: m.report.per_task.iter().map(|e| e.lp.value).collect(),
                        checkpoint: pareto_checkpoint(seed, i),
                        dominated: false,
                    }
                })
                .collect();
            let front = ParetoFront::new(points.clone(), &margins(&points, grid.margin_z))?;
            Ok(ParetoRun { seed, stage1, models, front })
        })
        .collect::<Result<Vec<_>>>()?;
    let front = aggregate_front(&runs, grid.margin_z)?;
    Ok(ParetoResult { runs, front })
}

fn aggregate_front(runs: &[ParetoRun], margin_z: f64) -> Result<ParetoFront> {
    let first = &runs[0].front.points;
    let k = first.first().map_or(0, |p| p.tv.len());
    let points: Vec<ParetoPoint> = (0..first.len())
        .map(|i| {
            let per_task = |f: &dyn Fn(&ParetoPoint) -> f64| -> (f64, f64) {
                let v: Vec<f64> = runs.iter().map(|r| f(&r.front.points[i])).collect();
                math::mean_and_stderr(&v)
            };
            let mut tv = Vec::with_capacity(k);
            let mut se = Vec::with_capacity(k);
            let mut lp = Vec::with_capacity(k);
            for c in 0..k {
                let (m, s) = per_task(&|p| p.tv[c]);
                tv.push(m);
                se.push(if runs.len() > 1 { s } else { first[i].tv_std_err[c] });
                lp.push(per_task(&|p| p.lp[c]).0);
            }
            ParetoPoint {
                label: first[i].label.clone(),
                weights: first[i].weights.clone(),
                tv,
                tv_std_err: se,
                lp,
                checkpoint: String::new(),
                dominated: false,
            }
        })
        .collect();
    ParetoFront::new(points.clone(), &margins(&points, margin_z))
}
