//! Worker pool and parallel drivers for the core pipelines.
//!
//! Every job is a pure function of its configuration and seed, so results
//! are identical to the sequential core drivers for any pool size.

use rayon::prelude::*;

use semidiff_core::mdp::{self, MdpPipelineConfig, MdpPipelineResult, MdpPolicy, MdpStageOne};
use semidiff_core::pipeline::{self, LabeledDataset, PipelineConfig, PipelineResult, StageOne, TrainedModel};
use semidiff_core::{Error, Result, Scalarization, ScoreModel};

use crate::error::LabError;

/// Pool with `workers` threads, defaulting to the available parallelism.
pub fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, LabError> {
    let n = workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(LabError::InvalidConfig("--workers must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build().map_err(|e| LabError::Pool(e.to_string()))
}

fn in_stage<T>(stage: &'static str, task: Option<usize>, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage, task, source: Box::new(e) })
}

/// Evaluates a generalist-class model on every task in parallel.
pub fn evaluate_all(cfg: &PipelineConfig, model: &ScoreModel, s: &Scalarization, stage: &'static str) -> Result<pipeline::ModelReport> {
    let per_task = (0..cfg.k())
        .into_par_iter()
        .map(|k| in_stage(stage, Some(k), pipeline::evaluate_model(cfg, model, k, true)))
        .collect::<Result<Vec<_>>>()?;
    pipeline::report(per_task, s)
}

pub fn stage_one(cfg: &PipelineConfig) -> Result<Vec<StageOne>> {
    (0..cfg.k()).into_par_iter().map(|k| pipeline::run_task(cfg, k)).collect()
}

pub fn generalist(cfg: &PipelineConfig, stage1: &[StageOne], s: &Scalarization) -> Result<TrainedModel> {
    let outcome = pipeline::run_stage2(cfg, stage1, s)?;
    let report = evaluate_all(cfg, &outcome.model, s, "evaluate_generalist")?;
    Ok(TrainedModel { outcome, report })
}

pub fn baseline(cfg: &PipelineConfig, labeled: &[LabeledDataset], s: &Scalarization) -> Result<TrainedModel> {
    let outcome = pipeline::run_baseline(cfg, labeled, s)?;
    let report = evaluate_all(cfg, &outcome.model, s, "evaluate_baseline")?;
    Ok(TrainedModel { outcome, report })
}

/// Parallel counterpart of the core `run_pipeline`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineResult> {
    in_stage("validate", None, cfg.validate())?;
    let stage1 = stage_one(cfg)?;
    let s = &cfg.scalarization;
    let (gen, base) = rayon::join(
        || generalist(cfg, &stage1, s),
        || {
            cfg.baseline.then(|| {
                let labeled: Vec<LabeledDataset> = stage1.iter().map(|r| r.data.clone()).collect();
                baseline(cfg, &labeled, s)
            })
        },
    );
    Ok(PipelineResult { config: cfg.clone(), seed: cfg.seed, stage1, generalist: gen?, baseline: base.transpose()? })
}

fn evaluate_policy(cfg: &MdpPipelineConfig, model: &ScoreModel, stage: &'static str) -> Result<mdp::PolicyReport> {
    let per_env = (0..cfg.k())
        .into_par_iter()
        .map(|k| in_stage(stage, Some(k), mdp::evaluate_policy_env(cfg, model, k)))
        .collect::<Result<Vec<_>>>()?;
    mdp::policy_report(cfg, per_env)
}

/// Parallel counterpart of the core `run_mdp_pipeline`.
pub fn run_mdp_pipeline(cfg: &MdpPipelineConfig) -> Result<MdpPipelineResult> {
    in_stage("validate", None, cfg.validate())?;
    let stage1: Vec<MdpStageOne> = (0..cfg.k()).into_par_iter().map(|k| mdp::run_env(cfg, k)).collect::<Result<_>>()?;
    let (gen, base) = rayon::join(
        || {
            let outcome = mdp::train_policy_generalist(cfg, &stage1)?;
            let report = evaluate_policy(cfg, &outcome.model, "evaluate_generalist")?;
            Ok(MdpPolicy { outcome, report })
        },
        || {
            cfg.baseline.then(|| {
                let demos: Vec<LabeledDataset> = stage1.iter().map(|s| s.demos.clone()).collect();
                let outcome = mdp::train_policy_baseline(cfg, &demos)?;
                let report = evaluate_policy(cfg, &outcome.model, "evaluate_baseline")?;
                Ok(MdpPolicy { outcome, report })
            })
        },
    );
    Ok(MdpPipelineResult { config: cfg.clone(), seed: cfg.seed, stage1, generalist: gen?, baseline: base.transpose()? })
}
