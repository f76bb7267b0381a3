//! Two-stage semi-supervised training and the labeled-only baseline.
//!
//! Stage one fits one specialist per task on its labeled pairs. Each
//! specialist then labels its task's condition pool with truncated reverse-SDE
//! draws. Stage two fits a single generalist to the scalarized vector of
//! paired losses `L̃_k(f) = mean[ℓ(x̃, ỹ, f) − ℓ(x̃, ỹ, ĥ_k)]`. Specialists and
//! pseudo-data are frozen during stage two.
//!
//! Every stage is exposed on its own so a caller can run the per-task stages
//! concurrently; [`run_pipeline`] runs them in order.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, LossEstimate, NoisedBatch, Pairs, Schedule, ScoreField};
use crate::error::{Error, Result};
use crate::evaluation::{self, TvConfig, TvEstimate};
use crate::math;
use crate::model::{ModelClassSpec, ModelFamily, ScoreModel};
use crate::optim::{clip_norm, Adam, OptimizerConfig};
use crate::rng::{self, domain, SimRng};
use crate::sampler::{self, AcceptanceStats, SamplerConfig, Truncation};
use crate::scalarization::{Scalarization, ScalarizationKind};
use crate::task::ConditionalTask;

/// Labeled pairs `(x_i, y_i)` from one task, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub task: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(task: usize, d_x: usize, d_y: usize, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        Pairs::new(&xs, &ys, d_x, d_y)?;
        if ys.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidTask("conditions must lie in [0, 1]".into()));
        }
        Ok(Self { task, d_x, d_y, xs, ys })
    }

    pub fn sample<R: Rng + ?Sized>(task_id: usize, task: &ConditionalTask, n: usize, rng: &mut R) -> Self {
        let mut xs = Vec::with_capacity(n * task.d_x());
        let mut ys = Vec::with_capacity(n * task.d_y());
        for _ in 0..n {
            let (x, y) = task.sample(rng);
            xs.extend(x);
            ys.extend(y);
        }
        Self { task: task_id, d_x: task.d_x(), d_y: task.d_y(), xs, ys }
    }

    pub fn len(&self) -> usize {
        if self.d_y == 0 {
            0
        } else {
            self.ys.len() / self.d_y
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pairs(&self) -> Pairs<'_> {
        Pairs { xs: &self.xs, ys: &self.ys, d_x: self.d_x, d_y: self.d_y }
    }
}

/// Unlabeled conditions `ỹ_i` from one task's condition marginal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionPool {
    pub task: usize,
    pub d_y: usize,
    pub ys: Vec<f64>,
}

impl ConditionPool {
    pub fn sample<R: Rng + ?Sized>(task_id: usize, task: &ConditionalTask, n: usize, rng: &mut R) -> Self {
        let mut ys = Vec::with_capacity(n * task.d_y());
        for _ in 0..n {
            ys.extend(task.sample_condition(rng));
        }
        Self { task: task_id, d_y: task.d_y(), ys }
    }

    pub fn len(&self) -> usize {
        if self.d_y == 0 {
            0
        } else {
            self.ys.len() / self.d_y
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Where a pseudo-dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Fingerprint of the labeling specialist.
    pub specialist: String,
    pub sampler: SamplerConfig,
    pub acceptance: AcceptanceStats,
}

/// Pseudo-labeled pairs `(x̃_i, ỹ_i)` with per-draw truncation records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDataset {
    pub task: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub accepted: Vec<bool>,
    pub retries: Vec<u32>,
    pub provenance: Provenance,
}

impl PseudoDataset {
    pub fn len(&self) -> usize {
        self.accepted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted.is_empty()
    }

    pub fn pairs(&self) -> Pairs<'_> {
        Pairs { xs: &self.xs, ys: &self.ys, d_x: self.d_x, d_y: self.d_y }
    }
}

/// One recorded point of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    /// Smoothed scalarized objective on the step's minibatch.
    pub train: f64,
    /// Exact scalarized objective on the held-out split.
    pub holdout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub model: ScoreModel,
    pub trace: Vec<TracePoint>,
    pub best_step: usize,
    pub best_holdout: f64,
}

/// One objective of a training run: a data set and, for stage two, the frozen
/// reference model whose loss is subtracted.
pub struct Objective<'a> {
    pub pairs: Pairs<'a>,
    pub reference: Option<&'a dyn ScoreField>,
}

/// Held-out split sizes: 10% of the points (at least one) once there are at
/// least two points.
pub fn holdout_size(n: usize) -> usize {
    if n >= 2 {
        (n / 10).max(1)
    } else {
        0
    }
}

struct Split {
    train: Vec<usize>,
    holdout: NoisedBatch,
    /// Reference squared errors on the held-out batch.
    reference: Option<Vec<f64>>,
}

/// Budgeted minimization of `S(L_1(f), ..., L_K(f))` from `init`, where `L_k`
/// is the mean DSM loss on objective `k` minus the reference's loss on the
/// same draws. Returns the best iterate by exact-`S` held-out value, checked
/// every `eval_every` steps and after the final step. Held-out draws are
/// fixed, so iterates are compared pairwise; a later iterate replaces the
/// incumbent unless it is worse by more than `opt.selection_z` paired
/// standard errors. The initialization is traced but only returned when
/// `opt.steps == 0`: a tiny held-out split can otherwise prefer the
/// untrained model by chance.
pub fn train(
    objectives: &[Objective<'_>],
    init: ScoreModel,
    s: &Scalarization,
    opt: &OptimizerConfig,
    sched: &Schedule,
) -> Result<TrainOutcome> {
    opt.validate()?;
    sched.validate()?;
    s.validate()?;
    if objectives.is_empty() {
        return Err(Error::Empty("objective list"));
    }
    if let ScalarizationKind::Linear { weights } = &s.kind {
        if weights.len() != objectives.len() {
            return Err(Error::DimensionMismatch { expected: weights.len(), got: objectives.len() });
        }
    }
    let (d_x, d_y) = (init.dim_x(), init.dim_y());
    let mut splits = Vec::with_capacity(objectives.len());
    for (k, o) in objectives.iter().enumerate() {
        if o.pairs.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if o.pairs.d_x != d_x || o.pairs.d_y != d_y {
            return Err(Error::DimensionMismatch { expected: d_x, got: o.pairs.d_x });
        }
        let n = o.pairs.len();
        let mut idx: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(opt.seed, &[domain::SPLIT, k as u64]);
        for i in (1..n).rev() {
            idx.swap(i, r.random_range(0..=i));
        }
        let h = holdout_size(n);
        let mut holdout = NoisedBatch::new(d_x, d_y);
        // a one-point set is validated on its own training point
        let held = if h == 0 { &idx[..] } else { &idx[..h] };
        let mut hr = rng::stream(opt.seed, &[domain::HOLDOUT, k as u64]);
        for &i in held {
            holdout.push_point(o.pairs.x(i), o.pairs.y(i), sched, opt.holdout_draws, &mut hr);
        }
        let reference = o.reference.map(|h| holdout.squared_errors(h));
        splits.push(Split { train: idx[h..].to_vec(), holdout, reference });
    }

    let exact = s.exact();
    // per task, per held-out point: mean over its fixed draws of the
    // (reference-subtracted) squared error
    let holdout_terms = |m: &ScoreModel| -> Vec<Vec<f64>> {
        splits
            .iter()
            .map(|sp| {
                let mut e = sp.holdout.squared_errors(m);
                if let Some(eh) = &sp.reference {
                    e.iter_mut().zip(eh).for_each(|(a, b)| *a -= b);
                }
                diffusion::group_means(&e, opt.holdout_draws)
            })
            .collect()
    };
    let objective = |terms: &[Vec<f64>]| exact.evaluate(&terms.iter().map(|t| math::mean(t)).collect::<Vec<_>>());

    let mut model = init;
    let mut best = model.clone();
    let mut best_terms = holdout_terms(&model);
    let mut best_holdout = objective(&best_terms)?;
    let mut best_step = 0;
    let mut trained_incumbent = false;
    let mut trace = vec![TracePoint { step: 0, train: f64::NAN, holdout: best_holdout }];
    let n_params = model.capacity();
    let mut adam = Adam::new(n_params);
    let mut grads: Vec<Vec<f64>> = vec![vec![0.0; n_params]; objectives.len()];
    let mut total = vec![0.0; n_params];
    let mut batch = NoisedBatch::new(d_x, d_y);
    let mut u = vec![0.0; objectives.len()];
    let mut r = rng::stream(opt.seed, &[domain::TRAIN]);
    let diverged = |step: usize, loss: f64, trace: &[TracePoint]| Error::Diverged {
        step,
        loss,
        trace: trace.iter().map(|p| p.holdout).collect(),
    };

    for step in 0..opt.steps {
        for (k, (o, sp)) in objectives.iter().zip(&splits).enumerate() {
            batch.clear();
            let m = opt.batch_size.min(sp.train.len());
            for _ in 0..m {
                let i = sp.train[r.random_range(0..sp.train.len())];
                batch.push_point(o.pairs.x(i), o.pairs.y(i), sched, opt.draws_per_point, &mut r);
            }
            let loss = match model.loss_and_grad(&batch, None, &mut grads[k]) {
                Ok(l) => l,
                Err(Error::NonFiniteGradient { .. }) => return Err(diverged(step, f64::NAN, &trace)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(step, loss, &trace));
            }
            u[k] = match o.reference {
                Some(h) => loss - math::mean(&batch.squared_errors(h)),
                None => loss,
            };
        }
        let smoothed = s.with_temp(if s.smoothing_temp > 0.0 { opt.tau.at(step, opt.steps) } else { 0.0 });
        let w = smoothed.subgradient(&u)?;
        total.fill(0.0);
        for (wk, g) in w.iter().zip(&grads) {
            if *wk != 0.0 {
                for (t, gi) in total.iter_mut().zip(g) {
                    *t += wk * gi;
                }
            }
        }
        clip_norm(&mut total, opt.grad_clip);
        adam.step(model.params_mut(), &total, opt.lr_at(step));
        if model.params().iter().any(|p| !p.is_finite()) {
            return Err(diverged(step, f64::NAN, &trace));
        }
        let done = step + 1;
        if done % opt.eval_every == 0 || done == opt.steps {
            let train = smoothed.evaluate(&u)?;
            let terms = holdout_terms(&model);
            let holdout = objective(&terms)?;
            if !holdout.is_finite() {
                return Err(diverged(step, holdout, &trace));
            }
            trace.push(TracePoint { step: done, train, holdout });
            // paired comparison with the incumbent on the same held-out draws;
            // the later iterate wins unless it is worse by more than
            // `selection_z` standard errors
            let g = exact.subgradient(&best_terms.iter().map(|t| math::mean(t)).collect::<Vec<_>>())?;
            let var: f64 = terms
                .iter()
                .zip(&best_terms)
                .zip(&g)
                .map(|((c, b), gk)| {
                    let d: Vec<f64> = c.iter().zip(b).map(|(x, y)| x - y).collect();
                    let se = math::mean_and_stderr(&d).1;
                    gk * gk * se * se
                })
                .sum();
            if !trained_incumbent || holdout - best_holdout <= opt.selection_z * math::sqrt(var) {
                trained_incumbent = true;
                best_holdout = holdout;
                best_terms = terms;
                best_step = done;
                best.clone_from(&model);
            }
        }
    }
    Ok(TrainOutcome { model: best, trace, best_step, best_holdout })
}

/// Stage one: empirical DSM risk minimization over a specialist class.
pub fn train_specialist(
    data: &LabeledDataset,
    spec: &ModelClassSpec,
    opt: &OptimizerConfig,
    sched: &Schedule,
) -> Result<TrainOutcome> {
    if spec.family != ModelFamily::Specialist {
        return Err(Error::InvalidModelSpec("train_specialist needs a specialist class".into()));
    }
    let init = ScoreModel::init(spec, data.d_x, data.d_y)?;
    train(&[Objective { pairs: data.pairs(), reference: None }], init, &Scalarization::uniform_linear(1), opt, sched)
}

/// Labels every condition of the pool with one truncated draw from the
/// specialist. Draw `i` uses its own stream derived from `(seed, task, i)`.
pub fn generate_pseudo(specialist: &ScoreModel, pool: &ConditionPool, cfg: &SamplerConfig, seed: u64) -> Result<PseudoDataset> {
    if cfg.truncation.is_none() {
        return Err(Error::InvalidSampler("pseudo-labeling needs truncation configured".into()));
    }
    if pool.d_y != specialist.dim_y() {
        return Err(Error::DimensionMismatch { expected: specialist.dim_y(), got: pool.d_y });
    }
    let (d_x, d_y, n) = (specialist.dim_x(), pool.d_y, pool.len());
    let mut out = PseudoDataset {
        task: pool.task,
        d_x,
        d_y,
        xs: Vec::with_capacity(n * d_x),
        ys: pool.ys.clone(),
        accepted: Vec::with_capacity(n),
        retries: Vec::with_capacity(n),
        provenance: Provenance {
            specialist: specialist.fingerprint(),
            sampler: cfg.clone(),
            acceptance: AcceptanceStats::default(),
        },
    };
    const CHUNK: usize = 1024;
    let mut start = 0;
    while start < n {
        let m = CHUNK.min(n - start);
        let mut rngs: Vec<SimRng> = (start..start + m)
            .map(|i| rng::stream(seed, &[domain::PSEUDO, pool.task as u64, i as u64]))
            .collect();
        let (draws, stats) =
            sampler::sample_truncated_batch(specialist, &pool.ys[start * d_y..(start + m) * d_y], &mut rngs, cfg)?;
        for d in draws {
            out.xs.extend(d.x);
            out.accepted.push(d.accepted);
            out.retries.push(d.retries as u32);
        }
        out.provenance.acceptance.merge(&stats);
        start += m;
    }
    Ok(out)
}

/// Stage two. `extra` optionally appends labeled pairs to each task's pseudo
/// pairs (same specialist subtraction).
pub fn train_generalist(
    pseudo: &[PseudoDataset],
    specialists: &[ScoreModel],
    extra: Option<&[LabeledDataset]>,
    init: ScoreModel,
    s: &Scalarization,
    opt: &OptimizerConfig,
    sched: &Schedule,
) -> Result<TrainOutcome> {
    if pseudo.len() != specialists.len() {
        return Err(Error::DimensionMismatch { expected: specialists.len(), got: pseudo.len() });
    }
    let merged: Vec<(Vec<f64>, Vec<f64>)> = match extra {
        Some(labeled) => {
            if labeled.len() != pseudo.len() {
                return Err(Error::DimensionMismatch { expected: pseudo.len(), got: labeled.len() });
            }
            pseudo
                .iter()
                .zip(labeled)
                .map(|(p, l)| ([p.xs.as_slice(), &l.xs].concat(), [p.ys.as_slice(), &l.ys].concat()))
                .collect()
        }
        None => Vec::new(),
    };
    let objectives: Vec<Objective<'_>> = pseudo
        .iter()
        .zip(specialists)
        .enumerate()
        .map(|(k, (p, h))| {
            let pairs = match merged.get(k) {
                Some((xs, ys)) => Pairs { xs, ys, d_x: p.d_x, d_y: p.d_y },
                None => p.pairs(),
            };
            Objective { pairs, reference: Some(h as &dyn ScoreField) }
        })
        .collect();
    train(&objectives, init, s, opt, sched)
}

/// Baseline: the generalist class fitted to the scalarized per-task labeled
/// DSM risks.
pub fn train_labeled_only(
    datasets: &[LabeledDataset],
    init: ScoreModel,
    s: &Scalarization,
    opt: &OptimizerConfig,
    sched: &Schedule,
) -> Result<TrainOutcome> {
    let objectives: Vec<Objective<'_>> =
        datasets.iter().map(|d| Objective { pairs: d.pairs(), reference: None }).collect();
    train(&objectives, init, s, opt, sched)
}

/// How trained models are scored against the task oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_lp_draws")]
    pub lp_draws: usize,
    #[serde(default)]
    pub tv: TvConfig,
    /// Sampler used for TV evaluation (truncation ignored).
    #[serde(default)]
    pub sampler: SamplerConfig,
    /// Also estimate TV for the specialists.
    #[serde(default)]
    pub specialist_tv: bool,
}

fn default_lp_draws() -> usize {
    20_000
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { lp_draws: default_lp_draws(), tv: TvConfig::default(), sampler: SamplerConfig::default(), specialist_tv: false }
    }
}

fn yes() -> bool {
    true
}

/// Everything one pipeline run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub tasks: Vec<ConditionalTask>,
    /// Labeled pairs per task.
    pub n_labeled: usize,
    /// Pseudo-labeled conditions per task.
    pub n_pseudo: usize,
    #[serde(default)]
    pub n_labeled_per_task: Option<Vec<usize>>,
    #[serde(default)]
    pub n_pseudo_per_task: Option<Vec<usize>>,
    pub specialist: ModelClassSpec,
    pub generalist: ModelClassSpec,
    #[serde(default)]
    pub schedule: Schedule,
    /// Pseudo-labeling sampler; truncation defaults on.
    #[serde(default = "default_pseudo_sampler")]
    pub sampler: SamplerConfig,
    pub scalarization: Scalarization,
    pub stage1: OptimizerConfig,
    pub stage2: OptimizerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Also train the labeled-only baseline.
    #[serde(default = "yes")]
    pub baseline: bool,
    /// Append labeled pairs to the stage-two pseudo pairs.
    #[serde(default)]
    pub append_labeled: bool,
    /// Start the generalist from specialist 0 (needs identical architectures).
    #[serde(default)]
    pub warm_start: bool,
    /// Accept `N < n`.
    #[serde(default)]
    pub allow_regime_violation: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_pseudo_sampler() -> SamplerConfig {
    SamplerConfig::default().with_truncation(Truncation::default())
}

impl PipelineConfig {
    pub fn k(&self) -> usize {
        self.tasks.len()
    }

    pub fn n_labeled_for(&self, k: usize) -> usize {
        self.n_labeled_per_task.as_ref().map_or(self.n_labeled, |v| v[k])
    }

    pub fn n_pseudo_for(&self, k: usize) -> usize {
        self.n_pseudo_per_task.as_ref().map_or(self.n_pseudo, |v| v[k])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(first) = self.tasks.first() else {
            return bad("at least one task is required".into());
        };
        let (d_x, d_y) = (first.d_x(), first.d_y());
        if self.tasks.iter().any(|t| t.d_x() != d_x || t.d_y() != d_y) {
            return bad("all tasks must share d_x and d_y".into());
        }
        for (name, v) in [("n_labeled_per_task", &self.n_labeled_per_task), ("n_pseudo_per_task", &self.n_pseudo_per_task)] {
            if let Some(v) = v {
                if v.len() != self.k() {
                    return bad(format!("{name} needs one entry per task"));
                }
            }
        }
        for k in 0..self.k() {
            let (n, big_n) = (self.n_labeled_for(k), self.n_pseudo_for(k));
            if n == 0 || big_n == 0 {
                return bad(format!("task {k}: labeled and pseudo counts must be positive"));
            }
            if big_n < n && !self.allow_regime_violation {
                return bad(format!(
                    "task {k}: N = {big_n} < n = {n} leaves the semi-supervised regime; set allow_regime_violation to proceed"
                ));
            }
        }
        if self.specialist.family != ModelFamily::Specialist || self.generalist.family != ModelFamily::Generalist {
            return bad("specialist/generalist class families are swapped".into());
        }
        self.specialist.validate(d_x, d_y)?;
        self.generalist.validate(d_x, d_y)?;
        if self.warm_start && self.specialist.widths != self.generalist.widths {
            return bad("warm_start needs identical specialist and generalist architectures".into());
        }
        self.schedule.validate()?;
        self.sampler.validate()?;
        if self.sampler.truncation.is_none() {
            return bad("the pseudo-labeling sampler needs truncation".into());
        }
        self.eval.sampler.validate()?;
        self.scalarization.validate()?;
        if let ScalarizationKind::Linear { weights } = &self.scalarization.kind {
            if weights.len() != self.k() {
                return bad(format!("{} linear weights for {} tasks", weights.len(), self.k()));
            }
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    /// Pseudo-labeling sampler with the truncation radius resolved for the
    /// total pseudo budget.
    pub fn pseudo_sampler(&self) -> SamplerConfig {
        let total: usize = (0..self.k()).map(|k| self.n_pseudo_for(k)).sum();
        let mut cfg = self.sampler.clone();
        cfg.truncation = cfg.truncation.map(|t| t.resolved(total));
        cfg
    }

    fn key(&self, path: &[u64]) -> u64 {
        rng::derive_key(self.seed, path)
    }

    pub fn labeled_data(&self, k: usize) -> LabeledDataset {
        let mut r = rng::stream(self.seed, &[domain::DATA, k as u64]);
        LabeledDataset::sample(k, &self.tasks[k], self.n_labeled_for(k), &mut r)
    }

    pub fn condition_pool(&self, k: usize) -> ConditionPool {
        let mut r = rng::stream(self.seed, &[domain::CONDITIONS, k as u64]);
        ConditionPool::sample(k, &self.tasks[k], self.n_pseudo_for(k), &mut r)
    }

    pub fn specialist_spec(&self, k: usize) -> ModelClassSpec {
        ModelClassSpec { init_seed: self.key(&[domain::INIT, k as u64, self.specialist.init_seed]), ..self.specialist.clone() }
    }

    pub fn generalist_spec(&self) -> ModelClassSpec {
        ModelClassSpec { init_seed: self.key(&[domain::INIT, u64::MAX, self.generalist.init_seed]), ..self.generalist.clone() }
    }

    pub fn stage1_opt(&self, k: usize) -> OptimizerConfig {
        OptimizerConfig { seed: self.key(&[domain::TRAIN, k as u64, self.stage1.seed]), ..self.stage1.clone() }
    }

    /// Stage-two and baseline optimizer streams differ; their held-out
    /// splits are drawn from the same stream family but different data.
    pub fn stage2_opt(&self, baseline: bool) -> OptimizerConfig {
        OptimizerConfig { seed: self.key(&[domain::TRAIN, u64::MAX - baseline as u64, self.stage2.seed]), ..self.stage2.clone() }
    }

    pub fn pseudo_seed(&self) -> u64 {
        self.key(&[domain::PSEUDO])
    }

    pub fn eval_seed(&self, k: usize) -> u64 {
        self.key(&[domain::EVAL, k as u64])
    }
}

fn in_stage<T>(stage: &'static str, task: Option<usize>, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage, task, source: Box::new(e) })
}

/// Per-task evaluation of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEval {
    pub lp: LossEstimate,
    pub tv: Option<TvEstimate>,
}

/// Population score error (and optionally TV) of `model` on task `k`, with
/// random streams that depend only on the run seed and `k`.
pub fn evaluate_model(cfg: &PipelineConfig, model: &dyn ScoreField, k: usize, with_tv: bool) -> Result<TaskEval> {
    let task = &cfg.tasks[k];
    let seed = cfg.eval_seed(k);
    let mut r = rng::stream(seed, &[0]);
    let lp = diffusion::population_error(task, model, &cfg.schedule, cfg.eval.lp_draws, &mut r)?;
    let mut sampler = cfg.eval.sampler.clone();
    sampler.truncation = None;
    let tv = if with_tv { Some(evaluation::tv_expected(model, task, &cfg.eval.tv, &sampler, seed)?) } else { None };
    Ok(TaskEval { lp, tv })
}

/// Stage-one output for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub data: LabeledDataset,
    pub specialist: TrainOutcome,
    pub eval: TaskEval,
    pub pseudo: PseudoDataset,
}

/// Stage one plus pseudo-labeling for task `k`.
pub fn run_task(cfg: &PipelineConfig, k: usize) -> Result<StageOne> {
    let data = cfg.labeled_data(k);
    let specialist =
        in_stage("stage1", Some(k), train_specialist(&data, &cfg.specialist_spec(k), &cfg.stage1_opt(k), &cfg.schedule))?;
    let eval = in_stage("evaluate_specialist", Some(k), evaluate_model(cfg, &specialist.model, k, cfg.eval.specialist_tv))?;
    let pool = cfg.condition_pool(k);
    let pseudo = in_stage("pseudo", Some(k), generate_pseudo(&specialist.model, &pool, &cfg.pseudo_sampler(), cfg.pseudo_seed()))?;
    Ok(StageOne { data, specialist, eval, pseudo })
}

/// Generalist initialization: fresh, or specialist 0 when warm-starting.
pub fn generalist_init(cfg: &PipelineConfig, stage1: &[StageOne]) -> Result<ScoreModel> {
    let fresh = ScoreModel::init(&cfg.generalist_spec(), cfg.tasks[0].d_x(), cfg.tasks[0].d_y())?;
    if cfg.warm_start {
        fresh.with_params(stage1[0].specialist.model.params().to_vec())
    } else {
        Ok(fresh)
    }
}

/// Stage two under scalarization `s`.
pub fn run_stage2(cfg: &PipelineConfig, stage1: &[StageOne], s: &Scalarization) -> Result<TrainOutcome> {
    let pseudo: Vec<PseudoDataset> = stage1.iter().map(|r| r.pseudo.clone()).collect();
    let specialists: Vec<ScoreModel> = stage1.iter().map(|r| r.specialist.model.clone()).collect();
    let labeled: Vec<LabeledDataset> = stage1.iter().map(|r| r.data.clone()).collect();
    let extra = if cfg.append_labeled { Some(labeled.as_slice()) } else { None };
    let init = generalist_init(cfg, stage1)?;
    in_stage("stage2", None, train_generalist(&pseudo, &specialists, extra, init, s, &cfg.stage2_opt(false), &cfg.schedule))
}

/// Labeled-only baseline on the run's labeled data sets; it depends on the
/// seed and `n` but not on `N`.
pub fn run_baseline(cfg: &PipelineConfig, labeled: &[LabeledDataset], s: &Scalarization) -> Result<TrainOutcome> {
    let init = ScoreModel::init(&cfg.generalist_spec(), cfg.tasks[0].d_x(), cfg.tasks[0].d_y())?;
    in_stage("baseline", None, train_labeled_only(labeled, init, s, &cfg.stage2_opt(true), &cfg.schedule))
}

/// Evaluations of a generalist-class model on every task plus the
/// scalarized summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub per_task: Vec<TaskEval>,
    pub scalarized_tv: f64,
    pub scalarized_lp: f64,
}

pub fn evaluate_all(cfg: &PipelineConfig, model: &ScoreModel, s: &Scalarization, stage: &'static str) -> Result<ModelReport> {
    let per_task = (0..cfg.k())
        .map(|k| in_stage(stage, Some(k), evaluate_model(cfg, model, k, true)))
        .collect::<Result<Vec<_>>>()?;
    report(per_task, s)
}

/// Scalarizes per-task evaluations with the exact `s`.
pub fn report(per_task: Vec<TaskEval>, s: &Scalarization) -> Result<ModelReport> {
    let exact = s.exact();
    let lp: Vec<f64> = per_task.iter().map(|e| e.lp.value).collect();
    let tv: Vec<f64> = per_task.iter().map(|e| e.tv.as_ref().map_or(f64::NAN, |t| t.value)).collect();
    Ok(ModelReport { scalarized_tv: exact.evaluate(&tv)?, scalarized_lp: exact.evaluate(&lp)?, per_task })
}

/// Trained generalist-class model with its optimization record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub outcome: TrainOutcome,
    pub report: ModelReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub config: PipelineConfig,
    pub seed: u64,
    pub stage1: Vec<StageOne>,
    pub generalist: TrainedModel,
    pub baseline: Option<TrainedModel>,
}

impl PipelineResult {
    pub fn specialists(&self) -> impl Iterator<Item = &ScoreModel> {
        self.stage1.iter().map(|s| &s.specialist.model)
    }

    pub fn specialist_lp(&self) -> Vec<f64> {
        self.stage1.iter().map(|s| s.eval.lp.value).collect()
    }

    pub fn generalist_lp(&self) -> Vec<f64> {
        self.generalist.report.per_task.iter().map(|e| e.lp.value).collect()
    }

    pub fn generalist_tv(&self) -> Vec<f64> {
        self.generalist.report.per_task.iter().map(|e| e.tv.as_ref().map_or(f64::NAN, |t| t.value)).collect()
    }
}

/// Finishes a run from completed per-task stage-one results.
pub fn finish_pipeline(cfg: &PipelineConfig, stage1: Vec<StageOne>) -> Result<PipelineResult> {
    let s = &cfg.scalarization;
    let outcome = run_stage2(cfg, &stage1, s)?;
    let report = evaluate_all(cfg, &outcome.model, s, "evaluate_generalist")?;
    let generalist = TrainedModel { outcome, report };
    let baseline = if cfg.baseline {
        let labeled: Vec<LabeledDataset> = stage1.iter().map(|r| r.data.clone()).collect();
        let outcome = run_baseline(cfg, &labeled, s)?;
        let report = evaluate_all(cfg, &outcome.model, s, "evaluate_baseline")?;
        Some(TrainedModel { outcome, report })
    } else {
        None
    };
    Ok(PipelineResult { config: cfg.clone(), seed: cfg.seed, stage1, generalist, baseline })
}

/// Both stages, pseudo-labeling and evaluation, sequentially.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineResult> {
    in_stage("validate", None, cfg.validate())?;
    let stage1 = (0..cfg.k()).map(|k| run_task(cfg, k)).collect::<Result<Vec<_>>>()?;
    finish_pipeline(cfg, stage1)
}
