//! Runs an experiment configuration and writes its results directory.
//!
//! Directory layout (column meanings are listed in `FORMATS.md`):
//!
//! ```text
//! manifest.json      resolved configuration, hash, version, file list
//! results.csv        one row per (cell, seed, model)
//! timings.csv        wall-clock seconds per job (not reproducible)
//! checkpoints/       model checkpoints
//! pseudo/            pseudo-labeled data sets (save_pseudo = true)
//! trajectories/      audit rollouts (mdp mode, save_trajectories > 0)
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use semidiff_core::mdp::{self, DiffusionPolicy, MdpPipelineResult, PolicyReport};
use semidiff_core::pipeline::{ModelReport, PipelineConfig, PipelineResult, StageOne};
use semidiff_core::scalarization::AxiomReport;
use semidiff_core::{rng, ScoreModel};

use crate::checkpoint;
use crate::config::{scalarization_label, ExperimentConfig, Mode, VERSION};
use crate::error::LabError;
use crate::pseudo_io;
use crate::runner;
use crate::sweep::{self, ParetoResult, SweepResult};
use crate::table::{num, opt_num, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub mode: Mode,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub files: Vec<String>,
    pub config: ExperimentConfig,
}

pub const MANIFEST: &str = "manifest.json";
pub const RESULTS: &str = "results.csv";
pub const TIMINGS: &str = "timings.csv";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self, LabError> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(LabError::io(&path))?;
        serde_json::from_str(&text).map_err(|e| LabError::format(path, e.to_string()))
    }
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
    hash: String,
    timings: Table,
}

impl Writer {
    fn new(dir: &Path, hash: String) -> Result<Self, LabError> {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(LabError::io(dir))?;
        Ok(Self { dir: dir.to_path_buf(), files: vec![], hash, timings: Table::new(["job", "seconds"]) })
    }

    fn checkpoint(&mut self, rel: &str, model: &ScoreModel) -> Result<String, LabError> {
        checkpoint::save(model, &self.dir.join(rel))?;
        self.files.push(rel.to_string());
        Ok(rel.to_string())
    }

    fn pseudo(&mut self, rel: &str, stage1: &[StageOne]) -> Result<(), LabError> {
        std::fs::create_dir_all(self.dir.join("pseudo")).map_err(LabError::io(&self.dir))?;
        for (k, s) in stage1.iter().enumerate() {
            let name = format!("pseudo/{rel}_task{k}.csv");
            pseudo_io::write_pseudo(&s.pseudo, &self.dir.join(&name))?;
            self.files.push(name.clone());
            self.files.push(pseudo_io::provenance_path(Path::new(&name)).display().to_string());
        }
        Ok(())
    }

    fn time(&mut self, job: String, secs: f64) {
        self.timings.push(vec![job, format!("{secs:.3}")]);
    }

    fn provenance(&self) -> [String; 2] {
        [self.hash.clone(), VERSION.to_string()]
    }
}

/// Header of a distribution-family results table for `k` tasks.
fn distribution_columns(k: usize) -> Vec<String> {
    let mut c: Vec<String> = ["seed", "n", "big_n", "scalarization", "model"].map(String::from).to_vec();
    for prefix in ["tv", "tv_se", "lp", "lp_se"] {
        c.extend((0..k).map(|i| format!("{prefix}_{i}")));
    }
    c.extend(["scalarized_tv", "scalarized_lp", "best_step", "checkpoint", "config_hash", "version"].map(String::from));
    c
}

struct Cell<'a> {
    seed: u64,
    n: usize,
    big_n: usize,
    scalarization: String,
    model: &'a str,
}

fn distribution_row(w: &Writer, cell: Cell<'_>, report: &ModelReport, best_step: Option<usize>, ckpt: String) -> Vec<String> {
    let mut r = vec![cell.seed.to_string(), cell.n.to_string(), cell.big_n.to_string(), cell.scalarization, cell.model.into()];
    r.extend(report.per_task.iter().map(|e| opt_num(e.tv.as_ref().map(|t| t.value))));
    r.extend(report.per_task.iter().map(|e| opt_num(e.tv.as_ref().map(|t| t.std_err))));
    r.extend(report.per_task.iter().map(|e| num(e.lp.value)));
    r.extend(report.per_task.iter().map(|e| num(e.lp.std_err)));
    r.extend([num(report.scalarized_tv), num(report.scalarized_lp), best_step.map_or_else(String::new, |s| s.to_string()), ckpt]);
    r.extend(w.provenance());
    r
}

/// Writes the specialist, generalist and baseline rows of one pipeline run.
fn write_pipeline_rows(
    w: &mut Writer,
    table: &mut Table,
    cfg: &PipelineConfig,
    res: &PipelineResult,
    stem: &str,
    save_pseudo: bool,
) -> Result<(), LabError> {
    let (n, big_n, label) = (cfg.n_labeled, cfg.n_pseudo, scalarization_label(&cfg.scalarization));
    let mut ckpts = vec![];
    for (k, s) in res.stage1.iter().enumerate() {
        ckpts.push(w.checkpoint(&format!("checkpoints/{stem}_specialist{k}.ckpt"), &s.specialist.model)?);
    }
    let spec_report = semidiff_core::pipeline::report(res.stage1.iter().map(|s| s.eval.clone()).collect(), &cfg.scalarization)?;
    let cell = |model| Cell { seed: res.seed, n, big_n, scalarization: label.clone(), model };
    table.push(distribution_row(w, cell("specialist"), &spec_report, None, ckpts.join(";")));
    let g = &res.generalist;
    let ck = w.checkpoint(&format!("checkpoints/{stem}_generalist.ckpt"), &g.outcome.model)?;
    table.push(distribution_row(w, cell("generalist"), &g.report, Some(g.outcome.best_step), ck));
    if let Some(b) = &res.baseline {
        let ck = w.checkpoint(&format!("checkpoints/{stem}_baseline.ckpt"), &b.outcome.model)?;
        table.push(distribution_row(w, cell("baseline"), &b.report, Some(b.outcome.best_step), ck));
    }
    if save_pseudo {
        w.pseudo(stem, &res.stage1)?;
    }
    Ok(())
}

fn run_distribution(cfg: &ExperimentConfig, w: &mut Writer) -> Result<Table, LabError> {
    let base = cfg.pipeline()?;
    let mut table = Table::new(distribution_columns(base.k()));
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let t = Instant::now();
            let pc = cfg.pipeline_for(seed, None)?;
            let r = runner::run_pipeline(&pc)?;
            Ok((pc, r, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    for (pc, r, secs) in results {
        write_pipeline_rows(w, &mut table, &pc, &r, &format!("seed{}", pc.seed), cfg.save_pseudo)?;
        w.time(format!("seed{}", pc.seed), secs);
    }
    Ok(table)
}

fn run_sweep(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Table, SweepResult), LabError> {
    let base = cfg.pipeline()?;
    let grid = cfg.sweep.as_ref().expect("validated");
    let t = Instant::now();
    let res = sweep::complexity_sweep(base, grid, &cfg.seeds)?;
    w.time("sweep".into(), t.elapsed().as_secs_f64());
    let mut table = Table::new(distribution_columns(base.k()));
    let label = scalarization_label(&base.scalarization);
    for c in &res.cells {
        let stem = format!("seed{}_n{}_N{}", c.seed, c.n, c.big_n);
        let spec = ModelReport {
            per_task: c.specialist_lp.iter().map(|lp| semidiff_core::pipeline::TaskEval { lp: *lp, tv: None }).collect(),
            scalarized_tv: f64::NAN,
            scalarized_lp: base.scalarization.exact().evaluate(&c.specialist_lp.iter().map(|l| l.value).collect::<Vec<_>>())?,
        };
        let cell = |model| Cell { seed: c.seed, n: c.n, big_n: c.big_n, scalarization: label.clone(), model };
        table.push(distribution_row(w, cell("specialist"), &spec, None, String::new()));
        let ck = w.checkpoint(&format!("checkpoints/{stem}_generalist.ckpt"), &c.generalist.outcome.model)?;
        table.push(distribution_row(w, cell("generalist"), &c.generalist.report, Some(c.generalist.outcome.best_step), ck));
    }
    for b in &res.baselines {
        let ck = w.checkpoint(&format!("checkpoints/seed{}_n{}_baseline.ckpt", b.seed, b.n), &b.model.outcome.model)?;
        let cell = Cell { seed: b.seed, n: b.n, big_n: 0, scalarization: label.clone(), model: "baseline" };
        table.push(distribution_row(w, cell, &b.model.report, Some(b.model.outcome.best_step), ck));
    }
    Ok((table, res))
}

fn run_pareto(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Table, ParetoResult), LabError> {
    let base = cfg.pipeline()?;
    let grid = cfg.pareto.as_ref().expect("validated");
    let t = Instant::now();
    let res = sweep::pareto_sweep(base, grid, &cfg.seeds)?;
    w.time("pareto".into(), t.elapsed().as_secs_f64());
    let mut columns = distribution_columns(base.k());
    let at = columns.len() - 3;
    columns.insert(at, "dominated".into());
    let mut table = Table::new(columns);
    for run in &res.runs {
        for (i, (m, p)) in run.models.iter().zip(&run.front.points).enumerate() {
            w.checkpoint(&sweep::pareto_checkpoint(run.seed, i), &m.outcome.model)?;
            let cell = Cell { seed: run.seed, n: base.n_labeled, big_n: base.n_pseudo, scalarization: p.label.clone(), model: "generalist" };
            let mut row = distribution_row(w, cell, &m.report, Some(m.outcome.best_step), p.checkpoint.clone());
            row.insert(at, u8::from(p.dominated).to_string());
            table.push(row);
        }
        if cfg.save_pseudo {
            w.pseudo(&format!("seed{}", run.seed), &run.stage1)?;
        }
    }
    let path = w.dir.join("pareto_front.json");
    let json = serde_json::to_string_pretty(&res.front).expect("front serializes");
    std::fs::write(&path, json).map_err(LabError::io(&path))?;
    w.files.push("pareto_front.json".into());
    Ok((table, res))
}

fn mdp_columns(k: usize) -> Vec<String> {
    let mut c: Vec<String> = ["seed", "n", "big_n", "scalarization", "model"].map(String::from).to_vec();
    for prefix in ["gap", "gap_se", "value_expert", "value_learned", "expected_tv", "bound"] {
        c.extend((0..k).map(|i| format!("{prefix}_{i}")));
    }
    c.extend(
        ["scalarized_gap", "truncation_bias", "reward_violations", "best_step", "checkpoint", "config_hash", "version"]
            .map(String::from),
    );
    c
}

fn mdp_row(w: &Writer, cell: Cell<'_>, report: &PolicyReport, bias: f64, best_step: Option<usize>, ckpt: String) -> Vec<String> {
    let mut r = vec![cell.seed.to_string(), cell.n.to_string(), cell.big_n.to_string(), cell.scalarization, cell.model.into()];
    r.extend(report.gaps.iter().map(|g| num(g.gap)));
    r.extend(report.gaps.iter().map(|g| num(g.std_err)));
    r.extend(report.gaps.iter().map(|g| num(g.expert.value)));
    r.extend(report.gaps.iter().map(|g| num(g.learned.value)));
    r.extend(report.bounds.iter().map(|b| opt_num(b.as_ref().map(|b| b.expected_tv))));
    r.extend(report.bounds.iter().map(|b| opt_num(b.as_ref().map(|b| b.bound))));
    let violations: u64 = report.gaps.iter().map(|g| g.expert.reward_violations + g.learned.reward_violations).sum();
    r.extend([
        num(report.scalarized_gap),
        num(bias),
        violations.to_string(),
        best_step.map_or_else(String::new, |s| s.to_string()),
        ckpt,
    ]);
    r.extend(w.provenance());
    r
}

fn run_mdp(cfg: &ExperimentConfig, w: &mut Writer) -> Result<Table, LabError> {
    let base = cfg.mdp()?;
    let results = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let t = Instant::now();
            let mc = cfg.mdp_for(seed)?;
            let r = runner::run_mdp_pipeline(&mc)?;
            Ok((r, t.elapsed().as_secs_f64()))
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    let mut table = Table::new(mdp_columns(base.k()));
    let bias = base.envs.iter().map(|e| e.env.truncation_bias()).fold(0.0, f64::max);
    let label = scalarization_label(&base.scalarization);
    for (r, secs) in &results {
        let stem = format!("seed{}", r.seed);
        w.time(stem.clone(), *secs);
        let cell = |model| Cell { seed: r.seed, n: base.n_labeled, big_n: base.n_pseudo, scalarization: label.clone(), model };
        let mut ckpts = vec![];
        for (k, s) in r.stage1.iter().enumerate() {
            ckpts.push(w.checkpoint(&format!("checkpoints/{stem}_specialist{k}.ckpt"), &s.specialist.model)?);
        }
        let spec = mdp::policy_report(&r.config, r.stage1.iter().map(|s| (s.gap, None)).collect())?;
        table.push(mdp_row(w, cell("specialist"), &spec, bias, None, ckpts.join(";")));
        let g = &r.generalist;
        let ck = w.checkpoint(&format!("checkpoints/{stem}_generalist.ckpt"), &g.outcome.model)?;
        table.push(mdp_row(w, cell("generalist"), &g.report, bias, Some(g.outcome.best_step), ck));
        if let Some(b) = &r.baseline {
            let ck = w.checkpoint(&format!("checkpoints/{stem}_baseline.ckpt"), &b.outcome.model)?;
            table.push(mdp_row(w, cell("baseline"), &b.report, bias, Some(b.outcome.best_step), ck));
        }
        if cfg.save_pseudo {
            std::fs::create_dir_all(w.dir.join("pseudo")).map_err(LabError::io(&w.dir))?;
            for (k, s) in r.stage1.iter().enumerate() {
                let name = format!("pseudo/{stem}_env{k}.csv");
                pseudo_io::write_pseudo(&s.pseudo, &w.dir.join(&name))?;
                w.files.push(name);
            }
        }
        if cfg.save_trajectories > 0 {
            write_trajectories(cfg, w, r)?;
        }
    }
    Ok(table)
}

fn write_trajectories(cfg: &ExperimentConfig, w: &mut Writer, r: &MdpPipelineResult) -> Result<(), LabError> {
    std::fs::create_dir_all(w.dir.join("trajectories")).map_err(LabError::io(&w.dir))?;
    let sampler = r.config.policy_sampler();
    let seed = rng::derive_key(r.seed, &[rng::domain::EVAL, u64::MAX]);
    for (k, spec) in r.config.envs.iter().enumerate() {
        let policy = DiffusionPolicy::new(&r.generalist.outcome.model, sampler.clone());
        let trajs = (0..cfg.save_trajectories)
            .map(|i| mdp::rollout(&spec.env, &policy, seed, i))
            .collect::<semidiff_core::Result<Vec<_>>>()?;
        let name = format!("trajectories/seed{}_env{k}_generalist.csv", r.seed);
        pseudo_io::write_trajectories(&trajs, spec.env.d_y, spec.env.d_x(), &w.dir.join(&name))?;
        w.files.push(name);
    }
    Ok(())
}

fn run_axioms(cfg: &ExperimentConfig, w: &mut Writer) -> Result<(Table, Vec<AxiomReport>), LabError> {
    let a = cfg.axioms.as_ref().expect("validated");
    let mut table = Table::new([
        "seed",
        "scalarization",
        "k",
        "n_samples",
        "passed",
        "checked_square_dominance",
        "violation",
        "config_hash",
        "version",
    ]);
    let mut reports = vec![];
    for &seed in &cfg.seeds {
        for (i, s) in a.scalarizations.iter().enumerate() {
            let mut r = rng::stream(seed, &[i as u64]);
            let rep = s.check_axioms(a.k, a.n_samples, &mut r)?;
            let violation = rep.violation.as_ref().map_or_else(String::new, |v| serde_json::to_string(v).expect("serializes"));
            let mut row = vec![
                seed.to_string(),
                scalarization_label(s),
                a.k.to_string(),
                a.n_samples.to_string(),
                u8::from(rep.passed()).to_string(),
                u8::from(rep.checked_square_dominance).to_string(),
                violation,
            ];
            row.extend(w.provenance());
            table.push(row);
            reports.push(rep);
        }
    }
    Ok((table, reports))
}

/// What a run produced, for callers that want more than the files.
#[derive(Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub results: Table,
    pub sweep: Option<SweepResult>,
    pub pareto: Option<ParetoResult>,
    pub axioms: Option<Vec<AxiomReport>>,
}

/// Runs `cfg` on the current rayon pool and writes `dir`.
pub fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput, LabError> {
    cfg.validate()?;
    let mut w = Writer::new(dir, cfg.hash())?;
    let (mut sweep_res, mut pareto_res, mut axiom_res) = (None, None, None);
    let table = match cfg.mode {
        Mode::Distribution => run_distribution(cfg, &mut w)?,
        Mode::Mdp => run_mdp(cfg, &mut w)?,
        Mode::Sweep => {
            let (t, r) = run_sweep(cfg, &mut w)?;
            sweep_res = Some(r);
            t
        }
        Mode::Pareto => {
            let (t, r) = run_pareto(cfg, &mut w)?;
            pareto_res = Some(r);
            t
        }
        Mode::Axioms => {
            let (t, r) = run_axioms(cfg, &mut w)?;
            axiom_res = Some(r);
            t
        }
    };
    table.write(&dir.join(RESULTS))?;
    w.timings.write(&dir.join(TIMINGS))?;
    let mut files = vec![RESULTS.to_string(), TIMINGS.to_string()];
    files.append(&mut w.files);
    let manifest = Manifest {
        version: VERSION.into(),
        mode: cfg.mode,
        config_hash: w.hash.clone(),
        seeds: cfg.seeds.clone(),
        files,
        config: cfg.clone(),
    };
    let path = dir.join(MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(LabError::io(&path))?;
    Ok(RunOutput { dir: dir.to_path_buf(), results: table, sweep: sweep_res, pareto: pareto_res, axioms: axiom_res })
}
