//! Experiment configuration files.
//!
//! One TOML document per experiment. The `mode` key selects which sections
//! are required; unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use semidiff_core::mdp::MdpPipelineConfig;
use semidiff_core::pipeline::PipelineConfig;
use semidiff_core::scalarization::{Scalarization, ScalarizationKind};

use crate::error::LabError;

/// Artifact version stamped on every results row.
pub const VERSION: &str = concat!("semidiff/", env!("CARGO_PKG_VERSION"));

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "SEMIDIFF_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One two-stage pipeline per seed.
    Distribution,
    /// One diffusion-policy pipeline per seed.
    Mdp,
    /// Full factorial over labeled and pseudo-labeled budgets.
    Sweep,
    /// One generalist per scalarization weight vector.
    Pareto,
    /// Scalarization axiom checks.
    Axioms,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Distribution => "distribution",
            Mode::Mdp => "mdp",
            Mode::Sweep => "sweep",
            Mode::Pareto => "pareto",
            Mode::Axioms => "axioms",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Labeled pairs per task.
    pub n_grid: Vec<usize>,
    /// Pseudo-labeled pairs per task.
    pub big_n_grid: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParetoGrid {
    /// Linear scalarization weights, one vector per swept point.
    pub weights: Vec<Vec<f64>>,
    /// Dominance margin in units of the per-task evaluation std error.
    #[serde(default = "default_margin_z")]
    pub margin_z: f64,
}

fn default_margin_z() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxiomsConfig {
    pub scalarizations: Vec<Scalarization>,
    /// Number of objectives.
    pub k: usize,
    #[serde(default = "default_axiom_samples")]
    pub n_samples: usize,
}

fn default_axiom_samples() -> usize {
    10_000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Replicate seeds; each replaces the `seed` of the pipeline section.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Output directory; relative paths resolve against the output root.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Write pseudo-labeled data sets next to the checkpoints.
    #[serde(default)]
    pub save_pseudo: bool,
    /// Audit rollouts per environment written for each generalist policy.
    #[serde(default)]
    pub save_trajectories: usize,
    #[serde(default)]
    pub pipeline: Option<PipelineConfig>,
    #[serde(default)]
    pub mdp: Option<MdpPipelineConfig>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub pareto: Option<ParetoGrid>,
    #[serde(default)]
    pub axioms: Option<AxiomsConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::MissingConfig { path: path.to_path_buf(), source: e })?;
        Self::from_toml(&text)
    }

    /// Replaces the replicate list with a single seed.
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        self
    }

    pub fn pipeline(&self) -> Result<&PipelineConfig, LabError> {
        self.pipeline.as_ref().ok_or_else(|| missing(self.mode, "pipeline"))
    }

    pub fn mdp(&self) -> Result<&MdpPipelineConfig, LabError> {
        self.mdp.as_ref().ok_or_else(|| missing(self.mode, "mdp"))
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: String| Err(LabError::InvalidConfig(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let unexpected = |name: &str, present: bool| -> Result<(), LabError> {
            if present {
                Err(LabError::InvalidConfig(format!("section [{name}] is not used by mode {}", self.mode.as_str())))
            } else {
                Ok(())
            }
        };
        match self.mode {
            Mode::Distribution | Mode::Sweep | Mode::Pareto => {
                self.pipeline()?.validate()?;
                unexpected("mdp", self.mdp.is_some())?;
                unexpected("axioms", self.axioms.is_some())?;
            }
            Mode::Mdp => {
                self.mdp()?.validate()?;
                unexpected("pipeline", self.pipeline.is_some())?;
                unexpected("axioms", self.axioms.is_some())?;
            }
            Mode::Axioms => {
                unexpected("pipeline", self.pipeline.is_some())?;
                unexpected("mdp", self.mdp.is_some())?;
                let a = self.axioms.as_ref().ok_or_else(|| missing(self.mode, "axioms"))?;
                if a.scalarizations.is_empty() || a.k == 0 || a.n_samples == 0 {
                    return bad("axioms needs scalarizations, k > 0 and n_samples > 0".into());
                }
                for s in &a.scalarizations {
                    s.validate()?;
                }
            }
        }
        unexpected("sweep", self.mode != Mode::Sweep && self.sweep.is_some())?;
        unexpected("pareto", self.mode != Mode::Pareto && self.pareto.is_some())?;
        if self.mode == Mode::Sweep {
            let g = self.sweep.as_ref().ok_or_else(|| missing(self.mode, "sweep"))?;
            if g.n_grid.is_empty() || g.big_n_grid.is_empty() {
                return bad("sweep grids must be non-empty".into());
            }
            if g.n_grid.contains(&0) || g.big_n_grid.contains(&0) {
                return bad("sweep budgets must be positive".into());
            }
            let allow = self.pipeline()?.allow_regime_violation;
            if !allow && g.n_grid.iter().max() > g.big_n_grid.iter().min() {
                return bad("sweep grid contains cells with N < n; set allow_regime_violation to proceed".into());
            }
        }
        if self.mode == Mode::Pareto {
            let g = self.pareto.as_ref().ok_or_else(|| missing(self.mode, "pareto"))?;
            let k = self.pipeline()?.k();
            if g.weights.is_empty() {
                return bad("pareto weight grid must be non-empty".into());
            }
            if !(g.margin_z >= 0.0 && g.margin_z.is_finite()) {
                return bad("pareto margin_z must be finite and >= 0".into());
            }
            for w in &g.weights {
                if w.len() != k {
                    return bad(format!("weight vector {w:?} has {} entries for {k} tasks", w.len()));
                }
                Scalarization::linear(w.clone())?;
            }
        }
        Ok(())
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Output directory: the CLI flag, then the config's `out`, then
    /// `runs/<mode>-<hash prefix>`; relative paths resolve against the
    /// output root (`SEMIDIFF_OUT`, else the working directory).
    pub fn output_dir(&self, flag: Option<&Path>, root: Option<&Path>) -> PathBuf {
        let rel = flag
            .map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", self.mode.as_str(), &self.hash()[..12])));
        match root {
            Some(r) if rel.is_relative() && flag.is_none() => r.join(rel),
            _ => rel,
        }
    }

    /// Pipeline section with the replicate seed and, optionally, a
    /// scalarization substituted.
    pub fn pipeline_for(&self, seed: u64, scalarization: Option<Scalarization>) -> Result<PipelineConfig, LabError> {
        let mut p = self.pipeline()?.clone();
        p.seed = seed;
        if let Some(s) = scalarization {
            p.scalarization = s;
        }
        Ok(p)
    }

    pub fn mdp_for(&self, seed: u64) -> Result<MdpPipelineConfig, LabError> {
        let mut m = self.mdp()?.clone();
        m.seed = seed;
        Ok(m)
    }

    /// Short human-readable plan for `--dry-run`.
    pub fn plan(&self) -> Vec<String> {
        let seeds = self.seeds.len();
        let mut lines = vec![format!("mode {} with {seeds} seed(s) {:?}", self.mode.as_str(), self.seeds)];
        match self.mode {
            Mode::Distribution => {
                if let Some(p) = &self.pipeline {
                    lines.push(format!(
                        "{seeds} pipeline run(s): K = {}, n = {}, N = {}, baseline {}",
                        p.k(),
                        p.n_labeled,
                        p.n_pseudo,
                        p.baseline
                    ));
                }
            }
            Mode::Mdp => {
                if let Some(m) = &self.mdp {
                    lines.push(format!("{seeds} policy pipeline run(s): K = {}, n = {}, N = {}", m.k(), m.n_labeled, m.n_pseudo));
                }
            }
            Mode::Sweep => {
                if let Some(g) = &self.sweep {
                    lines.push(format!(
                        "{} cells x {seeds} seeds: n in {:?}, N in {:?}",
                        g.n_grid.len() * g.big_n_grid.len(),
                        g.n_grid,
                        g.big_n_grid
                    ));
                }
            }
            Mode::Pareto => {
                if let Some(g) = &self.pareto {
                    lines.push(format!("{} weight vectors x {seeds} seeds: {:?}", g.weights.len(), g.weights));
                }
            }
            Mode::Axioms => {
                if let Some(a) = &self.axioms {
                    lines.push(format!("{} scalarization(s), K = {}, {} samples each", a.scalarizations.len(), a.k, a.n_samples));
                }
            }
        }
        lines
    }
}

fn missing(mode: Mode, section: &str) -> LabError {
    LabError::InvalidConfig(format!("mode {} requires a [{section}] section", mode.as_str()))
}

/// Stable text label of a scalarization for tables.
pub fn scalarization_label(s: &Scalarization) -> String {
    match &s.kind {
        ScalarizationKind::Linear { weights } => {
            let w: Vec<String> = weights.iter().map(|w| w.to_string()).collect();
            format!("linear:{}", w.join(";"))
        }
        ScalarizationKind::Chebyshev => "chebyshev".into(),
        ScalarizationKind::Lp { p } => format!("lp:{p}"),
    }
}
