//! Total-variation distances against known conditional densities and Pareto
//! dominance over a swept set of models.
//!
//! Model samples are binned; the true mass of every bin comes from the
//! closed-form CDF (`d_x = 1`) or Gauss–Legendre quadrature of the density
//! (`d_x = 2`). The grid covers ±6 standard deviations of every mixture
//! component; everything outside it is pooled into overflow cells so the
//! cells always partition `R^{d_x}` and the estimate stays in `[0, 1]`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::ScoreField;
use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, SimRng};
use crate::sampler::{self, SamplerConfig};
use crate::task::ConditionalTask;

/// Minimum number of model samples per condition.
pub const MIN_SAMPLES: usize = 10_000;

/// Half-width of the evaluation grid in component standard deviations.
pub const GRID_SDS: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TvMethod {
    Histogram,
    GridQuadrature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvEstimate {
    pub value: f64,
    /// Standard error across conditions (0 for a single condition).
    pub std_err: f64,
    pub method: TvMethod,
    /// Bins per coordinate.
    pub resolution: usize,
    pub n_samples: usize,
}

/// 5-point Gauss–Legendre nodes and weights on `[-1, 1]`.
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

struct Grid {
    lo: f64,
    width: f64,
    bins: usize,
}

impl Grid {
    fn new(range: (f64, f64), bins: usize) -> Self {
        Self { lo: range.0, width: (range.1 - range.0) / bins as f64, bins }
    }

    /// Bin index, or `None` outside the grid.
    fn index(&self, v: f64) -> Option<usize> {
        let u = (v - self.lo) / self.width;
        if u >= 0.0 && u < self.bins as f64 {
            Some(u as usize)
        } else {
            None
        }
    }

    fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width
    }
}

/// `½ Σ_cells |p̂_model(cell) − P(cell | y)|` for samples (`n × d_x`, row
/// major) against the task conditional at `y`.
pub fn tv_conditional(samples: &[f64], task: &ConditionalTask, y: &[f64], bins: usize) -> Result<TvEstimate> {
    let d = task.d_x();
    if d == 0 || d > 2 {
        return Err(Error::UnsupportedDimension(d));
    }
    if bins == 0 {
        return Err(Error::InvalidConfig("bins must be positive".into()));
    }
    let n = samples.len() / d;
    if n < MIN_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_SAMPLES, got: n });
    }
    let grids: Vec<Grid> = (0..d).map(|k| Grid::new(task.coordinate_range(k, y, GRID_SDS), bins)).collect();
    let value = if d == 1 { tv_1d(samples, task, y, &grids[0]) } else { tv_2d(samples, task, y, &grids) };
    Ok(TvEstimate {
        value: value.clamp(0.0, 1.0),
        std_err: 0.0,
        method: if d == 1 { TvMethod::Histogram } else { TvMethod::GridQuadrature },
        resolution: bins,
        n_samples: n,
    })
}

fn tv_1d(samples: &[f64], task: &ConditionalTask, y: &[f64], g: &Grid) -> f64 {
    // cells: [below, bins..., above]
    let mut counts = vec![0usize; g.bins + 2];
    for &v in samples {
        let c = match g.index(v) {
            Some(i) => i + 1,
            None if v < g.lo => 0,
            None => g.bins + 1,
        };
        counts[c] += 1;
    }
    let n = samples.len() as f64;
    let cdf: Vec<f64> = (0..=g.bins).map(|i| task.marginal_cdf(0, g.edge(i), y)).collect();
    let mut tv = (counts[0] as f64 / n - cdf[0]).abs() + (counts[g.bins + 1] as f64 / n - (1.0 - cdf[g.bins])).abs();
    for i in 0..g.bins {
        tv += (counts[i + 1] as f64 / n - (cdf[i + 1] - cdf[i])).abs();
    }
    0.5 * tv
}

fn tv_2d(samples: &[f64], task: &ConditionalTask, y: &[f64], g: &[Grid]) -> f64 {
    let (b0, b1) = (g[0].bins, g[1].bins);
    let mut counts = vec![0usize; b0 * b1];
    let mut outside = 0usize;
    for p in samples.chunks(2) {
        match (g[0].index(p[0]), g[1].index(p[1])) {
            (Some(i), Some(j)) => counts[i * b1 + j] += 1,
            _ => outside += 1,
        }
    }
    let n = (samples.len() / 2) as f64;
    let mut inside_mass = 0.0;
    let mut tv = 0.0;
    let (h0, h1) = (0.5 * g[0].width, 0.5 * g[1].width);
    for i in 0..b0 {
        let c0 = g[0].edge(i) + h0;
        for j in 0..b1 {
            let c1 = g[1].edge(j) + h1;
            let mut mass = 0.0;
            for (u, wu) in GL_NODES.iter().zip(&GL_WEIGHTS) {
                for (v, wv) in GL_NODES.iter().zip(&GL_WEIGHTS) {
                    mass += wu * wv * task.density(&[c0 + h0 * u, c1 + h1 * v], y);
                }
            }
            mass *= h0 * h1;
            inside_mass += mass;
            tv += (counts[i * b1 + j] as f64 / n - mass).abs();
        }
    }
    tv += (outside as f64 / n - (1.0 - inside_mass).max(0.0)).abs();
    0.5 * tv
}

/// `½ ∫ |p − q|` on `[lo, hi]` by composite Gauss–Legendre quadrature over
/// `cells` subintervals. Symmetric in `p` and `q` by construction.
pub fn tv_between_densities(p: &dyn Fn(f64) -> f64, q: &dyn Fn(f64) -> f64, lo: f64, hi: f64, cells: usize) -> f64 {
    let h = (hi - lo) / cells as f64;
    let mut acc = 0.0;
    for c in 0..cells {
        let mid = lo + (c as f64 + 0.5) * h;
        for (u, w) in GL_NODES.iter().zip(&GL_WEIGHTS) {
            let x = mid + 0.5 * h * u;
            acc += w * (p(x) - q(x)).abs();
        }
    }
    (0.25 * h * acc).clamp(0.0, 1.0)
}

/// Settings for `E_y TV(P_model(· | y), P(· | y))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvConfig {
    #[serde(default = "default_conditions")]
    pub n_conditions: usize,
    #[serde(default = "default_samples")]
    pub samples_per_condition: usize,
    #[serde(default = "default_bins")]
    pub bins: usize,
}

fn default_conditions() -> usize {
    8
}

fn default_samples() -> usize {
    MIN_SAMPLES
}

fn default_bins() -> usize {
    50
}

impl Default for TvConfig {
    fn default() -> Self {
        Self { n_conditions: default_conditions(), samples_per_condition: default_samples(), bins: default_bins() }
    }
}

/// Mean conditional TV over conditions drawn from the task's marginal. The
/// conditions and every sampler stream depend only on `seed`, so two models
/// evaluated with the same seed share their random numbers.
pub fn tv_expected(
    model: &dyn ScoreField,
    task: &ConditionalTask,
    cfg: &TvConfig,
    sampler_cfg: &SamplerConfig,
    seed: u64,
) -> Result<TvEstimate> {
    if cfg.n_conditions == 0 {
        return Err(Error::Empty("condition set"));
    }
    let mut cond_rng = rng::stream(seed, &[rng::domain::EVAL, 0]);
    let mut values = Vec::with_capacity(cfg.n_conditions);
    let mut last = None;
    for c in 0..cfg.n_conditions {
        let y = task.sample_condition(&mut cond_rng);
        let samples = sample_at(model, &y, cfg.samples_per_condition, sampler_cfg, seed, c as u64)?;
        let est = tv_conditional(&samples, task, &y, cfg.bins)?;
        values.push(est.value);
        last = Some(est);
    }
    let (value, std_err) = math::mean_and_stderr(&values);
    let last = last.expect("at least one condition");
    Ok(TvEstimate { value, std_err, n_samples: last.n_samples * cfg.n_conditions, ..last })
}

/// `n` model samples at condition `y`, one stream per sample.
pub fn sample_at(
    model: &dyn ScoreField,
    y: &[f64],
    n: usize,
    cfg: &SamplerConfig,
    seed: u64,
    condition: u64,
) -> Result<Vec<f64>> {
    const CHUNK: usize = 2048;
    let mut out = Vec::with_capacity(n * model.dim_x());
    let mut start = 0;
    while start < n {
        let m = CHUNK.min(n - start);
        let mut rngs: Vec<SimRng> =
            (start..start + m).map(|i| rng::stream(seed, &[rng::domain::EVAL, 1, condition, i as u64])).collect();
        let ys: Vec<f64> = y.iter().copied().cycle().take(m * y.len()).collect();
        out.extend(sampler::sample_batch(model, &ys, &mut rngs, cfg)?);
        start += m;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Scalarization label, e.g. the linear weights.
    pub label: String,
    pub weights: Vec<f64>,
    pub tv: Vec<f64>,
    pub tv_std_err: Vec<f64>,
    pub lp: Vec<f64>,
    pub checkpoint: String,
    pub dominated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub points: Vec<ParetoPoint>,
}

impl ParetoFront {
    /// Builds a front and flags dominated points; see [`dominated_flags`].
    pub fn new(mut points: Vec<ParetoPoint>, margins: &[f64]) -> Result<Self> {
        let tvs: Vec<Vec<f64>> = points.iter().map(|p| p.tv.clone()).collect();
        let flags = dominated_flags(&tvs, margins)?;
        for (p, f) in points.iter_mut().zip(flags) {
            p.dominated = f;
        }
        Ok(Self { points })
    }

    pub fn undominated(&self) -> impl Iterator<Item = &ParetoPoint> {
        self.points.iter().filter(|p| !p.dominated)
    }
}

/// Flags every vector strictly dominated by another beyond `margins`: `i` is
/// flagged iff some `j` has `v_j[c] ≤ v_i[c] − m_c` for all `c`, with strict
/// inequality for at least one `c`. Zero margins give plain Pareto dominance.
pub fn dominated_flags(vectors: &[Vec<f64>], margins: &[f64]) -> Result<Vec<bool>> {
    let k = margins.len();
    if let Some(v) = vectors.iter().find(|v| v.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, got: v.len() });
    }
    Ok(vectors
        .iter()
        .enumerate()
        .map(|(i, vi)| {
            vectors.iter().enumerate().any(|(j, vj)| {
                j != i
                    && (0..k).all(|c| vj[c] <= vi[c] - margins[c])
                    && (0..k).any(|c| vj[c] < vi[c] - margins[c])
            })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::ConditionMarginal;

    #[test]
    fn density_self_distance_is_zero() {
        let p = |x: f64| math::normal_pdf(x);
        assert_eq!(tv_between_densities(&p, &p, -8.0, 8.0, 200), 0.0);
    }

    #[test]
    fn gaussian_shift_tv_closed_form() {
        let p = |x: f64| math::normal_pdf(x);
        let q = |x: f64| math::normal_pdf(x - 1.0);
        let exact = 2.0 * math::normal_cdf(0.5) - 1.0;
        let a = tv_between_densities(&p, &q, -10.0, 11.0, 400);
        let b = tv_between_densities(&q, &p, -10.0, 11.0, 400);
        assert!((a - exact).abs() < 1e-6, "{a} vs {exact}");
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dominance_flags() {
        let v = vec![vec![0.1, 0.5], vec![0.2, 0.2], vec![0.3, 0.3], vec![0.1, 0.5]];
        assert_eq!(dominated_flags(&v, &[0.0, 0.0]).unwrap(), vec![false, false, true, false]);
        assert_eq!(dominated_flags(&v, &[0.2, 0.2]).unwrap(), vec![false, false, false, false]);
    }

    #[test]
    fn rejects_few_samples_and_high_dimension() {
        let task = ConditionalTask::scalar_gaussian(0.0, 0.0, 1.0, ConditionMarginal::Uniform).unwrap();
        assert!(matches!(tv_conditional(&[0.0; 10], &task, &[0.5], 10), Err(Error::TooFewSamples { .. })));
    }
}
