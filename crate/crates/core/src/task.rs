//! Synthetic conditional tasks: Gaussian-mixture conditionals `p(x | y)` with
//! affine component means, a condition marginal on `[0,1]^{d_y}`, and the
//! closed-form score of every forward-noised marginal.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{alpha, sigma2, ScoreField};
use crate::error::{Error, Result};
use crate::math::{self, exp, ln, sqrt, SpdMatrix};
use crate::rng;

/// `y ↦ offset + W y` with `W` stored as `d_x` rows of length `d_y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub offset: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl AffineMap {
    pub fn new(offset: Vec<f64>, weights: Vec<Vec<f64>>) -> Self {
        Self { offset, weights }
    }

    /// Scalar map `y ↦ a + b y` for `d_x = d_y = 1`.
    pub fn scalar(a: f64, b: f64) -> Self {
        Self { offset: vec![a], weights: vec![vec![b]] }
    }

    pub fn constant(offset: Vec<f64>, d_y: usize) -> Self {
        let weights = vec![vec![0.0; d_y]; offset.len()];
        Self { offset, weights }
    }

    pub fn apply_into(&self, y: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.offset[i] + math::dot(&self.weights[i], y);
        }
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.offset.len()];
        self.apply_into(y, &mut out);
        out
    }

    fn validate(&self, d_x: usize, d_y: usize) -> Result<()> {
        if self.offset.len() != d_x || self.weights.len() != d_x || self.weights.iter().any(|r| r.len() != d_y) {
            return Err(Error::InvalidTask(format!("affine map must be {d_x}x{d_y}")));
        }
        if self.offset.iter().chain(self.weights.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTask("affine map has non-finite entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub mean: AffineMap,
    pub cov: SpdMatrix,
}

/// Law of the condition `y` on `[0,1]^{d_y}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionMarginal {
    #[default]
    Uniform,
    /// Independent coordinates, each `N(mean, std²)` truncated to `[0, 1]`.
    TruncatedNormal { mean: Vec<f64>, std: Vec<f64> },
}

impl ConditionMarginal {
    fn validate(&self, d_y: usize) -> Result<()> {
        if let Self::TruncatedNormal { mean, std } = self {
            if mean.len() != d_y || std.len() != d_y {
                return Err(Error::InvalidTask("marginal dimension mismatch".into()));
            }
            for (m, s) in mean.iter().zip(std) {
                if !(*s > 0.0) || !m.is_finite() {
                    return Err(Error::InvalidTask("truncated normal needs finite mean and std > 0".into()));
                }
                let mass = math::normal_cdf((1.0 - m) / s) - math::normal_cdf(-m / s);
                if mass < 1e-3 {
                    return Err(Error::InvalidTask(format!("truncated normal keeps only {mass:.2e} mass on [0,1]")));
                }
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, d_y: usize, rng: &mut R) -> Vec<f64> {
        match self {
            Self::Uniform => (0..d_y).map(|_| rng::uniform(rng)).collect(),
            Self::TruncatedNormal { mean, std } => mean
                .iter()
                .zip(std)
                .map(|(m, s)| loop {
                    let v = m + s * rng::normal(rng);
                    if (0.0..=1.0).contains(&v) {
                        break v;
                    }
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskSpec {
    d_x: usize,
    d_y: usize,
    components: Vec<Component>,
    #[serde(default)]
    marginal: ConditionMarginal,
}

/// Envelope constants certifying `p(x | y) ≤ c1 · exp(-c2 ‖x‖²)` for all `y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBound {
    pub c1: f64,
    pub c2: f64,
}

/// A joint law over `(x, y)` with `y` on the unit cube and a Gaussian-mixture
/// conditional `x | y ~ Σ_j w_j N(μ_j(y), Σ_j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskSpec", into = "TaskSpec")]
pub struct ConditionalTask {
    d_x: usize,
    d_y: usize,
    components: Vec<Component>,
    marginal: ConditionMarginal,
    kl_bound: f64,
    tail: TailBound,
}

impl TryFrom<TaskSpec> for ConditionalTask {
    type Error = Error;

    fn try_from(s: TaskSpec) -> Result<Self> {
        Self::new(s.d_x, s.d_y, s.components, s.marginal)
    }
}

impl From<ConditionalTask> for TaskSpec {
    fn from(t: ConditionalTask) -> Self {
        Self { d_x: t.d_x, d_y: t.d_y, components: t.components, marginal: t.marginal }
    }
}

impl ConditionalTask {
    pub fn new(d_x: usize, d_y: usize, components: Vec<Component>, marginal: ConditionMarginal) -> Result<Self> {
        if d_x == 0 || d_y == 0 {
            return Err(Error::InvalidTask("dimensions must be positive".into()));
        }
        if components.is_empty() {
            return Err(Error::InvalidTask("at least one component required".into()));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidTask(format!("weights must be positive and sum to 1 (sum {total})")));
        }
        for c in &components {
            c.mean.validate(d_x, d_y)?;
            if c.cov.dim() != d_x {
                return Err(Error::InvalidTask("covariance dimension mismatch".into()));
            }
        }
        marginal.validate(d_y)?;
        let mut task = Self { d_x, d_y, components, marginal, kl_bound: 0.0, tail: TailBound { c1: 0.0, c2: 0.0 } };
        task.kl_bound = task.certify_kl();
        task.tail = task.certify_tail();
        Ok(task)
    }

    /// `x | y ~ N(a + b y, var)` with `d_x = d_y = 1`.
    pub fn scalar_gaussian(a: f64, b: f64, var: f64, marginal: ConditionMarginal) -> Result<Self> {
        Self::new(
            1,
            1,
            vec![Component { weight: 1.0, mean: AffineMap::scalar(a, b), cov: SpdMatrix::scaled_identity(1, var) }],
            marginal,
        )
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_y(&self) -> usize {
        self.d_y
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn marginal(&self) -> &ConditionMarginal {
        &self.marginal
    }

    /// Certified upper bound on `KL(P(·|y) ‖ N(0, I))` over all `y`.
    pub fn kl_bound(&self) -> f64 {
        self.kl_bound
    }

    pub fn tail_bound(&self) -> TailBound {
        self.tail
    }

    /// The same task with every component mean negated.
    pub fn mirrored(&self) -> Self {
        let mut t = self.clone();
        for c in &mut t.components {
            for v in c.mean.offset.iter_mut().chain(c.mean.weights.iter_mut().flatten()) {
                *v = -*v;
            }
        }
        t
    }

    pub fn sample_condition<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginal.sample(self.d_y, rng)
    }

    pub fn sample_given<R: Rng + ?Sized>(&self, y: &[f64], rng: &mut R) -> Vec<f64> {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut comp = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                comp = c;
                break;
            }
        }
        let mut z = vec![0.0; self.d_x];
        rng::fill_normal(rng, &mut z);
        let mut x = vec![0.0; self.d_x];
        comp.cov.chol_mul(&z, &mut x);
        let mu = comp.mean.apply(y);
        for (xi, m) in x.iter_mut().zip(&mu) {
            *xi += m;
        }
        x
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let y = self.sample_condition(rng);
        let x = self.sample_given(&y, rng);
        (x, y)
    }

    /// Conditional mean `E[x | y]`.
    pub fn mean_given(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d_x];
        for c in &self.components {
            for (o, m) in out.iter_mut().zip(c.mean.apply(y)) {
                *o += c.weight * m;
            }
        }
        out
    }

    pub fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        self.noised_log_density(x, y, 0.0)
    }

    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        exp(self.log_density(x, y))
    }

    /// Log density of the time-`t` forward marginal `p_t(x | y)`.
    pub fn noised_log_density(&self, x: &[f64], y: &[f64], t: f64) -> f64 {
        let a = alpha(t).unwrap_or(1.0);
        let s2 = sigma2(t).unwrap_or(0.0);
        let mut terms = Vec::with_capacity(self.components.len());
        let mut diff = vec![0.0; self.d_x];
        for c in &self.components {
            let cov = c.cov.affine_with_identity(a * a, s2).expect("SPD plus PSD is SPD");
            let mu = c.mean.apply(y);
            for i in 0..self.d_x {
                diff[i] = x[i] - a * mu[i];
            }
            terms.push(
                ln(c.weight)
                    - 0.5 * (self.d_x as f64 * ln(2.0 * PI) + cov.log_det() + cov.inv_quad_form(&diff)),
            );
        }
        math::log_sum_exp(&terms)
    }

    /// Conditional CDF of coordinate `dim` given `y`.
    pub fn marginal_cdf(&self, dim: usize, x: f64, y: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let mu = c.mean.apply(y)[dim];
                c.weight * math::normal_cdf((x - mu) / sqrt(c.cov.get(dim, dim)))
            })
            .sum()
    }

    /// Range `[lo, hi]` of coordinate `dim` covering ±`k` standard deviations
    /// of every component.
    pub fn coordinate_range(&self, dim: usize, y: &[f64], k: f64) -> (f64, f64) {
        self.components.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
            let mu = c.mean.apply(y)[dim];
            let sd = sqrt(c.cov.get(dim, dim));
            (lo.min(mu - k * sd), hi.max(mu + k * sd))
        })
    }

    /// Exact score of the forward-noised conditional at time `t`.
    pub fn score(&self, x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
        self.oracle().eval(x, y, t)
    }

    pub fn oracle(&self) -> OracleScore<'_> {
        OracleScore { task: self, cache: RefCell::new(None) }
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        (0..1usize << self.d_y)
            .map(|mask| (0..self.d_y).map(|i| ((mask >> i) & 1) as f64).collect())
            .collect()
    }

    fn certify_kl(&self) -> f64 {
        // KL is convex in the mixture, and ‖μ(y)‖² is convex in y, so the
        // maximum of the component-wise bound sits on a cube vertex.
        let d = self.d_x as f64;
        self.vertices()
            .iter()
            .map(|y| {
                self.components
                    .iter()
                    .map(|c| {
                        let mu = c.mean.apply(y);
                        c.weight * 0.5 * (c.cov.trace() + math::norm2(&mu) - d - c.cov.log_det())
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    fn certify_tail(&self) -> TailBound {
        // (x-μ)ᵀΣ⁻¹(x-μ) ≥ ‖x-μ‖²/λ and ‖x-μ‖² ≥ ‖x‖²/2 - ‖μ‖².
        let d = self.d_x as f64;
        let verts = self.vertices();
        let mut c1: f64 = 0.0;
        let mut c2 = f64::INFINITY;
        for c in &self.components {
            let lam = c.cov.max_eigen_bound();
            let m2 = verts.iter().map(|y| math::norm2(&c.mean.apply(y))).fold(0.0, f64::max);
            let norm = exp(-0.5 * (d * ln(2.0 * PI) + c.cov.log_det()));
            c1 = c1.max(norm * exp(m2 / (2.0 * lam)));
            c2 = c2.min(1.0 / (4.0 * lam));
        }
        TailBound { c1, c2 }
    }
}

struct NoisedComponents {
    t: f64,
    alpha: f64,
    covs: Vec<SpdMatrix>,
    log_norms: Vec<f64>,
}

/// The exact conditional score `∇_x log p_t(x | y)` of a task, usable
/// anywhere a learned field is.
pub struct OracleScore<'a> {
    task: &'a ConditionalTask,
    cache: RefCell<Option<NoisedComponents>>,
}

impl OracleScore<'_> {
    fn prepare(&self, t: f64) {
        let mut cache = self.cache.borrow_mut();
        if matches!(&*cache, Some(c) if c.t.to_bits() == t.to_bits()) {
            return;
        }
        let a = alpha(t.max(0.0)).unwrap_or(1.0);
        let s2 = sigma2(t.max(0.0)).unwrap_or(0.0);
        let d = self.task.d_x as f64;
        let covs: Vec<SpdMatrix> = self
            .task
            .components
            .iter()
            .map(|c| c.cov.affine_with_identity(a * a, s2).expect("SPD plus PSD is SPD"))
            .collect();
        let log_norms = covs
            .iter()
            .zip(&self.task.components)
            .map(|(cv, c)| ln(c.weight) - 0.5 * (d * ln(2.0 * PI) + cv.log_det()))
            .collect();
        *cache = Some(NoisedComponents { t, alpha: a, covs, log_norms });
    }
}

impl ScoreField for OracleScore<'_> {
    fn dim_x(&self) -> usize {
        self.task.d_x
    }

    fn dim_y(&self) -> usize {
        self.task.d_y
    }

    fn eval_batch(&self, xs: &[f64], ys: &[f64], ts: &[f64], out: &mut [f64]) {
        let (d_x, d_y) = (self.task.d_x, self.task.d_y);
        let k = self.task.components.len();
        let mut mu = vec![0.0; d_x];
        let mut diff = vec![0.0; d_x];
        let mut prec_diff = vec![0.0; k * d_x];
        let mut logits = vec![0.0; k];
        for (i, &t) in ts.iter().enumerate() {
            self.prepare(t);
            let cache = self.cache.borrow();
            let nc = cache.as_ref().expect("prepared");
            let x = &xs[i * d_x..(i + 1) * d_x];
            let y = &ys[i * d_y..(i + 1) * d_y];
            for (j, c) in self.task.components.iter().enumerate() {
                c.mean.apply_into(y, &mut mu);
                for q in 0..d_x {
                    diff[q] = x[q] - nc.alpha * mu[q];
                }
                let pd = &mut prec_diff[j * d_x..(j + 1) * d_x];
                nc.covs[j].solve(&diff, pd);
                logits[j] = nc.log_norms[j] - 0.5 * math::dot(&diff, pd);
            }
            let o = &mut out[i * d_x..(i + 1) * d_x];
            if k == 1 {
                for q in 0..d_x {
                    o[q] = -prec_diff[q];
                }
                continue;
            }
            let lse = math::log_sum_exp(&logits);
            o.fill(0.0);
            for j in 0..k {
                let r = exp(logits[j] - lse);
                for q in 0..d_x {
                    o[q] -= r * prec_diff[j * d_x + q];
                }
            }
        }
    }
}
