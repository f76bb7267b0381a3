//! Scalarizations `S: R^K → R` and executable checks of the two axioms every
//! admissible scalarization must satisfy:
//!
//! * reverse triangle inequality `|S(u) − S(v)| ≤ S(|u − v|)`
//! * positive homogeneity `S(αu) = α S(u)` for `α ≥ 0`
//!
//! Chebyshev is `max_k u_k` applied to possibly negative coordinates as-is:
//! the stage-two losses can be negative for finite samples and no clamping is
//! performed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, exp, powf};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub enum ScalarizationKind {
    /// `Σ λ_k u_k` with `λ` on the simplex.
    Linear { weights: Vec<f64> },
    /// `max_k u_k`.
    Chebyshev,
    /// `‖u‖_p`, `p ≥ 1`.
    Lp { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScalarizationSpec", into = "ScalarizationSpec")]
pub struct Scalarization {
    pub kind: ScalarizationKind,
    /// Log-sum-exp temperature for Chebyshev; 0 means exact.
    pub smoothing_temp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindTag {
    Linear,
    Chebyshev,
    Lp,
}

/// Flat on-disk form: `kind`, plus `weights` (linear) or `p` (lp).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScalarizationSpec {
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default)]
    smoothing_temp: f64,
}

impl TryFrom<ScalarizationSpec> for Scalarization {
    type Error = Error;

    fn try_from(s: ScalarizationSpec) -> Result<Self> {
        let kind = match (s.kind, s.weights, s.p) {
            (KindTag::Linear, Some(weights), None) => ScalarizationKind::Linear { weights },
            (KindTag::Chebyshev, None, None) => ScalarizationKind::Chebyshev,
            (KindTag::Lp, None, Some(p)) => ScalarizationKind::Lp { p },
            (tag, ..) => {
                return Err(Error::InvalidScalarization(format!(
                    "{tag:?} takes exactly its own parameters (linear: weights, lp: p)"
                )))
            }
        };
        let out = Self { kind, smoothing_temp: s.smoothing_temp };
        out.validate()?;
        Ok(out)
    }
}

impl From<Scalarization> for ScalarizationSpec {
    fn from(s: Scalarization) -> Self {
        let (kind, weights, p) = match s.kind {
            ScalarizationKind::Linear { weights } => (KindTag::Linear, Some(weights), None),
            ScalarizationKind::Chebyshev => (KindTag::Chebyshev, None, None),
            ScalarizationKind::Lp { p } => (KindTag::Lp, None, Some(p)),
        };
        Self { kind, weights, p, smoothing_temp: s.smoothing_temp }
    }
}

impl Scalarization {
    pub fn linear(weights: Vec<f64>) -> Result<Self> {
        let s = Self { kind: ScalarizationKind::Linear { weights }, smoothing_temp: 0.0 };
        s.validate()?;
        Ok(s)
    }

    pub fn chebyshev() -> Self {
        Self { kind: ScalarizationKind::Chebyshev, smoothing_temp: 0.0 }
    }

    pub fn smoothed_chebyshev(temp: f64) -> Result<Self> {
        let s = Self { kind: ScalarizationKind::Chebyshev, smoothing_temp: temp };
        s.validate()?;
        Ok(s)
    }

    pub fn lp(p: f64) -> Result<Self> {
        let s = Self { kind: ScalarizationKind::Lp { p }, smoothing_temp: 0.0 };
        s.validate()?;
        Ok(s)
    }

    /// Uniform linear weights over `k` objectives.
    pub fn uniform_linear(k: usize) -> Self {
        Self { kind: ScalarizationKind::Linear { weights: vec![1.0 / k as f64; k] }, smoothing_temp: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.smoothing_temp >= 0.0 && self.smoothing_temp.is_finite()) {
            return Err(Error::InvalidScalarization("smoothing_temp must be finite and >= 0".into()));
        }
        match &self.kind {
            ScalarizationKind::Linear { weights } => {
                let sum: f64 = weights.iter().sum();
                if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidScalarization(format!(
                        "linear weights must lie on the simplex, got {weights:?}"
                    )));
                }
            }
            ScalarizationKind::Chebyshev => {}
            ScalarizationKind::Lp { p } => {
                if !(*p >= 1.0) {
                    return Err(Error::InvalidScalarization(format!("lp needs p >= 1, got {p}")));
                }
            }
        }
        if self.smoothing_temp > 0.0 && !matches!(self.kind, ScalarizationKind::Chebyshev) {
            return Err(Error::InvalidScalarization("smoothing applies to chebyshev only".into()));
        }
        Ok(())
    }

    /// The exact map this scalarization smooths.
    pub fn exact(&self) -> Self {
        Self { kind: self.kind.clone(), smoothing_temp: 0.0 }
    }

    pub fn with_temp(&self, temp: f64) -> Self {
        match self.kind {
            ScalarizationKind::Chebyshev => Self { kind: self.kind.clone(), smoothing_temp: temp },
            _ => self.exact(),
        }
    }

    /// Whether `|S(u)| ≤ ‖u‖_∞` and `S(|·|)` is coordinatewise monotone.
    /// `ℓp` with finite `p` fails the sup-norm bound once `K > 1`.
    pub fn satisfies_sup_norm_bound(&self, k: usize) -> bool {
        match &self.kind {
            ScalarizationKind::Linear { .. } | ScalarizationKind::Chebyshev => true,
            ScalarizationKind::Lp { p } => k <= 1 || p.is_infinite(),
        }
    }

    pub fn evaluate(&self, u: &[f64]) -> Result<f64> {
        if u.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        Ok(match &self.kind {
            ScalarizationKind::Linear { weights } => {
                if weights.len() != u.len() {
                    return Err(Error::DimensionMismatch { expected: weights.len(), got: u.len() });
                }
                math::dot(weights, u)
            }
            ScalarizationKind::Chebyshev => {
                let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if self.smoothing_temp > 0.0 {
                    let tau = self.smoothing_temp;
                    let scaled: Vec<f64> = u.iter().map(|v| v / tau).collect();
                    tau * math::log_sum_exp(&scaled)
                } else {
                    max
                }
            }
            ScalarizationKind::Lp { p } => {
                if p.is_infinite() {
                    u.iter().map(|v| v.abs()).fold(0.0, f64::max)
                } else {
                    let m = u.iter().map(|v| v.abs()).fold(0.0, f64::max);
                    if m == 0.0 {
                        0.0
                    } else {
                        m * powf(u.iter().map(|v| powf(v.abs() / m, *p)).sum::<f64>(), 1.0 / p)
                    }
                }
            }
        })
    }

    /// A (sub)gradient of `S` at `u`.
    pub fn subgradient(&self, u: &[f64]) -> Result<Vec<f64>> {
        let k = u.len();
        Ok(match &self.kind {
            ScalarizationKind::Linear { weights } => {
                if weights.len() != k {
                    return Err(Error::DimensionMismatch { expected: weights.len(), got: k });
                }
                weights.clone()
            }
            ScalarizationKind::Chebyshev if self.smoothing_temp > 0.0 => {
                let tau = self.smoothing_temp;
                let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = u.iter().map(|v| exp((v - max) / tau)).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect()
            }
            ScalarizationKind::Chebyshev => {
                let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ties = u.iter().filter(|v| **v == max).count() as f64;
                u.iter().map(|v| if *v == max { 1.0 / ties } else { 0.0 }).collect()
            }
            ScalarizationKind::Lp { p } => {
                let norm = self.evaluate(u)?;
                if norm == 0.0 {
                    vec![0.0; k]
                } else if p.is_infinite() {
                    let ties = u.iter().filter(|v| v.abs() == norm).count() as f64;
                    u.iter().map(|v| if v.abs() == norm { v.signum() / ties } else { 0.0 }).collect()
                } else {
                    u.iter().map(|v| v.signum() * powf(v.abs() / norm, p - 1.0)).collect()
                }
            }
        })
    }

    /// Fuzz-checks the axioms on the exact map.
    pub fn check_axioms<R: Rng + ?Sized>(&self, k: usize, n_samples: usize, rng: &mut R) -> Result<AxiomReport> {
        if self.smoothing_temp != 0.0 {
            return Err(Error::InvalidScalarization("axioms are checked on the exact map (smoothing_temp = 0)".into()));
        }
        if let ScalarizationKind::Linear { weights } = &self.kind {
            if weights.len() != k {
                return Err(Error::DimensionMismatch { expected: weights.len(), got: k });
            }
        }
        let check_square = self.satisfies_sup_norm_bound(k);
        Ok(check_axioms_fn(|u| self.evaluate(u).unwrap_or(f64::NAN), k, n_samples, check_square, rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    ReverseTriangle,
    PositiveHomogeneity,
    /// `S(u²) ≥ S(u)²` on `u ≥ 0`.
    SquareDominance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub axiom: Axiom,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub samples: usize,
    pub checked_square_dominance: bool,
    /// First violating triple, if any.
    pub violation: Option<Violation>,
}

impl AxiomReport {
    pub fn passed(&self) -> bool {
        self.violation.is_none()
    }
}

const AXIOM_TOL: f64 = 1e-9;

fn close_or_less(lhs: f64, rhs: f64) -> bool {
    lhs <= rhs + AXIOM_TOL * (1.0 + lhs.abs().max(rhs.abs()))
}

/// Checks the axioms for an arbitrary map on `n_samples` random `(u, v, α)`
/// with entries in `[−10, 10]` and `α ∈ [0, 10]`.
pub fn check_axioms_fn<F, R>(s: F, k: usize, n_samples: usize, check_square: bool, rng: &mut R) -> AxiomReport
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    let mut u = vec![0.0; k];
    let mut v = vec![0.0; k];
    let mut buf = vec![0.0; k];
    for _ in 0..n_samples {
        for i in 0..k {
            u[i] = 20.0 * rng::uniform(rng) - 10.0;
            v[i] = 20.0 * rng::uniform(rng) - 10.0;
        }
        let alpha = 10.0 * rng::uniform(rng);
        let fail = |axiom| Some(Violation { axiom, u: u.clone(), v: v.clone(), alpha });

        for i in 0..k {
            buf[i] = (u[i] - v[i]).abs();
        }
        if !close_or_less((s(&u) - s(&v)).abs(), s(&buf)) {
            return AxiomReport { samples: n_samples, checked_square_dominance: check_square, violation: fail(Axiom::ReverseTriangle) };
        }

        for i in 0..k {
            buf[i] = alpha * u[i];
        }
        let (lhs, rhs) = (s(&buf), alpha * s(&u));
        if (lhs - rhs).abs() > AXIOM_TOL * (1.0 + lhs.abs().max(rhs.abs())) {
            return AxiomReport { samples: n_samples, checked_square_dominance: check_square, violation: fail(Axiom::PositiveHomogeneity) };
        }

        if check_square {
            let pos: Vec<f64> = u.iter().map(|x| x.abs()).collect();
            let sq: Vec<f64> = pos.iter().map(|x| x * x).collect();
            let su = s(&pos);
            if !close_or_less(su * su, s(&sq)) {
                return AxiomReport { samples: n_samples, checked_square_dominance: true, violation: fail(Axiom::SquareDominance) };
            }
        }
    }
    AxiomReport { samples: n_samples, checked_square_dominance: check_square, violation: None }
}

/// Geometric annealing of the smoothing temperature over training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self { start: 0.5, end: 0.01 }
    }
}

impl TauSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::InvalidScalarization("tau schedule endpoints must be positive".into()));
        }
        Ok(())
    }

    /// Temperature at `step` of `total` steps.
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.end;
        }
        let frac = step as f64 / (total - 1) as f64;
        self.start * powf(self.end / self.start, frac)
    }
}
