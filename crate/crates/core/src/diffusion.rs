//! Forward Ornstein–Uhlenbeck process and the score-matching losses built on
//! it.
//!
//! The forward kernel is `x_t | x_0 ~ N(α_t x_0, σ_t² I)` with `α_t = e^{-t}`
//! and `σ_t² = 1 - e^{-2t}`. Times for the losses are drawn uniformly from
//! `[t0, t_max]`.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, exp, sqrt};
use crate::rng;
use crate::task::ConditionalTask;

/// Signal coefficient `α_t = e^{-t}`.
pub fn alpha(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    Ok(exp(-t))
}

/// Noise variance `σ_t² = 1 - e^{-2t}`.
pub fn sigma2(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::NegativeTime(t));
    }
    Ok(-libm::expm1(-2.0 * t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// Early-stopping time.
    pub t0: f64,
    /// Terminal time of the forward process.
    pub t_max: f64,
    /// Monte Carlo draws of `(t, x_t)` per data point and loss evaluation.
    pub n_mc: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { t0: 1e-3, t_max: 3.0, n_mc: 8 }
    }
}

impl Schedule {
    pub fn new(t0: f64, t_max: f64, n_mc: usize) -> Result<Self> {
        let s = Self { t0, t_max, n_mc };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 < self.t_max && self.t_max.is_finite()) {
            return Err(Error::InvalidSchedule(alloc::format!(
                "need 0 < t0 < t_max, got t0={} t_max={}",
                self.t0,
                self.t_max
            )));
        }
        if self.n_mc == 0 {
            return Err(Error::InvalidSchedule("n_mc must be positive".into()));
        }
        Ok(())
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.t0 + (self.t_max - self.t0) * rng::uniform(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_draws: usize,
}

impl LossEstimate {
    pub fn from_terms(terms: &[f64]) -> Self {
        let (value, std_err) = math::mean_and_stderr(terms);
        Self { value, std_err, n_draws: terms.len() }
    }
}

/// A (possibly learned) conditional score field `s(x, y, t)`.
pub trait ScoreField {
    fn dim_x(&self) -> usize;
    fn dim_y(&self) -> usize;

    /// Evaluates `ts.len()` points. `xs` is row-major `n × d_x`, `ys` is
    /// `n × d_y`, `out` is `n × d_x`.
    fn eval_batch(&self, xs: &[f64], ys: &[f64], ts: &[f64], out: &mut [f64]);

    fn eval(&self, x: &[f64], y: &[f64], t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim_x()];
        self.eval_batch(x, y, &[t], &mut out);
        out
    }
}

impl<T: ScoreField + ?Sized> ScoreField for &T {
    fn dim_x(&self) -> usize {
        (**self).dim_x()
    }
    fn dim_y(&self) -> usize {
        (**self).dim_y()
    }
    fn eval_batch(&self, xs: &[f64], ys: &[f64], ts: &[f64], out: &mut [f64]) {
        (**self).eval_batch(xs, ys, ts, out)
    }
}

/// A score field plus a constant offset.
#[derive(Debug, Clone)]
pub struct Shifted<F> {
    pub inner: F,
    pub shift: Vec<f64>,
}

impl<F: ScoreField> ScoreField for Shifted<F> {
    fn dim_x(&self) -> usize {
        self.inner.dim_x()
    }
    fn dim_y(&self) -> usize {
        self.inner.dim_y()
    }
    fn eval_batch(&self, xs: &[f64], ys: &[f64], ts: &[f64], out: &mut [f64]) {
        self.inner.eval_batch(xs, ys, ts, out);
        let d = self.shift.len();
        for row in out.chunks_mut(d) {
            for (o, c) in row.iter_mut().zip(&self.shift) {
                *o += c;
            }
        }
    }
}

/// Draws `x_t = α_t x0 + σ_t ε`.
pub fn sample_forward<R: Rng + ?Sized>(x0: &[f64], t: f64, rng: &mut R) -> Result<Vec<f64>> {
    let a = alpha(t)?;
    let s = sqrt(sigma2(t)?);
    Ok(x0.iter().map(|&x| a * x + s * rng::normal(rng)).collect())
}

/// `∇ log φ_t(x_t | x0) = -(x_t - α_t x0) / σ_t²`.
pub fn kernel_score(x_t: &[f64], x0: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::SingularKernel(t));
    }
    if x_t.len() != x0.len() {
        return Err(Error::DimensionMismatch { expected: x0.len(), got: x_t.len() });
    }
    let a = alpha(t)?;
    let s2 = sigma2(t)?;
    Ok(x_t.iter().zip(x0).map(|(xt, x)| -(xt - a * x) / s2).collect())
}

/// Read-only view of `(x, y)` pairs stored row-major.
#[derive(Debug, Clone, Copy)]
pub struct Pairs<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub d_x: usize,
    pub d_y: usize,
}

impl<'a> Pairs<'a> {
    pub fn new(xs: &'a [f64], ys: &'a [f64], d_x: usize, d_y: usize) -> Result<Self> {
        if d_x == 0 || xs.len() % d_x != 0 {
            return Err(Error::DimensionMismatch { expected: d_x, got: xs.len() });
        }
        if ys.len() != (xs.len() / d_x) * d_y {
            return Err(Error::DimensionMismatch { expected: (xs.len() / d_x) * d_y, got: ys.len() });
        }
        Ok(Self { xs, ys, d_x, d_y })
    }

    pub fn len(&self) -> usize {
        self.xs.len() / self.d_x
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn x(&self, i: usize) -> &'a [f64] {
        &self.xs[i * self.d_x..(i + 1) * self.d_x]
    }

    pub fn y(&self, i: usize) -> &'a [f64] {
        &self.ys[i * self.d_y..(i + 1) * self.d_y]
    }
}

/// Noised inputs and denoising targets for a set of points, `draws` per point
/// (point-major order).
#[derive(Debug, Clone, Default)]
pub struct NoisedBatch {
    pub d_x: usize,
    pub d_y: usize,
    pub xt: Vec<f64>,
    pub ys: Vec<f64>,
    pub ts: Vec<f64>,
    pub targets: Vec<f64>,
}

impl NoisedBatch {
    pub fn new(d_x: usize, d_y: usize) -> Self {
        Self { d_x, d_y, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }

    pub fn clear(&mut self) {
        self.xt.clear();
        self.ys.clear();
        self.ts.clear();
        self.targets.clear();
    }

    /// Appends `draws` independent `(t, ε)` draws for the point `(x, y)`.
    pub fn push_point<R: Rng + ?Sized>(&mut self, x: &[f64], y: &[f64], sched: &Schedule, draws: usize, rng: &mut R) {
        for _ in 0..draws {
            let t = sched.sample_time(rng);
            let a = exp(-t);
            let s2 = -libm::expm1(-2.0 * t);
            let s = sqrt(s2);
            self.ts.push(t);
            self.ys.extend_from_slice(y);
            for &xi in x {
                let eps = rng::normal(rng);
                self.xt.push(a * xi + s * eps);
                // -(x_t - α x) / σ² = -ε / σ
                self.targets.push(-eps / s);
            }
        }
    }

    pub fn from_pairs<R: Rng + ?Sized>(pairs: Pairs<'_>, sched: &Schedule, draws: usize, rng: &mut R) -> Self {
        let mut b = Self::new(pairs.d_x, pairs.d_y);
        for i in 0..pairs.len() {
            b.push_point(pairs.x(i), pairs.y(i), sched, draws, rng);
        }
        b
    }

    /// Per-item squared errors `‖s(x_t, y, t) - target‖²`.
    pub fn squared_errors(&self, s: &dyn ScoreField) -> Vec<f64> {
        let mut out = vec![0.0; self.xt.len()];
        s.eval_batch(&self.xt, &self.ys, &self.ts, &mut out);
        out.chunks(self.d_x)
            .zip(self.targets.chunks(self.d_x))
            .map(|(o, g)| o.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect()
    }
}

/// Averages consecutive groups of `group` values.
pub(crate) fn group_means(values: &[f64], group: usize) -> Vec<f64> {
    values.chunks(group).map(math::mean).collect()
}

/// Monte Carlo estimate of the denoising score-matching loss
/// `ℓ(x, y, s) = E_{t, x_t | x} ‖s(x_t, y, t) - ∇ log φ_t(x_t | x)‖²`.
pub fn dsm_loss<R: Rng + ?Sized>(
    x: &[f64],
    y: &[f64],
    s: &dyn ScoreField,
    sched: &Schedule,
    rng: &mut R,
) -> Result<LossEstimate> {
    sched.validate()?;
    check_dims(s, x.len(), y.len())?;
    let mut batch = NoisedBatch::new(x.len(), y.len());
    batch.push_point(x, y, sched, sched.n_mc, rng);
    Ok(LossEstimate::from_terms(&batch.squared_errors(s)))
}

/// Mean DSM loss over a dataset; terms are per-point averages over `n_mc`
/// draws.
pub fn dsm_dataset_loss<R: Rng + ?Sized>(
    pairs: Pairs<'_>,
    s: &dyn ScoreField,
    sched: &Schedule,
    rng: &mut R,
) -> Result<LossEstimate> {
    if pairs.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    check_dims(s, pairs.d_x, pairs.d_y)?;
    let batch = NoisedBatch::from_pairs(pairs, sched, sched.n_mc, rng);
    Ok(LossEstimate::from_terms(&group_means(&batch.squared_errors(s), sched.n_mc)))
}

/// Population score error `L_P(s) = E ‖s(x_t, y, t) - ∇ log p_t(x_t | y)‖²`,
/// estimated against the task's closed-form score.
pub fn population_error<R: Rng + ?Sized>(
    task: &ConditionalTask,
    s: &dyn ScoreField,
    sched: &Schedule,
    n_draws: usize,
    rng: &mut R,
) -> Result<LossEstimate> {
    sched.validate()?;
    if n_draws == 0 {
        return Err(Error::Empty("draws"));
    }
    check_dims(s, task.d_x(), task.d_y())?;
    let oracle = task.oracle();
    let (d_x, d_y) = (task.d_x(), task.d_y());
    let mut terms = Vec::with_capacity(n_draws);
    const CHUNK: usize = 1024;
    let mut xs = Vec::with_capacity(CHUNK * d_x);
    let mut ys = Vec::with_capacity(CHUNK * d_y);
    let mut ts = Vec::with_capacity(CHUNK);
    let mut a = vec![0.0; CHUNK * d_x];
    let mut b = vec![0.0; CHUNK * d_x];
    let mut left = n_draws;
    while left > 0 {
        let m = left.min(CHUNK);
        xs.clear();
        ys.clear();
        ts.clear();
        for _ in 0..m {
            let (x0, y) = task.sample(rng);
            let t = sched.sample_time(rng);
            xs.extend(sample_forward(&x0, t, rng)?);
            ys.extend(y);
            ts.push(t);
        }
        s.eval_batch(&xs, &ys, &ts, &mut a[..m * d_x]);
        oracle.eval_batch(&xs, &ys, &ts, &mut b[..m * d_x]);
        terms.extend(
            a[..m * d_x]
                .chunks(d_x)
                .zip(b[..m * d_x].chunks(d_x))
                .map(|(p, q)| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()),
        );
        left -= m;
    }
    Ok(LossEstimate::from_terms(&terms))
}

/// Paired stage-two loss
/// `L̃(f) = (1/N) Σ [ℓ(x̃, ỹ, f) - ℓ(x̃, ỹ, h)]` where both terms of each
/// summand share the same `(t, ε)` draws.
pub fn stage2_task_loss<R: Rng + ?Sized>(
    pseudo: Pairs<'_>,
    f: &dyn ScoreField,
    specialist: &dyn ScoreField,
    sched: &Schedule,
    rng: &mut R,
) -> Result<LossEstimate> {
    if pseudo.is_empty() {
        return Err(Error::Empty("pseudo dataset"));
    }
    check_dims(f, pseudo.d_x, pseudo.d_y)?;
    check_dims(specialist, pseudo.d_x, pseudo.d_y)?;
    let batch = NoisedBatch::from_pairs(pseudo, sched, sched.n_mc, rng);
    Ok(paired_difference(&batch, f, specialist, sched.n_mc))
}

/// Per-point paired differences of squared errors on a shared batch.
pub fn paired_difference(batch: &NoisedBatch, f: &dyn ScoreField, h: &dyn ScoreField, draws: usize) -> LossEstimate {
    let ef = batch.squared_errors(f);
    let eh = batch.squared_errors(h);
    let diff: Vec<f64> = ef.iter().zip(&eh).map(|(a, b)| a - b).collect();
    LossEstimate::from_terms(&group_means(&diff, draws))
}

fn check_dims(s: &dyn ScoreField, d_x: usize, d_y: usize) -> Result<()> {
    if s.dim_x() != d_x {
        return Err(Error::DimensionMismatch { expected: s.dim_x(), got: d_x });
    }
    if s.dim_y() != d_y {
        return Err(Error::DimensionMismatch { expected: s.dim_y(), got: d_y });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// `s(x, y, t) = -x`.
    struct MinusX(usize);

    impl ScoreField for MinusX {
        fn dim_x(&self) -> usize {
            self.0
        }
        fn dim_y(&self) -> usize {
            1
        }
        fn eval_batch(&self, xs: &[f64], _ys: &[f64], _ts: &[f64], out: &mut [f64]) {
            for (o, x) in out.iter_mut().zip(xs) {
                *o = -x;
            }
        }
    }

    #[test]
    fn alpha_and_sigma2_values() {
        assert_eq!(alpha(0.0).unwrap(), 1.0);
        assert!((alpha(core::f64::consts::LN_2).unwrap() - 0.5).abs() < 1e-15);
        // e^{-3} to 17 digits
        assert!((alpha(3.0).unwrap() - 0.049_787_068_367_863_944).abs() < 1e-16);
        assert_eq!(sigma2(0.0).unwrap(), 0.0);
        assert!((sigma2(core::f64::consts::LN_2).unwrap() - 0.75).abs() < 1e-15);
        assert!((sigma2(60.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(alpha(-1.0), Err(Error::NegativeTime(_))));
        assert!(matches!(sigma2(-1e-9), Err(Error::NegativeTime(_))));
    }

    #[test]
    fn variance_preservation() {
        for i in 0..=2000 {
            let t = i as f64 * 0.01;
            let a = alpha(t).unwrap();
            assert!((a * a + sigma2(t).unwrap() - 1.0).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::new(0.0, 1.0, 1).is_err());
        assert!(Schedule::new(2.0, 1.0, 1).is_err());
        assert!(Schedule::new(0.1, 1.0, 0).is_err());
        assert!(Schedule::default().validate().is_ok());
    }

    #[test]
    fn forward_sample_at_zero_time_is_identity() {
        let mut rng = stream(1, &[]);
        assert_eq!(sample_forward(&[1.5, -2.0], 0.0, &mut rng).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn kernel_score_values() {
        let t = core::f64::consts::LN_2;
        let z = kernel_score(&[0.5 * 3.0], &[3.0], t).unwrap();
        assert!(z[0].abs() < 1e-15);
        // d_x = 1, x0 = 0, x_t = 1, σ² = 0.75 → -4/3
        let v = kernel_score(&[1.0], &[0.0], t).unwrap();
        assert!((v[0] + 4.0 / 3.0).abs() < 1e-14);
        assert!(matches!(kernel_score(&[1.0], &[0.0], 0.0), Err(Error::SingularKernel(_))));
    }

    #[test]
    fn dsm_is_zero_for_per_draw_kernel_oracle() {
        // A field that knows x0 reproduces the denoising target exactly.
        struct Cheat(f64);
        impl ScoreField for Cheat {
            fn dim_x(&self) -> usize {
                1
            }
            fn dim_y(&self) -> usize {
                1
            }
            fn eval_batch(&self, xs: &[f64], _ys: &[f64], ts: &[f64], out: &mut [f64]) {
                for ((o, x), t) in out.iter_mut().zip(xs).zip(ts) {
                    *o = kernel_score(&[*x], &[self.0], *t).unwrap()[0];
                }
            }
        }
        let sched = Schedule::default();
        let est = dsm_loss(&[0.7], &[0.2], &Cheat(0.7), &sched, &mut stream(3, &[])).unwrap();
        assert!(est.value.abs() < 1e-18 * 1e6, "{est:?}");
        assert_eq!(est.n_draws, sched.n_mc);
    }

    #[test]
    fn dsm_loss_is_deterministic() {
        let sched = Schedule::default();
        let a = dsm_loss(&[0.3], &[0.5], &MinusX(1), &sched, &mut stream(9, &[1])).unwrap();
        let b = dsm_loss(&[0.3], &[0.5], &MinusX(1), &sched, &mut stream(9, &[1])).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.std_err.to_bits(), b.std_err.to_bits());
    }

    #[test]
    fn stage2_of_identical_models_is_exactly_zero() {
        let xs = [0.1, -0.4, 2.0];
        let ys = [0.0, 0.5, 1.0];
        let pairs = Pairs::new(&xs, &ys, 1, 1).unwrap();
        let est = stage2_task_loss(pairs, &MinusX(1), &MinusX(1), &Schedule::default(), &mut stream(2, &[])).unwrap();
        assert_eq!(est.value, 0.0);
        let empty = Pairs::new(&[], &[], 1, 1).unwrap();
        assert_eq!(
            stage2_task_loss(empty, &MinusX(1), &MinusX(1), &Schedule::default(), &mut stream(2, &[])),
            Err(Error::Empty("pseudo dataset"))
        );
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let err = dsm_loss(&[0.0, 1.0], &[0.5], &MinusX(1), &Schedule::default(), &mut stream(0, &[]));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }
}
