//! Reverse-time generation from a score field.
//!
//! The SDE sampler integrates
//! `dX = (X + 2 s(X, y, T − τ)) dτ + √2 dW̄` from `X_0 ~ N(0, I)` over
//! `τ ∈ [0, T − T0]` with Euler–Maruyama. The probability-flow ODE uses drift
//! `X + s` and classical RK4.
//!
//! Batched entry points take one random stream per particle; a particle's
//! result depends only on its own stream, never on which other particles
//! share the batch.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScoreField;
use crate::error::{Error, Result};
use crate::math::{ln, sqrt};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Sde,
    Ode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    /// Clamp each coordinate into `[−R, R]`.
    #[default]
    Clip,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truncation {
    /// Half-width of the box `B_R = [−R, R]^{d_x}`. `None` resolves to
    /// [`Truncation::default_radius`] once the pseudo-sample budget is known.
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default)]
    pub overflow_policy: OverflowPolicy,
}

fn default_retries() -> usize {
    64
}

impl Default for Truncation {
    fn default() -> Self {
        Self { radius: None, max_retries: default_retries(), overflow_policy: OverflowPolicy::Clip }
    }
}

impl Truncation {
    pub fn with_radius(radius: f64) -> Self {
        Self { radius: Some(radius), ..Self::default() }
    }

    /// `R = √(2 log(N·K)) + 2` for a total pseudo-sample budget `N·K`.
    pub fn default_radius(total: usize) -> f64 {
        sqrt(2.0 * ln(total.max(1) as f64)) + 2.0
    }

    /// Fills in the default radius for a total budget `total`.
    pub fn resolved(&self, total: usize) -> Self {
        Self { radius: Some(self.radius.unwrap_or_else(|| Self::default_radius(total))), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default = "default_t0")]
    pub t0: f64,
    #[serde(default)]
    pub kind: SamplerKind,
    #[serde(default)]
    pub truncation: Option<Truncation>,
}

fn default_steps() -> usize {
    200
}

fn default_t_max() -> f64 {
    3.0
}

fn default_t0() -> f64 {
    1e-3
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: default_steps(), t_max: default_t_max(), t0: default_t0(), kind: SamplerKind::Sde, truncation: None }
    }
}

impl SamplerConfig {
    pub fn sde(n_steps: usize, t_max: f64, t0: f64) -> Self {
        Self { n_steps, t_max, t0, kind: SamplerKind::Sde, truncation: None }
    }

    pub fn with_truncation(mut self, truncation: Truncation) -> Self {
        self.truncation = Some(truncation);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSampler(m.into()));
        if self.n_steps < 10 {
            return bad("n_steps must be at least 10");
        }
        if !(self.t0 > 0.0 && self.t0 < self.t_max && self.t_max.is_finite()) {
            return bad("need 0 < t0 < t_max");
        }
        if let Some(tr) = &self.truncation {
            if let Some(r) = tr.radius {
                if !(r >= 1.0) {
                    return bad("truncation radius must be >= 1");
                }
            }
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        (self.t_max - self.t0) / self.n_steps as f64
    }
}

/// Draws one sample from the reverse SDE.
pub fn reverse_sde_sample<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    y: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut one = [rng];
    reverse_sde_batch::<R, &mut R>(score, y, &mut one, cfg)
}

/// Draws one sample from the probability-flow ODE (random only through the
/// initial state).
pub fn reverse_ode_sample<R: Rng + ?Sized>(
    score: &dyn ScoreField,
    y: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut one = [rng];
    reverse_ode_batch::<R, &mut R>(score, y, &mut one, cfg)
}

/// Draws according to `cfg.kind`.
pub fn sample_batch<R: Rng>(score: &dyn ScoreField, ys: &[f64], rngs: &mut [R], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    match cfg.kind {
        SamplerKind::Sde => reverse_sde_batch::<R, R>(score, ys, rngs, cfg),
        SamplerKind::Ode => reverse_ode_batch::<R, R>(score, ys, rngs, cfg),
    }
}

fn check_batch(score: &dyn ScoreField, ys: &[f64], n: usize, cfg: &SamplerConfig) -> Result<()> {
    cfg.validate()?;
    if ys.len() != n * score.dim_y() {
        return Err(Error::DimensionMismatch { expected: n * score.dim_y(), got: ys.len() });
    }
    Ok(())
}

fn check_finite(xs: &[f64], step: usize) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { step })
    }
}

/// Euler–Maruyama for one particle per stream; `ys` holds one condition per
/// particle.
pub fn reverse_sde_batch<R: Rng + ?Sized, G: core::borrow::BorrowMut<R>>(
    score: &dyn ScoreField,
    ys: &[f64],
    rngs: &mut [G],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let n = rngs.len();
    check_batch(score, ys, n, cfg)?;
    let d = score.dim_x();
    let mut xs = vec![0.0; n * d];
    for (chunk, r) in xs.chunks_mut(d).zip(rngs.iter_mut()) {
        rng::fill_normal(r.borrow_mut(), chunk);
    }
    let h = cfg.step();
    let noise = sqrt(2.0 * h);
    let mut s = vec![0.0; n * d];
    let mut ts = vec![0.0; n];
    for step in 0..cfg.n_steps {
        ts.fill(cfg.t_max - step as f64 * h);
        score.eval_batch(&xs, ys, &ts, &mut s);
        for ((x, sv), r) in xs.chunks_mut(d).zip(s.chunks(d)).zip(rngs.iter_mut()) {
            for (xi, si) in x.iter_mut().zip(sv) {
                *xi += h * (*xi + 2.0 * si) + noise * rng::normal(r.borrow_mut());
            }
        }
        check_finite(&xs, step)?;
    }
    Ok(xs)
}

/// RK4 on the probability-flow ODE.
pub fn reverse_ode_batch<R: Rng + ?Sized, G: core::borrow::BorrowMut<R>>(
    score: &dyn ScoreField,
    ys: &[f64],
    rngs: &mut [G],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let n = rngs.len();
    check_batch(score, ys, n, cfg)?;
    let d = score.dim_x();
    let mut xs = vec![0.0; n * d];
    for (chunk, r) in xs.chunks_mut(d).zip(rngs.iter_mut()) {
        rng::fill_normal(r.borrow_mut(), chunk);
    }
    let h = cfg.step();
    let mut ts = vec![0.0; n];
    let mut tmp = vec![0.0; n * d];
    let mut k = [vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]];
    let drift = |x: &[f64], t: f64, ts: &mut [f64], out: &mut [f64]| {
        ts.fill(t);
        score.eval_batch(x, ys, ts, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += xi;
        }
    };
    for step in 0..cfg.n_steps {
        let t = cfg.t_max - step as f64 * h;
        drift(&xs, t, &mut ts, &mut k[0]);
        for ((o, x), k0) in tmp.iter_mut().zip(&xs).zip(&k[0]) {
            *o = x + 0.5 * h * k0;
        }
        drift(&tmp, t - 0.5 * h, &mut ts, &mut k[1]);
        for ((o, x), k1) in tmp.iter_mut().zip(&xs).zip(&k[1]) {
            *o = x + 0.5 * h * k1;
        }
        drift(&tmp, t - 0.5 * h, &mut ts, &mut k[2]);
        for ((o, x), k2) in tmp.iter_mut().zip(&xs).zip(&k[2]) {
            *o = x + h * k2;
        }
        drift(&tmp, t - h, &mut ts, &mut k[3]);
        for (i, x) in xs.iter_mut().enumerate() {
            *x += h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i]);
        }
        check_finite(&xs, step)?;
    }
    Ok(xs)
}

/// Outcome of one truncated draw.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedDraw {
    pub x: Vec<f64>,
    /// Whether the returned point was accepted (as opposed to clipped).
    pub accepted: bool,
    /// Draws rejected before the returned one.
    pub retries: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub attempted: u64,
    pub accepted: u64,
    pub clipped: u64,
}

impl AcceptanceStats {
    pub fn rate(&self) -> f64 {
        if self.attempted == 0 {
            1.0
        } else {
            self.accepted as f64 / self.attempted as f64
        }
    }

    pub fn merge(&mut self, other: &Self) {
        self.attempted += other.attempted;
        self.accepted += other.accepted;
        self.clipped += other.clipped;
    }
}

/// One draw from the model restricted to `B_R`, by rejection.
pub fn sample_truncated<R: Rng>(
    score: &dyn ScoreField,
    y: &[f64],
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<(TruncatedDraw, AcceptanceStats)> {
    let (mut draws, stats) = sample_truncated_batch(score, y, core::slice::from_mut(rng), cfg)?;
    Ok((draws.pop().expect("one draw"), stats))
}

/// Truncated draws, one per stream. Rejected particles are redrawn from their
/// own streams, so each result is independent of the batch composition.
pub fn sample_truncated_batch<R: Rng>(
    score: &dyn ScoreField,
    ys: &[f64],
    rngs: &mut [R],
    cfg: &SamplerConfig,
) -> Result<(Vec<TruncatedDraw>, AcceptanceStats)> {
    let Some(tr) = cfg.truncation.as_ref() else {
        return Err(Error::InvalidSampler("truncation not configured".into()));
    };
    let Some(radius) = tr.radius else {
        return Err(Error::InvalidSampler("truncation radius not resolved".into()));
    };
    let n = rngs.len();
    check_batch(score, ys, n, cfg)?;
    let (d, dy) = (score.dim_x(), score.dim_y());
    let mut out: Vec<Option<TruncatedDraw>> = vec![None; n];
    let mut stats = AcceptanceStats::default();
    let mut pending: Vec<usize> = (0..n).collect();
    let mut attempt = 0;
    while !pending.is_empty() {
        let mut sub_ys = Vec::with_capacity(pending.len() * dy);
        for &i in &pending {
            sub_ys.extend_from_slice(&ys[i * dy..(i + 1) * dy]);
        }
        let mut sub_rngs: Vec<&mut R> = Vec::with_capacity(pending.len());
        {
            let mut it = rngs.iter_mut().enumerate();
            for &i in &pending {
                // pending is increasing, so a forward scan finds each index
                let r = it.by_ref().find(|(j, _)| *j == i).expect("pending index").1;
                sub_rngs.push(r);
            }
        }
        let xs = sample_batch_refs(score, &sub_ys, &mut sub_rngs, cfg)?;
        stats.attempted += pending.len() as u64;
        let last = attempt == tr.max_retries;
        let mut still = Vec::new();
        for (slot, &i) in pending.iter().enumerate() {
            let x = &xs[slot * d..(slot + 1) * d];
            if x.iter().all(|v| v.abs() <= radius) {
                stats.accepted += 1;
                out[i] = Some(TruncatedDraw { x: x.to_vec(), accepted: true, retries: attempt });
            } else if last {
                match tr.overflow_policy {
                    OverflowPolicy::Clip => {
                        stats.clipped += 1;
                        let x = x.iter().map(|v| v.clamp(-radius, radius)).collect();
                        out[i] = Some(TruncatedDraw { x, accepted: false, retries: attempt });
                    }
                    OverflowPolicy::Fail => {
                        return Err(Error::RetriesExhausted {
                            attempts: attempt + 1,
                            condition: ys[i * dy..(i + 1) * dy].to_vec(),
                        })
                    }
                }
            } else {
                still.push(i);
            }
        }
        pending = still;
        attempt += 1;
    }
    Ok((out.into_iter().map(|d| d.expect("every particle resolved")).collect(), stats))
}

fn sample_batch_refs<R: Rng>(score: &dyn ScoreField, ys: &[f64], rngs: &mut [&mut R], cfg: &SamplerConfig) -> Result<Vec<f64>> {
    match cfg.kind {
        SamplerKind::Sde => reverse_sde_batch::<R, _>(score, ys, rngs, cfg),
        SamplerKind::Ode => reverse_ode_batch::<R, _>(score, ys, rngs, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, SimRng};

    struct Zero;

    struct Push;

    impl ScoreField for Push {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_y(&self) -> usize {
            1
        }
        fn eval_batch(&self, _xs: &[f64], _ys: &[f64], _ts: &[f64], out: &mut [f64]) {
            out.fill(50.0);
        }
    }

    impl ScoreField for Zero {
        fn dim_x(&self) -> usize {
            1
        }
        fn dim_y(&self) -> usize {
            1
        }
        fn eval_batch(&self, _xs: &[f64], _ys: &[f64], _ts: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::sde(9, 3.0, 1e-3).validate().is_err());
        assert!(SamplerConfig::sde(10, 1e-3, 1e-3).validate().is_err());
        let bad = SamplerConfig::default().with_truncation(Truncation::with_radius(0.5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_radius() {
        let r = Truncation::default_radius(2 * 2000);
        assert!((r - (2.0 * ln(4000.0)).sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_score_ode_is_exponential_growth() {
        let cfg = SamplerConfig { kind: SamplerKind::Ode, ..SamplerConfig::sde(1000, 3.0, 1e-3) };
        let mut r = stream(5, &[]);
        let x0 = rng::normal(&mut stream(5, &[]));
        let x = reverse_ode_sample(&Zero, &[0.5], &cfg, &mut r).unwrap()[0];
        let exact = x0 * libm::exp(3.0 - 1e-3);
        assert!((x - exact).abs() <= 1e-6 * exact.abs(), "{x} vs {exact}");
    }

    #[test]
    fn batch_results_do_not_depend_on_batching() {
        let cfg = SamplerConfig::sde(20, 2.0, 1e-2);
        let ys = [0.1, 0.2, 0.3];
        let mut rs: Vec<SimRng> = (0..3).map(|i| stream(9, &[i])).collect();
        let all = reverse_sde_batch::<SimRng, _>(&Zero, &ys, &mut rs, &cfg).unwrap();
        let one = reverse_sde_sample(&Zero, &[0.2], &cfg, &mut stream(9, &[1])).unwrap();
        assert_eq!(all[1], one[0]);
    }

    #[test]
    fn forced_exhaustion_fails() {
        let tr = Truncation { radius: Some(1.0), max_retries: 10, overflow_policy: OverflowPolicy::Fail };
        let cfg = SamplerConfig::sde(10, 3.0, 1e-3).with_truncation(tr);
        let err = sample_truncated(&Push, &[0.7], &cfg, &mut stream(1, &[])).unwrap_err();
        assert_eq!(err, Error::RetriesExhausted { attempts: 11, condition: vec![0.7] });
    }

    #[test]
    fn non_finite_state_reports_step() {
        struct Blow;
        impl ScoreField for Blow {
            fn dim_x(&self) -> usize {
                1
            }
            fn dim_y(&self) -> usize {
                1
            }
            fn eval_batch(&self, _xs: &[f64], _ys: &[f64], ts: &[f64], out: &mut [f64]) {
                for (o, t) in out.iter_mut().zip(ts) {
                    *o = if *t < 1.0 { f64::NAN } else { 0.0 };
                }
            }
        }
        let cfg = SamplerConfig::sde(10, 2.0, 0.1);
        let err = reverse_sde_sample(&Blow, &[0.0], &cfg, &mut stream(1, &[])).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { step: 6 }), "{err:?}");
    }
}
