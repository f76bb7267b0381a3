//! Diffusion policies in discounted MDPs: environments, expert
//! demonstrations drawn from the discounted state-action visitation measure,
//! on-policy pseudo-rollouts, value estimation and suboptimality gaps.
//!
//! A policy is a conditional law of the action `x = a` given the condition
//! `y = s`, so the training code of the distribution setting is reused as is.
//!
//! The infinite horizon is truncated at `H = ⌈ln 1e-4 / ln γ⌉`, which leaves
//! geometric tail mass `γ^H ≤ 1e-4`. Visitation draws reject `t ≥ H`; values
//! are truncated returns with bias at most `γ^H / (1 − γ)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Schedule, ScoreField};
use crate::error::{Error, Result};
use crate::evaluation::{self, TvConfig};
use crate::math::{self, ln, normal_cdf, powf, sqrt, tanh, SpdMatrix};
use crate::model::{ModelClassSpec, ModelFamily, ScoreModel};
use crate::optim::OptimizerConfig;
use crate::pipeline::{self, LabeledDataset, Provenance, PseudoDataset, TrainOutcome};
use crate::rng::{self, domain, SimRng};
use crate::sampler::{self, AcceptanceStats, SamplerConfig, Truncation};
use crate::scalarization::{Scalarization, ScalarizationKind};
use crate::task::{AffineMap, Component, ConditionMarginal, ConditionalTask};

/// Tail mass left by the horizon truncation.
pub const TRUNCATION_MASS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reward {
    /// `1 − 2 tanh(scale · ‖s + gain·a − goal‖)`: the closer the intended next
    /// state is to the goal, the higher the reward.
    Reach { goal: Vec<f64>, scale: f64 },
    Constant { value: f64 },
}

/// Box-state environment with additive dynamics
/// `s' = clamp(s + gain·a + noise_std·ξ, 0, 1)`, optionally snapped to the
/// centers of a `lattice`-bin grid per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpEnv {
    pub d_y: usize,
    pub gamma: f64,
    pub gain: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub reward: Reward,
    #[serde(default)]
    pub init: ConditionMarginal,
    #[serde(default)]
    pub lattice: Option<usize>,
}

impl MdpEnv {
    /// Actions have the state's dimension.
    pub fn d_x(&self) -> usize {
        self.d_y
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidEnv(m));
        if self.d_y == 0 {
            return bad("d_y must be positive".into());
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.gain.is_finite() && self.gain != 0.0) {
            return bad("gain must be finite and non-zero".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if let Reward::Reach { goal, scale } = &self.reward {
            if goal.len() != self.d_y || !(*scale > 0.0) {
                return bad("reach reward needs a goal per state coordinate and scale > 0".into());
            }
        }
        if self.lattice == Some(0) {
            return bad("lattice needs at least one bin".into());
        }
        // reuse the condition-marginal checks
        ConditionalTask::new(1, self.d_y, vec![unit_component(self.d_y)], self.init.clone())
            .map_err(|e| Error::InvalidEnv(format!("init: {e}")))?;
        Ok(())
    }

    /// `H = max(1, ⌈ln(1e-4) / ln γ⌉)`.
    pub fn horizon(&self) -> usize {
        if self.gamma == 0.0 {
            1
        } else {
            (libm::ceil(ln(TRUNCATION_MASS) / ln(self.gamma)) as usize).max(1)
        }
    }

    /// Upper bound `γ^H / (1 − γ)` on the truncation bias of a value.
    pub fn truncation_bias(&self) -> f64 {
        powf(self.gamma, self.horizon() as f64) / (1.0 - self.gamma)
    }

    fn snap(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match self.lattice {
            Some(b) => ((v * b as f64) as usize).min(b - 1) as f64 / b as f64 + 0.5 / b as f64,
            None => v,
        }
    }

    pub fn sample_init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.init.sample(self.d_y, rng).into_iter().map(|v| self.snap(v)).collect()
    }

    /// Raw reward before range enforcement.
    pub fn raw_reward(&self, s: &[f64], a: &[f64]) -> f64 {
        match &self.reward {
            Reward::Reach { goal, scale } => {
                let d2: f64 = s.iter().zip(a).zip(goal).map(|((s, a), g)| (s + self.gain * a - g).powi(2)).sum();
                1.0 - 2.0 * tanh(scale * sqrt(d2))
            }
            Reward::Constant { value } => *value,
        }
    }

    /// Reward clamped into `[−1, 1]`, and whether clamping was needed.
    pub fn reward(&self, s: &[f64], a: &[f64]) -> (f64, bool) {
        let r = self.raw_reward(s, a);
        let c = r.clamp(-1.0, 1.0);
        (c, c != r || r.is_nan())
    }

    pub fn step<R: Rng + ?Sized>(&self, s: &[f64], a: &[f64], rng: &mut R) -> Vec<f64> {
        s.iter()
            .zip(a)
            .map(|(s, a)| {
                let noise = if self.noise_std > 0.0 { self.noise_std * rng::normal(rng) } else { 0.0 };
                self.snap(s + self.gain * a + noise)
            })
            .collect()
    }
}

fn unit_component(d_y: usize) -> Component {
    Component { weight: 1.0, mean: AffineMap::constant(vec![0.0], d_y), cov: SpdMatrix::identity(1) }
}

/// Gaussian expert `a | s ~ N(mean(s), cov)` with affine mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertPolicy {
    pub mean: AffineMap,
    pub cov: SpdMatrix,
}

impl ExpertPolicy {
    /// The expert as a conditional law of actions given states, with the
    /// given state marginal.
    pub fn as_task(&self, d_y: usize, states: ConditionMarginal) -> Result<ConditionalTask> {
        ConditionalTask::new(
            self.cov.dim(),
            d_y,
            vec![Component { weight: 1.0, mean: self.mean.clone(), cov: self.cov.clone() }],
            states,
        )
    }

    /// Same expert with every action mean shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        let mut e = self.clone();
        e.mean.offset.iter_mut().for_each(|o| *o += delta);
        e
    }
}

/// A stochastic map from a batch of states to a batch of actions. Draw `i`
/// uses only `rngs[i]`.
pub trait Policy {
    fn d_x(&self) -> usize;
    fn act_batch(&self, states: &[f64], rngs: &mut [&mut SimRng]) -> Result<Vec<f64>>;
}

impl Policy for ExpertPolicy {
    fn d_x(&self) -> usize {
        self.cov.dim()
    }

    fn act_batch(&self, states: &[f64], rngs: &mut [&mut SimRng]) -> Result<Vec<f64>> {
        let d = self.cov.dim();
        let d_y = states.len() / rngs.len().max(1);
        let mut out = vec![0.0; rngs.len() * d];
        let mut z = vec![0.0; d];
        for (i, r) in rngs.iter_mut().enumerate() {
            rng::fill_normal(&mut **r, &mut z);
            let a = &mut out[i * d..(i + 1) * d];
            self.cov.chol_mul(&z, a);
            for (ai, m) in a.iter_mut().zip(self.mean.apply(&states[i * d_y..(i + 1) * d_y])) {
                *ai += m;
            }
        }
        Ok(out)
    }
}

/// Actions drawn by the reverse SDE of a score model conditioned on the
/// state; truncated to `B_R` when the sampler has truncation configured.
pub struct DiffusionPolicy<'a> {
    pub score: &'a dyn ScoreField,
    pub sampler: SamplerConfig,
    stats: Cell<AcceptanceStats>,
}

impl<'a> DiffusionPolicy<'a> {
    pub fn new(score: &'a dyn ScoreField, sampler: SamplerConfig) -> Self {
        Self { score, sampler, stats: Cell::new(AcceptanceStats::default()) }
    }

    /// Truncation bookkeeping accumulated over every action drawn so far.
    pub fn stats(&self) -> AcceptanceStats {
        self.stats.get()
    }
}

impl Policy for DiffusionPolicy<'_> {
    fn d_x(&self) -> usize {
        self.score.dim_x()
    }

    fn act_batch(&self, states: &[f64], rngs: &mut [&mut SimRng]) -> Result<Vec<f64>> {
        if self.sampler.truncation.is_some() {
            let mut owned: Vec<&mut SimRng> = rngs.iter_mut().map(|r| &mut **r).collect();
            let (draws, stats) = truncated_refs(self.score, states, &mut owned, &self.sampler)?;
            let mut acc = self.stats.get();
            acc.merge(&stats);
            self.stats.set(acc);
            Ok(draws.into_iter().flat_map(|d| d.x).collect())
        } else {
            sampler::reverse_sde_batch::<SimRng, &mut SimRng>(self.score, states, rngs, &self.sampler)
        }
    }
}

fn truncated_refs(
    score: &dyn ScoreField,
    ys: &[f64],
    rngs: &mut [&mut SimRng],
    cfg: &SamplerConfig,
) -> Result<(Vec<sampler::TruncatedDraw>, AcceptanceStats)> {
    // `sample_truncated_batch` owns its streams; thread them through by
    // value and write them back afterwards
    let mut owned: Vec<SimRng> = rngs.iter().map(|r| (**r).clone()).collect();
    let out = sampler::sample_truncated_batch(score, ys, &mut owned, cfg)?;
    for (dst, src) in rngs.iter_mut().zip(owned) {
        **dst = src;
    }
    Ok(out)
}

/// Discounted-time draw `P(t) ∝ (1 − γ) γ^t` on `t < H` by rejection.
pub fn sample_time<R: Rng + ?Sized>(gamma: f64, horizon: usize, rng: &mut R) -> usize {
    if gamma == 0.0 {
        return 0;
    }
    loop {
        let u = 1.0 - rng::uniform(rng);
        let t = libm::floor(ln(u) / ln(gamma));
        if t < horizon as f64 {
            return t as usize;
        }
    }
}

/// Visited state-action pairs and bookkeeping.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisitationBatch {
    pub d_x: usize,
    pub d_y: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub reward_violations: u64,
    /// Draws restarted after a sampler failure.
    pub restarts: u64,
}

impl VisitationBatch {
    pub fn len(&self) -> usize {
        if self.d_y == 0 {
            0
        } else {
            self.states.len() / self.d_y
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Streams of draw `i`, attempt `attempt`.
fn draw_streams(seed: u64, i: usize, attempt: u64) -> (SimRng, SimRng) {
    (
        rng::stream(seed, &[domain::ROLLOUT_ENV, i as u64, attempt]),
        rng::stream(seed, &[domain::ROLLOUT_POLICY, i as u64, attempt]),
    )
}

/// `(s_t, a_t)` for draws `start..start + n` run in lockstep.
fn visitation_chunk(
    env: &MdpEnv,
    policy: &dyn Policy,
    seed: u64,
    draws: &[(usize, u64)],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d_y, d_x, h) = (env.d_y, policy.d_x(), env.horizon());
    let n = draws.len();
    let mut env_rngs = Vec::with_capacity(n);
    let mut pol_rngs = Vec::with_capacity(n);
    let mut times = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n * d_y);
    for &(i, attempt) in draws {
        let (mut er, pr) = draw_streams(seed, i, attempt);
        times.push(sample_time(env.gamma, h, &mut er));
        states.extend(env.sample_init(&mut er));
        env_rngs.push(er);
        pol_rngs.push(pr);
    }
    let mut out_s = vec![0.0; n * d_y];
    let mut out_a = vec![0.0; n * d_x];
    let max_t = times.iter().copied().max().unwrap_or(0);
    for step in 0..=max_t {
        let active: Vec<usize> = (0..n).filter(|&j| times[j] >= step).collect();
        let sub: Vec<f64> = active.iter().flat_map(|&j| states[j * d_y..(j + 1) * d_y].iter().copied()).collect();
        let mut refs = select_mut(&mut pol_rngs, &active);
        let actions = policy.act_batch(&sub, &mut refs)?;
        for (slot, &j) in active.iter().enumerate() {
            let a = &actions[slot * d_x..(slot + 1) * d_x];
            if times[j] == step {
                out_s[j * d_y..(j + 1) * d_y].copy_from_slice(&states[j * d_y..(j + 1) * d_y]);
                out_a[j * d_x..(j + 1) * d_x].copy_from_slice(a);
            } else {
                let next = env.step(&states[j * d_y..(j + 1) * d_y], a, &mut env_rngs[j]);
                states[j * d_y..(j + 1) * d_y].copy_from_slice(&next);
            }
        }
    }
    Ok((out_s, out_a))
}

/// Mutable references to `items[idx]` for increasing `idx`.
fn select_mut<'a, T>(items: &'a mut [T], idx: &[usize]) -> Vec<&'a mut T> {
    let mut out = Vec::with_capacity(idx.len());
    let mut it = items.iter_mut().enumerate();
    for &i in idx {
        out.push(it.by_ref().find(|(j, _)| *j == i).expect("increasing indices").1);
    }
    out
}

const CHUNK: usize = 512;

/// Number of times a failed draw is restarted from fresh streams.
pub const DRAW_RETRIES: u64 = 3;

/// `n` independent draws from the visitation measure of `policy`; draw `i`
/// uses streams derived from `(seed, i)` only. When a batch fails, its draws
/// are rerun one at a time and each failing draw is restarted from fresh
/// streams up to [`DRAW_RETRIES`] times.
pub fn visitation_batch(env: &MdpEnv, policy: &dyn Policy, n: usize, seed: u64) -> Result<VisitationBatch> {
    env.validate()?;
    let (d_y, d_x) = (env.d_y, policy.d_x());
    let mut out = VisitationBatch { d_x, d_y, ..Default::default() };
    let mut start = 0;
    while start < n {
        let m = CHUNK.min(n - start);
        let draws: Vec<(usize, u64)> = (start..start + m).map(|i| (i, 0)).collect();
        match visitation_chunk(env, policy, seed, &draws) {
            Ok((s, a)) => {
                out.states.extend(s);
                out.actions.extend(a);
            }
            Err(_) => {
                for i in start..start + m {
                    let mut attempt = 0;
                    loop {
                        match visitation_chunk(env, policy, seed, &[(i, attempt)]) {
                            Ok((s, a)) => {
                                out.states.extend(s);
                                out.actions.extend(a);
                                break;
                            }
                            Err(e) if attempt >= DRAW_RETRIES => return Err(e),
                            Err(_) => {
                                attempt += 1;
                                out.restarts += 1;
                            }
                        }
                    }
                }
            }
        }
        start += m;
    }
    for (s, a) in out.states.chunks(d_y.max(1)).zip(out.actions.chunks(d_x.max(1))) {
        out.reward_violations += env.reward(s, a).1 as u64;
    }
    Ok(out)
}

/// One draw from the visitation measure.
pub fn visitation_sample(env: &MdpEnv, policy: &dyn Policy, seed: u64, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    env.validate()?;
    visitation_chunk(env, policy, seed, &[(index, 0)])
}

/// `n` expert visitation pairs as a labeled data set (`x` = action,
/// `y` = state).
pub fn collect_expert_demos(env: &MdpEnv, expert: &ExpertPolicy, task: usize, n: usize, seed: u64) -> Result<LabeledDataset> {
    let v = visitation_batch(env, expert, n, seed)?;
    LabeledDataset::new(task, v.d_x, v.d_y, v.actions, v.states)
}

/// Rollout-sharing mode for on-policy pseudo data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoRollouts {
    /// One pair per independent rollout.
    #[default]
    Independent,
    /// Every step of each rollout up to the horizon, weighted by keeping
    /// step `t` with probability `γ^t`; cheaper but correlated.
    Reuse,
}

/// `n` visitation pairs where both states and actions come from rolling out
/// the specialist's diffusion policy.
pub fn collect_onpolicy_pseudo(
    env: &MdpEnv,
    specialist: &ScoreModel,
    task: usize,
    n: usize,
    cfg: &SamplerConfig,
    mode: PseudoRollouts,
    seed: u64,
) -> Result<PseudoDataset> {
    let policy = DiffusionPolicy::new(specialist, cfg.clone());
    let (states, actions) = match mode {
        PseudoRollouts::Independent => {
            let v = visitation_batch(env, &policy, n, seed)?;
            (v.states, v.actions)
        }
        PseudoRollouts::Reuse => reused_rollouts(env, &policy, n, seed)?,
    };
    let stats = policy.stats();
    // per-pair acceptance is not tracked through rollouts; clipping anywhere
    // marks the whole set
    let accepted_all = stats.clipped == 0;
    Ok(PseudoDataset {
        task,
        d_x: env.d_x(),
        d_y: env.d_y,
        xs: actions,
        ys: states,
        accepted: vec![accepted_all; n],
        retries: vec![0; n],
        provenance: Provenance { specialist: specialist.fingerprint(), sampler: cfg.clone(), acceptance: stats },
    })
}

fn reused_rollouts(env: &MdpEnv, policy: &dyn Policy, n: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let (d_y, d_x, h) = (env.d_y, policy.d_x(), env.horizon());
    let mut states_out = Vec::with_capacity(n * d_y);
    let mut actions_out = Vec::with_capacity(n * d_x);
    let mut rollout = 0usize;
    while states_out.len() < n * d_y {
        let (mut er, mut pr) = draw_streams(seed, rollout, 0);
        let mut keep = rng::stream(seed, &[domain::ROLLOUT_ENV, u64::MAX, rollout as u64]);
        let mut s = env.sample_init(&mut er);
        let mut disc = 1.0;
        for _ in 0..h {
            let a = policy.act_batch(&s, &mut [&mut pr])?;
            if rng::uniform(&mut keep) < disc && states_out.len() < n * d_y {
                states_out.extend_from_slice(&s);
                actions_out.extend_from_slice(&a);
            }
            s = env.step(&s, &a, &mut er);
            disc *= env.gamma;
        }
        rollout += 1;
    }
    Ok((states_out, actions_out))
}

/// One recorded episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Truncated discounted returns of `n_rollouts` rollouts of horizon `H`,
/// run in lockstep; rollout `i` uses streams derived from `(seed, i)`.
pub fn returns(env: &MdpEnv, policy: &dyn Policy, n_rollouts: usize, seed: u64) -> Result<(Vec<f64>, u64)> {
    env.validate()?;
    if n_rollouts == 0 {
        return Err(Error::Empty("rollout set"));
    }
    let (d_y, d_x, h) = (env.d_y, policy.d_x(), env.horizon());
    let mut all = Vec::with_capacity(n_rollouts);
    let mut violations = 0;
    let mut start = 0;
    while start < n_rollouts {
        let m = CHUNK.min(n_rollouts - start);
        let mut env_rngs = Vec::with_capacity(m);
        let mut pol_rngs = Vec::with_capacity(m);
        let mut states = Vec::with_capacity(m * d_y);
        for i in start..start + m {
            let (mut er, pr) = draw_streams(seed, i, 0);
            states.extend(env.sample_init(&mut er));
            env_rngs.push(er);
            pol_rngs.push(pr);
        }
        let mut ret = vec![0.0; m];
        let mut disc = 1.0;
        for _ in 0..h {
            let mut refs: Vec<&mut SimRng> = pol_rngs.iter_mut().collect();
            let actions = policy.act_batch(&states, &mut refs)?;
            for j in 0..m {
                let s = &states[j * d_y..(j + 1) * d_y];
                let a = &actions[j * d_x..(j + 1) * d_x];
                let (r, clamped) = env.reward(s, a);
                violations += clamped as u64;
                ret[j] += disc * r;
                let next = env.step(s, a, &mut env_rngs[j]);
                states[j * d_y..(j + 1) * d_y].copy_from_slice(&next);
            }
            disc *= env.gamma;
        }
        all.extend(ret);
        start += m;
    }
    Ok((all, violations))
}

/// Records one rollout of horizon `H` for auditing.
pub fn rollout(env: &MdpEnv, policy: &dyn Policy, seed: u64, index: usize) -> Result<Trajectory> {
    env.validate()?;
    let (mut er, mut pr) = draw_streams(seed, index, 0);
    let mut s = env.sample_init(&mut er);
    let mut tr = Trajectory { states: Vec::new(), actions: Vec::new(), rewards: Vec::new() };
    for _ in 0..env.horizon() {
        let a = policy.act_batch(&s, &mut [&mut pr])?;
        tr.rewards.push(env.reward(&s, &a).0);
        tr.states.extend_from_slice(&s);
        tr.actions.extend_from_slice(&a);
        s = env.step(&s, &a, &mut er);
    }
    Ok(tr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub std_err: f64,
    pub n_rollouts: usize,
    /// Upper bound on `|V − E[truncated return]|`.
    pub truncation_bias: f64,
    pub reward_violations: u64,
}

/// `V(π) = E Σ_t γ^t r(s_t, a_t)` by truncated Monte Carlo returns.
pub fn value_estimate(env: &MdpEnv, policy: &dyn Policy, n_rollouts: usize, seed: u64) -> Result<ValueEstimate> {
    let (r, violations) = returns(env, policy, n_rollouts, seed)?;
    let (value, std_err) = math::mean_and_stderr(&r);
    Ok(ValueEstimate { value, std_err, n_rollouts, truncation_bias: env.truncation_bias(), reward_violations: violations })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `V(π*) − V(π̂)`.
    pub gap: f64,
    /// Standard error of the paired per-rollout differences.
    pub std_err: f64,
    /// `sqrt(se(V*)² + se(V̂)²)`, ignoring the pairing.
    pub combined_std_err: f64,
    pub expert: ValueEstimate,
    pub learned: ValueEstimate,
}

/// Suboptimality gap with both policies rolled out on the same environment
/// streams.
pub fn suboptimality(
    env: &MdpEnv,
    expert: &dyn Policy,
    learned: &dyn Policy,
    n_rollouts: usize,
    seed: u64,
) -> Result<GapEstimate> {
    let (re, ve) = returns(env, expert, n_rollouts, seed)?;
    let (rl, vl) = returns(env, learned, n_rollouts, seed)?;
    let diffs: Vec<f64> = re.iter().zip(&rl).map(|(a, b)| a - b).collect();
    let (gap, std_err) = math::mean_and_stderr(&diffs);
    let est = |r: &[f64], v: u64| {
        let (value, std_err) = math::mean_and_stderr(r);
        ValueEstimate { value, std_err, n_rollouts, truncation_bias: env.truncation_bias(), reward_violations: v }
    };
    let (expert, learned) = (est(&re, ve), est(&rl, vl));
    Ok(GapEstimate {
        gap,
        std_err,
        combined_std_err: sqrt(expert.std_err * expert.std_err + learned.std_err * learned.std_err),
        expert,
        learned,
    })
}

/// Right-hand side of the performance-difference bound
/// `2/(1−γ)² · E_{s ~ d^{π*}} TV(π*(·|s), π̂(·|s))`, with the expectation
/// taken over `n_bins` equal state bins (`d_y = 1`) weighted by the expert's
/// empirical state visitation and TV evaluated at the bin centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdlBound {
    pub expected_tv: f64,
    pub bound: f64,
    pub bin_weights: Vec<f64>,
    pub bin_tv: Vec<f64>,
}

pub fn performance_difference_bound(
    env: &MdpEnv,
    expert: &ExpertPolicy,
    learned: &dyn ScoreField,
    sampler_cfg: &SamplerConfig,
    n_bins: usize,
    n_states: usize,
    tv: &TvConfig,
    seed: u64,
) -> Result<PdlBound> {
    if env.d_y != 1 {
        return Err(Error::UnsupportedDimension(env.d_y));
    }
    if n_bins == 0 {
        return Err(Error::InvalidConfig("n_bins must be positive".into()));
    }
    let v = visitation_batch(env, expert, n_states, rng::derive_key(seed, &[domain::EVAL, 1]))?;
    let mut weights = vec![0.0; n_bins];
    for s in &v.states {
        weights[((s * n_bins as f64) as usize).min(n_bins - 1)] += 1.0 / v.len() as f64;
    }
    let task = expert.as_task(1, ConditionMarginal::Uniform)?;
    let mut cfg = sampler_cfg.clone();
    cfg.truncation = None;
    let mut bin_tv = vec![0.0; n_bins];
    let mut expected_tv = 0.0;
    for (b, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        let y = [(b as f64 + 0.5) / n_bins as f64];
        let samples = evaluation::sample_at(learned, &y, tv.samples_per_condition, &cfg, seed, b as u64)?;
        let est = evaluation::tv_conditional(&samples, &task, &y, tv.bins)?;
        bin_tv[b] = est.value;
        expected_tv += w * est.value;
    }
    let g = 1.0 - env.gamma;
    Ok(PdlBound { expected_tv, bound: 2.0 / (g * g) * expected_tv, bin_weights: weights, bin_tv })
}

/// Exact per-state quantities of a one-dimensional lattice environment with
/// deterministic dynamics under a Gaussian policy.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeModel {
    pub centers: Vec<f64>,
    /// Row-major `P(s' = j | s = i)`.
    pub transition: Vec<f64>,
    pub init: Vec<f64>,
    /// `E_a r(s_i, a)`.
    pub mean_reward: Vec<f64>,
}

impl LatticeModel {
    pub fn new(env: &MdpEnv, policy: &ExpertPolicy) -> Result<Self> {
        env.validate()?;
        let Some(b) = env.lattice else {
            return Err(Error::InvalidEnv("exact quantities need a lattice environment".into()));
        };
        if env.d_y != 1 || env.noise_std != 0.0 || policy.cov.dim() != 1 {
            return Err(Error::InvalidEnv("exact quantities need d_y = 1 and deterministic dynamics".into()));
        }
        let centers: Vec<f64> = (0..b).map(|i| (i as f64 + 0.5) / b as f64).collect();
        let sd = sqrt(policy.cov.get(0, 0));
        let mut transition = vec![0.0; b * b];
        let mut mean_reward = vec![0.0; b];
        for (i, &s) in centers.iter().enumerate() {
            let m = policy.mean.apply(&[s])[0];
            // s + gain·a lands in bin j iff a lies between the preimages of
            // the bin edges; the outer bins absorb the clamped mass
            let cdf = |edge: f64| {
                let z = ((edge - s) / env.gain - m) / sd;
                if env.gain > 0.0 {
                    normal_cdf(z)
                } else {
                    1.0 - normal_cdf(z)
                }
            };
            for j in 0..b {
                let lo = if j == 0 { 0.0 } else { cdf(j as f64 / b as f64) };
                let hi = if j + 1 == b { 1.0 } else { cdf((j + 1) as f64 / b as f64) };
                transition[i * b + j] = (hi - lo).max(0.0);
            }
            mean_reward[i] = gauss_expectation(|a| env.reward(&[s], &[a]).0, m, sd);
        }
        let init = lattice_init(env, b)?;
        Ok(Self { centers, transition, init, mean_reward })
    }

    fn push(&self, d: &[f64]) -> Vec<f64> {
        let b = self.centers.len();
        let mut out = vec![0.0; b];
        for i in 0..b {
            for j in 0..b {
                out[j] += d[i] * self.transition[i * b + j];
            }
        }
        out
    }

    /// State occupancy `Σ_{t<H} (1−γ)γ^t/(1−γ^H) · ρ P^t`, the law of the
    /// state returned by a visitation draw.
    pub fn occupancy(&self, gamma: f64, horizon: usize) -> Vec<f64> {
        let norm = 1.0 - powf(gamma, horizon as f64);
        let mut d = self.init.clone();
        let mut occ = vec![0.0; d.len()];
        let mut w = (1.0 - gamma) / norm;
        for _ in 0..horizon {
            occ.iter_mut().zip(&d).for_each(|(o, p)| *o += w * p);
            d = self.push(&d);
            w *= gamma;
        }
        occ
    }

    /// Truncated value `Σ_{t<H} γ^t ρ P^t r̄`.
    pub fn value(&self, gamma: f64, horizon: usize) -> f64 {
        let mut d = self.init.clone();
        let mut v = 0.0;
        let mut w = 1.0;
        for _ in 0..horizon {
            v += w * math::dot(&d, &self.mean_reward);
            d = self.push(&d);
            w *= gamma;
        }
        v
    }
}

fn lattice_init(env: &MdpEnv, b: usize) -> Result<Vec<f64>> {
    match &env.init {
        ConditionMarginal::Uniform => Ok(vec![1.0 / b as f64; b]),
        ConditionMarginal::TruncatedNormal { mean, std } => {
            let (m, s) = (mean[0], std[0]);
            let z = normal_cdf((1.0 - m) / s) - normal_cdf(-m / s);
            Ok((0..b)
                .map(|j| {
                    let lo = normal_cdf((j as f64 / b as f64 - m) / s);
                    let hi = normal_cdf(((j + 1) as f64 / b as f64 - m) / s);
                    (hi - lo) / z
                })
                .collect())
        }
    }
}

/// `E f(a)` for `a ~ N(m, sd²)` by composite Simpson quadrature on ±10 sd.
fn gauss_expectation(f: impl Fn(f64) -> f64, m: f64, sd: f64) -> f64 {
    const CELLS: usize = 4000;
    let (lo, hi) = (-10.0, 10.0);
    let h = (hi - lo) / CELLS as f64;
    let g = |z: f64| f(m + sd * z) * math::normal_pdf(z);
    let mut acc = g(lo) + g(hi);
    for i in 1..CELLS {
        let z = lo + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(z);
    }
    acc * h / 3.0
}

/// One environment of a multi-environment run with its expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub env: MdpEnv,
    pub expert: ExpertPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpEvalConfig {
    #[serde(default = "default_rollouts")]
    pub n_rollouts: usize,
    /// State bins of the performance-difference bound; 0 skips it.
    #[serde(default)]
    pub bound_bins: usize,
    /// Expert visitation draws weighting the bound's bins.
    #[serde(default = "default_bound_states")]
    pub bound_states: usize,
}

fn default_bound_states() -> usize {
    5000
}

fn default_rollouts() -> usize {
    2000
}

impl Default for MdpEvalConfig {
    fn default() -> Self {
        Self { n_rollouts: default_rollouts(), bound_bins: 0, bound_states: default_bound_states() }
    }
}

fn yes() -> bool {
    true
}

fn default_policy_sampler() -> SamplerConfig {
    SamplerConfig { n_steps: 100, ..SamplerConfig::default() }.with_truncation(Truncation::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpPipelineConfig {
    pub envs: Vec<EnvSpec>,
    /// Expert demonstrations per environment.
    pub n_labeled: usize,
    /// On-policy pseudo pairs per environment.
    pub n_pseudo: usize,
    pub specialist: ModelClassSpec,
    pub generalist: ModelClassSpec,
    #[serde(default)]
    pub schedule: Schedule,
    /// Action sampler for every diffusion policy.
    #[serde(default = "default_policy_sampler")]
    pub sampler: SamplerConfig,
    pub scalarization: Scalarization,
    pub stage1: OptimizerConfig,
    pub stage2: OptimizerConfig,
    #[serde(default)]
    pub eval: MdpEvalConfig,
    #[serde(default)]
    pub pseudo_rollouts: PseudoRollouts,
    #[serde(default = "yes")]
    pub baseline: bool,
    #[serde(default)]
    pub allow_regime_violation: bool,
    #[serde(default)]
    pub seed: u64,
}

impl MdpPipelineConfig {
    pub fn k(&self) -> usize {
        self.envs.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let Some(first) = self.envs.first() else {
            return bad("at least one environment is required".into());
        };
        let d_y = first.env.d_y;
        for (k, e) in self.envs.iter().enumerate() {
            e.env.validate()?;
            if e.env.d_y != d_y || e.expert.cov.dim() != d_y || e.expert.mean.offset.len() != d_y {
                return bad(format!("environment {k}: state/action dimensions disagree"));
            }
        }
        if self.n_labeled == 0 || self.n_pseudo == 0 {
            return bad("labeled and pseudo counts must be positive".into());
        }
        if self.n_pseudo < self.n_labeled && !self.allow_regime_violation {
            return bad(format!(
                "N = {} < n = {} leaves the semi-supervised regime; set allow_regime_violation to proceed",
                self.n_pseudo, self.n_labeled
            ));
        }
        if self.specialist.family != ModelFamily::Specialist || self.generalist.family != ModelFamily::Generalist {
            return bad("specialist/generalist class families are swapped".into());
        }
        self.specialist.validate(d_y, d_y)?;
        self.generalist.validate(d_y, d_y)?;
        self.schedule.validate()?;
        self.sampler.validate()?;
        self.scalarization.validate()?;
        if let ScalarizationKind::Linear { weights } = &self.scalarization.kind {
            if weights.len() != self.k() {
                return bad(format!("{} linear weights for {} environments", weights.len(), self.k()));
            }
        }
        if self.eval.n_rollouts == 0 {
            return bad("eval.n_rollouts must be positive".into());
        }
        self.stage1.validate()?;
        self.stage2.validate()
    }

    fn key(&self, path: &[u64]) -> u64 {
        rng::derive_key(self.seed, path)
    }

    /// Sampler with the truncation radius resolved for the pseudo budget.
    pub fn policy_sampler(&self) -> SamplerConfig {
        let mut cfg = self.sampler.clone();
        cfg.truncation = cfg.truncation.map(|t| t.resolved(self.n_pseudo * self.k()));
        cfg
    }

    pub fn demo_seed(&self, k: usize) -> u64 {
        self.key(&[domain::DATA, k as u64])
    }

    pub fn pseudo_seed(&self, k: usize) -> u64 {
        self.key(&[domain::PSEUDO, k as u64])
    }

    pub fn eval_seed(&self, k: usize) -> u64 {
        self.key(&[domain::EVAL, k as u64])
    }

    fn as_pipeline_opt(&self, base: &OptimizerConfig, path: &[u64]) -> OptimizerConfig {
        OptimizerConfig { seed: self.key(path), ..base.clone() }
    }
}

fn in_stage<T>(stage: &'static str, task: Option<usize>, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage, task, source: Box::new(e) })
}

/// Stage-one output for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpStageOne {
    pub demos: LabeledDataset,
    pub specialist: TrainOutcome,
    pub pseudo: PseudoDataset,
    pub gap: GapEstimate,
}

pub fn run_env(cfg: &MdpPipelineConfig, k: usize) -> Result<MdpStageOne> {
    let spec = &cfg.envs[k];
    let demos = in_stage("demos", Some(k), collect_expert_demos(&spec.env, &spec.expert, k, cfg.n_labeled, cfg.demo_seed(k)))?;
    let class = ModelClassSpec {
        init_seed: cfg.key(&[domain::INIT, k as u64, cfg.specialist.init_seed]),
        ..cfg.specialist.clone()
    };
    let opt = cfg.as_pipeline_opt(&cfg.stage1, &[domain::TRAIN, k as u64, cfg.stage1.seed]);
    let specialist = in_stage("stage1", Some(k), pipeline::train_specialist(&demos, &class, &opt, &cfg.schedule))?;
    let sampler = cfg.policy_sampler();
    let pseudo = in_stage(
        "pseudo",
        Some(k),
        collect_onpolicy_pseudo(&spec.env, &specialist.model, k, cfg.n_pseudo, &sampler, cfg.pseudo_rollouts, cfg.pseudo_seed(k)),
    )?;
    let policy = DiffusionPolicy::new(&specialist.model, sampler);
    let gap = in_stage("evaluate_specialist", Some(k), suboptimality(&spec.env, &spec.expert, &policy, cfg.eval.n_rollouts, cfg.eval_seed(k)))?;
    Ok(MdpStageOne { demos, specialist, pseudo, gap })
}

/// Per-environment gaps of a generalist-class policy, their scalarization
/// and, when configured, the performance-difference bound per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub gaps: Vec<GapEstimate>,
    pub bounds: Vec<Option<PdlBound>>,
    pub scalarized_gap: f64,
}

/// Evaluation of `model` as a policy in environment `k`.
pub fn evaluate_policy_env(cfg: &MdpPipelineConfig, model: &ScoreModel, k: usize) -> Result<(GapEstimate, Option<PdlBound>)> {
    let spec = &cfg.envs[k];
    let sampler = cfg.policy_sampler();
    let policy = DiffusionPolicy::new(model, sampler.clone());
    let gap = suboptimality(&spec.env, &spec.expert, &policy, cfg.eval.n_rollouts, cfg.eval_seed(k))?;
    let bound = if cfg.eval.bound_bins > 0 && spec.env.d_y == 1 {
        let tv = TvConfig { n_conditions: 1, samples_per_condition: evaluation::MIN_SAMPLES, bins: 50 };
        Some(performance_difference_bound(
            &spec.env,
            &spec.expert,
            model,
            &sampler,
            cfg.eval.bound_bins,
            cfg.eval.bound_states,
            &tv,
            cfg.eval_seed(k),
        )?)
    } else {
        None
    };
    Ok((gap, bound))
}

pub fn policy_report(cfg: &MdpPipelineConfig, per_env: Vec<(GapEstimate, Option<PdlBound>)>) -> Result<PolicyReport> {
    let (gaps, bounds): (Vec<_>, Vec<_>) = per_env.into_iter().unzip();
    let u: Vec<f64> = gaps.iter().map(|g: &GapEstimate| g.gap).collect();
    Ok(PolicyReport { scalarized_gap: cfg.scalarization.exact().evaluate(&u)?, gaps, bounds })
}

pub fn evaluate_policy(cfg: &MdpPipelineConfig, model: &ScoreModel, stage: &'static str) -> Result<PolicyReport> {
    let per_env = (0..cfg.k()).map(|k| in_stage(stage, Some(k), evaluate_policy_env(cfg, model, k))).collect::<Result<Vec<_>>>()?;
    policy_report(cfg, per_env)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpPolicy {
    pub outcome: TrainOutcome,
    pub report: PolicyReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpPipelineResult {
    pub config: MdpPipelineConfig,
    pub seed: u64,
    pub stage1: Vec<MdpStageOne>,
    pub generalist: MdpPolicy,
    pub baseline: Option<MdpPolicy>,
}

pub fn policy_init(cfg: &MdpPipelineConfig) -> Result<ScoreModel> {
    let (d_x, d_y) = (cfg.envs[0].env.d_x(), cfg.envs[0].env.d_y);
    let class = ModelClassSpec { init_seed: cfg.key(&[domain::INIT, u64::MAX, cfg.generalist.init_seed]), ..cfg.generalist.clone() };
    ScoreModel::init(&class, d_x, d_y)
}

/// Stage two on the on-policy pseudo-rollouts.
pub fn train_policy_generalist(cfg: &MdpPipelineConfig, stage1: &[MdpStageOne]) -> Result<TrainOutcome> {
    let pseudo: Vec<PseudoDataset> = stage1.iter().map(|s| s.pseudo.clone()).collect();
    let specialists: Vec<ScoreModel> = stage1.iter().map(|s| s.specialist.model.clone()).collect();
    let opt = cfg.as_pipeline_opt(&cfg.stage2, &[domain::TRAIN, u64::MAX, cfg.stage2.seed]);
    in_stage(
        "stage2",
        None,
        pipeline::train_generalist(&pseudo, &specialists, None, policy_init(cfg)?, &cfg.scalarization, &opt, &cfg.schedule),
    )
}

/// Generalist-class policy trained on the expert demonstrations alone.
pub fn train_policy_baseline(cfg: &MdpPipelineConfig, demos: &[LabeledDataset]) -> Result<TrainOutcome> {
    let opt = cfg.as_pipeline_opt(&cfg.stage2, &[domain::TRAIN, u64::MAX - 1, cfg.stage2.seed]);
    in_stage("baseline", None, pipeline::train_labeled_only(demos, policy_init(cfg)?, &cfg.scalarization, &opt, &cfg.schedule))
}

pub fn finish_mdp_pipeline(cfg: &MdpPipelineConfig, stage1: Vec<MdpStageOne>) -> Result<MdpPipelineResult> {
    let outcome = train_policy_generalist(cfg, &stage1)?;
    let report = evaluate_policy(cfg, &outcome.model, "evaluate_generalist")?;
    let generalist = MdpPolicy { outcome, report };
    let baseline = if cfg.baseline {
        let demos: Vec<LabeledDataset> = stage1.iter().map(|s| s.demos.clone()).collect();
        let outcome = train_policy_baseline(cfg, &demos)?;
        let report = evaluate_policy(cfg, &outcome.model, "evaluate_baseline")?;
        Some(MdpPolicy { outcome, report })
    } else {
        None
    };
    Ok(MdpPipelineResult { config: cfg.clone(), seed: cfg.seed, stage1, generalist, baseline })
}

/// Expert demonstrations, specialists, on-policy pseudo-rollouts, the
/// generalist policy and (optionally) the labeled-only baseline.
pub fn run_mdp_pipeline(cfg: &MdpPipelineConfig) -> Result<MdpPipelineResult> {
    in_stage("validate", None, cfg.validate())?;
    let stage1 = (0..cfg.k()).map(|k| run_env(cfg, k)).collect::<Result<Vec<_>>>()?;
    finish_mdp_pipeline(cfg, stage1)
}

/// Reach environment on `[0, 1]` with goal `goal` and an expert whose mean
/// action moves the state a fraction `rate` of the way to the goal.
pub fn reach_env(goal: f64, gamma: f64, init: ConditionMarginal, gain: f64, rate: f64, action_sd: f64) -> Result<EnvSpec> {
    let env = MdpEnv {
        d_y: 1,
        gamma,
        gain,
        noise_std: 0.0,
        reward: Reward::Reach { goal: vec![goal], scale: 2.0 },
        init,
        lattice: None,
    };
    env.validate()?;
    let expert = ExpertPolicy { mean: AffineMap::scalar(rate * goal / gain, -rate / gain), cov: SpdMatrix::scaled_identity(1, action_sd * action_sd) };
    Ok(EnvSpec { env, expert })
}
