//! Parametric score fields with an architectural linear-growth envelope.
//!
//! A model maps the features `φ = [x, y, t, e^{-t}, 1/σ_t, e^{-t} y]` through
//! a tanh MLP and two heads:
//!
//! ```text
//! z = W_z h + S_z φ + b_z          (unbounded head, with a linear skip)
//! q = W_g h + b_g                  (gate logits)
//! s = M0 · tanh(‖z‖/M0) · z/‖z‖ − x ⊙ (M1 · sigmoid(q))
//! ```
//!
//! so `‖s‖ ≤ M0 + M1 ‖x‖` for every parameter vector. With all head
//! parameters zero and `M1 = 2` the model is exactly `s = −x`, the score of
//! the stationary law.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoisedBatch, ScoreField};
use crate::error::{Error, Result};
use crate::math::{exp, sigmoid, sqrt, tanh};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthCaps {
    pub m0: f64,
    pub m1: f64,
}

impl Default for GrowthCaps {
    fn default() -> Self {
        Self { m0: 8.0, m1: 2.0 }
    }
}

impl GrowthCaps {
    fn validate(&self) -> Result<()> {
        if !(self.m0 >= 1.0 && self.m1 >= 1.0 && self.m0.is_finite() && self.m1.is_finite()) {
            return Err(Error::InvalidModelSpec(format!("growth caps must be finite and >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub d_x: usize,
    pub d_y: usize,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn new(d_x: usize, d_y: usize, widths: Vec<usize>) -> Result<Self> {
        let a = Self { d_x, d_y, widths, activation: Activation::Tanh };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_y == 0 {
            return Err(Error::InvalidModelSpec("d_x and d_y must be positive".into()));
        }
        if self.widths.is_empty() {
            return Err(Error::InvalidModelSpec("at least one hidden layer is required".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidModelSpec("hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.d_x + 2 * self.d_y + 3
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Specialist,
    Generalist,
}

/// Description of a model class (`H_k` or `F`) and how to initialize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelClassSpec {
    pub family: ModelFamily,
    pub widths: Vec<usize>,
    #[serde(default)]
    pub growth_caps: GrowthCaps,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
}

fn default_init_scale() -> f64 {
    1.0
}

impl ModelClassSpec {
    pub fn new(family: ModelFamily, widths: Vec<usize>) -> Self {
        Self { family, widths, growth_caps: GrowthCaps::default(), init_seed: 0, init_scale: 1.0 }
    }

    pub fn depth(&self) -> usize {
        self.widths.len()
    }

    pub fn architecture(&self, d_x: usize, d_y: usize) -> Result<Architecture> {
        Architecture::new(d_x, d_y, self.widths.clone())
    }

    pub fn validate(&self, d_x: usize, d_y: usize) -> Result<()> {
        self.architecture(d_x, d_y)?;
        self.growth_caps.validate()?;
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::InvalidModelSpec("init_scale must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Exact trainable-parameter count of a model class.
pub fn capacity_report(spec: &ModelClassSpec, d_x: usize, d_y: usize) -> Result<usize> {
    spec.validate(d_x, d_y)?;
    Ok(spec.architecture(d_x, d_y)?.param_count())
}

#[derive(Debug, Clone)]
struct LayerSlots {
    w: usize,
    b: usize,
    fan_in: usize,
    width: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    layers: Vec<LayerSlots>,
    wz: usize,
    sz: usize,
    bz: usize,
    wg: usize,
    bg: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut fan_in = arch.feature_dim();
        let mut layers = Vec::with_capacity(arch.widths.len());
        for &width in &arch.widths {
            layers.push(LayerSlots { w: off, b: off + width * fan_in, fan_in, width });
            off += width * fan_in + width;
            fan_in = width;
        }
        let last = fan_in;
        let d = arch.d_x;
        let wz = off;
        let sz = wz + d * last;
        let bz = sz + d * arch.feature_dim();
        let wg = bz + d;
        let bg = wg + d * last;
        Self { layers, wz, sz, bz, wg, bg, total: bg + d }
    }
}

/// A score model: architecture, flat parameters, growth caps and the seed it
/// was initialized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    arch: Architecture,
    family: ModelFamily,
    caps: GrowthCaps,
    seed: u64,
    params: Vec<f64>,
}

impl ScoreModel {
    /// Initializes a model: hidden weights `init_scale · N(0, 1/fan_in)`,
    /// hidden biases and both heads zero.
    pub fn init(spec: &ModelClassSpec, d_x: usize, d_y: usize) -> Result<Self> {
        spec.validate(d_x, d_y)?;
        let arch = spec.architecture(d_x, d_y)?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut r = rng::stream(spec.init_seed, &[rng::domain::INIT]);
        for l in &layout.layers {
            let scale = spec.init_scale / sqrt(l.fan_in as f64);
            for p in &mut params[l.w..l.b] {
                *p = scale * rng::normal(&mut r);
            }
        }
        Ok(Self { arch, family: spec.family, caps: spec.growth_caps, seed: spec.init_seed, params })
    }

    pub fn from_parts(
        arch: Architecture,
        family: ModelFamily,
        caps: GrowthCaps,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        caps.validate()?;
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: params.len() });
        }
        if let Some(index) = params.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFiniteParameter { index });
        }
        Ok(Self { arch, family, caps, seed, params })
    }

    /// Same model with a new parameter vector.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.arch.clone(), self.family, self.caps, self.seed, params)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn family(&self) -> ModelFamily {
        self.family
    }

    pub fn growth_caps(&self) -> GrowthCaps {
        self.caps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn capacity(&self) -> usize {
        self.params.len()
    }

    /// Stable identifier derived from the architecture and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut key = rng::derive_key(self.seed, &[self.arch.d_x as u64, self.arch.d_y as u64]);
        for w in &self.arch.widths {
            key = rng::derive_key(key, &[*w as u64]);
        }
        for p in &self.params {
            key = rng::derive_key(key, &[p.to_bits()]);
        }
        format!("{key:016x}")
    }

    /// Weighted mean squared error over a noised batch and its exact
    /// gradient; `grad` is overwritten.
    ///
    /// The loss is `(1/n) Σ_i w_i ‖s(x_t,i, y_i, t_i) − target_i‖²` with
    /// `w_i = 1` when no weights are given.
    pub fn loss_and_grad(&self, batch: &NoisedBatch, weights: Option<&[f64]>, grad: &mut [f64]) -> Result<f64> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if batch.d_x != self.arch.d_x || batch.d_y != self.arch.d_y {
            return Err(Error::DimensionMismatch { expected: self.arch.d_x, got: batch.d_x });
        }
        if let Some(w) = weights {
            if w.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: w.len() });
            }
        }
        if grad.len() != self.params.len() {
            return Err(Error::DimensionMismatch { expected: self.params.len(), got: grad.len() });
        }
        grad.fill(0.0);
        let layout = Layout::new(&self.arch);
        let mut ws = Workspace::new(&self.arch);
        let d_x = self.arch.d_x;
        let d_y = self.arch.d_y;
        let mut upstream = vec![0.0; d_x];
        let mut loss = 0.0;
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let w = weights.map_or(1.0, |w| w[i]);
            let x = &batch.xt[i * d_x..(i + 1) * d_x];
            let y = &batch.ys[i * d_y..(i + 1) * d_y];
            let target = &batch.targets[i * d_x..(i + 1) * d_x];
            self.forward(&layout, &mut ws, x, y, batch.ts[i]);
            let mut sq = 0.0;
            for q in 0..d_x {
                let r = ws.out[q] - target[q];
                sq += r * r;
                upstream[q] = 2.0 * w * inv_n * r;
            }
            loss += w * inv_n * sq;
            if w != 0.0 {
                self.backward(&layout, &mut ws, x, &upstream, grad);
            }
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        Ok(loss)
    }

    fn forward(&self, layout: &Layout, ws: &mut Workspace, x: &[f64], y: &[f64], t: f64) {
        let p = &self.params;
        let d_x = self.arch.d_x;
        write_features(&mut ws.feats, x, y, t);
        for (li, l) in layout.layers.iter().enumerate() {
            let (prev, rest) = ws.acts.split_at_mut(li + 1);
            let input: &[f64] = if li == 0 { &ws.feats } else { &prev[li] };
            let out = &mut rest[0];
            for j in 0..l.width {
                let row = &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                let mut a = p[l.b + j];
                for (wv, iv) in row.iter().zip(input) {
                    a += wv * iv;
                }
                out[j] = tanh(a);
            }
        }
        let last = &ws.acts[layout.layers.len()];
        let hw = last.len();
        let fd = ws.feats.len();
        let mut r2 = 0.0;
        for q in 0..d_x {
            let mut z = p[layout.bz + q];
            for (wv, hv) in p[layout.wz + q * hw..layout.wz + (q + 1) * hw].iter().zip(last) {
                z += wv * hv;
            }
            for (sv, fv) in p[layout.sz + q * fd..layout.sz + (q + 1) * fd].iter().zip(&ws.feats) {
                z += sv * fv;
            }
            let mut g = p[layout.bg + q];
            for (wv, hv) in p[layout.wg + q * hw..layout.wg + (q + 1) * hw].iter().zip(last) {
                g += wv * hv;
            }
            ws.z[q] = z;
            ws.gate[q] = sigmoid(g);
            r2 += z * z;
        }
        let (c, dc_over_r) = radial_squash(sqrt(r2), self.caps.m0);
        ws.c = c;
        ws.dc_over_r = dc_over_r;
        for q in 0..d_x {
            ws.out[q] = c * ws.z[q] - x[q] * self.caps.m1 * ws.gate[q];
        }
    }

    fn backward(&self, layout: &Layout, ws: &mut Workspace, x: &[f64], upstream: &[f64], grad: &mut [f64]) {
        let p = &self.params;
        let d_x = self.arch.d_x;
        let depth = layout.layers.len();
        let hw = ws.acts[depth].len();
        let fd = ws.feats.len();
        // head = c(r) z  ⇒  ∂head/∂z = c I + (c'(r)/r) z zᵀ
        let zu: f64 = (0..d_x).map(|q| ws.z[q] * upstream[q]).sum();
        for q in 0..d_x {
            ws.dz[q] = ws.c * upstream[q] + ws.dc_over_r * zu * ws.z[q];
            let sg = ws.gate[q];
            ws.dq[q] = -x[q] * upstream[q] * self.caps.m1 * sg * (1.0 - sg);
        }
        ws.dh.truncate(0);
        ws.dh.resize(hw, 0.0);
        {
            let last = &ws.acts[depth];
            for q in 0..d_x {
                let dz = ws.dz[q];
                let dq = ws.dq[q];
                grad[layout.bz + q] += dz;
                grad[layout.bg + q] += dq;
                for j in 0..hw {
                    grad[layout.wz + q * hw + j] += dz * last[j];
                    grad[layout.wg + q * hw + j] += dq * last[j];
                    ws.dh[j] += dz * p[layout.wz + q * hw + j] + dq * p[layout.wg + q * hw + j];
                }
                for k in 0..fd {
                    grad[layout.sz + q * fd + k] += dz * ws.feats[k];
                }
            }
        }
        for li in (0..depth).rev() {
            let l = &layout.layers[li];
            let out = &ws.acts[li + 1];
            let input: &[f64] = if li == 0 { &ws.feats } else { &ws.acts[li] };
            ws.da.truncate(0);
            ws.da.extend((0..l.width).map(|j| ws.dh[j] * (1.0 - out[j] * out[j])));
            for j in 0..l.width {
                let da = ws.da[j];
                grad[l.b + j] += da;
                let gw = &mut grad[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                for (g, iv) in gw.iter_mut().zip(input) {
                    *g += da * iv;
                }
            }
            if li > 0 {
                ws.dh.truncate(0);
                ws.dh.resize(l.fan_in, 0.0);
                for j in 0..l.width {
                    let da = ws.da[j];
                    let row = &p[l.w + j * l.fan_in..l.w + (j + 1) * l.fan_in];
                    for (dh, wv) in ws.dh.iter_mut().zip(row) {
                        *dh += da * wv;
                    }
                }
            }
        }
    }
}

/// `c(r) = M0 tanh(r/M0) / r` and `c'(r)/r`, with series near zero.
fn radial_squash(r: f64, m0: f64) -> (f64, f64) {
    let u = r / m0;
    if u < 1e-4 {
        let u2 = u * u;
        return (1.0 - u2 / 3.0, (-2.0 / 3.0 + 8.0 * u2 / 15.0) / (m0 * m0));
    }
    let th = tanh(u);
    let sech2 = 1.0 - th * th;
    (th / u, (sech2 * u - th) / (u * u * u) / (m0 * m0))
}

fn write_features(feats: &mut [f64], x: &[f64], y: &[f64], t: f64) {
    let d_x = x.len();
    let d_y = y.len();
    feats[..d_x].copy_from_slice(x);
    feats[d_x..d_x + d_y].copy_from_slice(y);
    let e = exp(-t);
    let s2 = (-libm::expm1(-2.0 * t)).max(1e-12);
    feats[d_x + d_y] = t;
    feats[d_x + d_y + 1] = e;
    feats[d_x + d_y + 2] = 1.0 / sqrt(s2);
    for k in 0..d_y {
        feats[d_x + d_y + 3 + k] = e * y[k];
    }
}

struct Workspace {
    feats: Vec<f64>,
    /// `acts[0]` is unused; `acts[l + 1]` holds hidden layer `l`.
    acts: Vec<Vec<f64>>,
    z: Vec<f64>,
    gate: Vec<f64>,
    out: Vec<f64>,
    dz: Vec<f64>,
    dq: Vec<f64>,
    dh: Vec<f64>,
    da: Vec<f64>,
    c: f64,
    dc_over_r: f64,
}

impl Workspace {
    fn new(arch: &Architecture) -> Self {
        let mut acts = vec![Vec::new()];
        acts.extend(arch.widths.iter().map(|&w| vec![0.0; w]));
        let max_w = arch.widths.iter().copied().max().unwrap_or(0);
        Self {
            feats: vec![0.0; arch.feature_dim()],
            acts,
            z: vec![0.0; arch.d_x],
            gate: vec![0.0; arch.d_x],
            out: vec![0.0; arch.d_x],
            dz: vec![0.0; arch.d_x],
            dq: vec![0.0; arch.d_x],
            dh: Vec::with_capacity(max_w),
            da: Vec::with_capacity(max_w),
            c: 1.0,
            dc_over_r: 0.0,
        }
    }
}

impl ScoreField for ScoreModel {
    fn dim_x(&self) -> usize {
        self.arch.d_x
    }

    fn dim_y(&self) -> usize {
        self.arch.d_y
    }

    fn eval_batch(&self, xs: &[f64], ys: &[f64], ts: &[f64], out: &mut [f64]) {
        let layout = Layout::new(&self.arch);
        let mut ws = Workspace::new(&self.arch);
        let (d_x, d_y) = (self.arch.d_x, self.arch.d_y);
        for (i, &t) in ts.iter().enumerate() {
            self.forward(&layout, &mut ws, &xs[i * d_x..(i + 1) * d_x], &ys[i * d_y..(i + 1) * d_y], t);
            out[i * d_x..(i + 1) * d_x].copy_from_slice(&ws.out);
        }
    }
}

/// Loss and gradient of the weighted squared error over a batch; see
/// [`ScoreModel::loss_and_grad`].
pub fn model_grad(s: &ScoreModel, batch: &NoisedBatch, weights: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let mut g = vec![0.0; s.capacity()];
    let loss = s.loss_and_grad(batch, weights, &mut g)?;
    Ok((loss, g))
}
