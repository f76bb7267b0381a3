//! Backprop against central finite differences on random parameters.

use semidiff_core::diffusion::{NoisedBatch, Schedule};
use semidiff_core::model::{model_grad, GrowthCaps, ModelClassSpec, ModelFamily, ScoreModel};
use semidiff_core::rng::{self, uniform};

fn batch(d_x: usize, d_y: usize, n: usize, seed: u64) -> NoisedBatch {
    let mut r = rng::stream(seed, &[1]);
    let sched = Schedule::default();
    let mut b = NoisedBatch::new(d_x, d_y);
    for _ in 0..n {
        let x: Vec<f64> = (0..d_x).map(|_| 2.0 * rng::normal(&mut r)).collect();
        let y: Vec<f64> = (0..d_y).map(|_| uniform(&mut r)).collect();
        b.push_point(&x, &y, &sched, 2, &mut r);
    }
    b
}

/// Checks 64 coordinates (or all, if fewer). A coordinate passes when its
/// relative error is at most 1e-4, measured against the larger of its own
/// magnitude and 1e-3 of the largest gradient entry, so coordinates that are
/// numerically zero do not divide by noise.
fn check(family: ModelFamily, widths: Vec<usize>, d_x: usize, d_y: usize, caps: GrowthCaps, weighted: bool, seed: u64) {
    let spec = ModelClassSpec { init_seed: seed, growth_caps: caps, ..ModelClassSpec::new(family, widths.clone()) };
    let m0 = ScoreModel::init(&spec, d_x, d_y).unwrap();
    let mut r = rng::stream(seed, &[2]);
    let params: Vec<f64> = m0.params().iter().map(|_| 0.4 * rng::normal(&mut r)).collect();
    let m = m0.with_params(params.clone()).unwrap();
    let b = batch(d_x, d_y, 16, seed);
    let w: Option<Vec<f64>> = weighted.then(|| (0..b.len()).map(|_| 2.0 * uniform(&mut r)).collect());
    let (_, g) = model_grad(&m, &b, w.as_deref()).unwrap();
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(scale > 0.0);
    let k = params.len().min(64);
    let stride = (params.len() / k).max(1);
    for c in (0..k).map(|i| (i * stride + seed as usize) % params.len()) {
        let h = 1e-6 * (1.0 + params[c].abs());
        let eval = |delta: f64| {
            let mut p = params.clone();
            p[c] += delta;
            model_grad(&m.with_params(p).unwrap(), &b, w.as_deref()).unwrap().0
        };
        let fd = (eval(h) - eval(-h)) / (2.0 * h);
        let denom = g[c].abs().max(1e-3 * scale);
        assert!(
            (fd - g[c]).abs() / denom <= 1e-4,
            "{family:?} {widths:?} d_x={d_x} d_y={d_y} coord {c}: backprop {} fd {fd}",
            g[c]
        );
    }
}

#[test]
fn generalist_gradients() {
    let caps = GrowthCaps::default();
    check(ModelFamily::Generalist, vec![8], 1, 1, caps, false, 0);
    check(ModelFamily::Generalist, vec![16, 16], 2, 3, caps, false, 1);
    check(ModelFamily::Generalist, vec![6, 5, 4], 3, 2, caps, true, 2);
}

#[test]
fn specialist_gradients() {
    check(ModelFamily::Specialist, vec![4], 1, 1, GrowthCaps::default(), false, 3);
    check(ModelFamily::Specialist, vec![4], 2, 4, GrowthCaps::default(), true, 4);
}

/// Tight caps push many outputs into the saturating part of the envelope.
#[test]
fn gradients_through_saturated_envelope() {
    let caps = GrowthCaps { m0: 1.0, m1: 1.0 };
    check(ModelFamily::Generalist, vec![8, 8], 2, 1, caps, false, 5);
}
