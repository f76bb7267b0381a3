//! Property tests: scalarization axioms, the truncation lemma on discrete
//! laws, Pareto filtering and stream determinism.

use proptest::prelude::*;
use rand::RngCore;
use semidiff_core::evaluation::dominated_flags;
use semidiff_core::rng::{self, uniform};
use semidiff_core::scalarization::Scalarization;

const TOL: f64 = 1e-9;

fn kinds(k: usize) -> impl Strategy<Value = Scalarization> {
    prop_oneof![
        prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
            let s: f64 = w.iter().sum();
            Scalarization::linear(w.into_iter().map(|v| v / s).collect()).unwrap()
        }),
        Just(Scalarization::chebyshev()),
        (1.0f64..12.0).prop_map(|p| Scalarization::lp(p).unwrap()),
        Just(Scalarization::lp(f64::INFINITY).unwrap()),
    ]
}

fn case() -> impl Strategy<Value = (Scalarization, Vec<f64>, Vec<f64>, f64)> {
    (1usize..6).prop_flat_map(|k| {
        (kinds(k), prop::collection::vec(-10.0f64..10.0, k), prop::collection::vec(-10.0f64..10.0, k), 0.0f64..10.0)
    })
}

fn close_or_less(a: f64, b: f64) -> bool {
    a <= b + TOL * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn reverse_triangle((s, u, v, _) in case()) {
        let d: Vec<f64> = u.iter().zip(&v).map(|(a, b)| (a - b).abs()).collect();
        let lhs = (s.evaluate(&u).unwrap() - s.evaluate(&v).unwrap()).abs();
        prop_assert!(close_or_less(lhs, s.evaluate(&d).unwrap()));
    }

    #[test]
    fn positive_homogeneity((s, u, _, a) in case()) {
        let au: Vec<f64> = u.iter().map(|x| a * x).collect();
        let (lhs, rhs) = (s.evaluate(&au).unwrap(), a * s.evaluate(&u).unwrap());
        prop_assert!((lhs - rhs).abs() <= TOL * (1.0 + lhs.abs().max(rhs.abs())));
    }

    /// `S(u²) ≥ S(u)²` on the nonnegative orthant, for the kinds bounded by
    /// the sup norm with monotone `S(|·|)`.
    #[test]
    fn square_dominance((s, u, _, _) in case()) {
        prop_assume!(s.satisfies_sup_norm_bound(u.len()));
        let pos: Vec<f64> = u.iter().map(|x| x.abs()).collect();
        let sq: Vec<f64> = pos.iter().map(|x| x * x).collect();
        let su = s.evaluate(&pos).unwrap();
        prop_assert!(close_or_less(su * su, s.evaluate(&sq).unwrap()));
    }

    /// The subgradient is a supporting hyperplane: `S(v) ≥ S(u) + g·(v − u)`
    /// for the convex kinds.
    #[test]
    fn subgradient_supports((s, u, v, _) in case()) {
        let g = s.subgradient(&u).unwrap();
        let lin = s.evaluate(&u).unwrap() + g.iter().zip(v.iter().zip(&u)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
        prop_assert!(close_or_less(lin, s.evaluate(&v).unwrap() + 1e-7));
    }

    #[test]
    fn pareto_front_is_mutually_undominated(points in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..12)) {
        let flags = dominated_flags(&points, &[0.0, 0.0]).unwrap();
        prop_assert!(flags.iter().any(|f| !f));
        for (i, p) in points.iter().enumerate() {
            let beaten = points.iter().any(|q| q.iter().zip(p).all(|(a, b)| a < b));
            prop_assert_eq!(flags[i], beaten);
        }
    }

    #[test]
    fn streams_are_pure_functions_of_their_key(seed in any::<u64>(), path in prop::collection::vec(any::<u64>(), 0..4)) {
        let (mut a, mut b) = (rng::stream(seed, &path), rng::stream(seed, &path));
        for _ in 0..8 {
            prop_assert_eq!(a.next_u64(), b.next_u64());
        }
    }
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn simplex(n: usize, r: &mut impl rand::Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -uniform(r).max(1e-300).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Brute force over random discrete laws on at most 20 atoms: if
/// `TV(P, Q) ≤ ε` and `Q(Ω) ≥ 1 − δ` with `δ + ε ≤ 1/2`, then `P` restricted
/// and renormalized to `Ω` is within `δ + 2ε` of `Q`.
#[test]
fn truncation_lemma_on_discrete_laws() {
    let mut r = rng::stream(11, &[]);
    let mut checked = 0;
    while checked < 10_000 {
        let n = 2 + (uniform(&mut r) * 19.0) as usize;
        let q = simplex(n, &mut r);
        let noise = simplex(n, &mut r);
        let lam = 0.5 * uniform(&mut r);
        let p: Vec<f64> = q.iter().zip(&noise).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
        let omega: Vec<bool> = (0..n).map(|_| uniform(&mut r) < 0.85).collect();
        let eps = tv(&p, &q);
        let delta = 1.0 - q.iter().zip(&omega).filter(|(_, o)| **o).map(|(v, _)| v).sum::<f64>();
        let p_omega: f64 = p.iter().zip(&omega).filter(|(_, o)| **o).map(|(v, _)| v).sum();
        if delta + eps > 0.5 || p_omega == 0.0 {
            continue;
        }
        let trunc: Vec<f64> = p.iter().zip(&omega).map(|(v, o)| if *o { v / p_omega } else { 0.0 }).collect();
        let d = tv(&trunc, &q);
        assert!(d <= delta + 2.0 * eps + 1e-12, "n={n} eps={eps} delta={delta} tv={d}");
        checked += 1;
    }
}
