use semidiff_core::evaluation::TvConfig;
use semidiff_core::mdp::*;
use semidiff_core::sampler::SamplerConfig;
use semidiff_core::task::ConditionMarginal;

fn lattice_fixture(gamma: f64, bins: usize, init: ConditionMarginal) -> EnvSpec {
    let mut spec = reach_env(0.7, gamma, init, 1.0, 0.5, 0.25).unwrap();
    spec.env.lattice = Some(bins);
    spec
}

fn fixtures() -> Vec<EnvSpec> {
    vec![
        lattice_fixture(0.8, 5, ConditionMarginal::Uniform),
        lattice_fixture(0.9, 8, ConditionMarginal::TruncatedNormal { mean: vec![0.2], std: vec![0.15] }),
        lattice_fixture(0.0, 4, ConditionMarginal::Uniform),
    ]
}

#[test]
fn visitation_matches_lattice_occupancy() {
    for (f, spec) in fixtures().iter().enumerate() {
        let b = spec.env.lattice.unwrap();
        let exact = LatticeModel::new(&spec.env, &spec.expert).unwrap().occupancy(spec.env.gamma, spec.env.horizon());
        let n = 100_000;
        let v = visitation_batch(&spec.env, &spec.expert, n, 11 + f as u64).unwrap();
        let mut hist = vec![0.0; b];
        for s in &v.states {
            hist[((s * b as f64) as usize).min(b - 1)] += 1.0 / n as f64;
        }
        let l1: f64 = hist.iter().zip(&exact).map(|(a, b)| (a - b).abs()).sum();
        assert!(l1 < 0.02, "fixture {f}: L1 {l1}");
    }
}

#[test]
fn value_matches_lattice_dp() {
    for (f, spec) in fixtures().iter().enumerate() {
        let exact = LatticeModel::new(&spec.env, &spec.expert).unwrap().value(spec.env.gamma, spec.env.horizon());
        let est = value_estimate(&spec.env, &spec.expert, 4000, 3 + f as u64).unwrap();
        assert!((est.value - exact).abs() <= 2.0 * est.std_err + 1e-12, "fixture {f}: {} vs {exact} (se {})", est.value, est.std_err);
    }
}

#[test]
fn performance_difference_bound_holds() {
    let sampler = SamplerConfig::sde(100, 3.0, 1e-3);
    let tv = TvConfig { n_conditions: 1, samples_per_condition: 10_000, bins: 50 };
    for spec in &fixtures()[..2] {
        let env = MdpEnv { lattice: None, ..spec.env.clone() };
        for delta in [0.1, 0.4] {
            let learned_expert = spec.expert.shifted(delta);
            let learned_task = learned_expert.as_task(1, ConditionMarginal::Uniform).unwrap();
            let oracle = learned_task.oracle();
            let policy = DiffusionPolicy::new(&oracle, sampler.clone());
            let gap = suboptimality(&env, &spec.expert, &policy, 1000, 5).unwrap();
            let bound = performance_difference_bound(&env, &spec.expert, &oracle, &sampler, 10, 5000, &tv, 9).unwrap();
            let margin = 2.0 * gap.std_err + 2.0 * env.truncation_bias();
            assert!(gap.gap <= bound.bound + margin, "gap {} bound {} margin {margin}", gap.gap, bound.bound);
        }
    }
}

#[test]
fn visitation_is_reproducible_and_index_local() {
    let spec = &fixtures()[0];
    let a = visitation_batch(&spec.env, &spec.expert, 700, 2).unwrap();
    let b = visitation_batch(&spec.env, &spec.expert, 700, 2).unwrap();
    assert_eq!(a, b);
    for i in [0, 3, 600] {
        let (s, x) = visitation_sample(&spec.env, &spec.expert, 2, i).unwrap();
        assert_eq!(s, a.states[i..i + 1]);
        assert_eq!(x, a.actions[i..i + 1]);
    }
}

#[test]
fn invalid_environments_are_rejected() {
    let spec = &fixtures()[0];
    for env in [
        MdpEnv { gamma: 1.0, ..spec.env.clone() },
        MdpEnv { gain: 0.0, ..spec.env.clone() },
        MdpEnv { noise_std: -1.0, ..spec.env.clone() },
        MdpEnv { lattice: Some(0), ..spec.env.clone() },
        MdpEnv { reward: Reward::Reach { goal: vec![0.5, 0.5], scale: 1.0 }, ..spec.env.clone() },
    ] {
        assert!(env.validate().is_err());
    }
}
