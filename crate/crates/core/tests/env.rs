mod common;

use lbl_core::env::{generate_instance, Environment, GeneratorSpec};
use lbl_core::policies::GammaSchedule;
use proptest::prelude::*;

use common::{Explorer, Fixed};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn noiseless_sessions_are_consistent_with_one_class(
        arms in 2usize..7,
        classes in 1usize..4,
        ell in 3usize..8,
        seed in any::<u64>(),
    ) {
        prop_assume!(classes <= arms);
        let gen = GeneratorSpec { r_noise: 0.0, ell, ..GeneratorSpec::default() };
        let model = generate_instance(arms, 3, classes, &gen, seed).unwrap();
        let mut env = Environment::new(model.clone(), seed).unwrap();
        let mut policy = Explorer::new(arms, GammaSchedule::Sqrt, seed);
        for _ in 0..30 {
            let out = env.run_session(&mut policy).unwrap();
            prop_assert_eq!(out.records.len(), ell);
            let consistent: Vec<usize> = (0..classes)
                .filter(|&c| out.records.iter().all(|r| r.reward == model.u[(r.action, c)]))
                .collect();
            prop_assert!(consistent.contains(&out.class));
            prop_assert!(out.records.iter().all(|r| r.user == out.user && r.session == out.records[0].session));
        }
    }

    #[test]
    fn regret_increments_vanish_exactly_on_optimal_actions(
        arms in 2usize..7,
        seed in any::<u64>(),
        action_seed in any::<u64>(),
    ) {
        let model = generate_instance(arms, 4, 2.min(arms), &GeneratorSpec::default(), seed).unwrap();
        let action = (action_seed as usize) % arms;
        let mut env = Environment::new(model.clone(), seed).unwrap();
        for _ in 0..20 {
            let out = env.run_session(&mut Fixed(action)).unwrap();
            let table: Vec<f64> = (0..arms).map(|a| env.mean(out.user, a)).collect();
            let best = table.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let means = model.user_means(out.user);
            let (best_arm, _) = model.user_optimum(out.user);
            let (reference, mean) = (means[best_arm], means[action]);
            for &r in &out.regret {
                prop_assert!(r >= 0.0);
                prop_assert_eq!(r == 0.0, table[action] == best);
                prop_assert!((r - (reference - mean)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_sessions(seed in any::<u64>()) {
        let model = generate_instance(5, 3, 2, &GeneratorSpec::default(), seed).unwrap();
        let play = |s| {
            let mut env = Environment::new(model.clone(), s).unwrap();
            let mut policy = Explorer::new(5, GammaSchedule::CubeRoot, s);
            (0..20).map(|_| env.run_session(&mut policy).unwrap()).collect::<Vec<_>>()
        };
        prop_assert_eq!(play(seed), play(seed));
    }
}

#[test]
fn mean_reward_matches_the_mixture() {
    let model = generate_instance(4, 3, 2, &GeneratorSpec::default(), 21).unwrap();
    let sessions = 20_000;
    for action in 0..4 {
        let mut env = Environment::new(model.clone(), 100 + action as u64).unwrap();
        let mut sums = vec![(0.0, 0.0, 0usize); 3];
        for _ in 0..sessions {
            // One reward per session: steps within a session share a class.
            let out = env.run_session(&mut Fixed(action)).unwrap();
            let x = out.records[0].reward;
            let s = &mut sums[out.user];
            s.0 += x;
            s.1 += x * x;
            s.2 += 1;
        }
        for (b, &(sum, sq, k)) in sums.iter().enumerate() {
            let k = k as f64;
            let mean = sum / k;
            let se = ((sq / k - mean * mean) / k).sqrt();
            let expected = model.user_means(b)[action];
            assert!(
                (mean - expected).abs() <= 4.0 * se,
                "user {b} arm {action}: {mean} vs {expected} (se {se})"
            );
        }
    }
}
