use proptest::prelude::*;
use qpilab_core::design::build_true_guess;
use qpilab_core::envs::FeatureMap;
use qpilab_core::envs::{gen_linear_mdp, policy_sample, random_policies, uniform_stage_sizes};
use qpilab_core::learner::clipped_v;
use qpilab_core::mdp::{
    collect_dataset, deterministic_policies, evaluate_policy, occupancy, optimal_policy,
    state_distribution, Policy, RewardKind, StagedMdp,
};
use qpilab_core::oracles::{
    check_perf_diff, check_range_bound, check_skip_realizability, concentrability,
    concentrability_brute_force,
};
use qpilab_core::skipping::SkipParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_instance(seed: u64) -> (StagedMdp, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = rng.random_range(1..=3);
    let horizon = rng.random_range(2..=4);
    let sizes: Vec<usize> = (0..=horizon)
        .map(|k| {
            if k == 0 || k == horizon {
                1
            } else {
                rng.random_range(1..=4)
            }
        })
        .collect();
    let actions = rng.random_range(1..=3);
    gen_linear_mdp(d, &sizes, actions, RewardKind::DeterministicMean, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn occupancy_is_a_distribution_per_stage(seed in 0u64..1000) {
        let (mdp, _) = small_instance(seed);
        let pi = random_policies(&mdp, 1, seed)[0].clone();
        let nu = occupancy(&mdp, &pi).unwrap();
        for k in 0..mdp.horizon {
            prop_assert!((nu.stage_total(k) - 1.0).abs() <= 1e-10);
        }
        let dist = state_distribution(&mdp, &pi).unwrap();
        prop_assert!((dist[mdp.horizon].iter().sum::<f64>() - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn performance_difference_is_exact(seed in 0u64..1000) {
        let (mdp, _) = small_instance(seed);
        let pols = random_policies(&mdp, 2, seed);
        prop_assert!(check_perf_diff(&mdp, &pols[0], &pols[1]).unwrap() <= 1e-10);
    }

    #[test]
    fn optimum_dominates_random_policies(seed in 0u64..1000) {
        let (mdp, _) = small_instance(seed);
        let (pi, opt) = optimal_policy(&mdp).unwrap();
        let own = evaluate_policy(&mdp, &pi).unwrap();
        prop_assert!((own.start_value() - opt.start_value()).abs() <= 1e-12);
        for p in random_policies(&mdp, 5, seed) {
            prop_assert!(evaluate_policy(&mdp, &p).unwrap().start_value() <= opt.start_value() + 1e-12);
        }
    }

    #[test]
    fn concentrability_dp_matches_enumeration(seed in 0u64..1000) {
        let (mdp, _) = small_instance(seed);
        prop_assume!(mdp.deterministic_policy_count().unwrap() <= 4096);
        let behavior = random_policies(&mdp, 1, seed + 1)[0].clone();
        let dp = concentrability(&mdp, &behavior).unwrap();
        let brute = concentrability_brute_force(&mdp, &behavior).unwrap();
        prop_assert!(dp.c_conc >= 1.0 - 1e-12);
        prop_assert!((dp.c_conc - brute.c_conc).abs() <= 1e-10 * dp.c_conc.max(1.0));
    }

    #[test]
    fn skip_targets_are_linear_on_exact_instances(seed in 0u64..1000) {
        let (mdp, fm) = small_instance(seed);
        let (pols, _) = policy_sample(&mdp, 50, seed);
        let guess = build_true_guess(&mdp, &fm, &pols).unwrap();
        let behavior = Policy::uniform(&mdp);
        let params = SkipParams::new(0.3, fm.d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..fm.d).map(|_| rng.random_range(-2.0..4.0)).collect();
        let f: Vec<Vec<f64>> = (0..=mdp.horizon)
            .map(|k| (0..mdp.stage_sizes[k]).map(|s| if k == mdp.horizon { 0.0 } else { clipped_v(&theta, &fm, k, s) }).collect())
            .collect();
        for h in 0..mdp.horizon {
            let rep = check_skip_realizability(&mdp, &fm, &guess, &behavior, &f, h, &params).unwrap();
            prop_assert!(rep.sup_residual <= 1e-6, "stage {} residual {}", h, rep.sup_residual);
        }
    }
}

/// Expected skip targets by the backward recursion: continue with probability `omega`, else stop at `f`.
#[test]
fn skip_enumeration_matches_backward_recursion() {
    let (mdp, fm) = gen_linear_mdp(
        2,
        &uniform_stage_sizes(4, 3),
        2,
        RewardKind::DeterministicMean,
        5,
    )
    .unwrap();
    let (pols, _) = policy_sample(&mdp, 60, 5);
    let guess = build_true_guess(&mdp, &fm, &pols).unwrap();
    let behavior = random_policies(&mdp, 1, 3)[0].clone();
    let params = SkipParams::new(0.5, 2).unwrap();
    let f: Vec<Vec<f64>> = (0..=mdp.horizon)
        .map(|k| {
            (0..mdp.stage_sizes[k])
                .map(|s| {
                    if k == mdp.horizon {
                        0.0
                    } else {
                        0.3 * (s + k) as f64
                    }
                })
                .collect()
        })
        .collect();
    let h = 0;
    let rep = check_skip_realizability(&mdp, &fm, &guess, &behavior, &f, h, &params).unwrap();
    let mut u: Vec<f64> = vec![0.0; 1];
    for t in (h + 1..=mdp.horizon).rev() {
        u = (0..mdp.stage_sizes[t])
            .map(|s| {
                let w = qpilab_core::skipping::omega(&guess, &fm, t, s, &params);
                let cont: f64 = if t == mdp.horizon {
                    0.0
                } else {
                    (0..mdp.num_actions)
                        .map(|a| {
                            behavior.action_probs[t][s][a]
                                * (mdp.reward_means[t][s][a]
                                    + mdp.transitions[t][s][a]
                                        .iter()
                                        .zip(&u)
                                        .map(|(p, x)| p * x)
                                        .sum::<f64>())
                        })
                        .sum()
                };
                (1.0 - w) * f[t][s] + w * cont
            })
            .collect();
    }
    for a in 0..mdp.num_actions {
        let expect = mdp.reward_means[h][0][a]
            + mdp.transitions[h][0][a]
                .iter()
                .zip(&u)
                .map(|(p, x)| p * x)
                .sum::<f64>();
        assert!((rep.targets[0][a] - expect).abs() < 1e-12);
    }
}

#[test]
fn monte_carlo_state_frequencies_match_occupancy() {
    let (mdp, fm) = gen_linear_mdp(
        2,
        &uniform_stage_sizes(3, 3),
        2,
        RewardKind::BernoulliMean,
        11,
    )
    .unwrap();
    let pi = random_policies(&mdp, 1, 2)[0].clone();
    let n = 20_000;
    let ds = collect_dataset(&mdp, &fm, &pi, n, 4).unwrap();
    let nu = occupancy(&mdp, &pi).unwrap();
    for k in 0..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            for a in 0..mdp.num_actions {
                let hits = ds
                    .trajectories
                    .iter()
                    .filter(|t| t.steps[k].state == s && t.steps[k].action == a)
                    .count();
                let p = nu.nu[k][s][a];
                let sigma = (p * (1.0 - p) / n as f64).sqrt();
                assert!(
                    (hits as f64 / n as f64 - p).abs() <= 3.0 * sigma + 1e-3,
                    "stage {k} ({s},{a})"
                );
            }
        }
    }
    let mean_return: f64 = ds
        .trajectories
        .iter()
        .map(|t| t.steps.iter().map(|s| s.reward).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let v = evaluate_policy(&mdp, &pi).unwrap().start_value();
    let sd = (mdp.horizon as f64).sqrt() / (n as f64).sqrt();
    assert!((mean_return - v).abs() <= 3.0 * sd, "{mean_return} vs {v}");
}

#[test]
fn range_bound_holds_on_generated_instances() {
    for seed in 0..5 {
        let (mdp, fm) = small_instance(seed);
        let pols = random_policies(&mdp, 100, seed);
        let guess = build_true_guess(&mdp, &fm, &pols).unwrap();
        let rep = check_range_bound(&mdp, &fm, &guess, &pols).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }
}

#[test]
fn enumerated_policies_are_distinct() {
    let (mdp, _) = gen_linear_mdp(1, &[1, 2, 1], 2, RewardKind::DeterministicMean, 0).unwrap();
    let all: Vec<Policy> = deterministic_policies(&mdp).collect();
    assert_eq!(all.len(), 8);
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert_ne!(all[i], all[j]);
        }
    }
}

#[test]
fn true_guesses_build_on_every_small_instance() {
    for seed in 0..1000 {
        let (mdp, fm) = small_instance(seed);
        let (pols, _) = policy_sample(&mdp, 50, seed);
        if let Err(e) = build_true_guess(&mdp, &fm, &pols) {
            panic!("seed {seed}: {e}");
        }
    }
}
