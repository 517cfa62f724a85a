use nalgebra::SymmetricEigen;
use proptest::prelude::*;
use qpilab_core::design::{build_true_guess, guess_grid, Guess};
use qpilab_core::envs::{
    fit_psi, gen_linear_mdp, max_residual, policy_sample, random_policies, true_range,
    uniform_stage_sizes, FeatureMap,
};
use qpilab_core::learner::{
    anchor_targets, build_confidence_sets, clipped_q, clipped_v, ellipsoid_distance, lstsq_anchor,
    solve, stage_covariance, tightness, LearnerConfig, MemberKind, SolveStatus,
};
use qpilab_core::mdp::{
    collect_dataset, evaluate_policy, Dataset, Policy, RewardKind, StagedMdp, Step, Trajectory,
};

fn instance(seed: u64) -> (StagedMdp, FeatureMap, Guess) {
    let (mdp, fm) = gen_linear_mdp(
        2,
        &uniform_stage_sizes(3, 3),
        2,
        RewardKind::DeterministicMean,
        seed,
    )
    .unwrap();
    let (pols, _) = policy_sample(&mdp, 50, seed);
    let guess = build_true_guess(&mdp, &fm, &pols).unwrap();
    (mdp, fm, guess)
}

/// Hand-built dataset where every step takes action 0 with feature `feature`.
fn constant_dataset(n: usize, horizon: usize, feature: &[f64], reward: f64) -> Dataset {
    let traj = Trajectory {
        steps: (0..=horizon)
            .map(|k| Step {
                state: 0,
                action: 0,
                reward: if k < horizon { reward } else { 0.0 },
            })
            .collect(),
        features: vec![vec![feature.to_vec(), feature.to_vec()]; horizon + 1],
    };
    Dataset {
        trajectories: vec![traj; n],
    }
}

#[test]
fn clipped_estimates_stay_in_range() {
    let (mdp, fm, _) = instance(1);
    let h = mdp.horizon as f64;
    let zero = vec![0.0; fm.d];
    // features lie on the simplex, so a constant parameter gives a constant inner product
    let big = vec![h + 3.0; fm.d];
    for k in 0..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            assert_eq!(clipped_v(&zero, &fm, k, s), 0.0);
            assert!((clipped_v(&big, &fm, k, s) - h).abs() < 1e-12);
            for a in 0..mdp.num_actions {
                assert_eq!(clipped_q(&zero, &fm, k, s, a), 0.0);
                assert!((clipped_q(&big, &fm, k, s, a) - h).abs() < 1e-12);
            }
        }
    }
    let mid = vec![0.7, 1.3];
    for k in 0..mdp.horizon {
        for s in 0..mdp.stage_sizes[k] {
            let best = (0..mdp.num_actions)
                .map(|a| clipped_q(&mid, &fm, k, s, a))
                .fold(f64::MIN, f64::max);
            assert!((clipped_v(&mid, &fm, k, s) - best).abs() < 1e-12);
        }
    }
}

#[test]
fn covariance_of_zero_features_is_ridge() {
    let ds = constant_dataset(7, 3, &[0.0, 0.0], 0.5);
    let cov = stage_covariance(&ds, 1, 2.5).unwrap();
    assert_eq!(cov.matrix, nalgebra::DMatrix::identity(2, 2) * 2.5);
}

#[test]
fn covariance_of_one_unit_feature() {
    let ds = constant_dataset(1, 2, &[1.0, 0.0], 0.0);
    let cov = stage_covariance(&ds, 0, 1.0).unwrap();
    let expect = nalgebra::DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]);
    assert!((cov.matrix - expect).abs().max() < 1e-15);
}

#[test]
fn anchor_of_zero_targets_is_zero() {
    let (_, _, guess) = instance(2);
    let ds = constant_dataset(20, 3, &[0.4, 0.6], 0.0);
    let config = LearnerConfig::default();
    let tail = vec![vec![0.0; 2]; 3];
    let a = lstsq_anchor(&ds, 0, &guess, &tail, &config).unwrap();
    assert!(a.iter().all(|&x| x == 0.0));
}

#[test]
fn last_stage_targets_are_rewards() {
    let (mdp, fm, guess) = instance(3);
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 50, 9).unwrap();
    let params = LearnerConfig::default().skip_params(fm.d).unwrap();
    let h = mdp.horizon - 1;
    let targets = anchor_targets(&ds, h, &guess, &[vec![0.0; fm.d]], &params);
    for (t, y) in ds.trajectories.iter().zip(&targets) {
        assert!((y - t.steps[h].reward).abs() < 1e-15);
    }
}

#[test]
fn tightness_of_zero_and_saturated_parameter_is_horizon() {
    let (mdp, fm, _) = instance(4);
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 30, 1).unwrap();
    let h = mdp.horizon as f64;
    let thetas = vec![vec![0.0; fm.d], vec![h + 1.0; fm.d]];
    for k in 0..mdp.horizon {
        assert!((tightness(&ds, k, &thetas).unwrap() - h).abs() < 1e-12);
    }
}

#[test]
fn single_guess_with_loose_threshold_is_chosen() {
    let (mdp, fm, guess) = instance(5);
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 200, 2).unwrap();
    let config = LearnerConfig {
        eps_bar: 1e9,
        ..LearnerConfig::default()
    };
    let out = solve(&ds, std::slice::from_ref(&guess), &config, &mdp, &fm).unwrap();
    assert_eq!(out.status, SolveStatus::Solved);
    assert_eq!(out.chosen_guess, Some(0));
    assert_eq!(out.theta.len(), mdp.horizon + 1);
    assert!(out.policy.is_some());
}

#[test]
fn tiny_threshold_rejects_every_guess() {
    let (mdp, fm, guess) = instance(6);
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 200, 2).unwrap();
    let config = LearnerConfig {
        eps_bar: 1e-12,
        ..LearnerConfig::default()
    };
    let guesses = guess_grid(&guess, 0.3, 4, 1);
    let out = solve(&ds, &guesses, &config, &mdp, &fm).unwrap();
    assert_eq!(out.status, SolveStatus::AllGuessesRejected);
    assert!(out.theta.is_empty() && out.policy.is_none());
    assert_eq!(out.feasible_count(), 0);
}

#[test]
fn zero_reward_gives_zero_optimistic_value() {
    let (mut mdp, fm, guess) = instance(7);
    for stage in mdp.reward_means.iter_mut() {
        for state in stage.iter_mut() {
            state.iter_mut().for_each(|r| *r = 0.0);
        }
    }
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 100, 3).unwrap();
    let config = LearnerConfig {
        beta: 1e-9,
        eps_bar: 1e9,
        ..LearnerConfig::default()
    };
    let out = solve(&ds, &[guess], &config, &mdp, &fm).unwrap();
    assert!(out.optimistic_value.unwrap().abs() < 1e-6);
}

#[test]
fn anchors_are_members_of_their_own_sets() {
    let (mdp, fm, guess) = instance(8);
    let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 150, 4).unwrap();
    let config = LearnerConfig::default();
    let sets = build_confidence_sets(&ds, &guess, &config).unwrap();
    for h in 0..mdp.horizon {
        let cov = stage_covariance(&ds, h, config.lambda).unwrap();
        let st = &sets.stages[h];
        for (m, kind) in st.members.iter().zip(&st.kinds) {
            let dist = ellipsoid_distance(m, &st.anchors, &cov);
            match kind {
                MemberKind::Anchor => assert_eq!(dist, 0.0),
                _ => assert!(dist <= config.beta),
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn covariance_eigenvalues_dominate_ridge(seed in 0u64..500, lambda in 0.1f64..5.0) {
        let (mdp, fm, _) = instance(seed);
        let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 40, seed).unwrap();
        for h in 0..mdp.horizon {
            let cov = stage_covariance(&ds, h, lambda).unwrap();
            let eig = SymmetricEigen::new(cov.matrix.clone()).eigenvalues;
            prop_assert!(eig.min() >= lambda - 1e-9);
        }
    }

    #[test]
    fn optimistic_value_is_the_best_start_member(seed in 0u64..500) {
        let (mdp, fm, guess) = instance(seed);
        let ds = collect_dataset(&mdp, &fm, &Policy::uniform(&mdp), 120, seed).unwrap();
        let config = LearnerConfig { eps_bar: 1e9, ..LearnerConfig::default() };
        let guesses = guess_grid(&guess, 0.3, 3, seed);
        let out = solve(&ds, &guesses, &config, &mdp, &fm).unwrap();
        let gi = out.chosen_guess.unwrap();
        let value = out.optimistic_value.unwrap();
        prop_assert!((clipped_v(&out.theta[0], &fm, 0, 0) - value).abs() <= 1e-12);
        let sets = build_confidence_sets(&ds, &guesses[gi], &config).unwrap();
        for m in sets.members(0) {
            prop_assert!(clipped_v(m, &fm, 0, 0) <= value + 1e-12);
        }
        for g in out.guesses.iter().filter(|g| g.feasible) {
            prop_assert!(g.optimistic_value.unwrap() <= value + 1e-12);
        }
    }

    #[test]
    fn action_gaps_are_bounded_by_the_range(seed in 0u64..500) {
        let (mdp, fm, _) = instance(seed);
        let pols = random_policies(&mdp, 12, seed);
        let eta = max_residual(&mdp, &fm, &pols).unwrap();
        for pi in &pols {
            prop_assert!(fit_psi(&mdp, &fm, pi).is_ok());
            let vt = evaluate_policy(&mdp, pi).unwrap();
            for k in 1..mdp.horizon {
                for s in 0..mdp.stage_sizes[k] {
                    let range = true_range(&mdp, &fm, &pols, k, s).unwrap();
                    for a in 0..mdp.num_actions {
                        let gap = (vt.v[k][s] - vt.q[k][s][a]).abs();
                        prop_assert!(gap <= range + 2.0 * eta + 1e-9);
                    }
                }
            }
        }
    }
}
