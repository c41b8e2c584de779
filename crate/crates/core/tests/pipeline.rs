//! End-to-end runs through the public API on small synthetic instances.

use nalgebra::DVector;
use proptest::prelude::*;

use qadp::adp::{backward_pass, lower_bound, Myopic, TrainedPolicy, TrainingConfig};
use qadp::hydrology::{clean_negatives, estimate_model, ClusterMethod, EmpiricalSampler, HydroMarkovModel};
use qadp::model::{build_system, dynamics, stage_cost, ReservoirSystem, StorageState};
use qadp::sim::{compare_policies, monte_carlo, monte_carlo_bound, replay_historical, run_policy, sample_scenario, MonteCarloSetup};
use qadp::synthetic::{cascade_config, half_full, InflowGenerator};

fn instance(horizon: usize, states: usize) -> (ReservoirSystem, HydroMarkovModel, EmpiricalSampler) {
    let (ds, _) = clean_negatives(&InflowGenerator::default().generate(1960, 25, 3));
    let (model, _) = estimate_model(&ds, ClusterMethod::Pca, states, 3).unwrap();
    let sys = build_system(&cascade_config(horizon, states)).unwrap();
    let sampler = EmpiricalSampler::new(&model, &sys).unwrap();
    (sys, model, sampler)
}

fn train(sys: &ReservoirSystem, model: &HydroMarkovModel, sampler: &EmpiricalSampler, workers: usize) -> TrainedPolicy {
    let cfg = TrainingConfig {
        grid_steps: vec![4, 2, 2, 2],
        noise_draws: 2,
        ridge: None,
        seed: 8,
        terminal: None,
    };
    backward_pass(sys, &model.transition, sampler, &cfg, Some(workers)).unwrap()
}

#[test]
fn model_file_round_trip_keeps_the_sampler() {
    let (sys, model, sampler) = instance(6, 3);
    let back = HydroMarkovModel::from_json(&model.to_json()).unwrap();
    assert_eq!(back.transition, model.transition);
    let again = EmpiricalSampler::new(&back, &sys).unwrap();
    for week in [0, 17, 51] {
        for e in 0..3 {
            assert_eq!(again.pool(week, e), sampler.pool(week, e));
        }
    }
}

#[test]
fn training_is_independent_of_workers() {
    let (sys, model, sampler) = instance(5, 2);
    let a = train(&sys, &model, &sampler, 1);
    let b = train(&sys, &model, &sampler, 3);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn monte_carlo_orders_bound_below_policies() {
    let (sys, model, sampler) = instance(12, 3);
    let policy = train(&sys, &model, &sampler, 1);
    let x0 = StorageState::new(half_full(&sys.to_config()));
    let setup = MonteCarloSetup {
        sys: &sys,
        transition: &model.transition,
        sampler: &sampler,
        x0: &x0,
        e0: 1,
        trials: 20,
        seed: 4,
        workers: None,
    };
    let trained = monte_carlo(&setup, &policy, "trained").unwrap();
    let myopic = monte_carlo(&setup, &Myopic, "myopic").unwrap();
    let bound = monte_carlo_bound(&setup).unwrap();
    for i in 0..20 {
        let b = bound.per_trial_totals[i];
        assert!(b <= trained.per_trial_totals[i] + 1e-6, "trial {i}");
        assert!(b <= myopic.per_trial_totals[i] + 1e-6, "trial {i}");
    }
    let rows = compare_policies(&[trained.clone(), bound]).unwrap();
    assert!(rows.iter().any(|r| r.policy == "trained" && r.baseline == "bound" && r.delta >= -1e-6));
    // same seed, same report
    assert_eq!(monte_carlo(&setup, &policy, "trained").unwrap(), trained);
}

#[test]
fn historical_replay_covers_every_complete_year() {
    let (sys, model, _) = instance(52, 2);
    let x0 = StorageState::new(half_full(&sys.to_config()));
    let (report, skipped) = replay_historical(&sys, &Myopic, &model, &x0, None, "myopic", None).unwrap();
    assert_eq!(report.trials + skipped.len(), 25);
    assert!(skipped.is_empty());
    assert_eq!(report.trial_ids.first(), Some(&1960));
    let (two, _) = replay_historical(&sys, &Myopic, &model, &x0, Some((1970, 1971)), "myopic", None).unwrap();
    assert_eq!(two.trial_ids, vec![1970, 1971]);
    assert_eq!(two.per_trial_totals[0], report.per_trial_totals[10]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rollouts_replay_and_stay_above_the_bound(seed in 0u64..1000, level in 0.0f64..1.0) {
        let (sys, model, sampler) = instance(8, 2);
        let x0 = StorageState::new(DVector::from_iterator(4, sys.capacity.iter().map(|c| c * level)));
        let sc = sample_scenario(8, &model.transition, &sampler, 0, seed, 0).unwrap();
        let traj = run_policy(&sys, &Myopic, &sc, &x0).unwrap();
        let mut x = x0.clone();
        let mut total = 0.0;
        for (k, (u, w)) in traj.controls.iter().zip(&sc.inflows).enumerate() {
            x = dynamics(&sys, &x, u, w).unwrap();
            total += stage_cost(&sys, k, u);
        }
        prop_assert!((total - traj.total()).abs() <= 1e-9 * (1.0 + total.abs()));
        let (_, lb) = lower_bound(&sys, &x0, &sc.inflows).unwrap();
        prop_assert!(lb <= traj.total() + 1e-6);
    }
}
