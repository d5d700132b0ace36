mod common;

use common::mean_se;
use ndarray::{Array3, Array4};
use nip_core::eval::{
    evaluate, oracle_policy_callback, percentage_reward_gap, predicted_policy_callback, random_policy_callback,
    simulate_policy, EvalConfig, Policy,
};
use nip_core::model::{generate_instance, ActionVector, RmabInstance, StateVector};
use nip_core::net::{encode, IndexNetwork, NetConfig};
use nip_core::oracle::{extract_policy, solve_occupancy};
use nip_core::sweep::{heatmap_dat, run_sweep, sweep_csv, SweepConfig};
use nip_core::train::{train, TrainConfig};
use nip_core::transport::{sinkhorn_forward, solve_knapsack_exact, SampleMode, SinkhornOptions};
use nip_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

struct Fixed(Vec<usize>);

impl Policy for Fixed {
    fn act(&mut self, _s: &StateVector) -> nip_core::Result<ActionVector> {
        Ok(ActionVector(self.0.clone()))
    }
}

struct BreaksAt(usize, usize);

impl Policy for BreaksAt {
    fn act(&mut self, _s: &StateVector) -> nip_core::Result<ActionVector> {
        self.1 += 1;
        Ok(ActionVector(if self.1 > self.0 { vec![1, 1, 1] } else { vec![1, 0, 0] }))
    }
}

fn identity_instance() -> RmabInstance {
    let mut p = Array4::zeros((3, 2, 2, 2));
    for n in 0..3 {
        for s in 0..2 {
            for a in 0..2 {
                p[[n, s, a, s]] = 1.0;
            }
        }
    }
    let r = Array3::from_shape_fn((3, 2, 2), |(n, s, a)| (n + 2 * s + a) as f64);
    RmabInstance::new(p, r, vec![2, 1], 0).unwrap()
}

#[test]
fn identity_dynamics_give_constant_reward() {
    let inst = identity_instance();
    let s0 = StateVector(vec![0, 1, 1]);
    let out = simulate_policy(&inst, &mut Fixed(vec![1, 0, 0]), &s0, 6, &mut rng(0)).unwrap();
    assert_eq!(out.rewards, vec![1.0 + 3.0 + 4.0; 6]);
    assert!(simulate_policy(&inst, &mut Fixed(vec![1, 0, 0]), &s0, 0, &mut rng(0)).unwrap().rewards.is_empty());
}

#[test]
fn violation_aborts_with_timestep() {
    let inst = identity_instance();
    let err = simulate_policy(&inst, &mut BreaksAt(3, 0), &StateVector(vec![0, 0, 0]), 10, &mut rng(0)).unwrap_err();
    match err {
        Error::PolicyViolation { timestep, source } => {
            assert_eq!(timestep, 3);
            assert!(matches!(*source, Error::BudgetViolation { action: 1, used: 3, budget: 1 }));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn oracle_time_average_matches_unconstrained_bound() {
    let inst = generate_instance(3, 3, 2, &[1.0], 12).unwrap();
    let om = solve_occupancy(&inst).unwrap();
    let pi = extract_policy(&om);
    let mut policy = oracle_policy_callback(&pi, &inst, rng(1));
    let s0 = StateVector(vec![0, 1, 2]);
    let rewards = simulate_policy(&inst, &mut policy, &s0, 10_000, &mut rng(2)).unwrap().rewards;
    // batch means absorb the serial correlation of the chain
    let batches: Vec<f64> = rewards.chunks(200).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let (mean, se) = mean_se(&batches);
    assert!((mean - om.objective_value).abs() <= 2.0 * se.max(1e-3), "{mean} vs {} (se {se})", om.objective_value);
}

#[test]
fn oracle_actions_are_feasible_on_tight_budgets() {
    let inst = generate_instance(12, 4, 4, &[0.1, 0.1, 0.1], 3).unwrap();
    let pi = extract_policy(&solve_occupancy(&inst).unwrap());
    let mut policy = oracle_policy_callback(&pi, &inst, rng(4));
    let mut r = rng(5);
    for _ in 0..500 {
        let s = StateVector::sample_uniform(12, 4, &mut r);
        policy.act(&s).unwrap().check_budgets(&inst.budgets).unwrap();
    }
}

/// Hand-set weights: hidden units copy the state one-hot, and the output
/// layer scores each state's oracle action highest.
fn net_reproducing(inst: &RmabInstance, best: &[usize]) -> IndexNetwork {
    let (n, s, a) = (inst.n_arms(), inst.n_states(), inst.n_actions());
    let mut net = IndexNetwork::new(NetConfig { hidden: s, ..NetConfig::for_instance(inst, 0) });
    let d = n + s;
    let mut params = Vec::new();
    params.extend((0..s * d).map(|k| if k % d == n + k / d { 3.0 } else { 0.0 }));
    params.extend(vec![0.0; s]);
    params.extend((0..s * s).map(|k| if k % s == k / s { 3.0 } else { 0.0 }));
    params.extend(vec![0.0; s]);
    params.extend((0..a * s).map(|k| if best[k % s] == k / s { 1.0 } else { 0.0 }));
    params.extend(vec![0.0; a]);
    net.set_parameters(&params).unwrap();
    net
}

#[test]
fn predicted_policy_matches_one_hot_oracle() {
    // action-independent uniform dynamics; state 0 prefers action 1, state 1 prefers action 0
    let transitions = Array4::from_elem((4, 2, 2, 2), 0.5);
    let rewards = Array3::from_shape_fn((4, 2, 2), |(_, s, a)| if s != a { 1.0 } else { 0.2 });
    let inst = RmabInstance::new(transitions, rewards, vec![2, 2], 0).unwrap();
    let pi = extract_policy(&solve_occupancy(&inst).unwrap());
    for arm in 0..4 {
        assert!((pi.pi[[arm, 0, 1]] - 1.0).abs() < 1e-9 && (pi.pi[[arm, 1, 0]] - 1.0).abs() < 1e-9);
    }
    let net = net_reproducing(&inst, &[1, 0]);
    let mut oracle = oracle_policy_callback(&pi, &inst, rng(0));
    let mut predicted = predicted_policy_callback(&net, &inst, SampleMode::Round, 0.1, rng(0));
    let mut r = rng(9);
    let mut compared = 0;
    for _ in 0..100 {
        let s = StateVector::sample_uniform(4, 2, &mut r);
        let p = predicted.act(&s).unwrap();
        assert_eq!(p, predicted.act(&s).unwrap());
        let o = oracle.act(&s).unwrap();
        if s.0.iter().filter(|&&x| x == 0).count() == 2 {
            assert_eq!(p, o);
            compared += 1;
        }
    }
    assert!(compared > 10);
}

#[test]
fn exact_rounding_dominates_sampling() {
    let inst = generate_instance(10, 4, 4, &[0.2, 0.1, 0.1], 2).unwrap();
    let mut r = rng(10);
    for trial in 0..100 {
        let net = IndexNetwork::new(NetConfig::for_instance(&inst, trial));
        let s = StateVector::sample_uniform(10, 4, &mut r);
        let (index, _) = net.forward(&encode(&inst, &s).unwrap()).unwrap();
        let exact = solve_knapsack_exact(index.view(), &inst.budgets).unwrap().objective;
        let plan = sinkhorn_forward(index.view(), &inst.budgets, &SinkhornOptions::with_epsilon(0.1)).unwrap();
        let expected_sample: f64 = (&plan.gamma * &index).sum();
        let mut sampler = predicted_policy_callback(&net, &inst, SampleMode::Sample, 0.1, rng(trial));
        let drawn = sampler.act(&s).unwrap();
        drawn.check_budgets(&inst.budgets).unwrap();
        assert!(exact >= expected_sample - 1e-9);
    }
}

#[test]
fn random_baselines() {
    let inst = generate_instance(10, 3, 4, &[0.2, 0.1, 0.1], 1).unwrap();
    let mut free = random_policy_callback(&inst, false, rng(3));
    let mut counts = [0usize; 4];
    let s = StateVector(vec![0; 10]);
    for _ in 0..1000 {
        for a in free.act(&s).unwrap().0 {
            counts[a] += 1;
        }
    }
    let n: f64 = 10_000.0;
    let sigma = (0.25 * 0.75 / n).sqrt();
    for c in counts {
        assert!((c as f64 / n - 0.25).abs() < 3.0 * sigma);
    }
    let mut budgeted = random_policy_callback(&inst, true, rng(3));
    for _ in 0..200 {
        budgeted.act(&s).unwrap().check_budgets(&inst.budgets).unwrap();
    }
    let draw = |respect: bool| {
        let mut p = random_policy_callback(&inst, respect, rng(77));
        (0..5).map(|_| p.act(&s).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(true), draw(true));
    assert_eq!(draw(false), draw(false));
}

#[test]
fn gap_closed_forms() {
    let oracle = vec![1.0, 3.0, 6.0, 10.0];
    assert_eq!(percentage_reward_gap(&oracle, &oracle).unwrap(), 0.0);
    let scaled: Vec<f64> = oracle.iter().map(|x| 0.95 * x).collect();
    assert!((percentage_reward_gap(&oracle, &scaled).unwrap() - 5.0).abs() < 1e-12);
    let prefixed = vec![0.0, 0.0, 2.0, 4.0];
    let pred = vec![0.0, 0.0, 1.0, 4.0];
    assert!((percentage_reward_gap(&prefixed, &pred).unwrap() - 25.0).abs() < 1e-12);
    assert!(matches!(percentage_reward_gap(&[0.0, 0.0], &[0.0, 0.0]), Err(Error::UndefinedGap)));
    assert!(percentage_reward_gap(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn report_is_deterministic_and_series_are_cumulative() {
    let inst = generate_instance(8, 4, 3, &[0.25, 0.125], 5).unwrap();
    let om = solve_occupancy(&inst).unwrap();
    let net = IndexNetwork::new(NetConfig::for_instance(&inst, 5));
    let cfg = EvalConfig { horizon: 20, batches: 6, seed: 3, timing: false, ..Default::default() };
    let a = evaluate(&inst, &om, &net, &cfg).unwrap();
    let b = evaluate(&inst, &om, &net, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.series_csv(), b.series_csv());
    for series in [&a.oracle, &a.predicted, &a.random] {
        assert_eq!(series.len(), 20);
        assert!(series.windows(2).all(|w| w[1] >= w[0]));
    }
    assert!(a.summary_csv().starts_with("N,epsilon,seed,gap_pct,oracle_bound,runtime_s"));

    let other = generate_instance(9, 4, 3, &[0.25, 0.125], 5).unwrap();
    assert!(matches!(evaluate(&other, &solve_occupancy(&other).unwrap(), &net, &cfg), Err(Error::Shape(_))));
}

#[test]
fn feasible_policies_stay_below_the_lp_bound() {
    for seed in 0..10 {
        let inst = generate_instance(4, 3, 3, &[0.25, 0.25], 100 + seed).unwrap();
        let om = solve_occupancy(&inst).unwrap();
        let pi = extract_policy(&om);
        let net = IndexNetwork::new(NetConfig { hidden: 8, ..NetConfig::for_instance(&inst, seed) });
        let s0 = StateVector(vec![0, 1, 2, 0]);
        let policies: Vec<Box<dyn Policy>> = vec![
            Box::new(oracle_policy_callback(&pi, &inst, rng(seed))),
            Box::new(predicted_policy_callback(&net, &inst, SampleMode::Round, 0.1, rng(seed))),
            Box::new(random_policy_callback(&inst, true, rng(seed))),
        ];
        for mut p in policies {
            let rewards = simulate_policy(&inst, p.as_mut(), &s0, 4000, &mut rng(seed + 50)).unwrap().rewards;
            let batches: Vec<f64> = rewards.chunks(200).map(|c| c.iter().sum::<f64>() / 200.0).collect();
            let (mean, se) = mean_se(&batches);
            assert!(mean <= om.objective_value + 3.0 * se, "seed {seed}: {mean} > {}", om.objective_value);
        }
    }
}

fn small_sweep(arms: Vec<usize>, epsilons: Vec<f64>) -> SweepConfig {
    SweepConfig {
        arms,
        epsilons,
        seeds: vec![2],
        n_states: 3,
        n_actions: 3,
        budget_fractions: vec![0.25, 0.25],
        hidden: 8,
        train: TrainConfig { epochs: 3, batch_size: 4, learning_rate: 0.001, timing: false, ..Default::default() },
        eval: EvalConfig { horizon: 5, batches: 3, timing: false, ..Default::default() },
        jobs: 2,
    }
}

#[test]
fn single_cell_sweep_is_train_then_evaluate() {
    let cfg = small_sweep(vec![4], vec![0.1]);
    let cells = run_sweep(&cfg).unwrap();
    assert_eq!(cells.len(), 1);

    let inst = generate_instance(4, 3, 3, &[0.25, 0.25], 2).unwrap();
    let om = solve_occupancy(&inst).unwrap();
    let mut net = IndexNetwork::new(NetConfig { hidden: 8, ..NetConfig::for_instance(&inst, 2) });
    train(&inst, Some(&om), &mut net, &TrainConfig { seed: 2, ..cfg.train.clone() }).unwrap();
    let direct = evaluate(&inst, &om, &net, &EvalConfig { seed: 2, epsilon: 0.1, ..cfg.eval }).unwrap();
    assert_eq!(cells[0].outcome.as_ref().unwrap(), &direct);
}

#[test]
fn sweep_grid_shape_and_failure_isolation() {
    let cells = run_sweep(&small_sweep(vec![4, 6], vec![0.1, 0.5])).unwrap();
    assert_eq!(cells.len(), 4);
    assert_eq!(sweep_csv(&cells).lines().count(), 5);
    assert_eq!(heatmap_dat(&cells).lines().count(), 5);

    let cells = run_sweep(&small_sweep(vec![0, 4], vec![0.1])).unwrap();
    assert!(cells[0].outcome.is_err());
    assert!(cells[1].outcome.is_ok());
    assert!(sweep_csv(&cells).contains("error"));
}

#[test]
fn sampled_mode_is_always_feasible() {
    let inst = generate_instance(20, 5, 4, &[0.2, 0.1, 0.1], 9).unwrap();
    let net = IndexNetwork::new(NetConfig::for_instance(&inst, 9));
    let mut p = predicted_policy_callback(&net, &inst, SampleMode::Sample, 0.05, rng(1));
    let mut r = rng(2);
    for _ in 0..100 {
        let s = StateVector::sample_uniform(20, 5, &mut r);
        p.act(&s).unwrap().check_budgets(&inst.budgets).unwrap();
    }
}
