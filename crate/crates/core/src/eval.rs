//! Policy simulation and the percentage reward gap.
//!
//! Every policy is simulated from the same initial states with the same
//! dynamics stream per batch, so the gap compares policies under common
//! random numbers.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{step_ignoring_budgets, ActionVector, RmabInstance, StateVector};
use crate::net::{encode, IndexNetwork};
use crate::oracle::{extract_policy, OccupancyMeasure, OraclePolicy};
use crate::seeding::stream;
use crate::transport::{
    plan_to_actions, repair_to_budgets, sinkhorn_forward, solve_knapsack_exact, SampleMode, SinkhornOptions,
};

const TAG_INIT: u64 = 0x1417;
const TAG_DYNAMICS: u64 = 0xd1a;
const TAG_POLICY: u64 = 0x9011;

/// Maps the current joint state to an action vector.
pub trait Policy {
    fn act(&mut self, s: &StateVector) -> Result<ActionVector>;

    /// Whether [`simulate_policy`] should reject budget-infeasible actions.
    fn enforces_budgets(&self) -> bool {
        true
    }
}

/// Per-arm draw from the oracle policy, with overflow arms demoted to passive.
pub struct OracleCallback<'a> {
    pi: &'a OraclePolicy,
    budgets: &'a [usize],
    rng: ChaCha8Rng,
}

pub fn oracle_policy_callback<'a>(pi: &'a OraclePolicy, inst: &'a RmabInstance, rng: ChaCha8Rng) -> OracleCallback<'a> {
    OracleCallback { pi, budgets: &inst.budgets, rng }
}

impl Policy for OracleCallback<'_> {
    fn act(&mut self, s: &StateVector) -> Result<ActionVector> {
        let (n, _, a) = self.pi.pi.dim();
        let mut probs = Array2::zeros((n, a));
        let mut actions = Vec::with_capacity(n);
        for (arm, &state) in s.0.iter().enumerate() {
            let row = self.pi.pi.slice(ndarray::s![arm, state, ..]);
            probs.row_mut(arm).assign(&row);
            actions.push(crate::model::sample_categorical(row.iter().copied(), a, &mut self.rng));
        }
        repair_to_budgets(&mut actions, probs.view(), self.budgets);
        Ok(ActionVector(actions))
    }
}

/// Network indices followed by the exact assignment (`Round`) or by a
/// Sinkhorn plan and per-arm sampling (`Sample`).
pub struct PredictedCallback<'a> {
    net: &'a IndexNetwork,
    inst: &'a RmabInstance,
    mode: SampleMode,
    sinkhorn: SinkhornOptions,
    rng: ChaCha8Rng,
}

pub fn predicted_policy_callback<'a>(
    net: &'a IndexNetwork,
    inst: &'a RmabInstance,
    mode: SampleMode,
    epsilon: f64,
    rng: ChaCha8Rng,
) -> PredictedCallback<'a> {
    let sinkhorn = SinkhornOptions { record_tape: false, ..SinkhornOptions::with_epsilon(epsilon) };
    PredictedCallback { net, inst, mode, sinkhorn, rng }
}

impl Policy for PredictedCallback<'_> {
    fn act(&mut self, s: &StateVector) -> Result<ActionVector> {
        let (index, _) = self.net.forward(&encode(self.inst, s)?)?;
        match self.mode {
            SampleMode::Round => Ok(solve_knapsack_exact(index.view(), &self.inst.budgets)?.assignment),
            SampleMode::Sample => {
                let plan = sinkhorn_forward(index.view(), &self.inst.budgets, &self.sinkhorn)?;
                plan_to_actions(&plan, SampleMode::Sample, &mut self.rng)
            }
        }
    }
}

/// Uniform baseline. With `respect_budgets` the assignment is the exact
/// solution for an i.i.d. uniform index; without it every arm draws its
/// action uniformly and budgets are ignored.
pub struct RandomCallback<'a> {
    inst: &'a RmabInstance,
    respect_budgets: bool,
    rng: ChaCha8Rng,
}

pub fn random_policy_callback(inst: &RmabInstance, respect_budgets: bool, rng: ChaCha8Rng) -> RandomCallback<'_> {
    RandomCallback { inst, respect_budgets, rng }
}

impl Policy for RandomCallback<'_> {
    fn act(&mut self, _s: &StateVector) -> Result<ActionVector> {
        let (n, a) = (self.inst.n_arms(), self.inst.n_actions());
        if self.respect_budgets {
            let index = Array2::from_shape_fn((n, a), |_| self.rng.random::<f64>());
            Ok(solve_knapsack_exact(index.view(), &self.inst.budgets)?.assignment)
        } else {
            Ok(ActionVector((0..n).map(|_| self.rng.random_range(0..a)).collect()))
        }
    }

    fn enforces_budgets(&self) -> bool {
        self.respect_budgets
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Total reward collected at each timestep.
    pub rewards: Vec<f64>,
    /// Timesteps whose actions broke a budget (only possible for policies
    /// that do not enforce budgets).
    pub violations: usize,
}

/// Runs `policy` for `horizon` steps from `s0`.
pub fn simulate_policy<R: Rng + ?Sized>(
    inst: &RmabInstance,
    policy: &mut dyn Policy,
    s0: &StateVector,
    horizon: usize,
    rng: &mut R,
) -> Result<Rollout> {
    inst.check_states(s0)?;
    let mut s = s0.clone();
    let mut rewards = Vec::with_capacity(horizon);
    let mut violations = 0;
    for t in 0..horizon {
        let acts = policy.act(&s)?;
        if let Err(e) = acts.check_budgets(&inst.budgets) {
            if policy.enforces_budgets() {
                return Err(Error::PolicyViolation { timestep: t, source: Box::new(e) });
            }
            violations += 1;
        }
        let (next, r) = step_ignoring_budgets(inst, &s, &acts, rng)?;
        rewards.push(r.iter().sum());
        s = next;
    }
    Ok(Rollout { rewards, violations })
}

/// `mean_t (R_oracle(t) - R_pred(t)) / R_oracle(t) * 100` over cumulative
/// series, skipping timesteps where the oracle total is still zero.
pub fn percentage_reward_gap(oracle: &[f64], predicted: &[f64]) -> Result<f64> {
    if oracle.len() != predicted.len() {
        return Err(Error::Shape(format!("series lengths {} and {}", oracle.len(), predicted.len())));
    }
    let terms: Vec<f64> = oracle
        .iter()
        .zip(predicted)
        .filter(|(&o, _)| o != 0.0)
        .map(|(&o, &p)| (o - p) / o * 100.0)
        .collect();
    if terms.is_empty() {
        return Err(Error::UndefinedGap);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

pub fn cumulative(series: &[f64]) -> Vec<f64> {
    series
        .iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub horizon: usize,
    pub batches: usize,
    pub seed: u64,
    pub mode: SampleMode,
    /// Regularization used by `SampleMode::Sample`.
    pub epsilon: f64,
    pub include_unconstrained: bool,
    /// Record wall-clock runtime; when off, `runtime_s` is reported as 0.
    pub timing: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizon: 50,
            batches: 50,
            seed: 0,
            mode: SampleMode::Round,
            epsilon: 0.1,
            include_unconstrained: true,
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_arms: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub horizon: usize,
    pub batches: usize,
    /// Batch-mean cumulative rewards.
    pub oracle: Vec<f64>,
    pub predicted: Vec<f64>,
    pub random: Vec<f64>,
    pub random_unconstrained: Option<Vec<f64>>,
    pub gap_pct: f64,
    pub random_gap_pct: f64,
    pub unconstrained_gap_pct: Option<f64>,
    /// Steps at which the unconstrained baseline broke a budget.
    pub unconstrained_violations: usize,
    /// LP optimum: long-run average reward per step.
    pub oracle_bound: f64,
    pub runtime_s: f64,
}

pub const SUMMARY_HEADER: &str =
    "N,epsilon,seed,gap_pct,oracle_bound,runtime_s,random_gap_pct,unconstrained_random_gap_pct,oracle_mean_reward,predicted_mean_reward";

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl EvalReport {
    pub fn series_csv(&self) -> String {
        let mut out = String::from("t,oracle,predicted,random_budgeted,random_unconstrained\n");
        for t in 0..self.horizon {
            let unc = self.random_unconstrained.as_ref().map(|r| r[t]);
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                t + 1,
                self.oracle[t],
                self.predicted[t],
                self.random[t],
                opt(unc)
            );
        }
        out
    }

    /// Whitespace-delimited copy of the series for gnuplot.
    pub fn series_dat(&self) -> String {
        let mut out = String::from("# t oracle predicted random_budgeted\n");
        for t in 0..self.horizon {
            let _ = writeln!(out, "{} {} {} {}", t + 1, self.oracle[t], self.predicted[t], self.random[t]);
        }
        out
    }

    pub fn mean_step_reward(series: &[f64]) -> f64 {
        series.last().map_or(0.0, |&total| total / series.len() as f64)
    }

    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.n_arms,
            self.epsilon,
            self.seed,
            self.gap_pct,
            self.oracle_bound,
            self.runtime_s,
            self.random_gap_pct,
            opt(self.unconstrained_gap_pct),
            Self::mean_step_reward(&self.oracle),
            Self::mean_step_reward(&self.predicted),
        )
    }

    pub fn summary_csv(&self) -> String {
        format!("{SUMMARY_HEADER}\n{}\n", self.summary_row())
    }
}

fn batch_mean_cumulative(runs: &[Vec<f64>], horizon: usize) -> Vec<f64> {
    let mut mean = vec![0.0; horizon];
    for run in runs {
        for (m, r) in mean.iter_mut().zip(run) {
            *m += r;
        }
    }
    let k = runs.len().max(1) as f64;
    cumulative(&mean.iter().map(|m| m / k).collect::<Vec<_>>())
}

struct BatchResult {
    oracle: Vec<f64>,
    predicted: Vec<f64>,
    random: Vec<f64>,
    unconstrained: Option<Rollout>,
}

fn run_batch(
    inst: &RmabInstance,
    pi: &OraclePolicy,
    net: &IndexNetwork,
    cfg: &EvalConfig,
    batch: u64,
) -> Result<BatchResult> {
    let s0 = StateVector::sample_uniform(inst.n_arms(), inst.n_states(), &mut stream(cfg.seed, &[TAG_INIT, batch]));
    let dynamics = || stream(cfg.seed, &[TAG_DYNAMICS, batch]);
    let policy_rng = |which: u64| stream(cfg.seed, &[TAG_POLICY, which, batch]);
    let k = cfg.horizon;

    let mut oracle = oracle_policy_callback(pi, inst, policy_rng(0));
    let oracle = simulate_policy(inst, &mut oracle, &s0, k, &mut dynamics())?.rewards;
    let mut predicted = predicted_policy_callback(net, inst, cfg.mode, cfg.epsilon, policy_rng(1));
    let predicted = simulate_policy(inst, &mut predicted, &s0, k, &mut dynamics())?.rewards;
    let mut random = random_policy_callback(inst, true, policy_rng(2));
    let random = simulate_policy(inst, &mut random, &s0, k, &mut dynamics())?.rewards;
    let unconstrained = if cfg.include_unconstrained {
        let mut policy = random_policy_callback(inst, false, policy_rng(3));
        Some(simulate_policy(inst, &mut policy, &s0, k, &mut dynamics())?)
    } else {
        None
    };
    Ok(BatchResult { oracle, predicted, random, unconstrained })
}

/// Simulates oracle, predicted and random policies over `cfg.batches`
/// independent initial states and summarizes the reward gaps.
pub fn evaluate(inst: &RmabInstance, om: &OccupancyMeasure, net: &IndexNetwork, cfg: &EvalConfig) -> Result<EvalReport> {
    if net.config.input_width != inst.n_arms() + inst.n_states() || net.config.n_actions != inst.n_actions() {
        return Err(Error::Shape(format!(
            "network expects width {} and {} actions; instance has N+S = {} and A = {}",
            net.config.input_width,
            net.config.n_actions,
            inst.n_arms() + inst.n_states(),
            inst.n_actions()
        )));
    }
    let start = Instant::now();
    let pi = extract_policy(om);
    let batches: Vec<BatchResult> = (0..cfg.batches as u64)
        .into_par_iter()
        .map(|b| run_batch(inst, &pi, net, cfg, b))
        .collect::<Result<_>>()?;

    let k = cfg.horizon;
    let collect = |f: fn(&BatchResult) -> &Vec<f64>| batch_mean_cumulative(&batches.iter().map(|b| f(b).clone()).collect::<Vec<_>>(), k);
    let oracle = collect(|b| &b.oracle);
    let predicted = collect(|b| &b.predicted);
    let random = collect(|b| &b.random);
    let random_unconstrained = cfg.include_unconstrained.then(|| {
        let runs: Vec<Vec<f64>> = batches.iter().filter_map(|b| b.unconstrained.as_ref().map(|r| r.rewards.clone())).collect();
        batch_mean_cumulative(&runs, k)
    });
    let unconstrained_violations = batches.iter().filter_map(|b| b.unconstrained.as_ref()).map(|r| r.violations).sum();
    let gap = |series: &[f64]| percentage_reward_gap(&oracle, series).unwrap_or(f64::NAN);

    Ok(EvalReport {
        n_arms: inst.n_arms(),
        n_states: inst.n_states(),
        n_actions: inst.n_actions(),
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        horizon: k,
        batches: cfg.batches,
        gap_pct: gap(&predicted),
        random_gap_pct: gap(&random),
        unconstrained_gap_pct: random_unconstrained.as_deref().map(gap),
        unconstrained_violations,
        oracle_bound: om.objective_value,
        runtime_s: if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
        oracle,
        predicted,
        random,
        random_unconstrained,
    })
}
