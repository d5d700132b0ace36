//! Multi-action restless bandit instances with per-action budgets.
//!
//! Action 0 is the passive action. Its budget absorbs every arm that does not
//! receive an active action, so `budgets.iter().sum() == n_arms` always holds
//! and every arm is assigned exactly one action per step. Per-step budget
//! checks apply to the active actions `1..A`.

use std::fmt;
use std::path::Path;

use ndarray::{Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp1};

use crate::error::{Error, Result};
use crate::textfmt::Document;

/// Uniform mass mixed into every transition row at generation time.
pub const SMOOTHING: f64 = 1e-3;

const ACTION_BONUS: f64 = 0.1;
/// Weight of the Dirichlet(1) noise mixed into the structured rows.
const ROW_NOISE: f64 = 0.1;
const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct RmabInstance {
    /// `P[n, s, a, s']`.
    pub transitions: Array4<f64>,
    /// `r[n, s, a]`.
    pub rewards: Array3<f64>,
    /// Per-action budgets, passive action included.
    pub budgets: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateVector(pub Vec<usize>);

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionVector(pub Vec<usize>);

impl StateVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Uniform i.i.d. state per arm.
    pub fn sample_uniform<R: Rng + ?Sized>(n_arms: usize, n_states: usize, rng: &mut R) -> Self {
        StateVector((0..n_arms).map(|_| rng.random_range(0..n_states)).collect())
    }
}

impl ActionVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn counts(&self, n_actions: usize) -> Vec<usize> {
        let mut counts = vec![0; n_actions];
        for &a in &self.0 {
            if a < n_actions {
                counts[a] += 1;
            }
        }
        counts
    }

    /// Returns the first active action whose count exceeds its budget.
    ///
    /// The passive action is not capped: its padded budget only balances the
    /// transport marginals, and any unused active budget lands on passive.
    pub fn check_budgets(&self, budgets: &[usize]) -> Result<()> {
        if let Some(&a) = self.0.iter().find(|&&a| a >= budgets.len()) {
            return Err(Error::InvalidArgument(format!(
                "action {a} out of range for {} actions",
                budgets.len()
            )));
        }
        for (action, (&used, &budget)) in self.counts(budgets.len()).iter().zip(budgets).enumerate().skip(1) {
            if used > budget {
                return Err(Error::BudgetViolation { action, used, budget });
            }
        }
        Ok(())
    }
}

/// Something wrong with an instance, as reported by [`validate_instance`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Shape(String),
    RowSum { arm: usize, state: usize, action: usize, sum: f64 },
    NegativeProbability { arm: usize, state: usize, action: usize, next: usize },
    MissingSupport { arm: usize, state: usize, action: usize, next: usize },
    NegativeReward { arm: usize, state: usize, action: usize },
    NonFinite(String),
    BudgetSum { sum: usize, n_arms: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape(msg) => write!(f, "shape: {msg}"),
            Violation::RowSum { arm, state, action, sum } => write!(
                f,
                "transition row (arm {arm}, state {state}, action {action}) sums to {sum}"
            ),
            Violation::NegativeProbability { arm, state, action, next } => write!(
                f,
                "negative probability P(arm {arm}, state {state}, action {action} -> {next})"
            ),
            Violation::MissingSupport { arm, state, action, next } => write!(
                f,
                "zero probability P(arm {arm}, state {state}, action {action} -> {next}); chain may be reducible"
            ),
            Violation::NegativeReward { arm, state, action } => {
                write!(f, "negative reward r(arm {arm}, state {state}, action {action})")
            }
            Violation::NonFinite(what) => write!(f, "non-finite entry in {what}"),
            Violation::BudgetSum { sum, n_arms } => write!(
                f,
                "budgets sum to {sum} but there are {n_arms} arms (passive budget must pad the difference)"
            ),
        }
    }
}

/// Fills in the passive budget: `b_0 = n_arms - sum(active)`.
pub fn pad_budgets(active: &[usize], n_arms: usize) -> Result<Vec<usize>> {
    let used: usize = active.iter().sum();
    if used > n_arms {
        return Err(Error::InvalidArgument(format!(
            "active budgets sum to {used}, more than {n_arms} arms"
        )));
    }
    let mut budgets = Vec::with_capacity(active.len() + 1);
    budgets.push(n_arms - used);
    budgets.extend_from_slice(active);
    Ok(budgets)
}

impl RmabInstance {
    pub fn new(
        transitions: Array4<f64>,
        rewards: Array3<f64>,
        budgets: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let (n, s, a, s2) = transitions.dim();
        if s != s2 {
            return Err(Error::Shape(format!("transition tensor is {n}x{s}x{a}x{s2}")));
        }
        if rewards.dim() != (n, s, a) {
            return Err(Error::Shape(format!(
                "rewards are {:?}, expected {:?}",
                rewards.dim(),
                (n, s, a)
            )));
        }
        if budgets.len() != a {
            return Err(Error::Shape(format!("{} budgets for {a} actions", budgets.len())));
        }
        Ok(Self { transitions, rewards, budgets, seed })
    }

    pub fn n_arms(&self) -> usize {
        self.transitions.dim().0
    }

    pub fn n_states(&self) -> usize {
        self.transitions.dim().1
    }

    pub fn n_actions(&self) -> usize {
        self.transitions.dim().2
    }

    pub fn check_states(&self, s: &StateVector) -> Result<()> {
        if s.len() != self.n_arms() {
            return Err(Error::Shape(format!(
                "state vector has {} entries for {} arms",
                s.len(),
                self.n_arms()
            )));
        }
        if let Some(&bad) = s.0.iter().find(|&&x| x >= self.n_states()) {
            return Err(Error::InvalidArgument(format!("state {bad} out of range")));
        }
        Ok(())
    }

    pub fn check_balanced(&self) -> Result<()> {
        let sum: usize = self.budgets.iter().sum();
        if sum != self.n_arms() {
            return Err(Error::UnbalancedBudgets { sum, n_arms: self.n_arms() });
        }
        Ok(())
    }

    pub fn to_document(&self) -> Document {
        let (n, s, a, _) = self.transitions.dim();
        let mut doc = Document::new();
        doc.set("kind", "rmab_instance");
        doc.set_int("n_arms", n as u64);
        doc.set_int("n_states", s as u64);
        doc.set_int("n_actions", a as u64);
        doc.set_ints("budgets", self.budgets.iter().copied());
        doc.set_int("seed", self.seed);
        doc.set_reals("transitions", self.transitions.iter());
        doc.set_reals("rewards", self.rewards.iter());
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.expect_kind("rmab_instance")?;
        let n: usize = doc.get("n_arms")?;
        let s: usize = doc.get("n_states")?;
        let a: usize = doc.get("n_actions")?;
        let transitions = Array4::from_shape_vec((n, s, a, s), doc.get_list("transitions")?)
            .map_err(|e| Error::Parse(format!("transitions: {e}")))?;
        let rewards = Array3::from_shape_vec((n, s, a), doc.get_list("rewards")?)
            .map_err(|e| Error::Parse(format!("rewards: {e}")))?;
        Self::new(transitions, rewards, doc.get_list("budgets")?, doc.get("seed")?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_document().write(path, "multi-action RMAB instance")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_document(&Document::read(path)?)
    }
}

/// Generates a synthetic instance with structured, arm-heterogeneous dynamics.
///
/// States are ordered by health: reward grows with the state index. Without
/// intervention an arm drifts down at an arm-specific rate; stronger actions
/// (higher index) push it up, scaled by an arm-specific responsiveness drawn
/// from a U-shaped Beta so that some arms respond strongly and others barely.
/// Each row is then mixed with Dirichlet noise and smoothed with
/// [`SMOOTHING`] so every transition has full support.
///
/// Rewards grow quadratically with the state index and carry a small
/// immediate bonus for stronger actions on responsive arms, so they are
/// nondecreasing in action strength.
///
/// Budgets: `b_a = floor(fraction_a * n_arms)` for active actions, passive
/// gets the remainder.
pub fn generate_instance(
    n_arms: usize,
    n_states: usize,
    n_actions: usize,
    budget_fractions: &[f64],
    seed: u64,
) -> Result<RmabInstance> {
    if n_arms < 1 || n_states < 2 || n_actions < 2 {
        return Err(Error::InvalidArgument(format!(
            "need n_arms >= 1, n_states >= 2, n_actions >= 2 (got {n_arms}, {n_states}, {n_actions})"
        )));
    }
    if budget_fractions.len() != n_actions - 1 {
        return Err(Error::InvalidArgument(format!(
            "expected {} budget fractions (one per active action), got {}",
            n_actions - 1,
            budget_fractions.len()
        )));
    }
    if budget_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidArgument("budget fractions must lie in [0, 1]".into()));
    }
    let total: f64 = budget_fractions.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("budget fractions sum to {total} > 1")));
    }
    let active: Vec<usize> = budget_fractions
        .iter()
        .map(|f| (f * n_arms as f64 + 1e-9).floor() as usize)
        .collect();
    let budgets = pad_budgets(&active, n_arms)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let responsiveness = Beta::new(0.5, 0.5).expect("valid beta parameters");
    let mut transitions = Array4::<f64>::zeros((n_arms, n_states, n_actions, n_states));
    let mut rewards = Array3::<f64>::zeros((n_arms, n_states, n_actions));
    let top = n_states - 1;

    for n in 0..n_arms {
        let decay = rng.random_range(0.4..0.8);
        let resp: f64 = responsiveness.sample(&mut rng);
        let weight = rng.random_range(0.5..1.5);
        for s in 0..n_states {
            for a in 0..n_actions {
                let strength = a as f64 / (n_actions - 1) as f64;
                let up = (0.05 + 0.9 * resp * strength).min(0.9);
                let down = decay * (1.0 - resp * strength);
                let mut row = vec![0.0; n_states];
                row[(s + 1).min(top)] += up;
                row[s.saturating_sub(1)] += down;
                row[s] += (1.0 - up - down).max(0.0);
                let structured: f64 = row.iter().sum();

                let noise: Vec<f64> = (0..n_states).map(|_| Exp1.sample(&mut rng)).collect();
                let noise_sum: f64 = noise.iter().sum();
                for (t, p) in row.iter_mut().enumerate() {
                    let mixed = (1.0 - ROW_NOISE) * (*p / structured) + ROW_NOISE * noise[t] / noise_sum;
                    *p = (1.0 - SMOOTHING) * mixed + SMOOTHING / n_states as f64;
                }
                // renormalize so rows sum to one to working precision
                let z: f64 = row.iter().sum();
                for (t, p) in row.iter().enumerate() {
                    transitions[[n, s, a, t]] = p / z;
                }
                let level = (s as f64 + 0.25) / n_states as f64;
                rewards[[n, s, a]] = weight * (level * level + ACTION_BONUS * resp * strength);
            }
        }
    }
    RmabInstance::new(transitions, rewards, budgets, seed)
}

/// Lists every broken instance invariant. Never fails.
pub fn validate_instance(inst: &RmabInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let (n, s, a, s2) = inst.transitions.dim();
    if s != s2 || inst.rewards.dim() != (n, s, a) || inst.budgets.len() != a {
        out.push(Violation::Shape(format!(
            "transitions {:?}, rewards {:?}, {} budgets",
            inst.transitions.dim(),
            inst.rewards.dim(),
            inst.budgets.len()
        )));
        return out;
    }
    for arm in 0..n {
        for state in 0..s {
            for action in 0..a {
                let row = inst.transitions.slice(ndarray::s![arm, state, action, ..]);
                if row.iter().any(|p| !p.is_finite()) {
                    out.push(Violation::NonFinite(format!(
                        "transition row (arm {arm}, state {state}, action {action})"
                    )));
                    continue;
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > ROW_TOL {
                    out.push(Violation::RowSum { arm, state, action, sum });
                }
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 {
                        out.push(Violation::NegativeProbability { arm, state, action, next });
                    } else if p == 0.0 {
                        out.push(Violation::MissingSupport { arm, state, action, next });
                    }
                }
                let r = inst.rewards[[arm, state, action]];
                if !r.is_finite() {
                    out.push(Violation::NonFinite(format!(
                        "reward (arm {arm}, state {state}, action {action})"
                    )));
                } else if r < 0.0 {
                    out.push(Violation::NegativeReward { arm, state, action });
                }
            }
        }
    }
    let sum: usize = inst.budgets.iter().sum();
    if sum != n {
        out.push(Violation::BudgetSum { sum, n_arms: n });
    }
    out
}

/// Advances every arm one step. Refuses action vectors that break a budget.
pub fn step<R: Rng + ?Sized>(
    inst: &RmabInstance,
    s: &StateVector,
    acts: &ActionVector,
    rng: &mut R,
) -> Result<(StateVector, Vec<f64>)> {
    acts.check_budgets(&inst.budgets)?;
    step_ignoring_budgets(inst, s, acts, rng)
}

/// Like [`step`] but without the budget check; used by the unconstrained
/// random baseline.
pub fn step_ignoring_budgets<R: Rng + ?Sized>(
    inst: &RmabInstance,
    s: &StateVector,
    acts: &ActionVector,
    rng: &mut R,
) -> Result<(StateVector, Vec<f64>)> {
    inst.check_states(s)?;
    if acts.len() != inst.n_arms() {
        return Err(Error::Shape(format!(
            "action vector has {} entries for {} arms",
            acts.len(),
            inst.n_arms()
        )));
    }
    if let Some(&bad) = acts.0.iter().find(|&&x| x >= inst.n_actions()) {
        return Err(Error::InvalidArgument(format!("action {bad} out of range")));
    }
    let n_states = inst.n_states();
    let mut next = Vec::with_capacity(s.len());
    let mut rewards = Vec::with_capacity(s.len());
    for (arm, (&state, &action)) in s.0.iter().zip(&acts.0).enumerate() {
        rewards.push(inst.rewards[[arm, state, action]]);
        let row = inst.transitions.slice(ndarray::s![arm, state, action, ..]);
        next.push(sample_categorical(row.iter().copied(), n_states, rng));
    }
    Ok((StateVector(next), rewards))
}

/// Inverse-CDF draw; the last index absorbs round-off.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(
    probs: impl Iterator<Item = f64>,
    len: usize,
    rng: &mut R,
) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    len - 1
}
