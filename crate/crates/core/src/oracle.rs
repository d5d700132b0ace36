//! Occupancy-measure LP relaxation and the oracle policy it induces.
//!
//! Variables are `omega[n, s, a]`, the long-run fraction of time arm `n`
//! spends in state `s` taking action `a`. Budgets hold only in expectation,
//! so the optimum upper-bounds the average reward of every budget-feasible
//! policy.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::RmabInstance;
use crate::simplex::{LinearProgram, LpSolver, LpStatus, RevisedSimplex, RowSense, SimplexOptions};
use crate::textfmt::Document;

/// Row-sum slack below which a state counts as unvisited.
const UNVISITED: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMeasure {
    pub omega: Array3<f64>,
    pub objective_value: f64,
}

/// Per-arm conditional policy `pi[n, s, a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePolicy {
    pub pi: Array3<f64>,
}

pub fn var_index(n_states: usize, n_actions: usize, arm: usize, state: usize, action: usize) -> usize {
    (arm * n_states + state) * n_actions + action
}

/// Builds the LP: `A` budget rows, then `N*S` flow-balance rows, then `N`
/// normalization rows. Budget rows cover every action, passive included.
pub fn build_occupancy_lp(inst: &RmabInstance) -> LinearProgram {
    let (n_arms, n_states, n_actions, _) = inst.transitions.dim();
    let idx = |n, s, a| var_index(n_states, n_actions, n, s, a);
    let objective: Vec<f64> = inst.rewards.iter().copied().collect();
    let mut lp = LinearProgram::new(objective);

    for a in 0..n_actions {
        let coeffs: Vec<(usize, f64)> = (0..n_arms)
            .flat_map(|n| (0..n_states).map(move |s| (n, s)))
            .map(|(n, s)| (idx(n, s, a), 1.0))
            .collect();
        lp.add_row(&coeffs, RowSense::Le, inst.budgets[a] as f64);
    }
    for n in 0..n_arms {
        for s in 0..n_states {
            let mut coeffs = Vec::with_capacity(n_states * n_actions + n_actions);
            for a in 0..n_actions {
                coeffs.push((idx(n, s, a), 1.0));
            }
            for sp in 0..n_states {
                for ap in 0..n_actions {
                    coeffs.push((idx(n, sp, ap), -inst.transitions[[n, sp, ap, s]]));
                }
            }
            lp.add_row(&coeffs, RowSense::Eq, 0.0);
        }
    }
    for n in 0..n_arms {
        let coeffs: Vec<(usize, f64)> = (0..n_states)
            .flat_map(|s| (0..n_actions).map(move |a| (s, a)))
            .map(|(s, a)| (idx(n, s, a), 1.0))
            .collect();
        lp.add_row(&coeffs, RowSense::Eq, 1.0);
    }
    lp
}

/// Builds and solves the occupancy LP with the built-in simplex.
pub fn solve_occupancy(inst: &RmabInstance) -> Result<OccupancyMeasure> {
    solve_occupancy_with(inst, &RevisedSimplex::new(SimplexOptions::default()))
}

pub fn solve_occupancy_with<S: LpSolver>(inst: &RmabInstance, solver: &S) -> Result<OccupancyMeasure> {
    let lp = build_occupancy_lp(inst);
    let sol = solver.solve(&lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(sol.status));
    }
    let omega = Array3::from_shape_vec(inst.rewards.dim(), sol.x).expect("one variable per (n, s, a)");
    let objective_value = (&omega * &inst.rewards).sum();
    Ok(OccupancyMeasure { omega, objective_value })
}

impl OccupancyMeasure {
    /// Lists violated LP constraints (normalization, flow balance, budgets,
    /// nonnegativity) at tolerance `tol`.
    pub fn check(&self, inst: &RmabInstance, tol: f64) -> Vec<String> {
        let (n_arms, n_states, n_actions, _) = inst.transitions.dim();
        let mut out = Vec::new();
        if self.omega.dim() != (n_arms, n_states, n_actions) {
            out.push(format!("omega has shape {:?}", self.omega.dim()));
            return out;
        }
        for n in 0..n_arms {
            let total: f64 = self.omega.slice(ndarray::s![n, .., ..]).sum();
            if (total - 1.0).abs() > tol {
                out.push(format!("arm {n}: occupancy sums to {total}"));
            }
            for s in 0..n_states {
                let out_flow: f64 = self.omega.slice(ndarray::s![n, s, ..]).sum();
                let mut in_flow = 0.0;
                for sp in 0..n_states {
                    for ap in 0..n_actions {
                        in_flow += self.omega[[n, sp, ap]] * inst.transitions[[n, sp, ap, s]];
                    }
                }
                if (out_flow - in_flow).abs() > tol {
                    out.push(format!("arm {n}, state {s}: flow imbalance {}", out_flow - in_flow));
                }
            }
        }
        for a in 0..n_actions {
            let used: f64 = self.omega.slice(ndarray::s![.., .., a]).sum();
            if used > inst.budgets[a] as f64 + tol {
                out.push(format!("action {a}: expected use {used} exceeds budget {}", inst.budgets[a]));
            }
        }
        if let Some(v) = self.omega.iter().find(|&&v| v < -tol) {
            out.push(format!("negative occupancy {v}"));
        }
        out
    }

    /// Contribution of each arm to the objective.
    pub fn arm_values(&self, inst: &RmabInstance) -> Vec<f64> {
        (0..inst.n_arms())
            .map(|n| {
                (&self.omega.slice(ndarray::s![n, .., ..]) * &inst.rewards.slice(ndarray::s![n, .., ..])).sum()
            })
            .collect()
    }

    pub fn to_document(&self) -> Document {
        let (n, s, a) = self.omega.dim();
        let mut doc = Document::new();
        doc.set("kind", "occupancy_measure");
        doc.set_int("n_arms", n as u64);
        doc.set_int("n_states", s as u64);
        doc.set_int("n_actions", a as u64);
        doc.set_real("objective_value", self.objective_value);
        doc.set_reals("omega", self.omega.iter());
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.expect_kind("occupancy_measure")?;
        let dims = (doc.get("n_arms")?, doc.get("n_states")?, doc.get("n_actions")?);
        let omega = Array3::from_shape_vec(dims, doc.get_list("omega")?)
            .map_err(|e| Error::Parse(format!("omega: {e}")))?;
        Ok(Self { omega, objective_value: doc.get("objective_value")? })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_document().write(path, "optimal occupancy measure")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_document(&Document::read(path)?)
    }
}

/// Row-normalizes the occupancy measure into `pi(a | s)` per arm. Unvisited
/// states get the uniform distribution.
pub fn extract_policy(om: &OccupancyMeasure) -> OraclePolicy {
    let (n_arms, n_states, n_actions) = om.omega.dim();
    let mut pi = Array3::zeros((n_arms, n_states, n_actions));
    for n in 0..n_arms {
        for s in 0..n_states {
            let row = om.omega.slice(ndarray::s![n, s, ..]);
            let z: f64 = row.iter().map(|v| v.max(0.0)).sum();
            for a in 0..n_actions {
                pi[[n, s, a]] = if z < UNVISITED {
                    1.0 / n_actions as f64
                } else {
                    row[a].max(0.0) / z
                };
            }
        }
    }
    OraclePolicy { pi }
}

impl OraclePolicy {
    pub fn arm_policy(&self, arm: usize) -> ArrayView2<'_, f64> {
        self.pi.slice(ndarray::s![arm, .., ..])
    }

    pub fn to_document(&self) -> Document {
        let (n, s, a) = self.pi.dim();
        let mut doc = Document::new();
        doc.set("kind", "oracle_policy");
        doc.set_int("n_arms", n as u64);
        doc.set_int("n_states", s as u64);
        doc.set_int("n_actions", a as u64);
        doc.set_reals("pi", self.pi.iter());
        doc
    }

    pub fn from_document(doc: &Document) -> Result<Self> {
        doc.expect_kind("oracle_policy")?;
        let dims = (doc.get("n_arms")?, doc.get("n_states")?, doc.get("n_actions")?);
        let pi = Array3::from_shape_vec(dims, doc.get_list("pi")?)
            .map_err(|e| Error::Parse(format!("pi: {e}")))?;
        Ok(Self { pi })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_document().write(path, "oracle policy pi(a|s) per arm")
    }
}

/// Stationary distribution of a row-stochastic `S x S` matrix.
pub fn stationary_distribution(chain: &Array2<f64>) -> Result<Vec<f64>> {
    let s = chain.nrows();
    // mu (P - I) = 0 with the last balance equation replaced by sum(mu) = 1
    let mut a = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            a[i * s + j] = chain[[j, i]] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..s {
        a[(s - 1) * s + j] = 1.0;
    }
    let mut b = vec![0.0; s];
    b[s - 1] = 1.0;
    linalg::solve_in_place(&mut a, &mut b, s, 1e-13)
        .ok_or_else(|| Error::DegenerateChain("stationary system is singular".into()))?;
    Ok(b)
}

/// Long-run average reward of one arm under a fixed stationary policy
/// (`S x A`, rows stochastic).
pub fn single_arm_average_reward(inst: &RmabInstance, arm: usize, policy: ArrayView2<'_, f64>) -> Result<f64> {
    let (n_arms, n_states, n_actions, _) = inst.transitions.dim();
    if arm >= n_arms {
        return Err(Error::InvalidArgument(format!("arm {arm} out of range")));
    }
    if policy.dim() != (n_states, n_actions) {
        return Err(Error::Shape(format!("policy is {:?}, expected {:?}", policy.dim(), (n_states, n_actions))));
    }
    let mut chain = Array2::zeros((n_states, n_states));
    for s in 0..n_states {
        for a in 0..n_actions {
            let w = policy[[s, a]];
            if w != 0.0 {
                for t in 0..n_states {
                    chain[[s, t]] += w * inst.transitions[[arm, s, a, t]];
                }
            }
        }
    }
    let mu = stationary_distribution(&chain)?;
    let mut value = 0.0;
    for s in 0..n_states {
        for a in 0..n_actions {
            value += mu[s] * policy[[s, a]] * inst.rewards[[arm, s, a]];
        }
    }
    Ok(value)
}
