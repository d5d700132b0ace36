//! Budgeted assignment of actions to arms.
//!
//! Training uses the entropic relaxation: a log-domain Sinkhorn solve of the
//! transport problem with unit row marginals and budget column marginals,
//! cost `-index`. The iteration is recorded so that the backward pass can run
//! reverse-mode through exactly the iterations the forward pass performed.
//!
//! Inference uses the exact integral assignment, solved as an LP over the
//! transportation polytope (totally unimodular, so basic optima are 0/1).

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{sample_categorical, ActionVector};
use crate::simplex::{LinearProgram, LpSolver, LpStatus, Pricing, RevisedSimplex, RowSense, SimplexOptions};
use crate::textfmt::Document;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions {
    pub epsilon: f64,
    pub max_iter: usize,
    /// Stop once the L1 marginal violation drops below this.
    pub tol: f64,
    /// Keep the per-iteration potentials for [`sinkhorn_backward`].
    pub record_tape: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { epsilon: 0.1, max_iter: 500, tol: 1e-6, record_tape: true }
    }
}

impl SinkhornOptions {
    pub fn with_epsilon(epsilon: f64) -> Self {
        Self { epsilon, ..Default::default() }
    }
}

/// Potentials after every iteration, restricted to positive-budget columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SinkhornTape {
    index: Array2<f64>,
    columns: Vec<usize>,
    log_budgets: Vec<f64>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub gamma: Array2<f64>,
    /// `ln gamma`, computed directly from the potentials so that it stays
    /// finite where `gamma` underflows; `-inf` on zero-budget columns.
    pub log_gamma: Array2<f64>,
    pub budgets: Vec<usize>,
    pub epsilon: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 marginal violation after each iteration.
    pub violations: Vec<f64>,
    pub tape: Option<SinkhornTape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardAssignment {
    pub assignment: ActionVector,
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Draw each arm's action from its plan row, then repair overflows.
    Sample,
    /// Exact assignment on `log gamma`.
    Round,
}

fn check_problem(index: &ArrayView2<'_, f64>, budgets: &[usize]) -> Result<()> {
    let (n, a) = index.dim();
    if budgets.len() != a {
        return Err(Error::Shape(format!("{a} index columns but {} budgets", budgets.len())));
    }
    let sum: usize = budgets.iter().sum();
    if sum != n {
        return Err(Error::UnbalancedBudgets { sum, n_arms: n });
    }
    if index.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("index matrix".into()));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropic transport plan for `index` (`N x A`) under `budgets`.
///
/// Columns with zero budget are fixed at zero and excluded from the
/// iteration; every other entry of the plan is strictly positive.
pub fn sinkhorn_forward(index: ArrayView2<'_, f64>, budgets: &[usize], opts: &SinkhornOptions) -> Result<TransportPlan> {
    check_problem(&index, budgets)?;
    if !(opts.epsilon > 0.0 && opts.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    let eps = opts.epsilon;
    let (n, n_actions) = index.dim();
    let columns: Vec<usize> = (0..n_actions).filter(|&a| budgets[a] > 0).collect();
    let m = columns.len();
    let x = Array2::from_shape_fn((n, m), |(i, j)| index[[i, columns[j]]]);
    let log_b: Vec<f64> = columns.iter().map(|&a| (budgets[a] as f64).ln()).collect();

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut f_hist = Vec::new();
    let mut g_hist = Vec::new();
    let mut violations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = -eps * log_sum_exp((0..m).map(|j| (g[j] + x[[i, j]]) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b[j] - eps * log_sum_exp((0..n).map(|i| (f[i] + x[[i, j]]) / eps));
        }
        if opts.record_tape {
            f_hist.push(f.clone());
            g_hist.push(g.clone());
        }
        let viol = marginal_violation(&x, &f, &g, &log_b, eps);
        violations.push(viol);
        if viol < opts.tol {
            converged = true;
            break;
        }
    }

    let mut log_gamma = Array2::from_elem((n, n_actions), f64::NEG_INFINITY);
    for i in 0..n {
        for (j, &a) in columns.iter().enumerate() {
            log_gamma[[i, a]] = (f[i] + g[j] + x[[i, j]]) / eps;
        }
    }
    let gamma = log_gamma.mapv(f64::exp);
    let tape = opts.record_tape.then(|| SinkhornTape { index: x, columns, log_budgets: log_b, f: f_hist, g: g_hist });
    Ok(TransportPlan {
        gamma,
        log_gamma,
        budgets: budgets.to_vec(),
        epsilon: eps,
        iterations,
        converged,
        violations,
        tape,
    })
}

/// L1 violation of row and column marginals for the current potentials.
fn marginal_violation(x: &Array2<f64>, f: &[f64], g: &[f64], log_b: &[f64], eps: f64) -> f64 {
    let (n, m) = x.dim();
    let mut cols = vec![0.0; m];
    let mut viol = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..m {
            let v = ((f[i] + g[j] + x[[i, j]]) / eps).exp();
            row += v;
            cols[j] += v;
        }
        viol += (row - 1.0).abs();
    }
    for j in 0..m {
        viol += (cols[j] - log_b[j].exp()).abs();
    }
    viol
}

/// Reverse-mode derivative of a loss through [`sinkhorn_forward`]: maps
/// `dL/dGamma` to `dL/dIndex`, unrolling the recorded iterations.
pub fn sinkhorn_backward(plan: &TransportPlan, d_gamma: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if d_gamma.dim() != plan.gamma.dim() {
        return Err(Error::Shape(format!("gradient {:?} vs plan {:?}", d_gamma.dim(), plan.gamma.dim())));
    }
    sinkhorn_backward_log(plan, (&d_gamma * &plan.gamma).view())
}

/// Same as [`sinkhorn_backward`] but takes `dL/d(ln Gamma)`, which stays
/// finite for log-space losses even where `Gamma` underflows.
pub fn sinkhorn_backward_log(plan: &TransportPlan, d_log_gamma: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let tape = plan
        .tape
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("transport plan was computed without a tape".into()))?;
    if d_log_gamma.dim() != plan.gamma.dim() {
        return Err(Error::Shape(format!("gradient {:?} vs plan {:?}", d_log_gamma.dim(), plan.gamma.dim())));
    }
    let eps = plan.epsilon;
    let x = &tape.index;
    let (n, m) = x.dim();
    let steps = tape.f.len();
    let mut dx = Array2::<f64>::zeros((n, m));
    let mut df = vec![0.0; n];
    let mut dg = vec![0.0; m];

    // ln gamma = (f + g + x) / eps
    for i in 0..n {
        for (j, &a) in tape.columns.iter().enumerate() {
            let z = d_log_gamma[[i, a]] / eps;
            dx[[i, j]] += z;
            df[i] += z;
            dg[j] += z;
        }
    }
    for k in (0..steps).rev() {
        let f = &tape.f[k];
        let g = &tape.g[k];
        // g_j = eps log b_j - eps LSE_i((f_i + x_ij) / eps)
        for i in 0..n {
            for j in 0..m {
                let q = ((f[i] + x[[i, j]] + g[j]) / eps - tape.log_budgets[j]).exp();
                let t = dg[j] * q;
                df[i] -= t;
                dx[[i, j]] -= t;
            }
        }
        // f_i = -eps LSE_j((g_prev_j + x_ij) / eps), g_prev = 0 before the first step
        let mut dg_prev = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                let gp = if k == 0 { 0.0 } else { tape.g[k - 1][j] };
                let r = ((gp + x[[i, j]] + f[i]) / eps).exp();
                let t = df[i] * r;
                dg_prev[j] -= t;
                dx[[i, j]] -= t;
            }
        }
        df.iter_mut().for_each(|v| *v = 0.0);
        dg = dg_prev;
    }

    let mut d_index = Array2::zeros(plan.gamma.dim());
    for i in 0..n {
        for (j, &a) in tape.columns.iter().enumerate() {
            d_index[[i, a]] = dx[[i, j]];
        }
    }
    Ok(d_index)
}

/// Maximum-index assignment with every arm getting exactly one action and
/// action `a` used by at most `budgets[a]` arms.
pub fn solve_knapsack_exact(index: ArrayView2<'_, f64>, budgets: &[usize]) -> Result<HardAssignment> {
    check_problem(&index, budgets)?;
    let (n, a) = index.dim();
    let lp = assignment_lp(&index, budgets);
    let mut result = None;
    for pricing in [Pricing::Dantzig, Pricing::Bland] {
        let sol = RevisedSimplex::new(SimplexOptions { pricing, ..Default::default() }).solve(&lp)?;
        if sol.status != LpStatus::Optimal {
            return Err(Error::Solver(sol.status));
        }
        if let Some(actions) = integral_assignment(&sol.x, n, a) {
            result = Some(actions);
            break;
        }
    }
    let actions = result.ok_or_else(|| Error::NonFinite("assignment LP returned a fractional vertex".into()))?;
    let objective = actions.iter().enumerate().map(|(i, &act)| index[[i, act]]).sum();
    Ok(HardAssignment { assignment: ActionVector(actions), objective })
}

fn assignment_lp(index: &ArrayView2<'_, f64>, budgets: &[usize]) -> LinearProgram {
    let (n, a) = index.dim();
    let mut lp = LinearProgram::new(index.iter().copied().collect());
    for i in 0..n {
        let coeffs: Vec<(usize, f64)> = (0..a).map(|j| (i * a + j, 1.0)).collect();
        lp.add_row(&coeffs, RowSense::Eq, 1.0);
    }
    for (j, &b) in budgets.iter().enumerate() {
        let coeffs: Vec<(usize, f64)> = (0..n).map(|i| (i * a + j, 1.0)).collect();
        lp.add_row(&coeffs, RowSense::Le, b as f64);
    }
    lp
}

fn integral_assignment(x: &[f64], n: usize, a: usize) -> Option<Vec<usize>> {
    let mut actions = Vec::with_capacity(n);
    for i in 0..n {
        let row = &x[i * a..(i + 1) * a];
        if row.iter().any(|&v| v > 1e-6 && v < 1.0 - 1e-6) {
            return None;
        }
        actions.push(row.iter().position(|&v| v > 0.5)?);
    }
    Some(actions)
}

/// Demotes overflow arms of each active action to passive, lowest
/// `probs[arm, action]` first (ties: higher arm index first).
pub fn repair_to_budgets(actions: &mut [usize], probs: ArrayView2<'_, f64>, budgets: &[usize]) {
    for (action, &budget) in budgets.iter().enumerate().skip(1) {
        let mut holders: Vec<usize> = (0..actions.len()).filter(|&i| actions[i] == action).collect();
        if holders.len() <= budget {
            continue;
        }
        holders.sort_by(|&x, &y| probs[[x, action]].total_cmp(&probs[[y, action]]).then(y.cmp(&x)));
        for &arm in &holders[..holders.len() - budget] {
            actions[arm] = 0;
        }
    }
}

/// Turns a plan into a budget-feasible action vector.
pub fn plan_to_actions<R: Rng + ?Sized>(plan: &TransportPlan, mode: SampleMode, rng: &mut R) -> Result<ActionVector> {
    let (n, a) = plan.gamma.dim();
    match mode {
        SampleMode::Sample => {
            let mut actions: Vec<usize> = (0..n)
                .map(|i| {
                    let row = plan.gamma.row(i);
                    let z: f64 = row.sum();
                    sample_categorical(row.iter().map(|p| p / z), a, rng)
                })
                .collect();
            repair_to_budgets(&mut actions, plan.gamma.view(), &plan.budgets);
            Ok(ActionVector(actions))
        }
        SampleMode::Round => {
            let floor = 1e-300f64.ln();
            let log_gamma = plan.log_gamma.mapv(|v| v.max(floor));
            Ok(solve_knapsack_exact(log_gamma.view(), &plan.budgets)?.assignment)
        }
    }
}

impl TransportPlan {
    /// Largest absolute deviation of any row or column sum from its target.
    pub fn max_marginal_error(&self) -> f64 {
        let rows = self.gamma.rows().into_iter().map(|r| (r.sum() - 1.0).abs());
        let cols = self
            .gamma
            .columns()
            .into_iter()
            .zip(&self.budgets)
            .map(|(c, &b)| (c.sum() - b as f64).abs());
        rows.chain(cols).fold(0.0, f64::max)
    }

    pub fn to_document(&self) -> Document {
        let (n, a) = self.gamma.dim();
        let mut doc = Document::new();
        doc.set("kind", "transport_plan");
        doc.set_int("n_arms", n as u64);
        doc.set_int("n_actions", a as u64);
        doc.set_ints("budgets", self.budgets.iter().copied());
        doc.set_real("epsilon", self.epsilon);
        doc.set_int("iterations", self.iterations as u64);
        doc.set("converged", self.converged.to_string());
        doc.set_reals("gamma", self.gamma.iter());
        doc
    }
}
