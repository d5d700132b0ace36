//! Dense revised simplex for small and medium linear programs.
//!
//! The basis inverse is kept explicitly and updated by elementary row
//! operations after each pivot, with a full refactorization every few hundred
//! pivots. Phase one minimizes the sum of artificial variables; phase two
//! optimizes the real objective with artificials barred from re-entering.
//!
//! Pricing picks the most improving column (lowest index on ties) and falls
//! back to Bland's smallest-index rule after a run of degenerate pivots, which
//! rules out cycling. [`Pricing::Bland`] uses Bland's rule throughout.

use crate::error::Result;
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowSense {
    Le,
    Ge,
    Eq,
}

/// `maximize c.x  s.t.  A x (<=,>=,=) b,  0 <= x <= u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    /// Constraint matrix as `(row, column, value)` triplets.
    pub triplets: Vec<(usize, usize, f64)>,
    pub senses: Vec<RowSense>,
    pub rhs: Vec<f64>,
    /// Per-variable upper bounds, `f64::INFINITY` when absent.
    pub upper_bounds: Vec<f64>,
}

impl LinearProgram {
    pub fn new(objective: Vec<f64>) -> Self {
        let n_vars = objective.len();
        Self {
            n_vars,
            objective,
            triplets: Vec::new(),
            senses: Vec::new(),
            rhs: Vec::new(),
            upper_bounds: vec![f64::INFINITY; n_vars],
        }
    }

    pub fn n_rows(&self) -> usize {
        self.senses.len()
    }

    /// Appends a row and returns its index.
    pub fn add_row(&mut self, coeffs: &[(usize, f64)], sense: RowSense, rhs: f64) -> usize {
        let row = self.senses.len();
        for &(col, v) in coeffs {
            assert!(col < self.n_vars, "column {col} out of range");
            if v != 0.0 {
                self.triplets.push((row, col, v));
            }
        }
        self.senses.push(sense);
        self.rhs.push(rhs);
        row
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    /// Largest constraint or bound violation of `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut lhs = vec![0.0; self.n_rows()];
        for &(r, c, v) in &self.triplets {
            lhs[r] += v * x[c];
        }
        let mut worst: f64 = 0.0;
        for (i, (&l, &b)) in lhs.iter().zip(&self.rhs).enumerate() {
            let viol = match self.senses[i] {
                RowSense::Le => l - b,
                RowSense::Ge => b - l,
                RowSense::Eq => (l - b).abs(),
            };
            worst = worst.max(viol);
        }
        for (j, &v) in x.iter().enumerate() {
            worst = worst.max(-v).max(v - self.upper_bounds[j]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pricing {
    /// Bland's smallest-index rule on every pivot.
    Bland,
    /// Most positive reduced cost, Bland's rule during degenerate stalls.
    Dantzig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplexOptions {
    /// Feasibility and optimality tolerance.
    pub tol: f64,
    /// Defaults to `50 * (rows + cols)` when `None`.
    pub max_iter: Option<usize>,
    pub pricing: Pricing,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: None, pricing: Pricing::Dantzig }
    }
}

/// Anything that can solve a [`LinearProgram`].
pub trait LpSolver {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution>;
}

#[derive(Debug, Clone, Default)]
pub struct RevisedSimplex {
    pub options: SimplexOptions,
}

impl RevisedSimplex {
    pub fn new(options: SimplexOptions) -> Self {
        Self { options }
    }
}

impl LpSolver for RevisedSimplex {
    fn solve(&self, lp: &LinearProgram) -> Result<LpSolution> {
        Ok(Tableau::build(lp, self.options).run())
    }
}

/// Solves with default options and the given tolerance.
pub fn solve_lp(lp: &LinearProgram, tol: f64) -> LpSolution {
    Tableau::build(lp, SimplexOptions { tol, ..Default::default() }).run()
}

const DEGENERATE_STREAK: usize = 50;

#[derive(Clone, Copy, PartialEq, Eq)]
enum ColKind {
    Structural,
    Slack,
    Artificial,
}

struct Tableau {
    m: usize,
    n_struct: usize,
    /// Sparse columns of the standard-form matrix.
    cols: Vec<Vec<(usize, f64)>>,
    kinds: Vec<ColKind>,
    b: Vec<f64>,
    cost: Vec<f64>,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Vec<f64>,
    xb: Vec<f64>,
    tol: f64,
    pricing: Pricing,
    max_iter: usize,
    iterations: usize,
    since_refactor: usize,
}

enum PhaseEnd {
    Optimal,
    Unbounded,
    IterationLimit,
}

impl Tableau {
    fn build(lp: &LinearProgram, opts: SimplexOptions) -> Self {
        let n = lp.n_vars;
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); lp.n_rows()];
        for &(r, c, v) in &lp.triplets {
            rows[r].push((c, v));
        }
        let mut senses = lp.senses.clone();
        let mut rhs = lp.rhs.clone();
        for (j, &u) in lp.upper_bounds.iter().enumerate() {
            if u.is_finite() {
                rows.push(vec![(j, 1.0)]);
                senses.push(RowSense::Le);
                rhs.push(u);
            }
        }
        let m = rows.len();

        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut kinds = vec![ColKind::Structural; n];
        let mut b = vec![0.0; m];
        let mut basis = vec![usize::MAX; m];
        for (i, row) in rows.iter().enumerate() {
            let flip = if rhs[i] < 0.0 { -1.0 } else { 1.0 };
            b[i] = flip * rhs[i];
            for &(c, v) in row {
                cols[c].push((i, flip * v));
            }
            let slack = match senses[i] {
                RowSense::Le => Some(flip),
                RowSense::Ge => Some(-flip),
                RowSense::Eq => None,
            };
            if let Some(sign) = slack {
                cols.push(vec![(i, sign)]);
                kinds.push(ColKind::Slack);
                if sign > 0.0 {
                    basis[i] = cols.len() - 1;
                }
            }
        }
        for i in 0..m {
            if basis[i] == usize::MAX {
                cols.push(vec![(i, 1.0)]);
                kinds.push(ColKind::Artificial);
                basis[i] = cols.len() - 1;
            }
        }
        // merge duplicate triplets within a column
        for col in cols.iter_mut().take(n) {
            col.sort_by_key(|&(r, _)| r);
            col.dedup_by(|a, b| {
                if a.0 == b.0 {
                    b.1 += a.1;
                    true
                } else {
                    false
                }
            });
        }
        let total = cols.len();
        let mut in_basis = vec![false; total];
        for &j in &basis {
            in_basis[j] = true;
        }
        let mut binv = vec![0.0; m * m];
        for i in 0..m {
            binv[i * m + i] = 1.0;
        }
        let mut cost = vec![0.0; total];
        cost[..n].copy_from_slice(&lp.objective);
        Self {
            m,
            n_struct: n,
            xb: b.clone(),
            cols,
            kinds,
            b,
            cost,
            basis,
            in_basis,
            binv,
            tol: opts.tol,
            pricing: opts.pricing,
            max_iter: opts.max_iter.unwrap_or(50 * (lp.n_rows() + n).max(1)),
            iterations: 0,
            since_refactor: 0,
        }
    }

    fn run(mut self) -> LpSolution {
        let has_artificials = self.kinds.contains(&ColKind::Artificial);
        if has_artificials {
            let phase_two_cost = std::mem::take(&mut self.cost);
            self.cost = self
                .kinds
                .iter()
                .map(|k| if *k == ColKind::Artificial { -1.0 } else { 0.0 })
                .collect();
            match self.optimize(true) {
                PhaseEnd::IterationLimit => return self.finish(LpStatus::IterationLimit),
                // phase one is bounded by construction
                PhaseEnd::Unbounded | PhaseEnd::Optimal => {}
            }
            let infeasibility: f64 = self
                .basis
                .iter()
                .zip(&self.xb)
                .filter(|(&j, _)| self.kinds[j] == ColKind::Artificial)
                .map(|(_, &x)| x)
                .sum();
            let scale = 1.0 + self.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if infeasibility > self.tol * scale * 10.0 {
                return self.finish(LpStatus::Infeasible);
            }
            self.drive_out_artificials();
            self.cost = phase_two_cost;
        }
        match self.optimize(false) {
            PhaseEnd::Optimal => self.finish(LpStatus::Optimal),
            PhaseEnd::Unbounded => self.finish(LpStatus::Unbounded),
            PhaseEnd::IterationLimit => self.finish(LpStatus::IterationLimit),
        }
    }

    fn finish(&self, status: LpStatus) -> LpSolution {
        let mut x = vec![0.0; self.n_struct];
        for (i, &j) in self.basis.iter().enumerate() {
            if j < self.n_struct {
                x[j] = self.xb[i].max(0.0);
            }
        }
        let objective = self.cost[..self.n_struct]
            .iter()
            .zip(&x)
            .map(|(c, v)| c * v)
            .sum();
        LpSolution { x, objective, status, iterations: self.iterations }
    }

    /// Dual prices `y = c_B B^{-1}`.
    fn duals(&self) -> Vec<f64> {
        let m = self.m;
        let mut y = vec![0.0; m];
        for (k, &j) in self.basis.iter().enumerate() {
            let c = self.cost[j];
            if c != 0.0 {
                let row = &self.binv[k * m..(k + 1) * m];
                for (yi, &v) in y.iter_mut().zip(row) {
                    *yi += c * v;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64]) -> f64 {
        self.cost[j] - self.cols[j].iter().map(|&(i, v)| y[i] * v).sum::<f64>()
    }

    /// `B^{-1} A_j`.
    fn ftran(&self, j: usize) -> Vec<f64> {
        let m = self.m;
        let mut u = vec![0.0; m];
        for &(i, v) in &self.cols[j] {
            for (k, uk) in u.iter_mut().enumerate() {
                *uk += self.binv[k * m + i] * v;
            }
        }
        u
    }

    fn optimize(&mut self, phase_one: bool) -> PhaseEnd {
        let mut degenerate_run = 0usize;
        loop {
            if self.iterations >= self.max_iter {
                return PhaseEnd::IterationLimit;
            }
            let y = self.duals();
            let bland = self.pricing == Pricing::Bland || degenerate_run >= DEGENERATE_STREAK;
            let mut entering = None;
            let mut best = self.tol;
            for j in 0..self.cols.len() {
                if self.in_basis[j] || (!phase_one && self.kinds[j] == ColKind::Artificial) {
                    continue;
                }
                let d = self.reduced_cost(j, &y);
                if d > best {
                    entering = Some(j);
                    if bland {
                        break;
                    }
                    best = d;
                }
            }
            let Some(q) = entering else {
                return PhaseEnd::Optimal;
            };
            let u = self.ftran(q);

            // ratio test; ties go to the smallest basic variable index
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m {
                let blocked_artificial = !phase_one
                    && self.kinds[self.basis[i]] == ColKind::Artificial
                    && u[i].abs() > self.tol;
                let ratio = if blocked_artificial {
                    0.0
                } else if u[i] > self.tol {
                    self.xb[i].max(0.0) / u[i]
                } else {
                    continue;
                };
                let better = match leave {
                    None => true,
                    Some((r, best_ratio)) => {
                        ratio < best_ratio - 1e-12
                            || (ratio <= best_ratio + 1e-12 && self.basis[i] < self.basis[r])
                    }
                };
                if better {
                    leave = Some((i, ratio));
                }
            }
            let Some((r, theta)) = leave else {
                return PhaseEnd::Unbounded;
            };
            if theta <= 1e-12 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(r, q, &u, theta);
        }
    }

    fn pivot(&mut self, r: usize, q: usize, u: &[f64], theta: f64) {
        let m = self.m;
        for i in 0..m {
            if i != r {
                self.xb[i] -= theta * u[i];
                if self.xb[i].abs() < 1e-13 {
                    self.xb[i] = 0.0;
                }
            }
        }
        self.xb[r] = theta;
        let pr = u[r];
        let (before, rest) = self.binv.split_at_mut(r * m);
        let (pivot_row, after) = rest.split_at_mut(m);
        for v in pivot_row.iter_mut() {
            *v /= pr;
        }
        for (i, chunk) in before.chunks_mut(m).enumerate() {
            let f = u[i];
            if f != 0.0 {
                for (a, &p) in chunk.iter_mut().zip(pivot_row.iter()) {
                    *a -= f * p;
                }
            }
        }
        for (k, chunk) in after.chunks_mut(m).enumerate() {
            let f = u[r + 1 + k];
            if f != 0.0 {
                for (a, &p) in chunk.iter_mut().zip(pivot_row.iter()) {
                    *a -= f * p;
                }
            }
        }
        self.in_basis[self.basis[r]] = false;
        self.in_basis[q] = true;
        self.basis[r] = q;
        self.iterations += 1;
        self.since_refactor += 1;
        if self.since_refactor >= m.max(100) {
            self.refactor();
        }
    }

    /// Recomputes `B^{-1}` and `x_B` from scratch to shed accumulated error.
    fn refactor(&mut self) {
        let m = self.m;
        let mut dense = vec![0.0; m * m];
        for (k, &j) in self.basis.iter().enumerate() {
            for &(i, v) in &self.cols[j] {
                dense[i * m + k] = v;
            }
        }
        if let Some(inv) = linalg::invert(&dense, m, 1e-14) {
            self.binv = inv;
            let mut xb = vec![0.0; m];
            for (k, xk) in xb.iter_mut().enumerate() {
                let row = &self.binv[k * m..(k + 1) * m];
                let v: f64 = row.iter().zip(&self.b).map(|(a, b)| a * b).sum();
                *xk = if v.abs() < 1e-13 { 0.0 } else { v };
            }
            self.xb = xb;
        }
        self.since_refactor = 0;
    }

    /// Pivots zero-valued artificials out of the basis where possible. Rows
    /// where no structural or slack column has a nonzero entry are redundant
    /// and keep their artificial at zero.
    fn drive_out_artificials(&mut self) {
        let m = self.m;
        for r in 0..m {
            if self.kinds[self.basis[r]] != ColKind::Artificial {
                continue;
            }
            let row: Vec<f64> = self.binv[r * m..(r + 1) * m].to_vec();
            let candidate = (0..self.cols.len()).find(|&j| {
                !self.in_basis[j]
                    && self.kinds[j] != ColKind::Artificial
                    && self.cols[j].iter().map(|&(i, v)| row[i] * v).sum::<f64>().abs() > 1e-7
            });
            if let Some(q) = candidate {
                let u = self.ftran(q);
                let theta = self.xb[r] / u[r];
                self.pivot(r, q, &u, theta);
            }
        }
    }
}
