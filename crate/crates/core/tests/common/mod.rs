//! Independent reference implementations used as test oracles. None of this
//! goes through the library's solvers.
#![allow(dead_code)]

use nip_core::model::RmabInstance;
use nip_core::simplex::{LinearProgram, RowSense};
use ndarray::Array2;

/// Maximum of an LP over all basic feasible solutions, by enumeration.
/// Returns `None` when no vertex is feasible. Assumes a bounded LP.
pub fn brute_force_lp(lp: &LinearProgram) -> Option<(f64, Vec<f64>)> {
    let n = lp.n_vars;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut n_slack = 0;
    let mut senses = lp.senses.clone();
    let mut dense: Vec<Vec<f64>> = vec![vec![0.0; n]; lp.n_rows()];
    let mut b = lp.rhs.clone();
    for &(r, c, v) in &lp.triplets {
        dense[r][c] += v;
    }
    for (j, &u) in lp.upper_bounds.iter().enumerate() {
        if u.is_finite() {
            let mut row = vec![0.0; n];
            row[j] = 1.0;
            dense.push(row);
            b.push(u);
            senses.push(RowSense::Le);
        }
    }
    let n_ineq = senses.iter().filter(|s| **s != RowSense::Eq).count();
    let width = n + n_ineq;
    for (i, row) in dense.iter().enumerate() {
        let mut full = row.clone();
        full.resize(width, 0.0);
        match senses[i] {
            RowSense::Le => {
                full[n + n_slack] = 1.0;
                n_slack += 1;
            }
            RowSense::Ge => {
                full[n + n_slack] = -1.0;
                n_slack += 1;
            }
            RowSense::Eq => {}
        }
        rows.push(full);
        rhs.push(b[i]);
    }
    let (rows, rhs) = independent_rows(rows, rhs)?;
    let m = rows.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for subset in combinations(width, m) {
        let mut a = vec![0.0; m * m];
        for i in 0..m {
            for (k, &j) in subset.iter().enumerate() {
                a[i * m + k] = rows[i][j];
            }
        }
        let Some(xb) = gauss(a, rhs.clone(), m) else { continue };
        if xb.iter().any(|&v| v < -1e-9) {
            continue;
        }
        let mut x = vec![0.0; width];
        for (k, &j) in subset.iter().enumerate() {
            x[j] = xb[k];
        }
        let value: f64 = (0..n).map(|j| lp.objective[j] * x[j]).sum();
        if best.as_ref().map_or(true, |(v, _)| value > *v) {
            best = Some((value, x[..n].to_vec()));
        }
    }
    best
}

fn independent_rows(rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> Option<(Vec<Vec<f64>>, Vec<f64>)> {
    let width = rows.first().map_or(0, |r| r.len());
    let mut aug: Vec<Vec<f64>> = rows
        .into_iter()
        .zip(rhs)
        .map(|(mut r, b)| {
            r.push(b);
            r
        })
        .collect();
    let mut rank = 0;
    for col in 0..width {
        let Some(p) = (rank..aug.len()).max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs())) else {
            break;
        };
        if aug[p][col].abs() < 1e-10 {
            continue;
        }
        aug.swap(rank, p);
        for i in 0..aug.len() {
            if i != rank {
                let f = aug[i][col] / aug[rank][col];
                if f != 0.0 {
                    for k in 0..=width {
                        aug[i][k] -= f * aug[rank][k];
                    }
                }
            }
        }
        rank += 1;
    }
    for row in &aug[rank..] {
        if row[width].abs() > 1e-8 {
            return None; // inconsistent equalities
        }
    }
    aug.truncate(rank);
    let rhs = aug.iter().map(|r| r[width]).collect();
    let rows = aug.into_iter().map(|mut r| {
        r.pop();
        r
    });
    Some((rows.collect(), rhs))
}

pub fn gauss(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[p * n + col].abs() < 1e-10 {
            return None;
        }
        for k in 0..n {
            a.swap(p * n + k, col * n + k);
        }
        b.swap(p, col);
        for r in 0..n {
            if r != col {
                let f = a[r * n + col] / a[col * n + col];
                for k in 0..n {
                    a[r * n + k] -= f * a[col * n + k];
                }
                b[r] -= f * b[col];
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i * n + i]).collect())
}

pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut cur, &mut out);
    out
}

/// Unconstrained optimal average reward of one arm, by policy iteration on
/// the gain/bias equations (unichain: every chain is irreducible).
pub fn policy_iteration(inst: &RmabInstance, arm: usize) -> (f64, Vec<usize>) {
    let (_, s, a, _) = inst.transitions.dim();
    let p = |st: usize, act: usize, nx: usize| inst.transitions[[arm, st, act, nx]];
    let r = |st: usize, act: usize| inst.rewards[[arm, st, act]];
    let mut policy = vec![0usize; s];
    for _ in 0..1000 {
        // unknowns: gain g, bias h[1..s] with h[0] = 0
        // g + h[st] - sum_nx p(nx) h[nx] = r(st, policy[st])
        let mut m = vec![0.0; s * s];
        let mut rhs = vec![0.0; s];
        for st in 0..s {
            m[st * s] = 1.0;
            for nx in 1..s {
                let mut coef = -p(st, policy[st], nx);
                if nx == st {
                    coef += 1.0;
                }
                m[st * s + nx] = coef;
            }
            rhs[st] = r(st, policy[st]);
        }
        let sol = gauss(m, rhs, s).expect("irreducible chain");
        let gain = sol[0];
        let mut h = vec![0.0; s];
        h[1..].copy_from_slice(&sol[1..]);
        let mut changed = false;
        for st in 0..s {
            let q = |act: usize| r(st, act) + (0..s).map(|nx| p(st, act, nx) * h[nx]).sum::<f64>();
            let current = q(policy[st]);
            let mut best = policy[st];
            let mut best_q = current;
            for act in 0..a {
                let v = q(act);
                if v > best_q + 1e-12 {
                    best = act;
                    best_q = v;
                }
            }
            if best != policy[st] {
                policy[st] = best;
                changed = true;
            }
        }
        if !changed {
            return (gain, policy);
        }
    }
    panic!("policy iteration did not converge");
}

/// Best objective over all budget-feasible integral assignments.
pub fn brute_force_knapsack(index: &Array2<f64>, budgets: &[usize]) -> (f64, Vec<usize>) {
    let (n, a) = index.dim();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let total = a.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        let mut counts = vec![0; a];
        let mut assign = Vec::with_capacity(n);
        for _ in 0..n {
            let act = c % a;
            c /= a;
            counts[act] += 1;
            assign.push(act);
        }
        if counts.iter().zip(budgets).any(|(u, b)| u > b) {
            continue;
        }
        let v: f64 = assign.iter().enumerate().map(|(i, &act)| index[[i, act]]).sum();
        if v > best.0 {
            best = (v, assign);
        }
    }
    best
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Plain-domain Sinkhorn matrix scaling, for cross-checking the log-domain
/// implementation. Only safe when `exp(index / eps)` stays representable.
pub fn reference_sinkhorn(index: &Array2<f64>, budgets: &[usize], eps: f64, iters: usize) -> Array2<f64> {
    let (n, a) = index.dim();
    let k = index.mapv(|v| (v / eps).exp());
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; a];
    for _ in 0..iters {
        for i in 0..n {
            let s: f64 = (0..a).map(|j| k[[i, j]] * v[j]).sum();
            u[i] = 1.0 / s;
        }
        for j in 0..a {
            let s: f64 = (0..n).map(|i| k[[i, j]] * u[i]).sum();
            v[j] = budgets[j] as f64 / s;
        }
    }
    Array2::from_shape_fn((n, a), |(i, j)| u[i] * k[[i, j]] * v[j])
}

/// Random budgets over `a` actions summing to `n`.
pub fn random_budgets<R: rand::Rng>(n: usize, a: usize, rng: &mut R) -> Vec<usize> {
    let mut b = vec![0; a];
    for _ in 0..n {
        b[rng.random_range(0..a)] += 1;
    }
    b
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Sample mean and standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
