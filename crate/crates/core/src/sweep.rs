//! Grid of train-and-evaluate runs over cohort size, regularization and seed.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport};
use crate::model::generate_instance;
use crate::net::{IndexNetwork, NetConfig};
use crate::oracle::solve_occupancy;
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub arms: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub budget_fractions: Vec<f64>,
    pub hidden: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Concurrent cells; 0 uses every core.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub n_arms: usize,
    pub epsilon: f64,
    pub seed: u64,
    pub outcome: std::result::Result<EvalReport, String>,
    pub runtime_s: f64,
}

pub const SWEEP_HEADER: &str = "N,epsilon,seed,gap_pct,oracle_bound,runtime_s,random_gap_pct,status";

impl SweepCell {
    pub fn csv_row(&self) -> String {
        match &self.outcome {
            Ok(r) => format!(
                "{},{},{},{},{},{},{},ok",
                self.n_arms, self.epsilon, self.seed, r.gap_pct, r.oracle_bound, self.runtime_s, r.random_gap_pct
            ),
            Err(msg) => format!(
                "{},{},{},,,{},,\"error: {}\"",
                self.n_arms,
                self.epsilon,
                self.seed,
                self.runtime_s,
                msg.replace('"', "'")
            ),
        }
    }
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for c in cells {
        let _ = writeln!(out, "{}", c.csv_row());
    }
    out
}

/// Whitespace table `N epsilon mean_gap` (mean over seeds) for heatmaps.
pub fn heatmap_dat(cells: &[SweepCell]) -> String {
    let mut out = String::from("# N epsilon gap_pct\n");
    let mut keys: Vec<(usize, f64)> = cells.iter().map(|c| (c.n_arms, c.epsilon)).collect();
    keys.dedup();
    for (n, eps) in keys {
        let gaps: Vec<f64> = cells
            .iter()
            .filter(|c| c.n_arms == n && c.epsilon == eps)
            .filter_map(|c| c.outcome.as_ref().ok().map(|r| r.gap_pct))
            .collect();
        let mean = if gaps.is_empty() { f64::NAN } else { gaps.iter().sum::<f64>() / gaps.len() as f64 };
        let _ = writeln!(out, "{n} {eps} {mean}");
    }
    out
}

fn run_cell(cfg: &SweepConfig, n_arms: usize, epsilon: f64, seed: u64) -> Result<EvalReport> {
    let inst = generate_instance(n_arms, cfg.n_states, cfg.n_actions, &cfg.budget_fractions, seed)?;
    let om = solve_occupancy(&inst)?;
    let mut net = IndexNetwork::new(NetConfig { hidden: cfg.hidden, ..NetConfig::for_instance(&inst, seed) });
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    train_cfg.sinkhorn.epsilon = epsilon;
    train(&inst, Some(&om), &mut net, &train_cfg)?;
    evaluate(&inst, &om, &net, &EvalConfig { seed, epsilon, ..cfg.eval })
}

/// Trains and evaluates every `(N, epsilon, seed)` cell. A failing cell is
/// recorded with its error and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<SweepCell>> {
    if cfg.arms.is_empty() || cfg.epsilons.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep grid has an empty axis".into()));
    }
    let grid: Vec<(usize, f64, u64)> = cfg
        .arms
        .iter()
        .flat_map(|&n| cfg.epsilons.iter().flat_map(move |&e| cfg.seeds.iter().map(move |&s| (n, e, s))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        grid.par_iter()
            .map(|&(n_arms, epsilon, seed)| {
                let start = Instant::now();
                let outcome = run_cell(cfg, n_arms, epsilon, seed).map_err(|e| e.to_string());
                let runtime_s = if cfg.eval.timing { start.elapsed().as_secs_f64() } else { 0.0 };
                SweepCell { n_arms, epsilon, seed, outcome, runtime_s }
            })
            .collect()
    });
    Ok(cells)
}
