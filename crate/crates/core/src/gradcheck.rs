//! Central finite-difference checks of every analytic gradient in the
//! training chain.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{generate_instance, StateVector};
use crate::net::{encode, FeatureEncoding, IndexNetwork, NetConfig};
use crate::oracle::{extract_policy, solve_occupancy};
use crate::seeding::stream;
use crate::train::{kl_loss, kl_target};
use crate::transport::{sinkhorn_backward, sinkhorn_forward, SinkhornOptions};

pub const STEP: f64 = 1e-5;
/// Entries smaller than this are compared in absolute terms.
pub const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], i: usize) -> Result<f64> {
    let mut probe = x.to_vec();
    probe[i] = x[i] + STEP;
    let up = f(&probe)?;
    probe[i] = x[i] - STEP;
    let down = f(&probe)?;
    Ok((up - down) / (2.0 * STEP))
}

fn compare(name: &str, analytic: &[f64], x: &[f64], tolerance: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64>) -> Result<GradCheck> {
    let mut worst: f64 = 0.0;
    for (i, &g) in analytic.iter().enumerate() {
        worst = worst.max(rel_err(g, central_difference(f, x, i)?));
    }
    Ok(GradCheck { name: name.to_string(), checked: analytic.len(), max_rel_err: worst, tolerance })
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

fn fixed_iterations(epsilon: f64, iterations: usize) -> SinkhornOptions {
    SinkhornOptions { epsilon, max_iter: iterations, tol: 0.0, record_tape: true }
}

/// `<G, I(theta)>` for a random upstream `G` on a 3-arm, 2-state input.
pub fn check_network(seed: u64) -> Result<GradCheck> {
    let mut rng = stream(seed, &[1]);
    let cfg = NetConfig { input_width: 5, hidden: 16, n_actions: 3, activation: crate::net::Activation::Tanh, momentum: 0.0, seed };
    let mut net = IndexNetwork::new(cfg);
    let feats = FeatureEncoding(random_matrix(&mut rng, 3, 5));
    let upstream = random_matrix(&mut rng, 3, 3);
    let (_, tape) = net.forward(&feats)?;
    net.backward(&tape, upstream.view())?;
    let analytic = net.gradients();
    let theta = net.parameters();
    let mut probe = net.clone();
    compare("network parameters", &analytic, &theta, 1e-4, &mut |p| {
        probe.set_parameters(p)?;
        Ok((&probe.forward(&feats)?.0 * &upstream).sum())
    })
}

/// `<G, Gamma(index)>` through a fixed number of Sinkhorn iterations.
pub fn check_sinkhorn(seed: u64, epsilon: f64) -> Result<GradCheck> {
    let mut rng = stream(seed, &[2]);
    let budgets = [2, 1, 1];
    let index = random_matrix(&mut rng, 4, 3);
    let upstream = random_matrix(&mut rng, 4, 3);
    let opts = fixed_iterations(epsilon, 100);
    let plan = sinkhorn_forward(index.view(), &budgets, &opts)?;
    let analytic = sinkhorn_backward(&plan, upstream.view())?;
    let x: Vec<f64> = index.iter().copied().collect();
    compare(&format!("sinkhorn (eps={epsilon})"), analytic.as_slice().unwrap_or(&[]), &x, 1e-4, &mut |p| {
        let idx = Array2::from_shape_vec((4, 3), p.to_vec()).expect("shape");
        Ok((&sinkhorn_forward(idx.view(), &budgets, &opts)?.gamma * &upstream).sum())
    })
}

pub fn check_kl_loss(seed: u64) -> Result<GradCheck> {
    let mut rng = stream(seed, &[3]);
    let gamma = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.1..1.0));
    let target = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.0..1.0));
    let (_, analytic) = kl_loss(gamma.view(), target.view())?;
    let x: Vec<f64> = gamma.iter().copied().collect();
    compare("kl loss", analytic.as_slice().unwrap_or(&[]), &x, 1e-4, &mut |p| {
        let g = Array2::from_shape_vec((4, 3), p.to_vec()).expect("shape");
        Ok(kl_loss(g.view(), target.view())?.0)
    })
}

/// KL loss of the Sinkhorn plan against the oracle target, differentiated
/// with respect to every network parameter, on a 4-arm, 3-state, 3-action
/// instance.
pub fn check_full_chain(seed: u64, epsilon: f64) -> Result<GradCheck> {
    let inst = generate_instance(4, 3, 3, &[0.25, 0.25], seed)?;
    let pi = extract_policy(&solve_occupancy(&inst)?);
    let s = StateVector::sample_uniform(4, 3, &mut stream(seed, &[4]));
    let feats = encode(&inst, &s)?;
    let target = kl_target(&pi, &s);
    let opts = fixed_iterations(epsilon, 200);
    let mut net = IndexNetwork::new(NetConfig { hidden: 16, ..NetConfig::for_instance(&inst, seed) });

    let (index, tape) = net.forward(&feats)?;
    let plan = sinkhorn_forward(index.view(), &inst.budgets, &opts)?;
    let (_, d_gamma) = kl_loss(plan.gamma.view(), target.view())?;
    net.backward(&tape, sinkhorn_backward(&plan, d_gamma.view())?.view())?;
    let analytic = net.gradients();
    let theta = net.parameters();
    let mut probe = net.clone();
    compare("full chain", &analytic, &theta, 1e-3, &mut |p| {
        probe.set_parameters(p)?;
        let (index, _) = probe.forward(&feats)?;
        let plan = sinkhorn_forward(index.view(), &inst.budgets, &opts)?;
        Ok(kl_loss(plan.gamma.view(), target.view())?.0)
    })
}

pub fn run_all(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        check_network(seed)?,
        check_sinkhorn(seed, 0.1)?,
        check_sinkhorn(seed, 0.05)?,
        check_kl_loss(seed)?,
        check_full_chain(seed, 0.1)?,
    ])
}
