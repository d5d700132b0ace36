//! Training loop: sample joint states, predict indices, relax the budgeted
//! assignment with Sinkhorn, score the plan, and push the gradient back
//! through the transport layer into the network.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig};
use crate::model::{step_ignoring_budgets, RmabInstance, StateVector};
use crate::net::{encode, ForwardTape, IndexNetwork};
use crate::oracle::{extract_policy, OccupancyMeasure, OraclePolicy};
use crate::seeding::stream;
use crate::textfmt::Document;
use crate::transport::{plan_to_actions, sinkhorn_backward_log, sinkhorn_forward, SampleMode, SinkhornOptions};

const TAG_TRAIN: u64 = 0x7a1;
const TAG_ROLLOUT: u64 = 0x7a2;
const TAG_VALIDATION: u64 = 0x7a3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Kl,
    Reward,
    /// `lambda_kl * KL + reward`.
    Mixed,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(LossKind::Kl),
            "reward" => Ok(LossKind::Reward),
            "mixed" => Ok(LossKind::Mixed),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}` (expected kl, reward or mixed)"))),
        }
    }
}

impl LossKind {
    fn needs_oracle(self) -> bool {
        self != LossKind::Reward
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub lambda_kl: f64,
    /// Steps per sampled state for the reward loss.
    pub rollout_horizon: usize,
    pub seed: u64,
    pub sinkhorn: SinkhornOptions,
    pub validation_size: usize,
    /// Evaluate the reward gap every this many epochs (0 disables).
    pub eval_every: usize,
    pub eval: EvalConfig,
    /// Call the checkpoint hook every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 0.01,
            loss: LossKind::Kl,
            lambda_kl: 1.0,
            rollout_horizon: 5,
            seed: 0,
            sinkhorn: SinkhornOptions::default(),
            validation_size: 16,
            eval_every: 0,
            eval: EvalConfig { batches: 10, ..Default::default() },
            checkpoint_every: 0,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and nonnegative");
        }
        if !(self.sinkhorn.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.loss != LossKind::Kl && self.rollout_horizon == 0 {
            return bad("reward loss needs a positive rollout horizon");
        }
        if self.loss != LossKind::Reward && !(self.lambda_kl > 0.0) {
            return bad("lambda_kl must be positive");
        }
        if self.validation_size == 0 {
            return bad("validation size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub reward_gap_pct: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_loss,reward_gap_pct,seconds";

impl TrainLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.records {
            let gap = r.reward_gap_pct.map(|g| g.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, gap, r.seconds);
        }
        out
    }
}

/// Row `n` is the oracle's action distribution at arm `n`'s current state.
pub fn kl_target(pi: &OraclePolicy, s: &StateVector) -> Array2<f64> {
    let (n, _, a) = pi.pi.dim();
    Array2::from_shape_fn((n, a), |(arm, act)| pi.pi[[arm, s.0[arm], act]])
}

/// `sum t (log t - log gamma)` with `0 log 0 = 0`, and its gradient in gamma.
pub fn kl_loss(gamma: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if gamma.dim() != target.dim() {
        return Err(Error::Shape(format!("plan {:?} vs target {:?}", gamma.dim(), target.dim())));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(gamma.dim());
    for ((idx, &t), &g) in target.indexed_iter().zip(gamma.iter()) {
        if t > 0.0 {
            if !(g > 0.0) {
                return Err(Error::InvalidArgument(format!("plan entry {idx:?} is {g}, expected > 0")));
            }
            loss += t * (t.ln() - g.ln());
            grad[idx] = -t / g;
        }
    }
    Ok((loss, grad))
}

/// [`kl_loss`] evaluated from `ln gamma`; returns the gradient with respect
/// to `ln gamma`, which is `-t`.
pub fn kl_loss_log(log_gamma: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<(f64, Array2<f64>)> {
    if log_gamma.dim() != target.dim() {
        return Err(Error::Shape(format!("plan {:?} vs target {:?}", log_gamma.dim(), target.dim())));
    }
    let mut loss = 0.0;
    let mut grad = Array2::zeros(target.dim());
    for ((idx, &t), &lg) in target.indexed_iter().zip(log_gamma.iter()) {
        if t > 0.0 {
            if lg == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!("plan entry {idx:?} is structurally zero")));
            }
            loss += t * (t.ln() - lg);
            grad[idx] = -t;
        }
    }
    Ok((loss, grad))
}

/// Negative expected one-step reward of the plan at joint state `s`.
pub fn reward_loss(inst: &RmabInstance, gamma: ArrayView2<'_, f64>, s: &StateVector) -> Result<(f64, Array2<f64>)> {
    inst.check_states(s)?;
    if gamma.dim() != (inst.n_arms(), inst.n_actions()) {
        return Err(Error::Shape(format!("plan shape {:?}", gamma.dim())));
    }
    let grad = Array2::from_shape_fn(gamma.dim(), |(n, a)| -inst.rewards[[n, s.0[n], a]]);
    let loss = (&grad * &gamma).sum();
    Ok((loss, grad))
}

struct Sample {
    loss: f64,
    steps: Vec<(ForwardTape, Array2<f64>)>,
    last_index: Array2<f64>,
    last_gamma: Array2<f64>,
}

struct Context<'a> {
    inst: &'a RmabInstance,
    pi: Option<OraclePolicy>,
    cfg: &'a TrainConfig,
}

impl Context<'_> {
    /// Loss and `dL/d(ln Gamma)` at one joint state.
    fn score(&self, net: &IndexNetwork, s: &StateVector, kind: LossKind, tape: bool) -> Result<(f64, ForwardTape, Array2<f64>, Array2<f64>, crate::transport::TransportPlan)> {
        let (index, fwd) = net.forward(&encode(self.inst, s)?)?;
        let opts = SinkhornOptions { record_tape: tape, ..self.cfg.sinkhorn };
        let plan = sinkhorn_forward(index.view(), &self.inst.budgets, &opts)?;
        let mut loss = 0.0;
        let mut d_log_gamma = Array2::zeros(plan.gamma.dim());
        if kind != LossKind::Reward {
            let pi = self.pi.as_ref().ok_or_else(|| Error::InvalidArgument("KL loss needs an oracle".into()))?;
            let (l, g) = kl_loss_log(plan.log_gamma.view(), kl_target(pi, s).view())?;
            loss += self.cfg.lambda_kl * l;
            d_log_gamma.scaled_add(self.cfg.lambda_kl, &g);
        }
        if kind != LossKind::Kl {
            let (l, g) = reward_loss(self.inst, plan.gamma.view(), s)?;
            loss += l;
            d_log_gamma += &(&g * &plan.gamma);
        }
        Ok((loss, fwd, index, d_log_gamma, plan))
    }

    fn sample(&self, net: &IndexNetwork, s0: StateVector, epoch: usize, element: usize) -> Result<Sample> {
        let horizon = if self.cfg.loss == LossKind::Kl { 1 } else { self.cfg.rollout_horizon };
        let mut rng = stream(self.cfg.seed, &[TAG_ROLLOUT, epoch as u64, element as u64]);
        let mut s = s0;
        let mut total = 0.0;
        let mut steps = Vec::with_capacity(horizon);
        let mut last = (Array2::zeros((0, 0)), Array2::zeros((0, 0)));
        for k in 0..horizon {
            let (loss, fwd, index, d_log_gamma, plan) = self.score(net, &s, self.cfg.loss, true)?;
            total += loss;
            if !loss.is_finite() {
                return Ok(Sample { loss, steps, last_index: index, last_gamma: plan.gamma });
            }
            let d_index = sinkhorn_backward_log(&plan, d_log_gamma.view())?;
            steps.push((fwd, d_index));
            if k + 1 < horizon {
                let acts = plan_to_actions(&plan, SampleMode::Sample, &mut rng)?;
                s = step_ignoring_budgets(self.inst, &s, &acts, &mut rng)?.0;
            }
            last = (index, plan.gamma);
        }
        Ok(Sample { loss: total, steps, last_index: last.0, last_gamma: last.1 })
    }

    fn validation_loss(&self, net: &IndexNetwork, epoch: usize) -> Result<f64> {
        let kind = if self.pi.is_some() { LossKind::Kl } else { LossKind::Reward };
        let mut rng = stream(self.cfg.seed, &[TAG_VALIDATION, epoch as u64]);
        let states: Vec<StateVector> = (0..self.cfg.validation_size)
            .map(|_| StateVector::sample_uniform(self.inst.n_arms(), self.inst.n_states(), &mut rng))
            .collect();
        let losses: Vec<f64> = states
            .par_iter()
            .map(|s| self.score(net, s, kind, false).map(|r| r.0))
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

fn divergence_dump(net: &IndexNetwork, epoch: usize, sample: Option<&Sample>) -> Document {
    let mut doc = Document::new();
    doc.set("kind", "divergence_dump");
    doc.set_int("epoch", epoch as u64);
    if let Some(sample) = sample {
        doc.set_real("loss", sample.loss);
        doc.set_ints("index_shape", sample.last_index.shape().iter().copied());
        doc.set_reals("index", sample.last_index.iter());
        doc.set_reals("gamma", sample.last_gamma.iter());
    }
    doc.set_reals("parameters", net.parameters().iter());
    doc
}

fn diverged(net: &IndexNetwork, epoch: usize, sample: Option<&Sample>, err: Error) -> Error {
    match err {
        Error::NonFinite(message) => {
            Error::Diverged { epoch, message, dump: Box::new(divergence_dump(net, epoch, sample)) }
        }
        other => other,
    }
}

/// Called after each epoch with the 0-based epoch just finished.
pub type EpochHook<'a> = dyn FnMut(usize, &IndexNetwork, &TrainLog) -> Result<()> + 'a;

pub fn train(inst: &RmabInstance, om: Option<&OccupancyMeasure>, net: &mut IndexNetwork, cfg: &TrainConfig) -> Result<TrainLog> {
    train_from(inst, om, net, cfg, 0, &mut |_, _, _| Ok(()))
}

/// Runs epochs `start_epoch..cfg.epochs`. Each epoch's randomness depends only
/// on `(seed, epoch)`, so a run resumed from a checkpoint taken after epoch
/// `k` continues exactly as the uninterrupted run would.
pub fn train_from(
    inst: &RmabInstance,
    om: Option<&OccupancyMeasure>,
    net: &mut IndexNetwork,
    cfg: &TrainConfig,
    start_epoch: usize,
    hook: &mut EpochHook<'_>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if cfg.loss.needs_oracle() && om.is_none() {
        return Err(Error::InvalidArgument("KL loss requires an occupancy measure".into()));
    }
    if net.config.input_width != inst.n_arms() + inst.n_states() || net.config.n_actions != inst.n_actions() {
        return Err(Error::Shape("network does not match the instance dimensions".into()));
    }
    inst.check_balanced()?;
    let ctx = Context { inst, pi: om.map(extract_policy), cfg };
    let clock = Instant::now();
    let mut log = TrainLog::default();

    for epoch in start_epoch..cfg.epochs {
        let mut rng = stream(cfg.seed, &[TAG_TRAIN, epoch as u64]);
        let states: Vec<StateVector> = (0..cfg.batch_size)
            .map(|_| StateVector::sample_uniform(inst.n_arms(), inst.n_states(), &mut rng))
            .collect();
        let frozen: &IndexNetwork = net;
        let samples: Vec<Sample> = states
            .into_par_iter()
            .enumerate()
            .map(|(i, s)| ctx.sample(frozen, s, epoch, i))
            .collect::<Result<_>>()
            .map_err(|e| diverged(net, epoch, None, e))?;

        if let Some(bad) = samples.iter().find(|s| !s.loss.is_finite()) {
            return Err(Error::Diverged {
                epoch,
                message: format!("loss is {}", bad.loss),
                dump: Box::new(divergence_dump(net, epoch, Some(bad))),
            });
        }
        let scale = 1.0 / cfg.batch_size as f64;
        let train_loss = samples.iter().map(|s| s.loss).sum::<f64>() * scale;
        for sample in &samples {
            for (tape, d_index) in &sample.steps {
                net.backward(tape, (d_index * scale).view())?;
            }
        }
        if let Err(e) = net.sgd_step(cfg.learning_rate) {
            return Err(diverged(net, epoch, samples.first(), e));
        }

        let val_loss = ctx.validation_loss(net, epoch).map_err(|e| diverged(net, epoch, None, e))?;
        let last = epoch + 1 == cfg.epochs;
        let reward_gap_pct = match om {
            Some(om) if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) => {
                Some(evaluate(inst, om, net, &EvalConfig { epsilon: cfg.sinkhorn.epsilon, ..cfg.eval })?.gap_pct)
            }
            _ => None,
        };
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            train_loss,
            val_loss,
            reward_gap_pct,
            seconds: if cfg.timing { clock.elapsed().as_secs_f64() } else { 0.0 },
        });
        if cfg.checkpoint_every > 0 && ((epoch + 1) % cfg.checkpoint_every == 0 || last) {
            hook(epoch, net, &log)?;
        }
    }
    Ok(log)
}
