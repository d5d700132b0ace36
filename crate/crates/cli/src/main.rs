use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nip_core::eval::{evaluate, EvalConfig};
use nip_core::gradcheck;
use nip_core::model::{generate_instance, validate_instance, RmabInstance};
use nip_core::net::{Activation, IndexNetwork, NetConfig};
use nip_core::oracle::{extract_policy, solve_occupancy, OccupancyMeasure};
use nip_core::sweep::{heatmap_dat, run_sweep, sweep_csv, SweepConfig};
use nip_core::textfmt::Document;
use nip_core::train::{train_from, LossKind, TrainConfig, TrainLog};
use nip_core::transport::SampleMode;

#[derive(Parser, Debug)]
#[command(name = "nip", version, about = "Neural index policies for budgeted multi-action restless bandits")]
struct Cli {
    /// Directory that receives every output file
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,

    /// Structured-text file with default values for any flag (flags win)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write 0 in wall-clock columns so outputs depend only on the seed
    #[arg(long, global = true)]
    no_timing: bool,

    /// Print progress to stderr
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic instance
    Generate(GenerateArgs),
    /// Check an instance file against its invariants
    Validate {
        instance: PathBuf,
    },
    /// Solve the occupancy-measure LP and write the oracle policy
    Oracle(OracleArgs),
    /// Train an index network
    Train(TrainArgs),
    /// Simulate oracle, trained and random policies and report the gap
    Eval(EvalArgs),
    /// Train and evaluate over a grid of cohort sizes, regularizations and seeds
    Sweep(SweepArgs),
    /// Run the finite-difference gradient checks
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    arms: Option<usize>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    /// Budget fraction of each active action, comma separated
    #[arg(long, value_delimiter = ',')]
    budget_frac: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, default_value = "instance.txt")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(short, long, default_value = "occupancy.txt")]
    output: PathBuf,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// kl, reward or mixed
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lambda_kl: Option<f64>,
    #[arg(long)]
    rollout: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    sinkhorn_iters: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Occupancy measure from `nip oracle`; required by the KL loss
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(short, long, default_value = "checkpoint.txt")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// round (exact assignment) or sample (Sinkhorn plan draws)
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    actions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    budget_frac: Option<Vec<f64>>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    /// Concurrent cells (0 = all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

/// Bad invocation: exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

struct Ctx {
    out: PathBuf,
    config: Option<Document>,
    timing: bool,
    verbose: u8,
}

impl Ctx {
    fn lookup<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match &self.config {
            Some(doc) if doc.contains(key) => Ok(Some(doc.get(key).map_err(|e| usage(format!("config: {e}")))?)),
            _ => Ok(None),
        }
    }

    fn lookup_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match &self.config {
            Some(doc) if doc.contains(key) => {
                Ok(Some(doc.get_list(key).map_err(|e| usage(format!("config: {e}")))?))
            }
            _ => Ok(None),
        }
    }

    /// Flag, else config-file value, else default.
    fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(match flag {
            Some(v) => v,
            None => self.lookup(key)?.unwrap_or(default),
        })
    }

    fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        match flag {
            Some(v) => Ok(v),
            None => self.lookup(key)?.ok_or_else(|| usage(format!("missing required --{}", key.replace('_', "-")))),
        }
    }

    fn pick_list<T: FromStr>(&self, flag: Option<Vec<T>>, key: &str) -> Result<Option<Vec<T>>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.lookup_list(key),
        }
    }

    fn input(&self, flag: Option<PathBuf>, key: &str) -> Result<PathBuf> {
        let path: PathBuf = match flag {
            Some(p) => p,
            None => self
                .lookup::<String>(key)?
                .map(PathBuf::from)
                .ok_or_else(|| usage(format!("missing required --{key}")))?,
        };
        if !path.exists() {
            return Err(usage(format!("{key} file {} does not exist", path.display())));
        }
        Ok(path)
    }

    fn output(&self, name: &Path) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.output(Path::new(name))?;
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

fn read_instance(path: &Path) -> Result<RmabInstance> {
    RmabInstance::read(path).with_context(|| format!("reading instance {}", path.display()))
}

fn read_oracle(path: &Path) -> Result<OccupancyMeasure> {
    OccupancyMeasure::read(path).with_context(|| format!("reading occupancy measure {}", path.display()))
}

fn cmd_generate(ctx: &Ctx, args: GenerateArgs) -> Result<()> {
    let arms = ctx.require(args.arms, "arms")?;
    let states = ctx.require(args.states, "states")?;
    let actions = ctx.require(args.actions, "actions")?;
    let fractions = ctx
        .pick_list(args.budget_frac, "budget_frac")?
        .ok_or_else(|| usage("missing required --budget-frac"))?;
    let seed = ctx.pick(args.seed, "seed", 0)?;
    let inst = generate_instance(arms, states, actions, &fractions, seed).map_err(|e| usage(e.to_string()))?;
    let path = ctx.output(&args.output)?;
    inst.write(&path)?;
    let budgets: Vec<String> = inst.budgets.iter().enumerate().map(|(a, b)| format!("b{a}={b}")).collect();
    println!("wrote {} (N={arms}, S={states}, A={actions}; budgets {})", path.display(), budgets.join(" "));
    Ok(())
}

fn cmd_validate(instance: &Path) -> Result<()> {
    if !instance.exists() {
        return Err(usage(format!("instance file {} does not exist", instance.display())));
    }
    let inst = read_instance(instance)?;
    let violations = validate_instance(&inst);
    if violations.is_empty() {
        println!("{}: valid", instance.display());
        return Ok(());
    }
    for v in &violations {
        println!("{v}");
    }
    Err(nip_core::Error::InvalidArgument(format!("{} invariant violations", violations.len())).into())
}

fn cmd_oracle(ctx: &Ctx, args: OracleArgs) -> Result<()> {
    let inst = read_instance(&ctx.input(args.instance, "instance")?)?;
    let om = solve_occupancy(&inst)?;
    let path = ctx.output(&args.output)?;
    om.write(&path)?;
    let policy_path = ctx.output(Path::new("oracle_policy.txt"))?;
    extract_policy(&om).write(&policy_path)?;
    println!("LP upper bound {:.10} per step", om.objective_value);
    println!("wrote {} and {}", path.display(), policy_path.display());
    Ok(())
}

fn train_config(ctx: &Ctx, flags: &TrainFlags, seed: u64) -> Result<(TrainConfig, usize)> {
    let defaults = TrainConfig::default();
    let loss: String = ctx.pick(flags.loss.clone(), "loss", "kl".to_string())?;
    let loss = LossKind::from_str(&loss).map_err(|e| usage(e.to_string()))?;
    let mut cfg = TrainConfig {
        epochs: ctx.pick(flags.epochs, "epochs", defaults.epochs)?,
        batch_size: ctx.pick(flags.batch, "batch", defaults.batch_size)?,
        learning_rate: ctx.pick(flags.lr, "lr", 0.001)?,
        loss,
        lambda_kl: ctx.pick(flags.lambda_kl, "lambda_kl", defaults.lambda_kl)?,
        rollout_horizon: ctx.pick(flags.rollout, "rollout", defaults.rollout_horizon)?,
        seed,
        eval_every: ctx.pick(flags.eval_every, "eval_every", defaults.eval_every)?,
        timing: ctx.timing,
        ..defaults
    };
    cfg.sinkhorn.epsilon = ctx.pick(flags.epsilon, "epsilon", 0.1)?;
    cfg.sinkhorn.max_iter = ctx.pick(flags.sinkhorn_iters, "sinkhorn_iters", cfg.sinkhorn.max_iter)?;
    cfg.eval.seed = seed.wrapping_add(1);
    cfg.eval.timing = ctx.timing;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let hidden = ctx.pick(flags.hidden, "hidden", 64)?;
    Ok((cfg, hidden))
}

fn log_dat(log: &TrainLog) -> String {
    let mut out = String::from("# epoch train_loss val_loss reward_gap_pct\n");
    for r in &log.records {
        let gap = r.reward_gap_pct.map_or("nan".to_string(), |g| g.to_string());
        out.push_str(&format!("{} {} {} {}\n", r.epoch, r.train_loss, r.val_loss, gap));
    }
    out
}

fn checkpoint_document(net: &IndexNetwork, epochs_done: usize, seed: u64) -> Document {
    let mut doc = net.to_document();
    doc.set_int("epochs_done", epochs_done as u64);
    doc.set_int("train_seed", seed);
    doc
}

fn cmd_train(ctx: &Ctx, args: TrainArgs) -> Result<()> {
    let inst = read_instance(&ctx.input(args.instance, "instance")?)?;
    let seed = ctx.pick(args.seed, "seed", 0)?;
    let (mut cfg, hidden) = train_config(ctx, &args.flags, seed)?;
    let oracle_path = match args.oracle {
        Some(p) => Some(p),
        None => ctx.lookup::<String>("oracle")?.map(PathBuf::from),
    };
    let om = match oracle_path {
        Some(p) if p.exists() => Some(read_oracle(&p)?),
        Some(p) => return Err(usage(format!("oracle file {} does not exist", p.display()))),
        None if cfg.loss != LossKind::Reward => {
            return Err(usage("the kl and mixed losses need --oracle (an occupancy file from `nip oracle`)"))
        }
        None => None,
    };
    let momentum = ctx.pick(args.flags.momentum, "momentum", 0.9)?;
    let (mut net, start) = match args.resume {
        Some(path) => {
            if !path.exists() {
                return Err(usage(format!("checkpoint {} does not exist", path.display())));
            }
            let doc = Document::read(&path)?;
            let done: usize = doc.get("epochs_done")?;
            (IndexNetwork::from_document(&doc)?, done)
        }
        None => {
            let net_cfg = NetConfig { hidden, momentum, activation: Activation::Tanh, ..NetConfig::for_instance(&inst, seed) };
            (IndexNetwork::new(net_cfg), 0)
        }
    };
    cfg.checkpoint_every = ctx.pick(args.checkpoint_every, "checkpoint_every", 0)?;
    let ckpt_path = ctx.output(&args.output)?;
    let verbose = ctx.verbose;
    let result = train_from(&inst, om.as_ref(), &mut net, &cfg, start, &mut |epoch, net, log| {
        if verbose > 0 {
            if let Some(r) = log.records.last() {
                eprintln!("epoch {} train {:.6} val {:.6}", r.epoch, r.train_loss, r.val_loss);
            }
        }
        checkpoint_document(net, epoch + 1, seed).write(&ckpt_path, "index network checkpoint")
    });
    let log = match result {
        Ok(log) => log,
        Err(nip_core::Error::Diverged { epoch, message, dump }) => {
            let path = ctx.output(Path::new("divergence_dump.txt"))?;
            dump.write(&path, "state at the failing epoch")?;
            return Err(nip_core::Error::NonFinite(format!(
                "training diverged at epoch {epoch}: {message}; dump written to {}",
                path.display()
            ))
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    checkpoint_document(&net, cfg.epochs.max(start), seed).write(&ckpt_path, "index network checkpoint")?;

    let log_path = ctx.output(Path::new("train_log.csv"))?;
    if start > 0 && log_path.exists() {
        let body: String = log.to_csv().lines().skip(1).map(|l| format!("{l}\n")).collect();
        let mut existing = fs::read_to_string(&log_path)?;
        existing.push_str(&body);
        fs::write(&log_path, existing)?;
    } else {
        fs::write(&log_path, log.to_csv())?;
    }
    ctx.write("train_log.dat", &log_dat(&log))?;
    if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
        println!(
            "epochs {}..{}: train loss {:.6} -> {:.6}, val loss {:.6}",
            first.epoch, last.epoch, first.train_loss, last.train_loss, last.val_loss
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), log_path.display());
    Ok(())
}

fn parse_mode(mode: &str) -> Result<SampleMode> {
    match mode {
        "round" => Ok(SampleMode::Round),
        "sample" => Ok(SampleMode::Sample),
        other => Err(usage(format!("unknown mode `{other}` (expected round or sample)"))),
    }
}

fn cmd_eval(ctx: &Ctx, args: EvalArgs) -> Result<()> {
    let inst = read_instance(&ctx.input(args.instance, "instance")?)?;
    let om = read_oracle(&ctx.input(args.oracle, "oracle")?)?;
    let net = IndexNetwork::read(ctx.input(args.checkpoint, "checkpoint")?)?;
    let defaults = EvalConfig::default();
    let cfg = EvalConfig {
        horizon: ctx.pick(args.horizon, "horizon", defaults.horizon)?,
        batches: ctx.pick(args.batches, "batches", defaults.batches)?,
        seed: ctx.pick(args.seed, "seed", 0)?,
        mode: parse_mode(&ctx.pick(args.mode, "mode", "round".to_string())?)?,
        epsilon: ctx.pick(args.epsilon, "epsilon", defaults.epsilon)?,
        timing: ctx.timing,
        ..defaults
    };
    let report = evaluate(&inst, &om, &net, &cfg)?;
    ctx.write("eval_series.csv", &report.series_csv())?;
    ctx.write("eval_series.dat", &report.series_dat())?;
    let summary = ctx.write("eval_summary.csv", &report.summary_csv())?;
    println!(
        "gap {:.3}% (budgeted random {:.3}%), LP bound {:.6}/step",
        report.gap_pct, report.random_gap_pct, report.oracle_bound
    );
    if let Some(g) = report.unconstrained_gap_pct {
        println!(
            "unconstrained random {g:.3}% (broke budgets at {} of {} steps)",
            report.unconstrained_violations,
            cfg.horizon * cfg.batches
        );
    }
    println!("wrote {}", summary.display());
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, args: SweepArgs) -> Result<()> {
    fn list<T>(v: Option<Vec<T>>, key: &str) -> Result<Vec<T>> { v.ok_or_else(|| usage(format!("missing required --{key}"))) }
    let arms: Vec<usize> = list(ctx.pick_list(args.arms, "arms")?, "arms")?;
    let epsilons: Vec<f64> = list(ctx.pick_list(args.epsilons, "epsilons")?, "epsilons")?;
    let seeds: Vec<u64> = ctx.pick_list(args.seeds, "seeds")?.unwrap_or_else(|| vec![0]);
    let (train, hidden) = train_config(ctx, &args.flags, 0)?;
    if train.loss != LossKind::Kl {
        bail!(usage("sweeps train with the kl loss only"));
    }
    let defaults = EvalConfig::default();
    let cfg = SweepConfig {
        arms,
        epsilons,
        seeds,
        n_states: ctx.pick(args.states, "states", 5)?,
        n_actions: ctx.pick(args.actions, "actions", 4)?,
        budget_fractions: ctx.pick_list(args.budget_frac, "budget_frac")?.unwrap_or_else(|| vec![0.2, 0.1, 0.1]),
        hidden,
        train,
        eval: EvalConfig {
            horizon: ctx.pick(args.horizon, "horizon", defaults.horizon)?,
            batches: ctx.pick(args.batches, "batches", defaults.batches)?,
            timing: ctx.timing,
            ..defaults
        },
        jobs: ctx.pick(args.jobs, "jobs", 0)?,
    };
    let cells = run_sweep(&cfg)?;
    let path = ctx.write("sweep_summary.csv", &sweep_csv(&cells))?;
    ctx.write("sweep_heatmap.dat", &heatmap_dat(&cells))?;
    let failed = cells.iter().filter(|c| c.outcome.is_err()).count();
    println!("{} cells ({failed} failed); wrote {}", cells.len(), path.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<()> {
    let checks = gradcheck::run_all(seed)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {}: max relative error {:.3e} over {} entries (tolerance {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_err,
            c.checked,
            c.tolerance
        );
        failed += usize::from(!c.passed());
    }
    if failed > 0 {
        return Err(nip_core::Error::NonFinite(format!("{failed} gradient checks failed")).into());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.chain().find_map(|e| e.downcast_ref::<nip_core::Error>()) {
        Some(
            nip_core::Error::NonFinite(_)
            | nip_core::Error::DegenerateChain(_)
            | nip_core::Error::Solver(_)
            | nip_core::Error::Diverged { .. }
            | nip_core::Error::UndefinedGap,
        ) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) if !p.exists() => return Err(usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Some(Document::read(p).map_err(|e| usage(format!("config: {e}")))?),
        None => None,
    };
    let ctx = Ctx { out: cli.output_dir, config, timing: !cli.no_timing, verbose: cli.verbose };
    match cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Validate { instance } => cmd_validate(&instance),
        Command::Oracle(a) => cmd_oracle(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::from(exit_code(&err))
        }
    }
}
