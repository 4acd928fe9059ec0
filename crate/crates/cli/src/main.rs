use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deep_pursuit::adversarial::{epsilon_sweep, monotonicity_violations};
use deep_pursuit::config::{parse_config, parse_radius, ExperimentConfig};
use deep_pursuit::experiment::{
    dictionary_metrics, load_data, mean_trace, pursuit_config, run_experiment, smoke_config, ExperimentOptions,
    ExperimentOutcome,
};
use deep_pursuit::pursuit::Engine;
use deep_pursuit::report::{fmt_sig, traces_csv, TraceRow};
use deep_pursuit::training::eval_norm;
use deep_pursuit::{checkpoint, init_model, Error, Exec, ModelParams, NetworkSpec, PursuitMode};

/// Deep pursuit networks: training, FGSM evaluation and dictionary
/// diagnostics.
#[derive(Parser)]
#[command(name = "deep-pursuit", version)]
struct Cli {
    /// Run every batch sequentially on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (seed, mode, T) cell and save checkpoints.
    Train(RunArgs),
    /// Train, attack, measure and chart the whole grid.
    Sweep(RunArgs),
    /// FGSM radius sweep on a trained checkpoint.
    Attack(AttackArgs),
    /// Coherence, frame potential and Welch bound of the global dictionary.
    Metrics(ModelArgs),
    /// Mean per-layer residuals and objective over the pursuit iterations.
    Trace(TraceArgs),
    /// Tiny end-to-end run on synthetic data.
    Smoke {
        /// Output directory.
        #[arg(long, default_value = "runs/smoke")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Write here instead of a timestamped directory under `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    config: PathBuf,
    /// Pursuit mode; also selects the topology (DP-res uses the residual one).
    #[arg(long)]
    mode: PursuitMode,
    /// Checkpoint to load; freshly initialized parameters when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for the fresh initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Pursuit iterations; defaults to the largest listed in the config.
    #[arg(long)]
    iterations: Option<usize>,
    /// Radii such as `2/255` or `0.01`; defaults to the config's sweep.
    #[arg(long = "epsilon", value_parser = parse_eps)]
    epsilons: Vec<f64>,
}

#[derive(Args)]
struct TraceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    iterations: Option<usize>,
    /// Test samples to average over.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_eps(s: &str) -> std::result::Result<f64, String> {
    let v = parse_radius(s)?;
    if v < 0.0 || !v.is_finite() {
        return Err(format!("radius {v} must be ≥ 0"));
    }
    Ok(v)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Spec(_) | Error::Topology(_) | Error::KernelSize(_) | Error::InvalidArgument(_)) => 2,
        Some(Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_)) => 3,
        Some(Error::Numeric(_) | Error::NonFinite(_)) => 4,
        _ => 1,
    }
}

/// A run that finished but rejected optimizer steps.
#[derive(Debug)]
struct Incidents(usize);

impl std::fmt::Display for Incidents {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} optimizer steps rejected for non-finite gradients (see summary.json)", self.0)
    }
}

impl std::error::Error for Incidents {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = if e.downcast_ref::<Incidents>().is_some() { 4 } else { exit_code(&e) };
            ExitCode::from(code)
        }
    }
}

fn run(command: Command, exec: Exec) -> Result<()> {
    match command {
        Command::Train(args) => experiment(&parse_config(&args.config)?, args.out, false, exec),
        Command::Sweep(args) => experiment(&parse_config(&args.config)?, args.out, true, exec),
        Command::Smoke { out } => experiment(&smoke_config(), Some(out), true, exec),
        Command::Attack(args) => attack(args, exec),
        Command::Metrics(args) => metrics(args, exec),
        Command::Trace(args) => trace(args, exec),
    }
}

fn experiment(cfg: &ExperimentConfig, out: Option<PathBuf>, evaluate: bool, exec: Exec) -> Result<()> {
    let options = ExperimentOptions { evaluate, out_dir: out };
    let outcome = run_experiment(cfg, &options, exec, &mut |line| eprintln!("{line}"))?;
    report(&outcome);
    if !outcome.summary.incidents.is_empty() {
        return Err(Incidents(outcome.summary.incidents.len()).into());
    }
    Ok(())
}

fn report(outcome: &ExperimentOutcome) {
    for f in &outcome.summary.failures {
        eprintln!("skipped {f}");
    }
    println!("{} result rows written to {}", outcome.records.len(), outcome.dir.display());
}

fn load_model(args: &ModelArgs) -> Result<(ExperimentConfig, NetworkSpec, ModelParams)> {
    let cfg = parse_config(&args.config)?;
    let spec = cfg.network.spec_for(args.mode)?;
    let params = match &args.checkpoint {
        Some(path) => {
            checkpoint::load(path, &spec)
                .with_context(|| format!("loading {} as a {} network", path.display(), args.mode))?
                .0
        }
        None => init_model(&spec, args.seed)?,
    };
    Ok((cfg, spec, params))
}

fn default_iterations(cfg: &ExperimentConfig, mode: PursuitMode, given: Option<usize>) -> usize {
    match (mode, given) {
        (_, Some(t)) => t,
        (PursuitMode::Ltp, None) => 0,
        (_, None) => cfg.pursuit.iterations.iter().copied().max().unwrap_or(0),
    }
}

fn attack(args: AttackArgs, exec: Exec) -> Result<()> {
    let (cfg, spec, params) = load_model(&args.model)?;
    let t = default_iterations(&cfg, args.model.mode, args.iterations);
    let pursuit = pursuit_config(&cfg, args.model.mode, t);
    let mut eps = if args.epsilons.is_empty() { cfg.attack.sweep() } else { args.epsilons };
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    let (_, test) = load_data(&cfg)?;
    let points = epsilon_sweep(&test, &params, &spec, &pursuit, cfg.train.normalization, &eps, exec)?;
    println!("mode,T,epsilon,robust_acc");
    for p in &points {
        println!("{},{t},{},{}", args.model.mode, fmt_sig(p.epsilon), fmt_sig(p.robust_acc));
    }
    for (a, b) in monotonicity_violations(&points) {
        eprintln!("note: robust accuracy rose between ε = {} and ε = {}", fmt_sig(a), fmt_sig(b));
    }
    Ok(())
}

fn metrics(args: ModelArgs, exec: Exec) -> Result<()> {
    let (cfg, spec, params) = load_model(&args)?;
    let engine = Engine::new(&spec, &params, eval_norm(&params, cfg.train.normalization))?;
    for (j, l) in engine.lipschitz().iter().enumerate() {
        println!("lipschitz.{}: {}{}", j + 1, fmt_sig(l.value), if l.converged { "" } else { " (not converged)" });
    }
    match dictionary_metrics(&spec, &params, cfg.train.normalization, exec)? {
        Some(m) => {
            println!("global_shape: {} x {}", m.rows, m.cols);
            println!("coherence: {}", fmt_sig(m.coherence));
            println!("frame_potential: {}", fmt_sig(m.frame_potential));
            println!("welch_bound: {}", fmt_sig(m.welch_bound));
        }
        None => println!("global dictionary too large to materialize; metrics skipped"),
    }
    Ok(())
}

fn trace(args: TraceArgs, exec: Exec) -> Result<()> {
    let (cfg, spec, params) = load_model(&args.model)?;
    if args.samples == 0 {
        bail!(Error::Config("--samples must be at least 1".into()));
    }
    let mode = args.model.mode;
    let t = default_iterations(&cfg, mode, args.iterations);
    let pursuit = pursuit_config(&cfg, mode, t);
    let (_, test) = load_data(&cfg)?;
    let n = args.samples.min(test.len());
    let xs: Vec<_> = (0..n).map(|i| test.image(i)).collect();
    let engine = Engine::new(&spec, &params, eval_norm(&params, cfg.train.normalization))?;
    let tr = mean_trace(&engine, &xs, &pursuit, exec)?;
    let seed = match &args.model.checkpoint {
        Some(p) => checkpoint::header(&read(p)?)?.seed,
        None => args.model.seed,
    };
    let rows: Vec<TraceRow> = tr
        .residuals
        .iter()
        .enumerate()
        .flat_map(|(j, r)| {
            let (tr, cfg_hash) = (&tr, cfg.short_hash());
            r.iter().enumerate().map(move |(it, &v)| TraceRow {
                config_hash: cfg_hash.clone(),
                seed,
                mode,
                iterations: t,
                layer: j + 1,
                iteration: it,
                residual: v,
                objective: tr.objective[it],
            })
        })
        .collect();
    let text = traces_csv(&rows);
    match args.out {
        Some(path) => std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }.into())
}
