//! `cocosched`: workload and power generation, heuristic runs, training, evaluation and
//! policy comparison sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use cocosched::config::resolve_config;
use cocosched::heuristics::HeuristicKind;
use cocosched::metrics::{evaluate_episode, mean_row, summarize, write_report, PolicySpec, ReportRow};
use cocosched::pidlag::PidGains;
use cocosched::policy::run_episode;
use cocosched::power::{generate_power_trace, parse_power_csv};
use cocosched::simenv::{write_event_log, Env};
use cocosched::trainer::{write_curves, Checkpoint, CurveRow, TrainConfig, Trainer};
use cocosched::workload::parse_trace;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_CHECKPOINT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "cocosched", version, about = "Constraint-aware RL job scheduling on renewable power")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set scenario.workload.arrival_rate=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = ".", global = true)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic job trace (trace.csv).
    GenWorkload {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a power supply trace (power.csv).
    GenPower {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of timesteps; defaults to the episode length plus the lookahead window.
        #[arg(long)]
        horizon: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Run one episode and write its event log and report.
    Run {
        /// sjf | fcfs | qos | hvf | random | checkpoint:<path>
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this job trace instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use this power trace instead of generating one.
        #[arg(long)]
        power: Option<PathBuf>,
        /// Act greedily instead of sampling when the policy is a network.
        #[arg(long)]
        greedy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy; writes checkpoint.ckpt, curves.csv and config.toml.
    Train {
        #[command(flatten)]
        train: TrainFlags,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint over several seeds (eval.csv).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list or range, e.g. `0,1,2` or `0..10`.
        #[arg(long, default_value = "0..10")]
        seeds: String,
        /// Accept a checkpoint trained under a different config.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        greedy: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep arrival rates × policies × seeds (compare.csv).
    Compare {
        /// Comma-separated policies.
        #[arg(long, default_value = "sjf,fcfs,qos,hvf,random")]
        policies: String,
        #[arg(long, default_value = "0.2,0.4,0.6,0.8,1.0,1.2")]
        rates: String,
        #[arg(long, default_value = "0..5")]
        seeds: String,
        #[arg(long)]
        greedy: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone)]
struct TrainFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Episodic cost limit; `inf` disables the constraint.
    #[arg(long)]
    cost_limit: Option<f64>,
    /// Controller gains as `Kp,Ki,Kd`.
    #[arg(long)]
    pid: Option<String>,
    /// Apply Kp and Kd twice, as in the printed form of the update.
    #[arg(long)]
    compat_double_gain: bool,
}

/// An error together with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let err = e.into();
        let code = match err.downcast_ref::<cocosched::Error>() {
            Some(cocosched::Error::Config { .. }) => EXIT_CONFIG,
            Some(cocosched::Error::Checkpoint(_)) => EXIT_CHECKPOINT,
            _ => EXIT_RUNTIME,
        };
        Failure { code, err }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_USAGE, err: anyhow!("{msg}") }
}

fn checkpoint_failure(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_CHECKPOINT, err }
}

type CliResult<T> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {:#}", f.err);
        return ExitCode::from(f.code);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("COCOSCHED_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("COCOSCHED_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenWorkload { seed, common } => gen_workload(&common, seed),
        Command::GenPower { seed, horizon, common } => gen_power(&common, seed, horizon),
        Command::Run { policy, seed, trace, power, greedy, common } => {
            run(&common, &policy, seed, trace.as_deref(), power.as_deref(), greedy)
        }
        Command::Train { train: flags, resume, common } => train(&common, &flags, resume.as_deref()),
        Command::Eval { checkpoint, seeds, force, greedy, common } => {
            eval(&common, &checkpoint, &parse_seeds(&seeds)?, force, greedy)
        }
        Command::Compare { policies, rates, seeds, greedy, common } => {
            compare(&common, &policies, &parse_rates(&rates)?, &parse_seeds(&seeds)?, greedy)
        }
    }
}

fn load_config(common: &Common, extra: &[String]) -> CliResult<TrainConfig> {
    let text = match &common.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Failure {
            code: EXIT_CONFIG,
            err: anyhow!("reading config {}: {e}", p.display()),
        })?),
        None => None,
    };
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    Ok(resolve_config(text.as_deref(), &overrides)?)
}

fn out_file(common: &Common, name: &str) -> CliResult<PathBuf> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(common.out.join(name))
}

fn write_with_digest(path: &Path, digest: &str, body: impl FnOnce(&mut Vec<u8>) -> cocosched::Result<()>) -> CliResult<()> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_digest={digest}")?;
    body(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn parse_seeds(raw: &str) -> CliResult<Vec<u64>> {
    let raw = raw.trim();
    let bad = || usage(format!("bad seed list {raw:?}; use `0,1,2` or `0..10`"));
    let seeds: Vec<u64> = if let Some((a, b)) = raw.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        (a..b).collect()
    } else {
        raw.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn parse_rates(raw: &str) -> CliResult<Vec<f64>> {
    let rates: Vec<f64> = raw
        .split(',')
        .map(|s| s.trim().parse::<f64>().ok().filter(|r| r.is_finite() && *r >= 0.0))
        .collect::<Option<_>>()
        .ok_or_else(|| usage(format!("bad rate list {raw:?}")))?;
    if rates.is_empty() {
        return Err(usage("rate list is empty"));
    }
    Ok(rates)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(checkpoint_failure)
}

/// Resolves a policy name; unknown names are usage errors.
fn parse_policy(name: &str, cfg: &TrainConfig, greedy: bool) -> CliResult<PolicySpec> {
    if let Some(path) = name.strip_prefix("checkpoint:") {
        let ck = load_checkpoint(Path::new(path))?;
        if ck.params.shape != cfg.shape() {
            return Err(checkpoint_failure(anyhow!(
                "checkpoint {path} has network shape {:?}, the config needs {:?}",
                ck.params.shape,
                cfg.shape()
            )));
        }
        return Ok(PolicySpec::Network { name: name.to_owned(), params: ck.params, greedy });
    }
    name.parse::<HeuristicKind>().map(PolicySpec::Heuristic).map_err(usage)
}

fn gen_workload(common: &Common, seed: u64) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let trace = cocosched::workload::generate_synthetic(&cfg.scenario.workload, seed)?;
    let path = out_file(common, "trace.csv")?;
    write_with_digest(&path, &cfg.digest(), |b| trace.write_csv(b))?;
    println!("wrote {} jobs to {}", trace.jobs.len(), path.display());
    Ok(())
}

fn gen_power(common: &Common, seed: u64, horizon: Option<u64>) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let s = &cfg.scenario;
    let horizon = horizon.unwrap_or(s.env.episode_length + s.env.horizon_window as u64);
    let trace = generate_power_trace(s.power.kind, horizon, s.power.peak(), seed);
    let path = out_file(common, "power.csv")?;
    write_with_digest(&path, &cfg.digest(), |b| trace.write_csv(b))?;
    println!("wrote {horizon} timesteps to {}", path.display());
    Ok(())
}

fn run(common: &Common, policy: &str, seed: u64, trace: Option<&Path>, power: Option<&Path>, greedy: bool) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let spec = parse_policy(policy, &cfg, greedy)?;
    let s = &cfg.scenario;
    let (mut env, _) = if trace.is_none() && power.is_none() {
        s.build(seed)?
    } else {
        let (built, _) = s.build(seed)?;
        let jobs = match trace {
            Some(p) => parse_trace(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => built.trace().clone(),
        };
        let supply = match power {
            Some(p) => parse_power_csv(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => s.power_trace(seed),
        };
        let mut jobs = jobs;
        jobs.extend_horizon(s.env.episode_length);
        Env::reset(s.env.clone(), jobs, supply, s.power.model())?
    };
    let mut sched = spec.scheduler(seed);
    let totals = run_episode(&mut env, sched.as_mut());
    let trace = env.trace().clone();
    let log = env.into_event_log();
    let m = summarize(&log, &trace, &s.env)?;
    let row = ReportRow {
        policy: spec.name(),
        arrival_rate: s.workload.arrival_rate,
        seed,
        value_ratio: m.value_ratio,
        completion_ratio: m.completion_ratio,
        utilization: m.utilization,
        accrued_cost: m.accrued_cost,
    };
    let digest = cfg.digest();
    write_with_digest(&out_file(common, "events.csv")?, &digest, |b| write_event_log(&log, b))?;
    let report = out_file(common, "report.csv")?;
    let mut buf = Vec::new();
    write_report(std::slice::from_ref(&row), &digest, &mut buf)?;
    fs::write(&report, buf).with_context(|| format!("writing {}", report.display()))?;
    println!(
        "{}: return {:.3}, cost {}, value ratio {:.4}, completion {:.4}, utilization {:.4}",
        row.policy, totals.reward, m.accrued_cost, m.value_ratio, m.completion_ratio, m.utilization
    );
    Ok(())
}

fn train_overrides(flags: &TrainFlags) -> CliResult<Vec<String>> {
    let mut o = Vec::new();
    if let Some(s) = flags.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(i) = flags.iterations {
        o.push(format!("iterations={i}"));
    }
    if let Some(d) = flags.cost_limit {
        if d.is_nan() || d < 0.0 {
            return Err(usage("--cost-limit must be nonnegative"));
        }
        o.push(if d.is_infinite() { "cost_limit=inf".to_owned() } else { format!("cost_limit={d:?}") });
    }
    if let Some(raw) = &flags.pid {
        let g: Vec<f64> = raw
            .split(',')
            .map(|x| x.trim().parse::<f64>().ok())
            .collect::<Option<_>>()
            .filter(|g: &Vec<f64>| g.len() == 3)
            .ok_or_else(|| usage(format!("--pid expects Kp,Ki,Kd, got {raw:?}")))?;
        let gains = PidGains { kp: g[0], ki: g[1], kd: g[2] };
        gains.validate()?;
        o.push(format!("pid.kp={:?}", gains.kp));
        o.push(format!("pid.ki={:?}", gains.ki));
        o.push(format!("pid.kd={:?}", gains.kd));
    }
    if flags.compat_double_gain {
        o.push("double_gain=true".to_owned());
    }
    Ok(o)
}

fn train(common: &Common, flags: &TrainFlags, resume: Option<&Path>) -> CliResult<()> {
    let cfg = load_config(common, &train_overrides(flags)?)?;
    let digest = cfg.digest();
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), load_checkpoint(p)?).map_err(|e| checkpoint_failure(e.into()))?,
        None => Trainer::new(cfg.clone())?,
    };
    let ckpt_path = out_file(common, "checkpoint.ckpt")?;
    let curves_path = out_file(common, "curves.csv")?;
    fs::write(out_file(common, "config.toml")?, cfg.to_toml())?;

    let every = cfg.checkpoint_every;
    let mut rows: Vec<CurveRow> = Vec::new();
    let result = trainer.run(|t, row| {
        println!(
            "iter {:>5}  return {:>10.3}  cost {:>10.3}  lambda {:>10.4}  clip {:.3}",
            row.iteration, row.mean_return, row.mean_cost, row.lambda, row.clip_frac
        );
        if every > 0 && t.iteration() % every == 0 {
            t.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    });
    match result {
        Ok(r) => rows.extend(r),
        Err(e) => {
            // the trainer rolls back a failed iteration, so this is the last good state
            trainer.checkpoint().save(&ckpt_path)?;
            return Err(anyhow::Error::from(e)
                .context(format!("training stopped; last good checkpoint at {}", ckpt_path.display()))
                .into());
        }
    }
    trainer.checkpoint().save(&ckpt_path)?;
    write_with_digest(&curves_path, &digest, |b| write_curves(&rows, b))?;
    println!("wrote {} and {}", ckpt_path.display(), curves_path.display());
    Ok(())
}

fn eval(common: &Common, ckpt_path: &Path, seeds: &[u64], force: bool, greedy: bool) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let digest = cfg.digest();
    let ck = load_checkpoint(ckpt_path)?;
    if !force {
        ck.verify_digest(&digest)
            .map_err(|e| checkpoint_failure(anyhow::Error::from(e).context("pass --force to evaluate anyway")))?;
    }
    if ck.params.shape != cfg.shape() {
        return Err(checkpoint_failure(anyhow!("checkpoint network shape does not match the config")));
    }
    let spec = PolicySpec::Network { name: format!("checkpoint:{}", ckpt_path.display()), params: ck.params, greedy };
    let rows = evaluate_cells(&[(spec, cfg.scenario.workload.arrival_rate)], seeds, &cfg)?;
    let path = out_file(common, "eval.csv")?;
    let mut buf = Vec::new();
    write_report(&rows, &digest, &mut buf)?;
    fs::write(&path, buf)?;
    if let Some(m) = mean_row(&rows) {
        println!(
            "mean over {} seeds: value ratio {:.4}, completion {:.4}, utilization {:.4}, cost {:.2}",
            rows.len(),
            m.value_ratio,
            m.completion_ratio,
            m.utilization,
            m.accrued_cost
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn compare(common: &Common, policies: &str, rates: &[f64], seeds: &[u64], greedy: bool) -> CliResult<()> {
    let cfg = load_config(common, &[])?;
    let specs: Vec<PolicySpec> = policies
        .split(',')
        .map(|p| parse_policy(p.trim(), &cfg, greedy))
        .collect::<CliResult<_>>()?;
    if specs.is_empty() {
        return Err(usage("no policies given"));
    }
    let cells: Vec<(PolicySpec, f64)> =
        rates.iter().flat_map(|&r| specs.iter().map(move |p| (p.clone(), r))).collect();
    let rows = evaluate_cells(&cells, seeds, &cfg)?;
    let path = out_file(common, "compare.csv")?;
    let mut buf = Vec::new();
    write_report(&rows, &cfg.digest(), &mut buf)?;
    fs::write(&path, buf)?;
    println!("wrote {} rows to {}", rows.len(), path.display());
    Ok(())
}

/// Evaluates every (policy, rate) cell on every seed, in parallel, keeping cell order.
fn evaluate_cells(cells: &[(PolicySpec, f64)], seeds: &[u64], cfg: &TrainConfig) -> CliResult<Vec<ReportRow>> {
    let jobs: Vec<(&PolicySpec, f64, u64)> =
        cells.iter().flat_map(|(p, r)| seeds.iter().map(move |&s| (p, *r, s))).collect();
    let rows: Vec<cocosched::Result<ReportRow>> = jobs
        .par_iter()
        .map(|&(p, rate, seed)| {
            let scenario = cfg.scenario.clone().with_arrival_rate(rate);
            evaluate_episode(&scenario, p, seed).map(|(row, _)| row)
        })
        .collect();
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        out.push(r?);
    }
    if out.is_empty() {
        return Err(usage("nothing to evaluate"));
    }
    Ok(out)
}
