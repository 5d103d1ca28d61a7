//! Command line: parsing into a [`RunConfig`] and emitting the equivalent line.

use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{ArgGroup, CommandFactory, Parser};
use fedsim_core::algorithms::{AlgorithmKind, LocalSteps, LrSchedule, ShiftInit};
use fedsim_core::compressors::CompressorSpec;
use fedsim_core::engine::{RunConfig, RunStatus};
use fedsim_core::problems::{Family, OracleMode, ProblemSpec, Split, Weighting};
use fedsim_core::store::{ListFilter, Scale, XAxis, YAxis};

pub const DEFAULT_OUT_DIR: &str = "runs";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Federated optimization simulator",
    after_help = "Problem strings look like `quad:d=20,mu=1,L=2,samples=50` or \
                  `logreg:d=50,samples=100,noise=0.1`. Keys: d, mu, L, samples, split (iid|noniid), \
                  lambda, noise, seed.\n\
                  Compressors: identity, bern:P, randk:K|P%, topk:K|P%, natural, dith:S, ndith:S, \
                  terngrad, qsgd:S, compose(OUTER,INNER), switch:P(A,B).",
    group(ArgGroup::new("steps").args(["local_steps", "local_epochs"]))
)]
struct Cli {
    /// gd, dcgd, fedavg, fedprox, scaffold, diana, marina or ef21 [default: fedavg]
    #[arg(long)]
    algorithm: Option<AlgorithmKind>,
    /// Communication rounds [default: 100]
    #[arg(long)]
    rounds: Option<usize>,
    /// Number of clients M [default: 10]
    #[arg(long)]
    clients: Option<usize>,
    /// Clients sampled per round [default: all]
    #[arg(long)]
    clients_per_round: Option<usize>,
    /// Server learning rate [default: 1]
    #[arg(long)]
    global_lr: Option<f64>,
    /// Client learning rate [default: 0.1]
    #[arg(long)]
    local_lr: Option<f64>,
    /// Local steps per round [default: 1]
    #[arg(long)]
    local_steps: Option<usize>,
    /// Local passes over the data per round, instead of --local-steps
    #[arg(long)]
    local_epochs: Option<usize>,
    /// Client heavy-ball momentum [default: 0]
    #[arg(long)]
    local_momentum: Option<f64>,
    /// Server heavy-ball momentum [default: 0]
    #[arg(long)]
    global_momentum: Option<f64>,
    /// `constant` or `step:FACTOR:EVERY` [default: constant]
    #[arg(long)]
    lr_schedule: Option<String>,
    /// Gradient oracle: `full` or `nice:FRACTION` [default: full]
    #[arg(long)]
    oracle: Option<String>,
    /// Uplink compressor [default: identity]
    #[arg(long)]
    compressor: Option<CompressorSpec>,
    /// Downlink compressor [default: none]
    #[arg(long)]
    compressor_down: Option<CompressorSpec>,
    /// Problem description [default: quad:d=20,mu=1,L=2,samples=50]
    #[arg(long)]
    problem: Option<String>,
    /// Aggregation weights: uniform or by-dataset-size [default: uniform]
    #[arg(long)]
    weights: Option<String>,
    /// Run seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client tasks [default: 1]
    #[arg(long)]
    threads: Option<usize>,
    /// Record metrics every this many rounds [default: 1]
    #[arg(long)]
    eval_every: Option<usize>,
    /// Initial gradient shifts: zero or full-grad [default: zero]
    #[arg(long)]
    shift_init: Option<String>,
    /// MARINA full-synchronisation probability [default: 0.1]
    #[arg(long)]
    marina_p: Option<f64>,
    /// DIANA shift learning rate [default: 0.5]
    #[arg(long)]
    diana_alpha: Option<f64>,
    /// FedProx proximal coefficient [default: 0]
    #[arg(long)]
    prox_mu: Option<f64>,
    /// Experiment group label
    #[arg(long)]
    group: Option<String>,
    /// Free-form comment
    #[arg(long)]
    comment: Option<String>,
    /// Extra label; may be repeated
    #[arg(long = "tag")]
    tags: Vec<String>,

    /// Directory holding experiment records
    #[arg(long, env = "FEDSIM_OUT_DIR", default_value = DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
    /// Start the HTTP API instead of running
    #[arg(long)]
    serve: bool,
    /// Address for --serve
    #[arg(long, default_value = DEFAULT_BIND)]
    bind: String,
    /// Maximum concurrent runs under --serve
    #[arg(long, default_value_t = 2)]
    max_runs: usize,
    /// List stored experiments (filters: --group, --algorithm, --status)
    #[arg(long)]
    list: bool,
    /// Status filter for --list
    #[arg(long)]
    status: Option<RunStatus>,
    /// Export comma-separated experiment ids as CSV
    #[arg(long, value_delimiter = ',')]
    export: Vec<String>,
    /// x axis for --export: rounds, bits, oracle_calls, wall_clock
    #[arg(long, default_value = "rounds")]
    x_axis: XAxis,
    /// y axis for --export: f, grad_norm, loss
    #[arg(long, default_value = "grad_norm")]
    y_axis: YAxis,
    /// linear or log
    #[arg(long, default_value = "linear")]
    scale: Scale,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Run(Box<RunConfig>),
    Serve { bind: String, max_runs: usize },
    List(ListFilter),
    Export { ids: Vec<String>, x: XAxis, y: YAxis, scale: Scale },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Invocation {
    /// Usage or version text; printing it is a successful run.
    Help(String),
    Command { action: Action, out_dir: PathBuf },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid value for --{flag}: {reason}")]
    Value { flag: &'static str, reason: String },
    #[error("{0}")]
    Config(String),
}

pub fn help_text() -> String {
    Cli::command().render_help().to_string()
}

pub fn parse_args<I, T>(argv: I) -> Result<Invocation, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            return Ok(Invocation::Help(e.render().to_string()));
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    let out_dir = cli.out_dir.clone();
    let action = if cli.serve {
        Action::Serve {
            bind: cli.bind.clone(),
            max_runs: cli.max_runs.max(1),
        }
    } else if cli.list {
        Action::List(ListFilter {
            group: cli.group.clone(),
            algorithm: cli.algorithm,
            status: cli.status,
        })
    } else if !cli.export.is_empty() {
        Action::Export {
            ids: cli.export.clone(),
            x: cli.x_axis,
            y: cli.y_axis,
            scale: cli.scale,
        }
    } else {
        let config = build_config(&cli)?;
        check_config(&config).map_err(CliError::Config)?;
        Action::Run(Box::new(config))
    };
    Ok(Invocation::Command { action, out_dir })
}

/// Validation plus a trial build of the problem, so bad data parameters fail early.
pub fn check_config(config: &RunConfig) -> Result<(), String> {
    config.validate().map_err(|e| e.to_string())?;
    config
        .problem
        .build(config.problem_seed())
        .map(drop)
        .map_err(|e| e.to_string())
}

fn value_err(flag: &'static str) -> impl Fn(String) -> CliError {
    move |reason| CliError::Value { flag, reason }
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut c = RunConfig::default();
    if let Some(p) = &cli.problem {
        c.problem = parse_problem(p).map_err(value_err("problem"))?;
    }
    if let Some(m) = cli.clients {
        c.problem.clients = m;
    }
    if let Some(w) = &cli.weights {
        c.problem.weights = parse_weights(w).map_err(value_err("weights"))?;
    }
    if let Some(a) = cli.algorithm {
        c.algorithm = a;
    }
    if let Some(t) = cli.rounds {
        c.rounds = t;
    }
    c.clients_per_round = cli.clients_per_round;
    let o = &mut c.optimizer;
    if let Some(v) = cli.global_lr {
        o.global_lr = v;
    }
    if let Some(v) = cli.local_lr {
        o.local_lr = v;
    }
    if let Some(k) = cli.local_steps {
        o.local_steps = LocalSteps::Steps(k);
    }
    if let Some(e) = cli.local_epochs {
        o.local_steps = LocalSteps::Epochs(e);
    }
    if let Some(v) = cli.local_momentum {
        o.local_momentum = v;
    }
    if let Some(v) = cli.global_momentum {
        o.global_momentum = v;
    }
    if let Some(s) = &cli.lr_schedule {
        o.lr_schedule = parse_schedule(s).map_err(value_err("lr-schedule"))?;
    }
    if let Some(s) = &cli.oracle {
        o.oracle = parse_oracle(s).map_err(value_err("oracle"))?;
    }
    if let Some(s) = &cli.shift_init {
        o.shift_init = parse_shift_init(s).map_err(value_err("shift-init"))?;
    }
    if let Some(v) = cli.marina_p {
        o.marina_p = v;
    }
    if let Some(v) = cli.diana_alpha {
        o.diana_alpha = v;
    }
    if let Some(v) = cli.prox_mu {
        o.prox_mu = v;
    }
    if let Some(u) = &cli.compressor {
        c.uplink = u.clone();
    }
    c.downlink = cli.compressor_down.clone();
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(w) = cli.threads {
        c.worker_threads = w;
    }
    if let Some(e) = cli.eval_every {
        c.eval_every = e;
    }
    c.group = cli.group.clone();
    c.comment = cli.comment.clone();
    c.tags = cli.tags.clone();
    Ok(c)
}

fn parse_weights(s: &str) -> Result<Weighting, String> {
    match s {
        "uniform" => Ok(Weighting::Uniform),
        "by-dataset-size" | "size" => Ok(Weighting::ByDatasetSize),
        other => Err(format!("expected uniform or by-dataset-size, got `{other}`")),
    }
}

fn weights_name(w: Weighting) -> &'static str {
    match w {
        Weighting::Uniform => "uniform",
        Weighting::ByDatasetSize => "by-dataset-size",
    }
}

fn parse_shift_init(s: &str) -> Result<ShiftInit, String> {
    match s {
        "zero" => Ok(ShiftInit::Zero),
        "full-grad" => Ok(ShiftInit::FullGrad),
        other => Err(format!("expected zero or full-grad, got `{other}`")),
    }
}

fn parse_oracle(s: &str) -> Result<OracleMode, String> {
    if s == "full" {
        return Ok(OracleMode::Full);
    }
    let tau = s
        .strip_prefix("nice:")
        .ok_or_else(|| format!("expected full or nice:FRACTION, got `{s}`"))?;
    tau.parse::<f64>()
        .map(OracleMode::Nice)
        .map_err(|_| format!("`{tau}` is not a number"))
}

fn oracle_string(o: OracleMode) -> String {
    match o {
        OracleMode::Full => "full".into(),
        OracleMode::Nice(t) => format!("nice:{t}"),
    }
}

fn parse_schedule(s: &str) -> Result<LrSchedule, String> {
    if s == "constant" {
        return Ok(LrSchedule::Constant);
    }
    let rest = s
        .strip_prefix("step:")
        .ok_or_else(|| format!("expected constant or step:FACTOR:EVERY, got `{s}`"))?;
    let (factor, every) = rest
        .split_once(':')
        .ok_or_else(|| "step schedule needs FACTOR:EVERY".to_string())?;
    Ok(LrSchedule::StepDecay {
        factor: factor.parse().map_err(|_| format!("`{factor}` is not a number"))?,
        every: every.parse().map_err(|_| format!("`{every}` is not a round count"))?,
    })
}

fn schedule_string(s: LrSchedule) -> String {
    match s {
        LrSchedule::Constant => "constant".into(),
        LrSchedule::StepDecay { factor, every } => format!("step:{factor}:{every}"),
    }
}

/// `family[:key=value,...]`; unlisted keys keep their defaults.
pub fn parse_problem(s: &str) -> Result<ProblemSpec, String> {
    let (family, rest) = match s.split_once(':') {
        Some((f, r)) => (f, Some(r)),
        None => (s, None),
    };
    let family = match family.trim() {
        "quad" | "quadratic" => Family::Quad,
        "logreg" | "logistic" => Family::Logreg,
        other => return Err(format!("unknown problem family `{other}` (expected quad or logreg)")),
    };
    let mut p = ProblemSpec {
        family,
        ..Default::default()
    };
    for pair in rest.into_iter().flat_map(|r| r.split(',')).filter(|kv| !kv.trim().is_empty()) {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{pair}`"))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| v.parse::<f64>().map_err(|_| format!("`{v}` is not a number for {k}"));
        let int = |v: &str| v.parse::<usize>().map_err(|_| format!("`{v}` is not a count for {k}"));
        match k {
            "d" => p.d = int(v)?,
            "mu" => p.mu = num(v)?,
            "L" | "l" => p.l = num(v)?,
            "samples" => p.samples = int(v)?,
            "lambda" => p.lambda = num(v)?,
            "noise" => p.label_noise = num(v)?,
            "seed" => p.seed = Some(v.parse().map_err(|_| format!("`{v}` is not a seed"))?),
            "split" => {
                p.split = match v {
                    "iid" => Split::Iid,
                    "noniid" | "non-iid" => Split::Noniid,
                    other => return Err(format!("unknown split `{other}`")),
                }
            }
            "clients" => return Err("set the client count with --clients".into()),
            other => return Err(format!("unknown problem key `{other}`")),
        }
    }
    Ok(p)
}

/// Problem string without the client count or weighting (those have flags).
pub fn problem_string(p: &ProblemSpec) -> String {
    let defaults = ProblemSpec::default();
    let mut parts = Vec::new();
    if p.d != defaults.d {
        parts.push(format!("d={}", p.d));
    }
    if p.mu.to_bits() != defaults.mu.to_bits() {
        parts.push(format!("mu={}", p.mu));
    }
    if p.l.to_bits() != defaults.l.to_bits() {
        parts.push(format!("L={}", p.l));
    }
    if p.samples != defaults.samples {
        parts.push(format!("samples={}", p.samples));
    }
    if p.split != defaults.split {
        parts.push("split=iid".into());
    }
    if p.lambda.to_bits() != defaults.lambda.to_bits() {
        parts.push(format!("lambda={}", p.lambda));
    }
    if p.label_noise.to_bits() != defaults.label_noise.to_bits() {
        parts.push(format!("noise={}", p.label_noise));
    }
    if let Some(s) = p.seed {
        parts.push(format!("seed={s}"));
    }
    let family = match p.family {
        Family::Quad => "quad",
        Family::Logreg => "logreg",
    };
    if parts.is_empty() {
        family.to_string()
    } else {
        format!("{family}:{}", parts.join(","))
    }
}

/// Flags that reproduce `config`, omitting every value equal to its default.
pub fn cli_args(config: &RunConfig) -> Vec<String> {
    let d = RunConfig::default();
    let mut args: Vec<String> = Vec::new();
    let mut push = |flag: &str, value: String| {
        args.push(format!("--{flag}"));
        args.push(value);
    };
    let differs = |a: f64, b: f64| a.to_bits() != b.to_bits();

    if config.algorithm != d.algorithm {
        push("algorithm", config.algorithm.to_string());
    }
    if config.rounds != d.rounds {
        push("rounds", config.rounds.to_string());
    }
    let (p, dp) = (&config.problem, &d.problem);
    if p.family != dp.family
        || p.d != dp.d
        || differs(p.mu, dp.mu)
        || differs(p.l, dp.l)
        || p.samples != dp.samples
        || p.split != dp.split
        || differs(p.lambda, dp.lambda)
        || differs(p.label_noise, dp.label_noise)
        || p.seed.is_some()
    {
        push("problem", problem_string(p));
    }
    if p.clients != dp.clients {
        push("clients", p.clients.to_string());
    }
    if p.weights != dp.weights {
        push("weights", weights_name(p.weights).into());
    }
    if let Some(n) = config.clients_per_round {
        push("clients-per-round", n.to_string());
    }
    let (o, od) = (&config.optimizer, &d.optimizer);
    if differs(o.global_lr, od.global_lr) {
        push("global-lr", o.global_lr.to_string());
    }
    if differs(o.local_lr, od.local_lr) {
        push("local-lr", o.local_lr.to_string());
    }
    match o.local_steps {
        LocalSteps::Steps(k) if o.local_steps != od.local_steps => push("local-steps", k.to_string()),
        LocalSteps::Epochs(e) => push("local-epochs", e.to_string()),
        _ => {}
    }
    if differs(o.local_momentum, od.local_momentum) {
        push("local-momentum", o.local_momentum.to_string());
    }
    if differs(o.global_momentum, od.global_momentum) {
        push("global-momentum", o.global_momentum.to_string());
    }
    if o.lr_schedule != od.lr_schedule {
        push("lr-schedule", schedule_string(o.lr_schedule));
    }
    if o.oracle != od.oracle {
        push("oracle", oracle_string(o.oracle));
    }
    if o.shift_init != od.shift_init {
        push(
            "shift-init",
            match o.shift_init {
                ShiftInit::Zero => "zero",
                ShiftInit::FullGrad => "full-grad",
            }
            .into(),
        );
    }
    if differs(o.marina_p, od.marina_p) {
        push("marina-p", o.marina_p.to_string());
    }
    if differs(o.diana_alpha, od.diana_alpha) {
        push("diana-alpha", o.diana_alpha.to_string());
    }
    if differs(o.prox_mu, od.prox_mu) {
        push("prox-mu", o.prox_mu.to_string());
    }
    if config.uplink != d.uplink {
        push("compressor", config.uplink.to_string());
    }
    if let Some(down) = &config.downlink {
        push("compressor-down", down.to_string());
    }
    if config.seed != d.seed {
        push("seed", config.seed.to_string());
    }
    if config.worker_threads != d.worker_threads {
        push("threads", config.worker_threads.to_string());
    }
    if config.eval_every != d.eval_every {
        push("eval-every", config.eval_every.to_string());
    }
    if let Some(g) = &config.group {
        push("group", g.clone());
    }
    if let Some(c) = &config.comment {
        push("comment", c.clone());
    }
    for t in &config.tags {
        push("tag", t.clone());
    }
    args
}

/// A shell-quoted `fedsim ...` line equivalent to `config`.
pub fn emit_cli_line(config: &RunConfig) -> String {
    let mut words = vec!["fedsim".to_string()];
    words.extend(cli_args(config));
    shlex::try_join(words.iter().map(String::as_str)).expect("arguments contain no NUL bytes")
}
