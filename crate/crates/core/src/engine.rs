//! Round loop: sampling, client execution on the worker pool, aggregation,
//! metrics and run control.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{
    AlgorithmError, AlgorithmKind, ClientContext, ClientOptimizer, ClientReply, ClientSlot, FederatedAlgorithm,
    InitContext, LocalRun, LocalSteps, OptimizerSpec, ServerContext, ServerOptimizer, ServerState,
};
use crate::compressors::{Compressor, CompressorError, CompressorSpec, Realization};
use crate::exec::Executor;
use crate::problems::{FederatedProblem, ProblemError, ProblemSpec};
use crate::rng::{Purpose, StreamKey};
use crate::vector::Vector;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error("non-finite iterate in round {round}{}", client.map(|c| format!(" on client {c}")).unwrap_or_else(|| " at the server".into()))]
    NonFinite { round: usize, client: Option<usize> },
}

pub type Result<T> = std::result::Result<T, EngineError>;

fn invalid(msg: impl Into<String>) -> EngineError {
    EngineError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    /// `None` means full participation.
    #[serde(default)]
    pub clients_per_round: Option<usize>,
    pub algorithm: AlgorithmKind,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub uplink: CompressorSpec,
    #[serde(default)]
    pub downlink: Option<CompressorSpec>,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub worker_threads: usize,
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default)]
    pub comment: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

fn one() -> usize {
    1
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 100,
            clients_per_round: None,
            algorithm: AlgorithmKind::Fedavg,
            optimizer: OptimizerSpec::default(),
            uplink: CompressorSpec::Identity,
            downlink: None,
            problem: ProblemSpec::default(),
            seed: 0,
            worker_threads: 1,
            eval_every: 1,
            group: None,
            comment: None,
            tags: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn participants(&self) -> usize {
        self.clients_per_round.unwrap_or(self.problem.clients)
    }

    /// Checks everything that does not require generating the data.
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(invalid("rounds must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(invalid("eval-every must be at least 1"));
        }
        if self.worker_threads == 0 {
            return Err(invalid("threads must be at least 1"));
        }
        let m = self.problem.clients;
        if m == 0 {
            return Err(invalid("the problem needs at least one client"));
        }
        let n_s = self.participants();
        if n_s == 0 || n_s > m {
            return Err(invalid(format!("clients per round must lie in 1..={m}, got {n_s}")));
        }
        self.optimizer.validate().map_err(invalid)?;
        self.uplink.validate()?;
        if let Some(down) = &self.downlink {
            down.validate()?;
        }
        if self.algorithm.single_local_step() && self.optimizer.local_steps != LocalSteps::Steps(1) {
            return Err(invalid(format!("{} takes exactly one local step", self.algorithm)));
        }
        if self.algorithm == AlgorithmKind::Gd && !self.uplink.is_identity() {
            return Err(invalid("gd sends uncompressed gradients; use dcgd with a compressor"));
        }
        Ok(())
    }

    pub fn problem_seed(&self) -> u64 {
        self.problem.seed.unwrap_or(self.seed)
    }
}

/// Uniform sample of `n_s` distinct clients out of `m`, ascending.
pub fn sample_clients(m: usize, n_s: usize, round: usize, seed: u64) -> Vec<usize> {
    assert!(n_s <= m, "cannot sample {n_s} of {m} clients");
    if n_s == m {
        return (0..m).collect();
    }
    let mut rng = StreamKey::new(seed, Purpose::ClientSampling).round(round).rng();
    let mut ids = index::sample(&mut rng, m, n_s).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Completed rounds; 0 for the starting point.
    pub round: usize,
    pub f_global: f64,
    pub grad_norm_global: f64,
    /// Weighted local loss of the last round's participants at the model they received.
    pub train_loss_sampled: f64,
    pub oracle_calls_cum: u64,
    pub bits_up_cum: u64,
    pub bits_up_round_avg_per_client: f64,
    #[serde(default)]
    pub bits_down_cum: u64,
    pub clients: usize,
    pub wall_clock_s: f64,
}

impl MetricsRow {
    /// Equality ignoring wall-clock time, bit for bit on floats.
    pub fn same_trace(&self, other: &MetricsRow) -> bool {
        self.round == other.round
            && self.f_global.to_bits() == other.f_global.to_bits()
            && self.grad_norm_global.to_bits() == other.grad_norm_global.to_bits()
            && self.train_loss_sampled.to_bits() == other.train_loss_sampled.to_bits()
            && self.oracle_calls_cum == other.oracle_calls_cum
            && self.bits_up_cum == other.bits_up_cum
            && self.bits_up_round_avg_per_client.to_bits() == other.bits_up_round_avg_per_client.to_bits()
            && self.bits_down_cum == other.bits_down_cum
            && self.clients == other.clients
    }
}

/// What was sent in one round, enough to recount the bits offline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Per participant, the realization of every uplink message.
    pub uplink: Vec<Vec<Realization>>,
    pub bits_up: Vec<u64>,
    pub downlink: Option<Realization>,
    pub bits_down: u64,
}

#[derive(Debug, Clone)]
pub struct RoundSummary {
    pub participants: Vec<usize>,
    pub bits_up: u64,
    pub bits_down: u64,
    pub oracle_calls: u64,
    pub train_loss_sampled: f64,
}

/// A run in progress: problem, algorithm state and counters.
pub struct Simulation {
    config: RunConfig,
    problem: FederatedProblem,
    algorithm: Box<dyn FederatedAlgorithm>,
    uplink: Compressor,
    downlink: Option<Compressor>,
    executor: Executor,
    x: Vector,
    server: Option<ServerState>,
    slots: Vec<ClientSlot>,
    server_opt: ServerOptimizer,
    round: usize,
    oracle_calls: u64,
    bits_up: u64,
    bits_down: u64,
    last: Option<RoundSummary>,
    logs: Vec<RoundLog>,
    started: Instant,
}

impl Simulation {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Self::with_executor(config, Executor::new(config.worker_threads))
    }

    pub fn with_executor(config: &RunConfig, executor: Executor) -> Result<Self> {
        let algorithm = config.algorithm.build(&config.optimizer);
        Self::with_algorithm(config, executor, algorithm)
    }

    /// Uses a caller-supplied algorithm instance (e.g. a test variant).
    pub fn with_algorithm(
        config: &RunConfig,
        executor: Executor,
        algorithm: Box<dyn FederatedAlgorithm>,
    ) -> Result<Self> {
        config.validate()?;
        let problem = config.problem.build(config.problem_seed())?;
        let d = problem.dimension;
        let uplink = config.uplink.bind(d)?;
        let downlink = config.downlink.as_ref().map(|s| s.bind(d)).transpose()?;
        let x = Vector::zeros(d);
        let (server, slots) = algorithm.initialize_server_state(&InitContext {
            problem: &problem,
            x0: &x,
            spec: &config.optimizer,
            uplink: &uplink,
            seed: config.seed,
        })?;
        Ok(Simulation {
            config: config.clone(),
            problem,
            algorithm,
            uplink,
            downlink,
            executor,
            x,
            server: Some(server),
            slots,
            server_opt: ServerOptimizer::default(),
            round: 0,
            oracle_calls: 0,
            bits_up: 0,
            bits_down: 0,
            last: None,
            logs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn problem(&self) -> &FederatedProblem {
        &self.problem
    }

    pub fn model(&self) -> &Vector {
        &self.x
    }

    pub fn uplink(&self) -> &Compressor {
        &self.uplink
    }

    pub fn downlink(&self) -> Option<&Compressor> {
        self.downlink.as_ref()
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn server_state(&self) -> &ServerState {
        self.server.as_ref().expect("server state present between rounds")
    }

    pub fn client_slots(&self) -> &[ClientSlot] {
        &self.slots
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.logs
    }

    pub fn into_logs(self) -> Vec<RoundLog> {
        self.logs
    }

    /// Exact `(F(x), ‖∇F(x)‖)`; not charged to any budget.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let f = self.problem.global_value(&self.x)?;
        let g = self.problem.global_gradient(&self.x)?;
        Ok((f, g.norm()))
    }

    /// Metrics at the current model.
    pub fn metrics(&self) -> Result<MetricsRow> {
        let (f, gn) = self.evaluate()?;
        let (loss, avg, clients) = match &self.last {
            Some(s) => (
                s.train_loss_sampled,
                s.bits_up as f64 / s.participants.len() as f64,
                s.participants.len(),
            ),
            None => (f, 0.0, 0),
        };
        Ok(MetricsRow {
            round: self.round,
            f_global: f,
            grad_norm_global: gn,
            train_loss_sampled: loss,
            oracle_calls_cum: self.oracle_calls,
            bits_up_cum: self.bits_up,
            bits_up_round_avg_per_client: avg,
            bits_down_cum: self.bits_down,
            clients,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        })
    }

    pub fn run_round(&mut self) -> Result<&RoundSummary> {
        let t = self.round;
        let seed = self.config.seed;
        let spec = &self.config.optimizer;
        let participants = sample_clients(
            self.problem.num_clients(),
            self.config.participants(),
            t,
            seed,
        );
        let server = self.server.take().expect("server state present between rounds");
        let broadcast = self.algorithm.client_state(&server, t, seed);

        let tasks: Vec<(usize, ClientSlot)> = participants
            .iter()
            .map(|&i| (i, std::mem::take(&mut self.slots[i])))
            .collect();
        let problem = &self.problem;
        let algorithm = &*self.algorithm;
        let uplink = &self.uplink;
        let x = &self.x;
        let local_lr = spec.local_rate(t);
        let results = self.executor.map(tasks, |(client, mut slot)| {
            let ctx = ClientContext {
                client,
                round: t,
                global_model: x,
                broadcast: &broadcast,
                problem,
                spec,
                uplink,
                local_lr,
                seed,
            };
            let reply = client_task(algorithm, &ctx, &mut slot);
            (client, slot, reply)
        });

        let mut replies = Vec::with_capacity(results.len());
        let mut failure = None;
        for (client, slot, reply) in results {
            self.slots[client] = slot;
            match reply {
                Ok(r) => replies.push(r),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(e) = failure {
            self.server = Some(server);
            return Err(e);
        }

        let sctx = ServerContext {
            round: t,
            num_clients: self.problem.num_clients(),
            global_model: &self.x,
            problem: &self.problem,
            spec,
            seed,
        };
        let mut gradient = algorithm.server_gradient(&server, &replies, &sctx);
        let mut bits_down = 0;
        let mut down_realization = None;
        if let Some(down) = &self.downlink {
            let mut rng = StreamKey::new(seed, Purpose::Downlink).round(t).rng();
            let msg = down.compress(&gradient, &mut rng)?;
            bits_down = msg.bits * participants.len() as u64;
            down_realization = Some(msg.realization);
            gradient = msg.reconstructed;
        }
        let next = self.server_opt.step(spec, &self.x, &gradient, t);
        if !next.is_finite() || !gradient.is_finite() {
            self.server = Some(server);
            return Err(EngineError::NonFinite { round: t, client: None });
        }
        let server = algorithm.server_global_state(server, &replies, &gradient, &sctx);

        let total_weight: f64 = replies.iter().map(|r| r.weight).sum();
        let train_loss = replies.iter().map(|r| r.weight * r.start_loss).sum::<f64>() / total_weight;
        let bits_up: u64 = replies.iter().map(|r| r.bits_up).sum();
        let oracle_calls: u64 = replies.iter().map(|r| r.oracle_calls as u64).sum();
        self.logs.push(RoundLog {
            round: t,
            participants: participants.clone(),
            bits_up: replies.iter().map(|r| r.bits_up).collect(),
            uplink: replies.into_iter().map(|r| r.realizations).collect(),
            downlink: down_realization,
            bits_down,
        });

        self.x = next;
        self.server = Some(server);
        self.round += 1;
        self.oracle_calls += oracle_calls;
        self.bits_up += bits_up;
        self.bits_down += bits_down;
        Ok(self.last.insert(RoundSummary {
            participants,
            bits_up,
            bits_down,
            oracle_calls,
            train_loss_sampled: train_loss,
        }))
    }
}

fn client_task(algorithm: &dyn FederatedAlgorithm, ctx: &ClientContext, slot: &mut ClientSlot) -> Result<ClientReply> {
    let client = ctx.client;
    let non_finite = || EngineError::NonFinite {
        round: ctx.round,
        client: Some(client),
    };
    let n = ctx.problem.client(client)?.n();
    let steps = ctx.spec.local_steps.resolve(n, ctx.spec.oracle);
    let mut x = ctx.global_model.clone();
    let mut opt = ClientOptimizer::new(ctx.spec, ctx.round);
    let mut calls = 0;
    let mut start_gradient = None;
    for k in 0..steps {
        let (g, c) = ctx.oracle(&x, k)?;
        calls += c;
        if k == 0 {
            start_gradient = Some(g.clone());
        }
        let direction = algorithm.local_gradient(ctx, slot, &x, g);
        opt.step(&mut x, &direction);
        if !x.is_finite() {
            return Err(non_finite());
        }
    }
    let run = LocalRun {
        delta: x.sub(ctx.global_model),
        x_end: x,
        steps,
        start_gradient: start_gradient.expect("at least one local step"),
    };
    let out = algorithm.local_state(ctx, slot, run)?;
    if !out.delta.is_finite() || out.update.as_ref().is_some_and(|u| !u.is_finite()) {
        return Err(non_finite());
    }
    Ok(ClientReply {
        client,
        weight: ctx.problem.weights[client],
        bits_up: out.bits(),
        oracle_calls: calls + out.extra_oracle_calls,
        realizations: out.messages.into_iter().map(|m| m.realization).collect(),
        delta: out.delta,
        update: out.update,
        start_loss: ctx.problem.local_value(client, ctx.global_model)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Pending,
    Running,
    Stopped,
    Finished,
    Failed,
}

impl RunStatus {
    pub fn is_terminal(&self) -> bool {
        matches!(self, RunStatus::Stopped | RunStatus::Finished | RunStatus::Failed)
    }

    fn rank(&self) -> u8 {
        match self {
            RunStatus::Pending => 0,
            RunStatus::Running => 1,
            _ => 2,
        }
    }

    pub fn can_become(&self, next: RunStatus) -> bool {
        next.rank() > self.rank()
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunStatus::Pending => "pending",
            RunStatus::Running => "running",
            RunStatus::Stopped => "stopped",
            RunStatus::Finished => "finished",
            RunStatus::Failed => "failed",
        }
    }
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RunStatus {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [
            RunStatus::Pending,
            RunStatus::Running,
            RunStatus::Stopped,
            RunStatus::Finished,
            RunStatus::Failed,
        ]
        .into_iter()
        .find(|st| st.name() == s)
        .ok_or_else(|| format!("unknown status `{s}`"))
    }
}

/// Shared view of a run: status plus a one-shot stop flag.
#[derive(Debug, Clone)]
pub struct RunHandle {
    id: String,
    inner: Arc<HandleInner>,
}

#[derive(Debug)]
struct HandleInner {
    status: Mutex<RunStatus>,
    stop: AtomicBool,
}

impl RunHandle {
    pub fn new(id: impl Into<String>) -> Self {
        RunHandle {
            id: id.into(),
            inner: Arc::new(HandleInner {
                status: Mutex::new(RunStatus::Pending),
                stop: AtomicBool::new(false),
            }),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn status(&self) -> RunStatus {
        *self.inner.status.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Moves the status forward; returns false (and changes nothing) otherwise.
    pub fn advance(&self, next: RunStatus) -> bool {
        let mut status = self.inner.status.lock().unwrap_or_else(|e| e.into_inner());
        if status.can_become(next) {
            *status = next;
            true
        } else {
            false
        }
    }

    /// Returns true if this call set the flag.
    pub fn request_stop(&self) -> bool {
        !self.inner.stop.swap(true, Ordering::SeqCst)
    }

    pub fn stop_requested(&self) -> bool {
        self.inner.stop.load(Ordering::SeqCst)
    }
}

/// Receives the trace as it is produced. An error aborts the run as Failed.
pub trait RunObserver {
    fn on_start(&mut self, _initial: &MetricsRow) -> std::io::Result<()> {
        Ok(())
    }
    fn on_row(&mut self, _row: &MetricsRow) -> std::io::Result<()> {
        Ok(())
    }
    fn on_finish(&mut self, _status: RunStatus, _error: Option<&str>) -> std::io::Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RunObserver for NoObserver {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub initial: Option<MetricsRow>,
    pub rows: Vec<MetricsRow>,
    pub error: Option<String>,
    pub final_model: Option<Vector>,
    pub logs: Vec<RoundLog>,
}

/// Runs a configuration to completion, stop request or failure.
pub fn execute(config: &RunConfig, handle: &RunHandle, observer: &mut dyn RunObserver) -> RunOutcome {
    handle.advance(RunStatus::Running);
    let mut outcome = RunOutcome {
        status: RunStatus::Running,
        initial: None,
        rows: Vec::new(),
        error: None,
        final_model: None,
        logs: Vec::new(),
    };
    let result = drive(config, handle, observer, &mut outcome);
    let (status, error) = match result {
        Ok(status) => (status, None),
        Err(e) => (RunStatus::Failed, Some(e)),
    };
    if let Err(e) = observer.on_finish(status, error.as_deref()) {
        log::error!("run {}: could not finalize record: {e}", handle.id());
    }
    outcome.status = status;
    outcome.error = error;
    handle.advance(status);
    outcome
}

fn drive(
    config: &RunConfig,
    handle: &RunHandle,
    observer: &mut dyn RunObserver,
    outcome: &mut RunOutcome,
) -> std::result::Result<RunStatus, String> {
    let io = |e: std::io::Error| format!("persisting trace: {e}");
    let mut sim = Simulation::new(config).map_err(|e| e.to_string())?;
    let initial = sim.metrics().map_err(|e| e.to_string())?;
    observer.on_start(&initial).map_err(io)?;
    outcome.initial = Some(initial);
    let mut status = RunStatus::Finished;
    let mut error = None;
    for t in 0..config.rounds {
        if handle.stop_requested() {
            status = RunStatus::Stopped;
            break;
        }
        if let Err(e) = sim.run_round() {
            error = Some(e.to_string());
            break;
        }
        if (t + 1) % config.eval_every == 0 {
            let row = sim.metrics().map_err(|e| e.to_string())?;
            observer.on_row(&row).map_err(io)?;
            outcome.rows.push(row);
        }
    }
    outcome.final_model = Some(sim.model().clone());
    outcome.logs = sim.into_logs();
    match error {
        Some(e) => Err(e),
        None => Ok(status),
    }
}

/// Runs on a dedicated thread; the handle can be polled or stopped meanwhile.
pub fn run_experiment(
    config: RunConfig,
    handle: RunHandle,
    mut observer: Box<dyn RunObserver + Send>,
) -> JoinHandle<RunOutcome> {
    std::thread::Builder::new()
        .name(format!("fedsim-run-{}", handle.id()))
        .spawn(move || execute(&config, &handle, observer.as_mut()))
        .expect("spawning run thread")
}
