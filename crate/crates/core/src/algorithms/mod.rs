//! Federated algorithms as implementations of the generalized averaging
//! template.
//!
//! A round looks like this for every method:
//!
//! 1. the server derives a broadcast payload from its state ([`FederatedAlgorithm::client_state`]);
//! 2. each sampled client starts from the global model and takes local steps,
//!    each using [`FederatedAlgorithm::local_gradient`] and the client optimizer;
//! 3. the client builds its reply (model delta, state update, wire cost) in
//!    [`FederatedAlgorithm::local_state`];
//! 4. the server turns the replies into a descent direction
//!    ([`FederatedAlgorithm::server_gradient`]), steps with the server optimizer
//!    and refreshes its state ([`FederatedAlgorithm::server_global_state`]).
//!
//! The engine owns the loop, randomness, and per-client persistent storage.

mod dcgd;
mod diana;
mod ef21;
mod fedavg;
mod marina;
pub mod optim;
mod scaffold;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::{CompressedMessage, Compressor, CompressorError, Realization};
use crate::problems::{FederatedProblem, ProblemError};
use crate::rng::{Purpose, StreamKey};
use crate::vector::Vector;

pub use dcgd::{Dcgd, GradientDescent};
pub use diana::Diana;
pub use ef21::Ef21;
pub use fedavg::{FedAvg, FedProx};
pub use marina::Marina;
pub use optim::{ClientOptimizer, LocalSteps, LrSchedule, OptimizerSpec, ServerOptimizer, ShiftInit};
pub use scaffold::Scaffold;

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error("invalid configuration for {algorithm}: {reason}")]
    Config { algorithm: AlgorithmKind, reason: String },
}

pub type Result<T> = std::result::Result<T, AlgorithmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlgorithmKind {
    Gd,
    Dcgd,
    #[default]
    Fedavg,
    Fedprox,
    Scaffold,
    Diana,
    Marina,
    Ef21,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 8] = [
        AlgorithmKind::Gd,
        AlgorithmKind::Dcgd,
        AlgorithmKind::Fedavg,
        AlgorithmKind::Fedprox,
        AlgorithmKind::Scaffold,
        AlgorithmKind::Diana,
        AlgorithmKind::Marina,
        AlgorithmKind::Ef21,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AlgorithmKind::Gd => "gd",
            AlgorithmKind::Dcgd => "dcgd",
            AlgorithmKind::Fedavg => "fedavg",
            AlgorithmKind::Fedprox => "fedprox",
            AlgorithmKind::Scaffold => "scaffold",
            AlgorithmKind::Diana => "diana",
            AlgorithmKind::Marina => "marina",
            AlgorithmKind::Ef21 => "ef21",
        }
    }

    /// Methods whose round consists of exactly one gradient evaluation.
    pub fn single_local_step(&self) -> bool {
        matches!(self, AlgorithmKind::Gd | AlgorithmKind::Dcgd)
    }

    pub fn build(&self, spec: &OptimizerSpec) -> Box<dyn FederatedAlgorithm> {
        match self {
            AlgorithmKind::Gd => Box::new(GradientDescent),
            AlgorithmKind::Dcgd => Box::new(Dcgd),
            AlgorithmKind::Fedavg => Box::new(FedAvg),
            AlgorithmKind::Fedprox => Box::new(FedProx { mu: spec.prox_mu }),
            AlgorithmKind::Scaffold => Box::new(Scaffold::default()),
            AlgorithmKind::Diana => Box::new(Diana { alpha: spec.diana_alpha }),
            AlgorithmKind::Marina => Box::new(Marina { p: spec.marina_p }),
            AlgorithmKind::Ef21 => Box::new(Ef21),
        }
    }
}

impl fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<_> = AlgorithmKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown algorithm `{s}` (expected one of {})", names.join(", "))
            })
    }
}

/// Server-side state `H^{(t)}`.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerState {
    Empty,
    /// SCAFFOLD global control variate `c`.
    Scaffold { c: Vector },
    /// DIANA average shift `h̄`.
    Diana { h_bar: Vector },
    /// MARINA direction `g^{(t-1)}` and the model it was paired with.
    Marina { g: Vector, previous_model: Vector },
    /// EF21 mirror of every client's `g_i` and their weighted sum.
    Ef21 { g: Vector, table: Vec<Vector> },
}

/// Round payload `s^{(t)}` sent alongside the model; identical for all clients.
#[derive(Debug, Clone, PartialEq)]
pub enum Broadcast {
    Empty,
    Shift(Vector),
    Marina { full_sync: bool, previous_model: Vector },
}

/// Per-client persistent storage (SCAFFOLD `c_i`, DIANA `h_i`, EF21 `g_i`).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClientSlot {
    pub shift: Option<Vector>,
}

pub struct InitContext<'a> {
    pub problem: &'a FederatedProblem,
    pub x0: &'a Vector,
    pub spec: &'a OptimizerSpec,
    pub uplink: &'a Compressor,
    pub seed: u64,
}

impl InitContext<'_> {
    /// Initial per-client shifts under the configured policy.
    fn initial_shifts(&self) -> Result<Vec<Vector>> {
        let d = self.problem.dimension;
        (0..self.problem.num_clients())
            .map(|i| match self.spec.shift_init {
                ShiftInit::Zero => Ok(Vector::zeros(d)),
                ShiftInit::FullGrad => Ok(self.problem.client(i)?.full_gradient(self.x0)),
            })
            .collect()
    }
}

/// Everything a client task sees during one round.
pub struct ClientContext<'a> {
    pub client: usize,
    pub round: usize,
    pub global_model: &'a Vector,
    pub broadcast: &'a Broadcast,
    pub problem: &'a FederatedProblem,
    pub spec: &'a OptimizerSpec,
    pub uplink: &'a Compressor,
    pub local_lr: f64,
    pub seed: u64,
}

impl ClientContext<'_> {
    /// Oracle gradient at `x`; the minibatch is keyed by `batch`, so two
    /// evaluations with the same key see the same samples.
    pub fn oracle(&self, x: &[f64], batch: usize) -> Result<(Vector, usize)> {
        let mut rng = StreamKey::new(self.seed, Purpose::Minibatch)
            .round(self.round)
            .client(self.client)
            .slot(batch as u64)
            .rng();
        Ok(self
            .problem
            .local_gradient(self.client, x, self.spec.oracle, &mut rng)?)
    }

    /// Uplink compression of message number `slot` of this client's reply.
    pub fn compress(&self, x: &[f64], slot: u64) -> Result<CompressedMessage> {
        let mut rng = StreamKey::new(self.seed, Purpose::Uplink)
            .round(self.round)
            .client(self.client)
            .slot(slot)
            .rng();
        Ok(self.uplink.compress(x, &mut rng)?)
    }

    /// A message sent as raw floats.
    pub fn dense(&self, x: Vector) -> CompressedMessage {
        let bits = 32 * x.len() as u64;
        CompressedMessage {
            reconstructed: x,
            bits,
            realization: Realization::Dense,
        }
    }
}

/// Result of the local-steps loop.
#[derive(Debug, Clone)]
pub struct LocalRun {
    pub x_end: Vector,
    /// `x_i^{(t,τ)} − x^{(t)}`
    pub delta: Vector,
    pub steps: usize,
    /// Oracle gradient at the round's starting point (batch 0).
    pub start_gradient: Vector,
}

/// What a client contributes: the delta and update *as received* by the server.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutput {
    pub delta: Vector,
    pub update: Option<Vector>,
    pub messages: Vec<CompressedMessage>,
    pub extra_oracle_calls: usize,
}

impl LocalOutput {
    pub fn bits(&self) -> u64 {
        self.messages.iter().map(|m| m.bits).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReply {
    pub client: usize,
    pub weight: f64,
    pub delta: Vector,
    pub update: Option<Vector>,
    pub bits_up: u64,
    pub oracle_calls: usize,
    pub realizations: Vec<Realization>,
    pub start_loss: f64,
}

pub struct ServerContext<'a> {
    pub round: usize,
    pub num_clients: usize,
    pub global_model: &'a Vector,
    pub problem: &'a FederatedProblem,
    pub spec: &'a OptimizerSpec,
    pub seed: u64,
}

/// The pluggable part of a federated method.
pub trait FederatedAlgorithm: Send + Sync {
    fn kind(&self) -> AlgorithmKind;

    fn initialize_server_state(&self, ctx: &InitContext) -> Result<(ServerState, Vec<ClientSlot>)> {
        Ok((ServerState::Empty, vec![ClientSlot::default(); ctx.problem.num_clients()]))
    }

    fn client_state(&self, _server: &ServerState, _round: usize, _seed: u64) -> Broadcast {
        Broadcast::Empty
    }

    /// Direction used by the client optimizer at `x_local`.
    fn local_gradient(
        &self,
        _ctx: &ClientContext,
        _slot: &ClientSlot,
        _x_local: &Vector,
        oracle_gradient: Vector,
    ) -> Vector {
        oracle_gradient
    }

    fn local_state(&self, ctx: &ClientContext, slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput>;

    /// Descent direction `G^{(t)}`; the server optimizer subtracts it.
    fn server_gradient(&self, server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector;

    fn server_global_state(
        &self,
        server: ServerState,
        _replies: &[ClientReply],
        _gradient: &Vector,
        _ctx: &ServerContext,
    ) -> ServerState {
        server
    }
}

/// `Σ_S p_i v_i / Σ_S p_i` in reply order.
pub(crate) fn weighted_mean<'a>(d: usize, replies: &'a [ClientReply], pick: impl Fn(&'a ClientReply) -> &'a Vector) -> Vector {
    let total: f64 = replies.iter().map(|r| r.weight).sum();
    let mut acc = Vector::zeros(d);
    for r in replies {
        acc.axpy(r.weight / total, pick(r));
    }
    acc
}

pub(crate) fn update_of(r: &ClientReply) -> &Vector {
    r.update.as_ref().expect("algorithm reply carries a state update")
}
