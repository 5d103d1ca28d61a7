//! MARINA: occasional full synchronisation, compressed gradient differences
//! otherwise.

use rand::Rng;

use super::{
    update_of, weighted_mean, AlgorithmKind, Broadcast, ClientContext, ClientReply, ClientSlot,
    FederatedAlgorithm, InitContext, LocalOutput, LocalRun, Result, ServerContext, ServerState,
};
use crate::rng::{Purpose, StreamKey};
use crate::vector::Vector;

#[derive(Debug, Clone, Copy)]
pub struct Marina {
    /// Probability of a full-synchronisation round.
    pub p: f64,
}

impl Marina {
    /// The round coin, shared by server and clients.
    pub fn full_sync(&self, seed: u64, round: usize) -> bool {
        if self.p >= 1.0 {
            return true;
        }
        StreamKey::new(seed, Purpose::RoundCoin).round(round).rng().random::<f64>() < self.p
    }
}

impl FederatedAlgorithm for Marina {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Marina
    }

    fn initialize_server_state(&self, ctx: &InitContext) -> Result<(ServerState, Vec<ClientSlot>)> {
        let g = ctx.problem.global_gradient(ctx.x0)?;
        let slots = vec![ClientSlot::default(); ctx.problem.num_clients()];
        Ok((
            ServerState::Marina {
                g,
                previous_model: ctx.x0.clone(),
            },
            slots,
        ))
    }

    fn client_state(&self, server: &ServerState, round: usize, seed: u64) -> Broadcast {
        let ServerState::Marina { previous_model, .. } = server else {
            panic!("MARINA server state expected");
        };
        Broadcast::Marina {
            full_sync: self.full_sync(seed, round),
            previous_model: previous_model.clone(),
        }
    }

    fn local_state(&self, ctx: &ClientContext, _slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        let Broadcast::Marina { full_sync, previous_model } = ctx.broadcast else {
            panic!("MARINA client received {:?}", ctx.broadcast);
        };
        let d = run.start_gradient.len();
        if *full_sync {
            let msg = ctx.dense(run.start_gradient);
            return Ok(LocalOutput {
                delta: Vector::zeros(d),
                update: Some(msg.reconstructed.clone()),
                messages: vec![msg],
                extra_oracle_calls: 0,
            });
        }
        let (difference, extra) = if previous_model == ctx.global_model {
            (Vector::zeros(d), 0)
        } else {
            // same minibatch key as the start gradient
            let (old, calls) = ctx.oracle(previous_model, 0)?;
            (run.start_gradient.sub(&old), calls)
        };
        let msg = ctx.compress(&difference, 0)?;
        Ok(LocalOutput {
            delta: Vector::zeros(d),
            update: Some(msg.reconstructed.clone()),
            messages: vec![msg],
            extra_oracle_calls: extra,
        })
    }

    fn server_gradient(&self, server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        let ServerState::Marina { g, .. } = server else {
            panic!("MARINA server state expected");
        };
        let mean = weighted_mean(ctx.problem.dimension, replies, update_of);
        if self.full_sync(ctx.seed, ctx.round) {
            mean
        } else {
            g.add(&mean)
        }
    }

    fn server_global_state(
        &self,
        _server: ServerState,
        _replies: &[ClientReply],
        gradient: &Vector,
        ctx: &ServerContext,
    ) -> ServerState {
        ServerState::Marina {
            g: gradient.clone(),
            previous_model: ctx.global_model.clone(),
        }
    }
}
