//! SCAFFOLD: local steps corrected by control variates `c − c_i`.

use super::fedavg::negated_average_delta;
use super::{
    update_of, AlgorithmKind, Broadcast, ClientContext, ClientReply, ClientSlot, FederatedAlgorithm,
    InitContext, LocalOutput, LocalRun, Result, ServerContext, ServerState,
};
use crate::vector::{weighted_sum, Vector};

#[derive(Debug, Clone, Copy, Default)]
pub struct Scaffold {
    frozen_shifts: bool,
}

impl Scaffold {
    /// Keeps every control variate at its initial value. Only useful for
    /// comparing against FedAvg.
    pub fn with_frozen_shifts() -> Self {
        Scaffold { frozen_shifts: true }
    }
}

fn server_shift(broadcast: &Broadcast) -> &Vector {
    match broadcast {
        Broadcast::Shift(c) => c,
        other => panic!("SCAFFOLD client received {other:?}"),
    }
}

impl FederatedAlgorithm for Scaffold {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Scaffold
    }

    fn initialize_server_state(&self, ctx: &InitContext) -> Result<(ServerState, Vec<super::ClientSlot>)> {
        let shifts = ctx.initial_shifts()?;
        let c = weighted_sum(
            ctx.problem.dimension,
            ctx.problem.weights.iter().copied().zip(shifts.iter()),
        );
        let slots = shifts.into_iter().map(|s| ClientSlot { shift: Some(s) }).collect();
        Ok((ServerState::Scaffold { c }, slots))
    }

    fn client_state(&self, server: &ServerState, _round: usize, _seed: u64) -> Broadcast {
        match server {
            ServerState::Scaffold { c } => Broadcast::Shift(c.clone()),
            other => panic!("SCAFFOLD server state expected, found {other:?}"),
        }
    }

    fn local_gradient(&self, ctx: &ClientContext, slot: &ClientSlot, _x_local: &Vector, mut g: Vector) -> Vector {
        let c = server_shift(ctx.broadcast);
        let c_i = slot.shift.as_ref().expect("SCAFFOLD client shift");
        for ((gj, cj), cij) in g.iter_mut().zip(c.iter()).zip(c_i.iter()) {
            *gj += cj - cij;
        }
        g
    }

    fn local_state(&self, ctx: &ClientContext, slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        let c = server_shift(ctx.broadcast);
        let c_i = slot.shift.as_ref().expect("SCAFFOLD client shift");
        let delta_msg = ctx.compress(&run.delta, 0)?;
        let update = if self.frozen_shifts {
            Vector::zeros(c.len())
        } else {
            let horizon = run.steps as f64 * ctx.local_lr;
            // U_i travels uncompressed beside the delta and is not charged:
            // only the model delta goes through the uplink compressor.
            let next = if horizon > 0.0 {
                // c_i − c + (x_start − x_end)/(τ η_l)
                let mut next = c_i.sub(c);
                next.axpy(-1.0 / horizon, &run.delta);
                next
            } else {
                run.start_gradient.clone()
            };
            let update = next.sub(c_i);
            slot.shift = Some(next);
            update
        };
        Ok(LocalOutput {
            delta: delta_msg.reconstructed.clone(),
            update: Some(update),
            messages: vec![delta_msg],
            extra_oracle_calls: 0,
        })
    }

    fn server_gradient(&self, _server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        negated_average_delta(replies, ctx.problem.dimension)
    }

    fn server_global_state(
        &self,
        server: ServerState,
        replies: &[ClientReply],
        _gradient: &Vector,
        ctx: &ServerContext,
    ) -> ServerState {
        let ServerState::Scaffold { mut c } = server else {
            panic!("SCAFFOLD server state expected");
        };
        if !self.frozen_shifts && !replies.is_empty() {
            // c ← c + (|S|/M)·mean_S U_i
            let scale = 1.0 / ctx.num_clients as f64;
            for r in replies {
                c.axpy(scale, update_of(r));
            }
        }
        ServerState::Scaffold { c }
    }
}
