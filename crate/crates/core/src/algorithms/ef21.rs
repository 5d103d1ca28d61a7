//! EF21: error feedback through a per-client gradient estimate `g_i`.

use super::{
    update_of, AlgorithmKind, ClientContext, ClientReply, ClientSlot, FederatedAlgorithm, InitContext,
    LocalOutput, LocalRun, Result, ServerContext, ServerState,
};
use crate::rng::{Purpose, StreamKey};
use crate::vector::{weighted_sum, Vector};

#[derive(Debug, Clone, Copy, Default)]
pub struct Ef21;

impl FederatedAlgorithm for Ef21 {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Ef21
    }

    fn initialize_server_state(&self, ctx: &InitContext) -> Result<(ServerState, Vec<ClientSlot>)> {
        let d = ctx.problem.dimension;
        let table = match ctx.spec.shift_init {
            super::ShiftInit::Zero => vec![Vector::zeros(d); ctx.problem.num_clients()],
            super::ShiftInit::FullGrad => ctx
                .initial_shifts()?
                .into_iter()
                .enumerate()
                .map(|(i, grad)| {
                    let mut rng = StreamKey::new(ctx.seed, Purpose::ShiftInit).client(i).rng();
                    Ok(ctx.uplink.compress(&grad, &mut rng)?.reconstructed)
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let g = weighted_sum(d, ctx.problem.weights.iter().copied().zip(table.iter()));
        let slots = table.iter().map(|t| ClientSlot { shift: Some(t.clone()) }).collect();
        Ok((ServerState::Ef21 { g, table }, slots))
    }

    fn local_state(&self, ctx: &ClientContext, slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        let g_i = slot.shift.as_mut().expect("EF21 client estimate");
        let msg = ctx.compress(&run.start_gradient.sub(g_i), 0)?;
        g_i.axpy(1.0, &msg.reconstructed);
        Ok(LocalOutput {
            delta: Vector::zeros(g_i.len()),
            update: Some(msg.reconstructed.clone()),
            messages: vec![msg],
            extra_oracle_calls: 0,
        })
    }

    /// `Σ_i p_i g_i` over all clients after this round's corrections.
    fn server_gradient(&self, server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        let ServerState::Ef21 { g, .. } = server else {
            panic!("EF21 server state expected");
        };
        let mut next = g.clone();
        for r in replies {
            next.axpy(ctx.problem.weights[r.client], update_of(r));
        }
        next
    }

    fn server_global_state(
        &self,
        server: ServerState,
        replies: &[ClientReply],
        gradient: &Vector,
        _ctx: &ServerContext,
    ) -> ServerState {
        let ServerState::Ef21 { mut table, .. } = server else {
            panic!("EF21 server state expected");
        };
        for r in replies {
            table[r.client].axpy(1.0, update_of(r));
        }
        ServerState::Ef21 {
            g: gradient.clone(),
            table,
        }
    }
}
