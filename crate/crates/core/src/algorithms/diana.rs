//! DIANA: compress the difference between the gradient and a learned shift.

use super::{
    update_of, weighted_mean, AlgorithmKind, ClientContext, ClientReply, ClientSlot, FederatedAlgorithm,
    InitContext, LocalOutput, LocalRun, Result, ServerContext, ServerState,
};
use crate::vector::{weighted_sum, Vector};

#[derive(Debug, Clone, Copy)]
pub struct Diana {
    /// Shift learning rate.
    pub alpha: f64,
}

impl FederatedAlgorithm for Diana {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Diana
    }

    fn initialize_server_state(&self, ctx: &InitContext) -> Result<(ServerState, Vec<ClientSlot>)> {
        let shifts = ctx.initial_shifts()?;
        let h_bar = weighted_sum(
            ctx.problem.dimension,
            ctx.problem.weights.iter().copied().zip(shifts.iter()),
        );
        let slots = shifts.into_iter().map(|s| ClientSlot { shift: Some(s) }).collect();
        Ok((ServerState::Diana { h_bar }, slots))
    }

    fn local_state(&self, ctx: &ClientContext, slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        let h = slot.shift.as_mut().expect("DIANA client shift");
        let msg = ctx.compress(&run.start_gradient.sub(h), 0)?;
        h.axpy(self.alpha, &msg.reconstructed);
        Ok(LocalOutput {
            delta: Vector::zeros(h.len()),
            update: Some(msg.reconstructed.clone()),
            messages: vec![msg],
            extra_oracle_calls: 0,
        })
    }

    fn server_gradient(&self, server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        let ServerState::Diana { h_bar } = server else {
            panic!("DIANA server state expected");
        };
        h_bar.add(&weighted_mean(ctx.problem.dimension, replies, update_of))
    }

    fn server_global_state(
        &self,
        server: ServerState,
        replies: &[ClientReply],
        _gradient: &Vector,
        ctx: &ServerContext,
    ) -> ServerState {
        let ServerState::Diana { mut h_bar } = server else {
            panic!("DIANA server state expected");
        };
        h_bar.axpy(self.alpha, &weighted_mean(ctx.problem.dimension, replies, update_of));
        ServerState::Diana { h_bar }
    }
}
