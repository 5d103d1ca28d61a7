//! Distributed (compressed) gradient descent.
//!
//! One gradient per round. The client transmits `m_i = C(g_i)` and reports
//! `Δ_i = −η_l m_i`, so the server runs the same averaging path as FedAvg.

use super::fedavg::negated_average_delta;
use super::{
    AlgorithmKind, ClientContext, ClientReply, ClientSlot, FederatedAlgorithm, LocalOutput, LocalRun, Result,
    ServerContext, ServerState,
};
use crate::vector::Vector;

#[derive(Debug, Clone, Copy, Default)]
pub struct Dcgd;

fn compressed_gradient_step(ctx: &ClientContext, run: LocalRun) -> Result<LocalOutput> {
    let msg = ctx.compress(&run.start_gradient, 0)?;
    let delta = msg.reconstructed.scaled(-ctx.local_lr);
    Ok(LocalOutput {
        delta,
        update: Some(msg.reconstructed.clone()),
        messages: vec![msg],
        extra_oracle_calls: 0,
    })
}

impl FederatedAlgorithm for Dcgd {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Dcgd
    }

    fn local_state(&self, ctx: &ClientContext, _slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        compressed_gradient_step(ctx, run)
    }

    fn server_gradient(&self, _server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        negated_average_delta(replies, ctx.problem.dimension)
    }
}

/// Plain (full-participation or sampled) gradient descent: DCGD restricted
/// to the identity compressor.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientDescent;

impl FederatedAlgorithm for GradientDescent {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Gd
    }

    fn local_state(&self, ctx: &ClientContext, _slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        let msg = ctx.dense(run.start_gradient);
        Ok(LocalOutput {
            delta: msg.reconstructed.scaled(-ctx.local_lr),
            update: Some(msg.reconstructed.clone()),
            messages: vec![msg],
            extra_oracle_calls: 0,
        })
    }

    fn server_gradient(&self, _server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        negated_average_delta(replies, ctx.problem.dimension)
    }
}
