//! Federated averaging and its proximal variant.

use super::{
    weighted_mean, AlgorithmKind, ClientContext, ClientReply, ClientSlot, FederatedAlgorithm, LocalOutput,
    LocalRun, Result, ServerContext, ServerState,
};
use crate::vector::Vector;

/// Clients send their (compressed) model delta; the server averages.
#[derive(Debug, Clone, Copy, Default)]
pub struct FedAvg;

pub(super) fn send_delta(ctx: &ClientContext, run: &LocalRun) -> Result<LocalOutput> {
    let msg = ctx.compress(&run.delta, 0)?;
    Ok(LocalOutput {
        delta: msg.reconstructed.clone(),
        update: None,
        messages: vec![msg],
        extra_oracle_calls: 0,
    })
}

/// `−Σ p_i Δ_i / Σ p_i`: with a unit server step this is the averaging update.
pub(super) fn negated_average_delta(replies: &[ClientReply], d: usize) -> Vector {
    let mut g = weighted_mean(d, replies, |r| &r.delta);
    g.scale(-1.0);
    g
}

impl FederatedAlgorithm for FedAvg {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Fedavg
    }

    fn local_state(&self, ctx: &ClientContext, _slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        send_delta(ctx, &run)
    }

    fn server_gradient(&self, _server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        negated_average_delta(replies, ctx.problem.dimension)
    }
}

/// FedAvg with the local objective augmented by `(μ/2)‖x − x^{(t)}‖²`.
#[derive(Debug, Clone, Copy)]
pub struct FedProx {
    pub mu: f64,
}

impl FederatedAlgorithm for FedProx {
    fn kind(&self) -> AlgorithmKind {
        AlgorithmKind::Fedprox
    }

    fn local_gradient(&self, ctx: &ClientContext, _slot: &ClientSlot, x_local: &Vector, mut g: Vector) -> Vector {
        if self.mu != 0.0 {
            for ((gi, xi), x0) in g.iter_mut().zip(x_local.iter()).zip(ctx.global_model.iter()) {
                *gi += self.mu * (xi - x0);
            }
        }
        g
    }

    fn local_state(&self, ctx: &ClientContext, _slot: &mut ClientSlot, run: LocalRun) -> Result<LocalOutput> {
        send_delta(ctx, &run)
    }

    fn server_gradient(&self, _server: &ServerState, replies: &[ClientReply], ctx: &ServerContext) -> Vector {
        negated_average_delta(replies, ctx.problem.dimension)
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::super::*;
    use crate::compressors::Compressor;
    use crate::problems::Split;

    #[test]
    fn single_step_fedavg_direction_is_scaled_gradient() {
        let p = problem(3, 1, Split::Noniid);
        let spec = OptimizerSpec {
            local_lr: 0.3,
            ..Default::default()
        };
        let x = Vector::from(vec![0.2, -0.1, 0.4]);
        let up = Compressor::identity(3);
        let b = Broadcast::Empty;
        let ctx = client_ctx(&p, &x, &b, &spec, &up, 0);
        let mut slot = ClientSlot::default();
        let run = local_run(&FedAvg, &ctx, &slot, 1);
        let out = FedAvg.local_state(&ctx, &mut slot, run).unwrap();
        assert_eq!(out.bits(), 96);
        let replies = vec![reply(0, 1.0, out)];
        let sctx = ServerContext {
            round: 0,
            num_clients: 1,
            global_model: &x,
            problem: &p,
            spec: &spec,
            seed: 3,
        };
        let g = FedAvg.server_gradient(&ServerState::Empty, &replies, &sctx);
        let expected = p.global_gradient(&x).unwrap().scaled(0.3);
        for (a, b) in g.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_deltas_average_to_themselves() {
        let p = problem(2, 3, Split::Noniid);
        let x = Vector::zeros(2);
        let spec = OptimizerSpec::default();
        let delta = Vector::from(vec![0.25, -1.5]);
        let replies: Vec<ClientReply> = [0.7, 0.1, 0.2]
            .iter()
            .enumerate()
            .map(|(i, w)| {
                reply(
                    i,
                    *w,
                    LocalOutput {
                        delta: delta.clone(),
                        update: None,
                        messages: vec![],
                        extra_oracle_calls: 0,
                    },
                )
            })
            .collect();
        let sctx = ServerContext {
            round: 0,
            num_clients: 3,
            global_model: &x,
            problem: &p,
            spec: &spec,
            seed: 3,
        };
        let g = FedAvg.server_gradient(&ServerState::Empty, &replies, &sctx);
        assert!((g[0] + 0.25).abs() < 1e-15 && (g[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn prox_term_vanishes_at_round_start_and_for_zero_mu() {
        let p = problem(3, 1, Split::Noniid);
        let spec = OptimizerSpec::default();
        let x = Vector::from(vec![1.0, 2.0, 3.0]);
        let up = Compressor::identity(3);
        let b = Broadcast::Empty;
        let ctx = client_ctx(&p, &x, &b, &spec, &up, 0);
        let g = Vector::from(vec![0.5, 0.5, 0.5]);
        let slot = ClientSlot::default();
        let prox = FedProx { mu: 0.7 };
        assert_eq!(prox.local_gradient(&ctx, &slot, &x, g.clone()), g);
        let elsewhere = Vector::from(vec![2.0, 2.0, 2.0]);
        assert_eq!(FedProx { mu: 0.0 }.local_gradient(&ctx, &slot, &elsewhere, g.clone()), g);
        let pulled = prox.local_gradient(&ctx, &slot, &elsewhere, g.clone());
        assert_eq!(&*pulled, &[0.5 + 0.7, 0.5, 0.5 - 0.7]);
    }
}
