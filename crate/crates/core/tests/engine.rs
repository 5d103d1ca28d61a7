use fedsim_core::algorithms::{AlgorithmKind, LocalSteps, Scaffold, ShiftInit};
use fedsim_core::compressors::CompressorSpec;
use fedsim_core::engine::{
    execute, sample_clients, NoObserver, RunConfig, RunHandle, RunStatus, Simulation,
};
use fedsim_core::exec::Executor;
use fedsim_core::problems::{Family, FederatedProblem, OracleMode, ProblemSpec, Split};
use fedsim_core::Vector;

fn quad_spec(d: usize, clients: usize, samples: usize) -> ProblemSpec {
    ProblemSpec {
        family: Family::Quad,
        d,
        mu: 1.0,
        l: 2.0,
        clients,
        samples,
        split: Split::Noniid,
        seed: Some(1),
        ..Default::default()
    }
}

fn config(algorithm: AlgorithmKind, problem: ProblemSpec, rounds: usize) -> RunConfig {
    RunConfig {
        rounds,
        algorithm,
        problem,
        seed: 7,
        ..Default::default()
    }
}

/// Plain gradient descent written against the problem directly.
fn gd_oracle(problem: &FederatedProblem, eta: f64, rounds: usize) -> Vec<Vector> {
    let mut x = Vector::zeros(problem.dimension);
    let mut out = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let g = problem.global_gradient(&x).unwrap();
        x.axpy(-eta, &g);
        out.push(x.clone());
    }
    out
}

fn trajectory(mut sim: Simulation, rounds: usize) -> Vec<Vector> {
    (0..rounds)
        .map(|_| {
            sim.run_round().unwrap();
            sim.model().clone()
        })
        .collect()
}

fn max_gap(a: &[Vector], b: &[Vector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(u, v)| u.sub(v).norm_inf())
        .fold(0.0, f64::max)
}

#[test]
fn fedavg_single_client_is_gd() {
    let mut c = config(AlgorithmKind::Fedavg, quad_spec(10, 1, 30), 50);
    c.optimizer.local_lr = 0.4;
    let sim = Simulation::new(&c).unwrap();
    let oracle = gd_oracle(sim.problem(), 0.4, 50);
    assert!(max_gap(&trajectory(sim, 50), &oracle) <= 1e-12);
}

#[test]
fn diana_identity_alpha_one_is_dcgd_is_gd() {
    let eta = 0.5;
    let mut diana = config(AlgorithmKind::Diana, quad_spec(8, 5, 20), 50);
    diana.optimizer.diana_alpha = 1.0;
    diana.optimizer.global_lr = eta;
    let mut dcgd = config(AlgorithmKind::Dcgd, quad_spec(8, 5, 20), 50);
    dcgd.optimizer.local_lr = eta;
    let a = Simulation::new(&diana).unwrap();
    let oracle = gd_oracle(a.problem(), eta, 50);
    let ta = trajectory(a, 50);
    let tb = trajectory(Simulation::new(&dcgd).unwrap(), 50);
    assert!(max_gap(&ta, &oracle) <= 1e-10);
    assert!(max_gap(&tb, &oracle) <= 1e-10);
}

#[test]
fn marina_full_sync_is_gd() {
    let eta = 0.5;
    let mut c = config(AlgorithmKind::Marina, quad_spec(8, 5, 20), 50);
    c.optimizer.marina_p = 1.0;
    c.optimizer.global_lr = eta;
    c.uplink = "randk:2".parse().unwrap();
    let sim = Simulation::new(&c).unwrap();
    let oracle = gd_oracle(sim.problem(), eta, 50);
    assert!(max_gap(&trajectory(sim, 50), &oracle) <= 1e-10);
}

#[test]
fn ef21_identity_is_gd() {
    let eta = 0.5;
    let mut c = config(AlgorithmKind::Ef21, quad_spec(6, 4, 20), 50);
    c.optimizer.global_lr = eta;
    let sim = Simulation::new(&c).unwrap();
    let oracle = gd_oracle(sim.problem(), eta, 50);
    assert!(max_gap(&trajectory(sim, 50), &oracle) <= 1e-10);
}

#[test]
fn frozen_zero_scaffold_is_fedavg() {
    let mut c = config(AlgorithmKind::Scaffold, quad_spec(6, 4, 20), 50);
    c.optimizer.local_steps = LocalSteps::Steps(3);
    c.optimizer.local_lr = 0.2;
    c.clients_per_round = Some(2);
    c.uplink = "randk:3".parse().unwrap();
    let frozen = Simulation::with_algorithm(&c, Executor::Sequential, Box::new(Scaffold::with_frozen_shifts())).unwrap();
    let fedavg = Simulation::new(&RunConfig {
        algorithm: AlgorithmKind::Fedavg,
        ..c.clone()
    })
    .unwrap();
    let a = trajectory(frozen, 50);
    let b = trajectory(fedavg, 50);
    assert!(max_gap(&a, &b) == 0.0);
}

#[test]
fn gd_round_moves_by_inverse_smoothness_gradient() {
    let mut c = config(AlgorithmKind::Gd, quad_spec(20, 1, 50), 1);
    c.optimizer.local_lr = 0.5;
    let mut sim = Simulation::new(&c).unwrap();
    let x0 = sim.model().clone();
    let g = sim.problem().global_gradient(&x0).unwrap();
    sim.run_round().unwrap();
    let expected = x0.sub(&g.scaled(1.0 / sim.problem().smoothness));
    assert!(sim.model().sub(&expected).norm_inf() < 1e-15);
}

#[test]
fn descent_direction_for_reducible_configs() {
    for alg in [AlgorithmKind::Gd, AlgorithmKind::Fedavg, AlgorithmKind::Diana, AlgorithmKind::Ef21] {
        let mut c = config(alg, quad_spec(5, 3, 10), 20);
        c.optimizer.diana_alpha = 1.0;
        let mut sim = Simulation::new(&c).unwrap();
        for _ in 0..20 {
            let x = sim.model().clone();
            let grad = sim.problem().global_gradient(&x).unwrap();
            sim.run_round().unwrap();
            // the direction is (x_t − x_{t+1}) / η_s
            let dir = x.sub(sim.model());
            assert!(dir.dot(&grad) >= 0.0, "{alg}");
        }
    }
}

fn traces_for(c: &RunConfig, workers: usize) -> Vec<fedsim_core::engine::MetricsRow> {
    let c = RunConfig {
        worker_threads: workers,
        ..c.clone()
    };
    let out = execute(&c, &RunHandle::new("w"), &mut NoObserver);
    assert_eq!(out.status, RunStatus::Finished, "{:?}", out.error);
    out.rows
}

#[test]
fn traces_do_not_depend_on_worker_count() {
    for alg in AlgorithmKind::ALL {
        let mut c = config(alg, quad_spec(6, 8, 12), 20);
        c.clients_per_round = Some(5);
        c.optimizer.oracle = OracleMode::Nice(0.5);
        c.optimizer.shift_init = ShiftInit::FullGrad;
        if !alg.single_local_step() {
            c.optimizer.local_steps = LocalSteps::Steps(2);
        }
        if alg != AlgorithmKind::Gd {
            c.uplink = "randk:2".parse().unwrap();
        }
        let base = traces_for(&c, 1);
        for w in [2, 8] {
            let other = traces_for(&c, w);
            assert_eq!(base.len(), other.len());
            assert!(base.iter().zip(&other).all(|(a, b)| a.same_trace(b)), "{alg} W={w}");
        }
    }
}

#[test]
fn seeds_matter_only_for_stochastic_runs() {
    let mut c = config(AlgorithmKind::Fedavg, quad_spec(6, 4, 12), 10);
    c.optimizer.oracle = OracleMode::Nice(0.3);
    c.uplink = "randk:2".parse().unwrap();
    let a = traces_for(&c, 1);
    let b = traces_for(&RunConfig { seed: 8, ..c.clone() }, 1);
    assert!(a.iter().zip(&b).any(|(x, y)| !x.same_trace(y)));

    let gd = config(AlgorithmKind::Gd, quad_spec(6, 4, 12), 10);
    let a = traces_for(&gd, 1);
    let b = traces_for(&RunConfig { seed: 8, ..gd.clone() }, 1);
    assert!(a.iter().zip(&b).all(|(x, y)| x.same_trace(y)));
}

#[test]
fn bits_recount_offline_from_realizations() {
    for (alg, spec) in [
        (AlgorithmKind::Fedavg, "bern:0.4"),
        (AlgorithmKind::Scaffold, "switch:0.3(randk:2,natural)"),
        (AlgorithmKind::Marina, "randk:1"),
        (AlgorithmKind::Dcgd, "compose(natural,topk:3)"),
    ] {
        let mut c = config(alg, quad_spec(6, 6, 10), 30);
        c.uplink = spec.parse().unwrap();
        c.clients_per_round = Some(3);
        c.optimizer.marina_p = 0.3;
        let out = execute(&c, &RunHandle::new("b"), &mut NoObserver);
        let compressor: CompressorSpec = spec.parse().unwrap();
        let compressor = compressor.bind(6).unwrap();
        let mut total = 0u64;
        for log in &out.logs {
            for (per_client, logged) in log.uplink.iter().zip(&log.bits_up) {
                let recount: u64 = per_client.iter().map(|r| compressor.bit_cost(r)).sum();
                assert_eq!(recount, *logged);
                total += recount;
            }
        }
        assert_eq!(out.rows.last().unwrap().bits_up_cum, total, "{alg} {spec}");
        assert!(out.rows.windows(2).all(|w| w[0].bits_up_cum <= w[1].bits_up_cum));
    }
}

#[test]
fn full_gradient_oracle_calls_are_conserved() {
    for alg in [AlgorithmKind::Gd, AlgorithmKind::Fedavg, AlgorithmKind::Scaffold, AlgorithmKind::Diana] {
        let problem = ProblemSpec {
            weights: fedsim_core::problems::Weighting::ByDatasetSize,
            ..quad_spec(4, 5, 11)
        };
        let c = config(alg, problem, 13);
        let out = execute(&c, &RunHandle::new("c"), &mut NoObserver);
        assert_eq!(out.rows.last().unwrap().oracle_calls_cum, 13 * 5 * 11);
    }
}

#[test]
fn absent_clients_keep_their_state() {
    for alg in [AlgorithmKind::Scaffold, AlgorithmKind::Diana, AlgorithmKind::Ef21] {
        let mut c = config(alg, quad_spec(5, 8, 10), 15);
        c.clients_per_round = Some(3);
        c.optimizer.shift_init = ShiftInit::FullGrad;
        c.uplink = "randk:2".parse().unwrap();
        let mut sim = Simulation::new(&c).unwrap();
        for _ in 0..15 {
            let before = sim.client_slots().to_vec();
            let participants = sim.run_round().unwrap().participants.clone();
            for (i, (old, new)) in before.iter().zip(sim.client_slots()).enumerate() {
                if !participants.contains(&i) {
                    assert_eq!(old, new, "{alg} client {i}");
                }
            }
        }
    }
}

#[test]
fn scaffold_one_step_control_variate_is_local_gradient() {
    let mut c = config(AlgorithmKind::Scaffold, quad_spec(5, 4, 10), 1);
    c.optimizer.local_lr = 0.3;
    let mut sim = Simulation::new(&c).unwrap();
    let x = sim.model().clone();
    sim.run_round().unwrap();
    for (i, slot) in sim.client_slots().iter().enumerate() {
        let g = sim.problem().client(i).unwrap().full_gradient(&x);
        assert!(slot.shift.as_ref().unwrap().sub(&g).norm_inf() < 1e-12);
    }
}

#[test]
fn client_sampling_is_uniform() {
    let draws = 100_000;
    let mut counts = [0usize; 10];
    for round in 0..draws {
        for c in sample_clients(10, 3, round, 5) {
            counts[c] += 1;
        }
    }
    let p = 0.3;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - draws as f64 * p).abs() <= 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn downlink_bits_are_tracked_separately() {
    let mut c = config(AlgorithmKind::Fedavg, quad_spec(6, 4, 10), 5);
    c.downlink = Some("randk:3".parse().unwrap());
    let out = execute(&c, &RunHandle::new("d"), &mut NoObserver);
    let last = out.rows.last().unwrap();
    assert_eq!(last.bits_up_cum, 5 * 4 * 32 * 6);
    assert_eq!(last.bits_down_cum, 5 * 4 * 3 * (32 + 3));
    let plain = execute(&RunConfig { downlink: None, ..c }, &RunHandle::new("p"), &mut NoObserver);
    assert_eq!(plain.rows.last().unwrap().bits_down_cum, 0);
}

#[test]
fn stop_between_rounds_keeps_rows() {
    struct StopAfter(usize, RunHandle, usize);
    impl fedsim_core::engine::RunObserver for StopAfter {
        fn on_row(&mut self, _row: &fedsim_core::engine::MetricsRow) -> std::io::Result<()> {
            self.2 += 1;
            if self.2 == self.0 {
                self.1.request_stop();
            }
            Ok(())
        }
    }
    let c = config(AlgorithmKind::Scaffold, quad_spec(5, 4, 10), 100);
    let h = RunHandle::new("s");
    let mut obs = StopAfter(7, h.clone(), 0);
    let out = execute(&c, &h, &mut obs);
    assert_eq!(out.status, RunStatus::Stopped);
    assert_eq!(h.status(), RunStatus::Stopped);
    assert_eq!(out.rows.len(), 7);
}
