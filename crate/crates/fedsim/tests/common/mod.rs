#![allow(dead_code)]

use fedsim_core::algorithms::{AlgorithmKind, LocalSteps, LrSchedule, ShiftInit};
use fedsim_core::engine::RunConfig;
use fedsim_core::problems::{Family, OracleMode, ProblemSpec, Split, Weighting};
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};

const COMPRESSORS: [&str; 10] = [
    "identity",
    "bern:0.5",
    "randk:3",
    "topk:25%",
    "natural",
    "dith:4",
    "qsgd:2",
    "terngrad",
    "compose(randk:50%,natural)",
    "switch:0.3(identity,topk:2)",
];

/// A valid configuration with most fields away from their defaults.
pub fn random_config(seed: u64) -> RunConfig {
    let mut rng = StdRng::seed_from_u64(seed);
    let algorithm = *AlgorithmKind::ALL.choose(&mut rng).unwrap();
    let clients = rng.random_range(2..12);
    let d = rng.random_range(4..10);
    let mu = (rng.random_range(1..10) as f64) / 8.0;
    let problem = ProblemSpec {
        family: if rng.random_bool(0.5) { Family::Quad } else { Family::Logreg },
        d,
        mu,
        l: mu + rng.random_range(1..20) as f64 / 4.0,
        clients,
        samples: rng.random_range(d..3 * d),
        split: if rng.random_bool(0.5) { Split::Iid } else { Split::Noniid },
        seed: rng.random_bool(0.5).then(|| rng.random_range(0..1000)),
        lambda: if rng.random_bool(0.5) { mu / 2.0 } else { 0.0 },
        label_noise: rng.random_range(0..4) as f64 / 10.0,
        weights: if rng.random_bool(0.5) { Weighting::Uniform } else { Weighting::ByDatasetSize },
    };
    let mut c = RunConfig {
        rounds: rng.random_range(1..500),
        clients_per_round: rng.random_bool(0.7).then(|| rng.random_range(1..=clients)),
        algorithm,
        uplink: COMPRESSORS.choose(&mut rng).unwrap().parse().unwrap(),
        downlink: rng
            .random_bool(0.3)
            .then(|| COMPRESSORS.choose(&mut rng).unwrap().parse().unwrap()),
        problem,
        seed: rng.random(),
        worker_threads: rng.random_range(1..4),
        eval_every: rng.random_range(1..5),
        group: rng.random_bool(0.5).then(|| format!("group {}", rng.random_range(0..9))),
        comment: rng.random_bool(0.5).then(|| "it's a \"test\", with $pecial chars".to_string()),
        tags: (0..rng.random_range(0..3)).map(|i| format!("t{i}")).collect(),
        ..Default::default()
    };
    let o = &mut c.optimizer;
    o.global_lr = rng.random_range(0.1..2.0);
    o.local_lr = rng.random_range(0.001..0.5);
    o.local_steps = if rng.random_bool(0.5) {
        LocalSteps::Steps(rng.random_range(1..6))
    } else {
        LocalSteps::Epochs(rng.random_range(1..3))
    };
    o.local_momentum = if rng.random_bool(0.3) { 0.9 } else { 0.0 };
    o.global_momentum = if rng.random_bool(0.3) { 0.5 } else { 0.0 };
    if rng.random_bool(0.3) {
        o.lr_schedule = LrSchedule::StepDecay { factor: 0.5, every: 10 };
    }
    if rng.random_bool(0.3) {
        o.oracle = OracleMode::Nice(0.25);
    }
    if rng.random_bool(0.5) {
        o.shift_init = ShiftInit::FullGrad;
    }
    o.marina_p = rng.random_range(0.05..1.0);
    o.diana_alpha = rng.random_range(0.05..1.0);
    o.prox_mu = rng.random_range(0.0..1.0);
    if algorithm.single_local_step() {
        o.local_steps = LocalSteps::Steps(1);
    }
    if algorithm == AlgorithmKind::Gd {
        c.uplink = Default::default();
    }
    c
}

pub fn parse_line(line: &str) -> RunConfig {
    let words = shlex::split(line).expect("emitted line is valid shell");
    match fedsim::args::parse_args(words).unwrap_or_else(|e| panic!("{line}: {e}")) {
        fedsim::args::Invocation::Command {
            action: fedsim::args::Action::Run(c),
            ..
        } => *c,
        other => panic!("{other:?}"),
    }
}
