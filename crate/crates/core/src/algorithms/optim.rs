//! Client and server optimizers and their hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::problems::OracleMode;
use crate::vector::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply both rates by `factor` every `every` rounds.
    StepDecay { factor: f64, every: usize },
}

impl LrSchedule {
    pub fn multiplier(&self, round: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay { factor, every } => factor.powi((round / every.max(1)) as i32),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSteps {
    Steps(usize),
    /// Passes over the local data; the step count depends on the batch size.
    Epochs(usize),
}

impl Default for LocalSteps {
    fn default() -> Self {
        LocalSteps::Steps(1)
    }
}

impl LocalSteps {
    pub fn resolve(&self, n_samples: usize, oracle: OracleMode) -> usize {
        match *self {
            LocalSteps::Steps(k) => k,
            LocalSteps::Epochs(e) => e * n_samples.div_ceil(oracle.batch_size(n_samples)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftInit {
    #[default]
    Zero,
    FullGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerSpec {
    pub local_lr: f64,
    pub global_lr: f64,
    /// Heavy-ball coefficient of the client optimizer; 0 is plain SGD.
    pub local_momentum: f64,
    pub global_momentum: f64,
    pub lr_schedule: LrSchedule,
    pub local_steps: LocalSteps,
    pub oracle: OracleMode,
    pub prox_mu: f64,
    pub shift_init: ShiftInit,
    pub marina_p: f64,
    pub diana_alpha: f64,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            local_lr: 0.1,
            global_lr: 1.0,
            local_momentum: 0.0,
            global_momentum: 0.0,
            lr_schedule: LrSchedule::Constant,
            local_steps: LocalSteps::Steps(1),
            oracle: OracleMode::Full,
            prox_mu: 0.0,
            shift_init: ShiftInit::Zero,
            marina_p: 0.1,
            diana_alpha: 0.5,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<(), String> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and nonnegative, got {v}"))
            }
        };
        finite_nonneg("local-lr", self.local_lr)?;
        finite_nonneg("global-lr", self.global_lr)?;
        finite_nonneg("prox-mu", self.prox_mu)?;
        for (name, beta) in [("local momentum", self.local_momentum), ("global momentum", self.global_momentum)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(format!("{name} must lie in [0, 1), got {beta}"));
            }
        }
        if !(self.marina_p > 0.0 && self.marina_p <= 1.0) {
            return Err(format!("marina-p must lie in (0, 1], got {}", self.marina_p));
        }
        if !(self.diana_alpha > 0.0 && self.diana_alpha <= 1.0) {
            return Err(format!("diana-alpha must lie in (0, 1], got {}", self.diana_alpha));
        }
        match self.local_steps {
            LocalSteps::Steps(0) | LocalSteps::Epochs(0) => {
                return Err("local steps/epochs must be at least 1".into())
            }
            _ => {}
        }
        if let LrSchedule::StepDecay { factor, every } = self.lr_schedule {
            if !(factor.is_finite() && factor > 0.0) || every == 0 {
                return Err("step decay needs a positive factor and period".into());
            }
        }
        self.oracle.validate().map_err(|e| e.to_string())
    }

    pub fn local_rate(&self, round: usize) -> f64 {
        self.local_lr * self.lr_schedule.multiplier(round)
    }

    pub fn global_rate(&self, round: usize) -> f64 {
        self.global_lr * self.lr_schedule.multiplier(round)
    }
}

/// Local SGD (optionally heavy-ball); velocity starts at zero every round.
#[derive(Debug, Clone)]
pub struct ClientOptimizer {
    lr: f64,
    beta: f64,
    velocity: Option<Vector>,
}

impl ClientOptimizer {
    pub fn new(spec: &OptimizerSpec, round: usize) -> Self {
        ClientOptimizer {
            lr: spec.local_rate(round),
            beta: spec.local_momentum,
            velocity: None,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, x: &mut Vector, g: &Vector) {
        if self.beta == 0.0 {
            x.axpy(-self.lr, g);
            return;
        }
        let v = match self.velocity.as_mut() {
            Some(v) => {
                v.scale(self.beta);
                v.axpy(1.0, g);
                v
            }
            None => self.velocity.insert(g.clone()),
        };
        x.axpy(-self.lr, v);
    }
}

/// `x ← x − η_s(t)·G`, heavy-ball velocity persists across rounds.
#[derive(Debug, Clone, Default)]
pub struct ServerOptimizer {
    velocity: Option<Vector>,
}

impl ServerOptimizer {
    pub fn step(&mut self, spec: &OptimizerSpec, x: &Vector, gradient: &Vector, round: usize) -> Vector {
        let lr = spec.global_rate(round);
        let direction = if spec.global_momentum == 0.0 {
            gradient
        } else {
            let v = match self.velocity.as_mut() {
                Some(v) => {
                    v.scale(spec.global_momentum);
                    v.axpy(1.0, gradient);
                    v
                }
                None => self.velocity.insert(gradient.clone()),
            };
            &*v
        };
        let mut next = x.clone();
        next.axpy(-lr, direction);
        next
    }
}
