//! Federated objectives `F(x) = Σ_i p_i F_i(x)`.
//!
//! Two families are supported. Quadratic clients hold `(A_i, b_i)` with
//! `F_i(x) = (1/n_i) Σ_j (a_j·x − b_j)² + (λ/2)‖x‖²`; the generator rescales
//! the stacked data so the global Hessian spectrum is exactly `[μ, L]`.
//! Logistic-regression clients hold `±1` labelled rows with
//! `F_i(x) = (1/n_i) Σ_j log(1 + exp(−y_j a_j·x)) + (λ/2)‖x‖²`.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};
use crate::vector::Vector;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("dimension must be at least 2 for spectrum control, got {0}")]
    DimensionTooSmall(usize),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("unknown client {client} (problem has {count} clients)")]
    UnknownClient { client: usize, count: usize },
    #[error("point has dimension {got}, problem dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point has non-finite entries")]
    NonFinite,
    #[error("stacked data matrix is rank deficient; need at least d independent samples")]
    RankDeficient,
}

pub type Result<T> = std::result::Result<T, ProblemError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[serde(alias = "quadratic")]
    Quad,
    #[serde(alias = "logistic")]
    Logreg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Iid,
    #[default]
    #[serde(alias = "non-iid")]
    Noniid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    ByDatasetSize,
}

/// Serializable description of a problem. Data is regenerated from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub family: Family,
    pub d: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(rename = "L", default = "default_l")]
    pub l: f64,
    pub clients: usize,
    pub samples: usize,
    #[serde(default)]
    pub split: Split,
    /// Falls back to the run seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default)]
    pub weights: Weighting,
}

fn default_mu() -> f64 {
    1.0
}
fn default_l() -> f64 {
    2.0
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec {
            family: Family::Quad,
            d: 20,
            mu: 1.0,
            l: 2.0,
            clients: 10,
            samples: 50,
            split: Split::Noniid,
            seed: None,
            lambda: 0.0,
            label_noise: 0.0,
            weights: Weighting::Uniform,
        }
    }
}

impl ProblemSpec {
    pub fn build(&self, fallback_seed: u64) -> Result<FederatedProblem> {
        let seed = self.seed.unwrap_or(fallback_seed);
        let problem = match self.family {
            Family::Quad => generate_quadratic_problem(&QuadraticParams {
                d: self.d,
                mu: self.mu,
                l: self.l,
                clients: self.clients,
                samples_per_client: self.samples,
                split: self.split,
                lambda: self.lambda,
                weights: self.weights,
                seed,
            })?,
            Family::Logreg => generate_logreg_problem(&LogRegParams {
                d: self.d,
                clients: self.clients,
                samples_per_client: self.samples,
                lambda: self.lambda,
                label_noise: self.label_noise,
                split: self.split,
                weights: self.weights,
                seed,
            })?,
        };
        Ok(problem)
    }
}

/// Row-major `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRows {
    n: usize,
    d: usize,
    values: Vec<f64>,
}

impl DataRows {
    pub fn new(n: usize, d: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n * d);
        DataRows { n, d, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.values[j * self.d..(j + 1) * self.d]
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.d, &self.values)
    }

    fn transform_rows(&mut self, t: &DMatrix<f64>) {
        // a ← Tᵀ a for every row
        let d = self.d;
        let mut out = vec![0.0; d];
        for j in 0..self.n {
            let row = &self.values[j * d..(j + 1) * d];
            for (c, o) in out.iter_mut().enumerate() {
                *o = (0..d).map(|r| row[r] * t[(r, c)]).sum();
            }
            self.values[j * d..(j + 1) * d].copy_from_slice(&out);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientData {
    Quadratic { features: DataRows, responses: Vec<f64> },
    LogReg { features: DataRows, labels: Vec<f64> },
}

impl ClientData {
    pub fn features(&self) -> &DataRows {
        match self {
            ClientData::Quadratic { features, .. } | ClientData::LogReg { features, .. } => features,
        }
    }

    pub fn n(&self) -> usize {
        self.features().n()
    }

    fn component_value(&self, j: usize, x: &[f64]) -> f64 {
        match self {
            ClientData::Quadratic { features, responses } => {
                let r = dot(features.row(j), x) - responses[j];
                r * r
            }
            ClientData::LogReg { features, labels } => softplus(-labels[j] * dot(features.row(j), x)),
        }
    }

    /// Adds the gradient of component `j` at `x` into `acc`.
    fn add_component_gradient(&self, j: usize, x: &[f64], acc: &mut Vector) {
        match self {
            ClientData::Quadratic { features, responses } => {
                let a = features.row(j);
                let r = dot(a, x) - responses[j];
                acc.axpy(2.0 * r, a);
            }
            ClientData::LogReg { features, labels } => {
                let a = features.row(j);
                let y = labels[j];
                acc.axpy(-y * sigmoid(-y * dot(a, x)), a);
            }
        }
    }
}

/// One client's local loss `F_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientObjective {
    pub data: ClientData,
    pub l2_coeff: f64,
}

impl ClientObjective {
    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let n = self.n();
        let data: f64 = (0..n).map(|j| self.data.component_value(j, x)).sum::<f64>() / n as f64;
        data + 0.5 * self.l2_coeff * x.iter().map(|v| v * v).sum::<f64>()
    }

    /// Average of the component gradients over `indices`, plus the exact
    /// regularizer gradient.
    pub fn subset_gradient(&self, x: &[f64], indices: &[usize]) -> Vector {
        let mut acc = Vector::zeros(x.len());
        for &j in indices {
            self.data.add_component_gradient(j, x, &mut acc);
        }
        acc.scale(1.0 / indices.len() as f64);
        if self.l2_coeff != 0.0 {
            acc.axpy(self.l2_coeff, x);
        }
        acc
    }

    pub fn full_gradient(&self, x: &[f64]) -> Vector {
        let all: Vec<usize> = (0..self.n()).collect();
        self.subset_gradient(x, &all)
    }
}

/// How a client estimates its local gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode", content = "fraction")]
pub enum OracleMode {
    #[default]
    Full,
    /// Uniform-without-replacement minibatch of `max(1, ⌈τ·n_i⌉)` samples.
    Nice(f64),
}

impl OracleMode {
    pub fn batch_size(&self, n: usize) -> usize {
        match *self {
            OracleMode::Full => n,
            OracleMode::Nice(tau) => ((tau * n as f64).ceil() as usize).clamp(1, n),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let OracleMode::Nice(tau) = *self {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(ProblemError::InvalidParameter {
                    name: "oracle",
                    reason: format!("nice fraction must lie in (0, 1], got {tau}"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedProblem {
    pub family: Family,
    pub clients: Vec<ClientObjective>,
    pub weights: Vec<f64>,
    pub l2_coeff: f64,
    pub dimension: usize,
    pub smoothness: f64,
    pub strong_convexity: Option<f64>,
}

impl FederatedProblem {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client(&self, id: usize) -> Result<&ClientObjective> {
        self.clients.get(id).ok_or(ProblemError::UnknownClient {
            client: id,
            count: self.clients.len(),
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dimension {
            return Err(ProblemError::DimensionMismatch {
                expected: self.dimension,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFinite);
        }
        Ok(())
    }

    pub fn local_value(&self, client: usize, x: &[f64]) -> Result<f64> {
        let c = self.client(client)?;
        self.check_point(x)?;
        Ok(c.value(x))
    }

    /// Local gradient estimate and the number of component gradients it took.
    pub fn local_gradient<R: Rng + ?Sized>(
        &self,
        client: usize,
        x: &[f64],
        mode: OracleMode,
        rng: &mut R,
    ) -> Result<(Vector, usize)> {
        let c = self.client(client)?;
        self.check_point(x)?;
        let n = c.n();
        let batch = mode.batch_size(n);
        if batch == n {
            return Ok((c.full_gradient(x), n));
        }
        let mut subset = index::sample(rng, n, batch).into_vec();
        subset.sort_unstable();
        Ok((c.subset_gradient(x, &subset), batch))
    }

    pub fn global_value(&self, x: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        Ok(self
            .clients
            .iter()
            .zip(&self.weights)
            .map(|(c, p)| p * c.value(x))
            .sum())
    }

    pub fn global_gradient(&self, x: &[f64]) -> Result<Vector> {
        self.check_point(x)?;
        let mut acc = Vector::zeros(self.dimension);
        for (c, p) in self.clients.iter().zip(&self.weights) {
            acc.axpy(*p, &c.full_gradient(x));
        }
        Ok(acc)
    }

    /// Global Hessian `Σ_i p_i (2/n_i) A_iᵀA_i + λI`; quadratic family only.
    pub fn quadratic_hessian(&self) -> Option<DMatrix<f64>> {
        if self.family != Family::Quad {
            return None;
        }
        let d = self.dimension;
        let mut h = DMatrix::<f64>::identity(d, d) * self.l2_coeff;
        for (c, p) in self.clients.iter().zip(&self.weights) {
            let a = c.data.features().to_matrix();
            h += (a.transpose() * &a) * (2.0 * p / c.n() as f64);
        }
        Some(h)
    }

    /// Exact global minimizer and optimal value via the normal equations.
    pub fn quadratic_minimizer(&self) -> Option<(Vector, f64)> {
        let h = self.quadratic_hessian()?;
        let mut rhs = DVector::<f64>::zeros(self.dimension);
        for (c, p) in self.clients.iter().zip(&self.weights) {
            if let ClientData::Quadratic { features, responses } = &c.data {
                let a = features.to_matrix();
                let b = DVector::from_column_slice(responses);
                rhs += (a.transpose() * b) * (2.0 * p / c.n() as f64);
            }
        }
        let x = h.cholesky()?.solve(&rhs);
        let x = Vector::from_vec(x.iter().copied().collect());
        let f = self.global_value(&x).ok()?;
        Some((x, f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticParams {
    pub d: usize,
    pub mu: f64,
    pub l: f64,
    pub clients: usize,
    pub samples_per_client: usize,
    pub split: Split,
    pub lambda: f64,
    pub weights: Weighting,
    pub seed: u64,
}

fn invalid(name: &'static str, reason: impl Into<String>) -> ProblemError {
    ProblemError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

fn client_weights(sizes: &[usize], weighting: Weighting) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0 / sizes.len() as f64; sizes.len()],
        Weighting::ByDatasetSize => {
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&n| n as f64 / total as f64).collect()
        }
    }
}

pub fn generate_quadratic_problem(params: &QuadraticParams) -> Result<FederatedProblem> {
    let QuadraticParams {
        d,
        mu,
        l,
        clients,
        samples_per_client: n,
        split,
        lambda,
        weights,
        seed,
    } = *params;
    if d < 2 {
        return Err(ProblemError::DimensionTooSmall(d));
    }
    if !(mu.is_finite() && l.is_finite() && lambda.is_finite()) {
        return Err(invalid("mu/L/lambda", "must be finite"));
    }
    if mu <= 0.0 {
        return Err(invalid("mu", format!("must be positive, got {mu}")));
    }
    if l < mu {
        return Err(invalid("L", format!("must be at least mu={mu}, got {l}")));
    }
    if lambda < 0.0 || lambda > mu {
        return Err(invalid("lambda", format!("must lie in [0, mu] for the quadratic family, got {lambda}")));
    }
    if clients == 0 {
        return Err(invalid("clients", "must be positive"));
    }
    if n == 0 {
        return Err(invalid("samples", "must be positive"));
    }

    let mut rng = StreamKey::new(seed, Purpose::ProblemData).rng();
    let draw = |rng: &mut crate::rng::StreamRng| {
        let features: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
        let responses: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        (DataRows::new(n, d, features), responses)
    };
    let mut data: Vec<(DataRows, Vec<f64>)> = match split {
        Split::Iid => {
            let shared = draw(&mut rng);
            vec![shared; clients]
        }
        Split::Noniid => (0..clients).map(|_| draw(&mut rng)).collect(),
    };
    let sizes: Vec<usize> = data.iter().map(|(a, _)| a.n()).collect();
    let p = client_weights(&sizes, weights);

    // Stacked Z with rows sqrt(2 p_i / n_i) a_j, so that ZᵀZ is the data Hessian.
    let total_rows: usize = sizes.iter().sum();
    if total_rows < d {
        return Err(ProblemError::RankDeficient);
    }
    let mut z = DMatrix::<f64>::zeros(total_rows, d);
    let mut r0 = 0;
    for ((a, _), pi) in data.iter().zip(&p) {
        let s = (2.0 * pi / a.n() as f64).sqrt();
        for j in 0..a.n() {
            for (c, v) in a.row(j).iter().enumerate() {
                z[(r0 + j, c)] = s * v;
            }
        }
        r0 += a.n();
    }
    let svd = z.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma = &svd.singular_values;
    let s_max = sigma.max();
    let s_min = sigma.min();
    if s_min.is_nan() || s_min <= 1e-10 * s_max {
        return Err(ProblemError::RankDeficient);
    }

    // Affine remap of squared singular values onto the data part of [μ, L].
    let (lo, hi) = (mu - lambda, l - lambda);
    let (q_min, q_max) = (s_min * s_min, s_max * s_max);
    let span = q_max - q_min;
    if hi > lo && span <= 1e-12 * q_max {
        return Err(invalid("mu/L", "all singular values coincide; only mu = L is realisable"));
    }
    let ratios: Vec<f64> = sigma
        .iter()
        .map(|s| {
            let target = if hi > lo {
                lo + (s * s - q_min) / span * (hi - lo)
            } else {
                lo
            };
            target.sqrt() / s
        })
        .collect();
    // T = V diag(ratio) Vᵀ
    let v = v_t.transpose();
    let mut scaled = v.clone();
    for (c, ratio) in ratios.iter().enumerate() {
        scaled.column_mut(c).scale_mut(*ratio);
    }
    let t = &scaled * &v_t;
    for (a, _) in &mut data {
        a.transform_rows(&t);
    }

    let objectives = data
        .into_iter()
        .map(|(features, responses)| ClientObjective {
            data: ClientData::Quadratic { features, responses },
            l2_coeff: lambda,
        })
        .collect();
    Ok(FederatedProblem {
        family: Family::Quad,
        clients: objectives,
        weights: p,
        l2_coeff: lambda,
        dimension: d,
        smoothness: l,
        strong_convexity: Some(mu),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRegParams {
    pub d: usize,
    pub clients: usize,
    pub samples_per_client: usize,
    pub lambda: f64,
    pub label_noise: f64,
    pub split: Split,
    pub weights: Weighting,
    pub seed: u64,
}

pub fn generate_logreg_problem(params: &LogRegParams) -> Result<FederatedProblem> {
    let LogRegParams {
        d,
        clients,
        samples_per_client: n,
        lambda,
        label_noise,
        split,
        weights,
        seed,
    } = *params;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(invalid("lambda", format!("must be finite and nonnegative, got {lambda}")));
    }
    if !(0.0..0.5).contains(&label_noise) {
        return Err(invalid("label_noise", format!("must lie in [0, 0.5), got {label_noise}")));
    }
    if d == 0 || clients == 0 || n == 0 {
        return Err(invalid("d/clients/samples", "must be positive"));
    }

    let mut rng = StreamKey::new(seed, Purpose::ProblemData).rng();
    let w_true: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let draw = |rng: &mut crate::rng::StreamRng| {
        let features: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        let rows = DataRows::new(n, d, features);
        let labels: Vec<f64> = (0..n)
            .map(|j| {
                let clean = if dot(rows.row(j), &w_true) >= 0.0 { 1.0 } else { -1.0 };
                if rng.random::<f64>() < label_noise {
                    -clean
                } else {
                    clean
                }
            })
            .collect();
        (rows, labels)
    };
    let data: Vec<(DataRows, Vec<f64>)> = match split {
        Split::Iid => {
            let shared = draw(&mut rng);
            vec![shared; clients]
        }
        Split::Noniid => (0..clients).map(|_| draw(&mut rng)).collect(),
    };
    let sizes: Vec<usize> = data.iter().map(|(a, _)| a.n()).collect();
    let smoothness = lambda
        + data
            .iter()
            .map(|(a, _)| {
                let op = a.to_matrix().singular_values().max();
                op * op / (4.0 * a.n() as f64)
            })
            .fold(0.0, f64::max);
    let objectives = data
        .into_iter()
        .map(|(features, labels)| ClientObjective {
            data: ClientData::LogReg { features, labels },
            l2_coeff: lambda,
        })
        .collect();
    Ok(FederatedProblem {
        family: Family::Logreg,
        clients: objectives,
        weights: client_weights(&sizes, weights),
        l2_coeff: lambda,
        dimension: d,
        smoothness,
        strong_convexity: None,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
