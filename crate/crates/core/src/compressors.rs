//! Compression operators `C: R^d → R^d` with wire-size accounting.
//!
//! A [`CompressorSpec`] is the dimension-free description parsed from config
//! (`randk:40%`, `switch:0.5(natural,topk:3)`, ...). Binding it to a dimension
//! yields a [`Compressor`], which resolves percentages and can be applied.
//!
//! Bit model: a raw real costs 32 bits and a coordinate index `⌈log2 d⌉` bits.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::rng::{Purpose, StreamKey};
use crate::vector::Vector;

const FLOAT_BITS: u64 = 32;
/// Largest support count enumerated exhaustively.
const MAX_ENUMERATED_OUTCOMES: usize = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum CompressorError {
    #[error("cannot parse compressor `{input}`: {reason}")]
    Parse { input: String, reason: String },
    #[error("invalid compressor parameter: {0}")]
    InvalidParameter(String),
    #[error("compressor bound to d={expected} applied to a vector of length {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("compressor `{0}` is biased; unbiasedness cannot be certified")]
    Biased(String),
    #[error("compressor `{0}` has no enumerable distribution at this dimension")]
    NotEnumerable(String),
}

pub type Result<T> = std::result::Result<T, CompressorError>;

/// Sparsity level: an absolute count or a percentage of `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Amount {
    Absolute(usize),
    Percent(f64),
}

impl Amount {
    fn resolve(self, d: usize) -> Result<usize> {
        match self {
            Amount::Absolute(k) if k >= 1 && k <= d => Ok(k),
            Amount::Absolute(k) => Err(CompressorError::InvalidParameter(format!(
                "k={k} must lie in [1, d={d}]"
            ))),
            Amount::Percent(pct) => {
                let k = (pct * d as f64 / 100.0).round() as usize;
                Ok(k.clamp(1, d))
            }
        }
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Amount::Absolute(k) => write!(f, "{k}"),
            Amount::Percent(p) => write!(f, "{p}%"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum CompressorSpec {
    #[default]
    Identity,
    Bernoulli(f64),
    RandK(Amount),
    TopK(Amount),
    Natural,
    StdDithering(u32),
    NaturalDithering(u32),
    TernGrad,
    Qsgd(u32),
    Compose(Box<CompressorSpec>, Box<CompressorSpec>),
    Switch(f64, Box<CompressorSpec>, Box<CompressorSpec>),
}

impl CompressorSpec {
    pub fn is_unbiased(&self) -> bool {
        match self {
            CompressorSpec::TopK(_) => false,
            CompressorSpec::Compose(a, b) | CompressorSpec::Switch(_, a, b) => {
                a.is_unbiased() && b.is_unbiased()
            }
            _ => true,
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, CompressorSpec::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CompressorError::InvalidParameter(msg));
        match self {
            CompressorSpec::Bernoulli(p) if !(*p > 0.0 && *p <= 1.0) => {
                bad(format!("bernoulli p={p} must lie in (0, 1]"))
            }
            CompressorSpec::RandK(a) | CompressorSpec::TopK(a) => match a {
                Amount::Absolute(0) => bad("k must be at least 1".into()),
                Amount::Percent(p) if !(*p > 0.0 && *p <= 100.0) => {
                    bad(format!("percentage {p} must lie in (0, 100]"))
                }
                _ => Ok(()),
            },
            CompressorSpec::StdDithering(0)
            | CompressorSpec::NaturalDithering(0)
            | CompressorSpec::Qsgd(0) => bad("number of levels s must be at least 1".into()),
            CompressorSpec::Compose(a, b) => {
                a.validate()?;
                b.validate()
            }
            CompressorSpec::Switch(p, a, b) => {
                if !(0.0..=1.0).contains(p) {
                    return bad(format!("switch probability {p} must lie in [0, 1]"));
                }
                a.validate()?;
                b.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn bind(&self, d: usize) -> Result<Compressor> {
        self.validate()?;
        if d == 0 {
            return Err(CompressorError::InvalidParameter("dimension must be positive".into()));
        }
        let node = match self {
            CompressorSpec::Identity => Node::Identity,
            CompressorSpec::Bernoulli(p) => Node::Bernoulli(*p),
            CompressorSpec::RandK(a) => Node::RandK(a.resolve(d)?),
            CompressorSpec::TopK(a) => Node::TopK(a.resolve(d)?),
            CompressorSpec::Natural => Node::Natural,
            CompressorSpec::StdDithering(s) => Node::StdDithering(*s),
            CompressorSpec::NaturalDithering(s) => Node::NaturalDithering(*s),
            CompressorSpec::TernGrad => Node::TernGrad,
            CompressorSpec::Qsgd(s) => Node::Qsgd(*s),
            CompressorSpec::Compose(outer, inner) => {
                Node::Compose(Box::new(outer.bind(d)?), Box::new(inner.bind(d)?))
            }
            CompressorSpec::Switch(p, a, b) => {
                Node::Switch(*p, Box::new(a.bind(d)?), Box::new(b.bind(d)?))
            }
        };
        Ok(Compressor {
            d,
            node,
            spec: self.clone(),
        })
    }
}

impl fmt::Display for CompressorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorSpec::Identity => write!(f, "identity"),
            CompressorSpec::Bernoulli(p) => write!(f, "bern:{p}"),
            CompressorSpec::RandK(a) => write!(f, "randk:{a}"),
            CompressorSpec::TopK(a) => write!(f, "topk:{a}"),
            CompressorSpec::Natural => write!(f, "natural"),
            CompressorSpec::StdDithering(s) => write!(f, "dith:{s}"),
            CompressorSpec::NaturalDithering(s) => write!(f, "ndith:{s}"),
            CompressorSpec::TernGrad => write!(f, "terngrad"),
            CompressorSpec::Qsgd(s) => write!(f, "qsgd:{s}"),
            CompressorSpec::Compose(a, b) => write!(f, "compose({a},{b})"),
            CompressorSpec::Switch(p, a, b) => write!(f, "switch:{p}({a},{b})"),
        }
    }
}

impl FromStr for CompressorSpec {
    type Err = CompressorError;

    fn from_str(input: &str) -> Result<Self> {
        let spec = parse_spec(input.trim()).map_err(|reason| CompressorError::Parse {
            input: input.to_string(),
            reason,
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

impl Serialize for CompressorSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CompressorSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn parse_spec(s: &str) -> std::result::Result<CompressorSpec, String> {
    let (head, args) = match s.find('(') {
        Some(open) => {
            if !s.ends_with(')') {
                return Err("missing closing parenthesis".into());
            }
            (&s[..open], Some(split_top_level(&s[open + 1..s.len() - 1])?))
        }
        None => (s, None),
    };
    let (name, param) = match head.split_once(':') {
        Some((n, p)) => (n.trim(), Some(p.trim())),
        None => (head.trim(), None),
    };
    let real = |p: Option<&str>| -> std::result::Result<f64, String> {
        let p = p.ok_or_else(|| format!("`{name}` needs a parameter"))?;
        p.parse::<f64>().map_err(|_| format!("`{p}` is not a number"))
    };
    let levels = |p: Option<&str>| -> std::result::Result<u32, String> {
        match p {
            None => Ok(4),
            Some(p) => p.parse::<u32>().map_err(|_| format!("`{p}` is not a level count")),
        }
    };
    let amount = |p: Option<&str>| -> std::result::Result<Amount, String> {
        let p = p.ok_or_else(|| format!("`{name}` needs k (count or percentage)"))?;
        if let Some(pct) = p.strip_suffix('%') {
            pct.trim()
                .parse::<f64>()
                .map(Amount::Percent)
                .map_err(|_| format!("`{p}` is not a percentage"))
        } else {
            p.parse::<usize>()
                .map(Amount::Absolute)
                .map_err(|_| format!("`{p}` is not a count"))
        }
    };
    let no_args = |spec: CompressorSpec| match args {
        Some(_) => Err(format!("`{name}` takes no arguments")),
        None => Ok(spec),
    };
    let pair = |args: Option<Vec<&str>>| -> std::result::Result<(Box<CompressorSpec>, Box<CompressorSpec>), String> {
        match args.as_deref() {
            Some([a, b]) => Ok((Box::new(parse_spec(a.trim())?), Box::new(parse_spec(b.trim())?))),
            _ => Err(format!("`{name}` takes exactly two compressors")),
        }
    };
    match name {
        "identity" | "id" | "none" => no_args(CompressorSpec::Identity),
        "bern" | "bernoulli" | "lazy" => no_args(CompressorSpec::Bernoulli(real(param)?)),
        "randk" => no_args(CompressorSpec::RandK(amount(param)?)),
        "topk" => no_args(CompressorSpec::TopK(amount(param)?)),
        "natural" => no_args(CompressorSpec::Natural),
        "dith" => no_args(CompressorSpec::StdDithering(levels(param)?)),
        "ndith" => no_args(CompressorSpec::NaturalDithering(levels(param)?)),
        "terngrad" => no_args(CompressorSpec::TernGrad),
        "qsgd" => no_args(CompressorSpec::Qsgd(levels(param)?)),
        "compose" => {
            if param.is_some() {
                return Err("`compose` takes no parameter".into());
            }
            let (a, b) = pair(args)?;
            Ok(CompressorSpec::Compose(a, b))
        }
        "switch" => {
            let p = real(param)?;
            let (a, b) = pair(args)?;
            Ok(CompressorSpec::Switch(p, a, b))
        }
        other => Err(format!("unknown compressor `{other}`")),
    }
}

fn split_top_level(s: &str) -> std::result::Result<Vec<&str>, String> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err("unbalanced parentheses".into());
                }
            }
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced parentheses".into());
    }
    parts.push(&s[start..]);
    Ok(parts)
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Identity,
    Bernoulli(f64),
    RandK(usize),
    TopK(usize),
    Natural,
    StdDithering(u32),
    NaturalDithering(u32),
    TernGrad,
    Qsgd(u32),
    Compose(Box<Compressor>, Box<Compressor>),
    Switch(f64, Box<Compressor>, Box<Compressor>),
}

/// What randomness decided, as far as the wire size is concerned.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realization {
    /// Size fixed by the bound compressor alone.
    Fixed,
    /// Sent as raw floats, bypassing the compressor.
    Dense,
    Bernoulli { sent: bool },
    Compose { outer: Box<Realization>, inner: Box<Realization> },
    Switch { first: bool, branch: Box<Realization> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMessage {
    pub reconstructed: Vector,
    pub bits: u64,
    pub realization: Realization,
}

/// A compressor bound to a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Compressor {
    d: usize,
    node: Node,
    spec: CompressorSpec,
}

impl Compressor {
    pub fn identity(d: usize) -> Self {
        Compressor {
            d,
            node: Node::Identity,
            spec: CompressorSpec::Identity,
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn spec(&self) -> &CompressorSpec {
        &self.spec
    }

    pub fn is_unbiased(&self) -> bool {
        self.spec.is_unbiased()
    }

    /// Resolved sparsity for Rand-K / Top-K.
    pub fn resolved_k(&self) -> Option<usize> {
        match self.node {
            Node::RandK(k) | Node::TopK(k) => Some(k),
            _ => None,
        }
    }

    pub fn compress<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<CompressedMessage> {
        if x.len() != self.d {
            return Err(CompressorError::DimensionMismatch {
                expected: self.d,
                got: x.len(),
            });
        }
        let (reconstructed, realization) = self.apply(x, rng);
        let bits = self.bit_cost(&realization);
        Ok(CompressedMessage {
            reconstructed,
            bits,
            realization,
        })
    }

    fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> (Vector, Realization) {
        let d = self.d;
        match &self.node {
            Node::Identity => (Vector::from(x.to_vec()), Realization::Fixed),
            Node::Bernoulli(p) => {
                let sent = rng.random::<f64>() < *p;
                let out = if sent {
                    x.iter().map(|v| v / p).collect()
                } else {
                    Vector::zeros(d)
                };
                (out, Realization::Bernoulli { sent })
            }
            Node::RandK(k) => {
                let mut support = index::sample(rng, d, *k).into_vec();
                support.sort_unstable();
                (sparse_scaled(x, &support, d as f64 / *k as f64), Realization::Fixed)
            }
            Node::TopK(k) => (top_k(x, *k), Realization::Fixed),
            Node::Natural => (x.iter().map(|&t| natural_round(t, rng)).collect(), Realization::Fixed),
            Node::StdDithering(s) | Node::Qsgd(s) => (uniform_dither(x, *s, rng), Realization::Fixed),
            Node::NaturalDithering(s) => (natural_dither(x, *s, rng), Realization::Fixed),
            Node::TernGrad => (terngrad(x, rng), Realization::Fixed),
            Node::Compose(outer, inner) => {
                let (mid, inner_r) = inner.apply(x, rng);
                let (out, outer_r) = outer.apply(&mid, rng);
                (
                    out,
                    Realization::Compose {
                        outer: Box::new(outer_r),
                        inner: Box::new(inner_r),
                    },
                )
            }
            Node::Switch(p, a, b) => {
                let first = rng.random::<f64>() < *p;
                let (out, r) = if first { a.apply(x, rng) } else { b.apply(x, rng) };
                (
                    out,
                    Realization::Switch {
                        first,
                        branch: Box::new(r),
                    },
                )
            }
        }
    }

    /// Payload size of a message with the given realization.
    pub fn bit_cost(&self, realization: &Realization) -> u64 {
        let d = self.d as u64;
        let level_bits = |s: u32| 1 + ceil_log2(s as u64 + 1);
        match (&self.node, realization) {
            (_, Realization::Dense) => FLOAT_BITS * d,
            (Node::Bernoulli(_), Realization::Bernoulli { sent }) => {
                1 + if *sent { FLOAT_BITS * d } else { 0 }
            }
            (Node::Compose(outer, _), Realization::Compose { outer: r, .. }) => outer.bit_cost(r),
            (Node::Switch(_, a, b), Realization::Switch { first, branch }) => {
                1 + if *first { a.bit_cost(branch) } else { b.bit_cost(branch) }
            }
            (Node::Identity, _) => FLOAT_BITS * d,
            (Node::RandK(k), _) | (Node::TopK(k), _) => {
                let k = *k as u64;
                if k == d {
                    FLOAT_BITS * d
                } else {
                    k * (FLOAT_BITS + ceil_log2(d))
                }
            }
            (Node::Natural, _) => 9 * d,
            (Node::StdDithering(s), _) | (Node::NaturalDithering(s), _) | (Node::Qsgd(s), _) => {
                FLOAT_BITS + d * level_bits(*s)
            }
            (Node::TernGrad, _) => FLOAT_BITS + 2 * d,
            // Mismatched realization: charge the most expensive branch.
            (Node::Bernoulli(_), _) => 1 + FLOAT_BITS * d,
            (Node::Compose(outer, _), _) => outer.bit_cost(&Realization::Fixed),
            (Node::Switch(_, a, b), _) => {
                1 + a.bit_cost(&Realization::Fixed).max(b.bit_cost(&Realization::Fixed))
            }
        }
    }

    /// The exact output distribution as `(probability, value)` pairs, for
    /// compressors whose randomness is a finite choice of small size.
    pub fn distribution(&self, x: &[f64]) -> Result<Vec<(f64, Vector)>> {
        let not_enumerable = || CompressorError::NotEnumerable(self.spec.to_string());
        let d = self.d;
        match &self.node {
            Node::Identity => Ok(vec![(1.0, Vector::from(x.to_vec()))]),
            Node::TopK(k) => Ok(vec![(1.0, top_k(x, *k))]),
            Node::Bernoulli(p) => {
                let sent: Vector = x.iter().map(|v| v / p).collect();
                let mut out = vec![(*p, sent)];
                if *p < 1.0 {
                    out.push((1.0 - p, Vector::zeros(d)));
                }
                Ok(out)
            }
            Node::RandK(k) => {
                let supports = k_subsets(d, *k, MAX_ENUMERATED_OUTCOMES).ok_or_else(not_enumerable)?;
                let prob = 1.0 / supports.len() as f64;
                let scale = d as f64 / *k as f64;
                Ok(supports
                    .iter()
                    .map(|s| (prob, sparse_scaled(x, s, scale)))
                    .collect())
            }
            Node::Compose(outer, inner) => {
                let mut out = Vec::new();
                for (p_in, mid) in inner.distribution(x)? {
                    for (p_out, v) in outer.distribution(&mid)? {
                        out.push((p_in * p_out, v));
                    }
                    if out.len() > MAX_ENUMERATED_OUTCOMES {
                        return Err(not_enumerable());
                    }
                }
                Ok(out)
            }
            Node::Switch(p, a, b) => {
                let mut out: Vec<(f64, Vector)> = Vec::new();
                if *p > 0.0 {
                    out.extend(a.distribution(x)?.into_iter().map(|(q, v)| (p * q, v)));
                }
                if *p < 1.0 {
                    out.extend(b.distribution(x)?.into_iter().map(|(q, v)| ((1.0 - p) * q, v)));
                }
                Ok(out)
            }
            _ => Err(not_enumerable()),
        }
    }
}

fn ceil_log2(n: u64) -> u64 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros() as u64
    }
}

fn sparse_scaled(x: &[f64], support: &[usize], scale: f64) -> Vector {
    let mut out = Vector::zeros(x.len());
    for &i in support {
        out[i] = x[i] * scale;
    }
    out
}

/// Keeps the `k` largest-magnitude entries; ties go to the lower index.
fn top_k(x: &[f64], k: usize) -> Vector {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[b].abs().total_cmp(&x[a].abs()).then(a.cmp(&b)));
    let mut out = Vector::zeros(x.len());
    for &i in &order[..k] {
        out[i] = x[i];
    }
    out
}

/// Random rounding of `|t|` to one of the two neighbouring powers of two.
fn natural_round<R: Rng + ?Sized>(t: f64, rng: &mut R) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let mag = t.abs();
    let low = if mag.is_normal() {
        f64::from_bits(mag.to_bits() & 0x7ff0_0000_0000_0000)
    } else {
        2f64.powi(mag.log2().floor() as i32)
    };
    let up = rng.random::<f64>() < (mag - low) / low;
    let rounded = if up { 2.0 * low } else { low };
    rounded.copysign(t)
}

/// `s` uniformly spaced levels on `[0, ‖x‖₂]` with stochastic rounding.
fn uniform_dither<R: Rng + ?Sized>(x: &[f64], s: u32, rng: &mut R) -> Vector {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Vector::zeros(x.len());
    }
    let s_f = s as f64;
    x.iter()
        .map(|&v| {
            let r = (v.abs() / norm * s_f).min(s_f);
            let lower = r.floor();
            let level = if rng.random::<f64>() < r - lower { lower + 1.0 } else { lower };
            (norm * level / s_f).copysign(v)
        })
        .collect()
}

/// Levels `{0, 2^{1-s}, ..., 1/2, 1}` relative to `‖x‖₂`.
fn natural_dither<R: Rng + ?Sized>(x: &[f64], s: u32, rng: &mut R) -> Vector {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Vector::zeros(x.len());
    }
    let smallest = 0.5f64.powi(s as i32 - 1);
    x.iter()
        .map(|&v| {
            if v == 0.0 {
                return 0.0;
            }
            let r = (v.abs() / norm).min(1.0);
            let (lo, hi) = if r < smallest {
                (0.0, smallest)
            } else {
                let mut hi = 1.0;
                while r < hi / 2.0 {
                    hi /= 2.0;
                }
                (hi / 2.0, hi)
            };
            let level = if rng.random::<f64>() < (r - lo) / (hi - lo) { hi } else { lo };
            (norm * level).copysign(v)
        })
        .collect()
}

fn terngrad<R: Rng + ?Sized>(x: &[f64], rng: &mut R) -> Vector {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 {
        return Vector::zeros(x.len());
    }
    x.iter()
        .map(|&v| {
            if rng.random::<f64>() < v.abs() / m {
                m.copysign(v)
            } else {
                0.0
            }
        })
        .collect()
}

/// All `k`-subsets of `0..d` in lexicographic order, or `None` past `limit`.
fn k_subsets(d: usize, k: usize, limit: usize) -> Option<Vec<Vec<usize>>> {
    let mut count: u128 = 1;
    for i in 0..k {
        count = count * (d - i) as u128 / (i + 1) as u128;
        if count > limit as u128 {
            return None;
        }
    }
    let mut out = Vec::with_capacity(count as usize);
    let mut current: Vec<usize> = (0..k).collect();
    loop {
        out.push(current.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return Some(out);
            }
            i -= 1;
            if current[i] < d - k + i {
                break;
            }
        }
        current[i] += 1;
        for j in i + 1..k {
            current[j] = current[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trials {
    Exhaustive,
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnbiasednessReport {
    /// Largest `|E[C(x)]_j − x_j|` over probe points and coordinates.
    pub max_abs_dev: f64,
    /// Largest 4σ standard-error bound (zero in exhaustive mode).
    pub sigma_bound: f64,
    /// Largest deviation in units of its standard error.
    pub worst_z: f64,
    pub exhaustive: bool,
    pub within_bound: bool,
}

const PROBE_POINTS: usize = 5;
const CHUNK: usize = 4096;

/// Checks `E[C(x)] = x` at five random probe points, either exactly (finite
/// distributions) or by Monte-Carlo against a 4σ bound.
pub fn unbiasedness_certificate(
    compressor: &Compressor,
    trials: Trials,
    seed: u64,
) -> Result<UnbiasednessReport> {
    if !compressor.is_unbiased() {
        return Err(CompressorError::Biased(compressor.spec.to_string()));
    }
    let d = compressor.dim();
    let mut probe_rng = StreamKey::new(seed, Purpose::Certificate).slot(u64::MAX).rng();
    let points: Vec<Vec<f64>> = (0..PROBE_POINTS)
        .map(|_| (0..d).map(|_| probe_rng.random_range(-2.0..2.0)).collect())
        .collect();

    let mut report = UnbiasednessReport {
        max_abs_dev: 0.0,
        sigma_bound: 0.0,
        worst_z: 0.0,
        exhaustive: matches!(trials, Trials::Exhaustive),
        within_bound: true,
    };
    match trials {
        Trials::Exhaustive => {
            for x in &points {
                let mut mean = Vector::zeros(d);
                for (p, v) in compressor.distribution(x)? {
                    mean.axpy(p, &v);
                }
                for (m, xi) in mean.iter().zip(x) {
                    let dev = (m - xi).abs();
                    report.max_abs_dev = report.max_abs_dev.max(dev);
                    if dev > 1e-12 * (1.0 + xi.abs()) {
                        report.within_bound = false;
                    }
                }
            }
        }
        Trials::Sampled(n) => {
            if n < 2 {
                return Err(CompressorError::InvalidParameter("need at least 2 trials".into()));
            }
            for (pi, x) in points.iter().enumerate() {
                let chunks = n.div_ceil(CHUNK);
                let partials = exec::map_range(chunks, |c| {
                    let mut sum = vec![0.0; d];
                    let mut sum_sq = vec![0.0; d];
                    for t in c * CHUNK..((c + 1) * CHUNK).min(n) {
                        let mut rng = StreamKey::new(seed, Purpose::Certificate)
                            .round(pi)
                            .slot(t as u64)
                            .rng();
                        let (v, _) = compressor.apply(x, &mut rng);
                        for j in 0..d {
                            sum[j] += v[j];
                            sum_sq[j] += v[j] * v[j];
                        }
                    }
                    (sum, sum_sq)
                });
                let mut sum = vec![0.0; d];
                let mut sum_sq = vec![0.0; d];
                for (s, q) in partials {
                    for j in 0..d {
                        sum[j] += s[j];
                        sum_sq[j] += q[j];
                    }
                }
                let nf = n as f64;
                for j in 0..d {
                    let mean = sum[j] / nf;
                    let var = ((sum_sq[j] / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
                    let se = (var / nf).sqrt();
                    let dev = (mean - x[j]).abs();
                    report.max_abs_dev = report.max_abs_dev.max(dev);
                    report.sigma_bound = report.sigma_bound.max(4.0 * se);
                    let tiny = 1e-12 * (1.0 + x[j].abs());
                    if dev > tiny {
                        let z = if se > 0.0 { dev / se } else { f64::INFINITY };
                        report.worst_z = report.worst_z.max(z);
                        if z > 4.0 {
                            report.within_bound = false;
                        }
                    }
                }
            }
        }
    }
    Ok(report)
}
