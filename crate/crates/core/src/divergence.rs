//! f-divergences, the α-Rényi divergence and the matching D-entropies over
//! finite categorical distributions.
//!
//! Every f-divergence is evaluated through its generator,
//!
//! ```text
//! D_f(P || Q) = Σ_i q_i f(p_i / q_i)
//! ```
//!
//! with the continuous extensions `0 · f(0/0) = 0`, `q · f(0) ` for `p = 0`,
//! and `p · lim_{t→∞} f(t)/t` for `q = 0`. Generators whose slope at infinity
//! diverges (KL, χ², power) yield [`DivergenceError::Infinite`] in that case.
//!
//! | kind           | f(t)                                 | f(0)   |
//! |----------------|--------------------------------------|--------|
//! | KL             | t log t                              | 0      |
//! | TV             | ½ \|t − 1\|                          | ½      |
//! | χ²             | (1 − t)²                             | 1      |
//! | Power(p)       | t^p − 1                              | −1     |
//! | Jensen-Shannon | t log(2t/(1+t)) + log(2/(1+t))       | log 2  |
//! | Le Cam         | (1 − t)² / (2(1 + t))                | ½      |

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use std::fmt;
use thiserror::Error;

/// Tolerance on the total mass of a [`Categorical`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// Floor applied before `ln` inside the generic generator path.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("distribution needs at least 2 outcomes, got {0}")]
    TooFewOutcomes(usize),
    #[error("probability {value} at index {index} is negative or not finite")]
    InvalidProbability { index: usize, value: f64 },
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("power divergence requires p > 1, got {0}")]
    InvalidPower(f64),
    #[error("Rényi divergence requires alpha >= 0 and alpha != 1, got {0}")]
    InvalidAlpha(f64),
    #[error("{0} has no generator function")]
    NoGenerator(DivergenceSpec),
    #[error("generator argument must be >= 0, got {0}")]
    NegativeArgument(f64),
    #[error("{transform:?} is not a metric transform for {spec}")]
    IncompatibleTransform {
        transform: MetricTransform,
        spec: DivergenceSpec,
    },
    #[error("divergence is infinite")]
    Infinite,
    #[error("unknown divergence `{0}`; expected kl, tv, chi-squared, power:<p>, js, le-cam or renyi:<alpha>")]
    UnknownName(String),
}

pub type Result<T> = std::result::Result<T, DivergenceError>;

/// A probability vector over `k >= 2` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical(Vec<f64>);

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(DivergenceError::TooFewOutcomes(probs.len()));
        }
        for (index, &value) in probs.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(DivergenceError::InvalidProbability { index, value });
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(DivergenceError::NotNormalized(total));
        }
        Ok(Self(probs))
    }

    /// Builds a distribution without validation. Callers guarantee the invariants
    /// (used on softmax outputs and averages of valid distributions).
    pub(crate) fn from_vec_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!(probs.len() >= 2);
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        Self(probs)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(DivergenceError::TooFewOutcomes(k));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    /// The point mass on `class`.
    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if k < 2 {
            return Err(DivergenceError::TooFewOutcomes(k));
        }
        if class >= k {
            return Err(DivergenceError::DimensionMismatch(class, k));
        }
        let mut probs = vec![0.0; k];
        probs[class] = 1.0;
        Ok(Self(probs))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }

    /// Index and value of the largest probability (first index on ties).
    pub fn argmax(&self) -> (usize, f64) {
        self.0
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| if p > best.1 { (i, p) } else { best })
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = DivergenceError;
    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.0
    }
}

/// Selects a divergence family.
///
/// `Power` and `Renyi` carry a parameter; use [`DivergenceSpec::power`] and
/// [`DivergenceSpec::renyi`] (or [`DivergenceSpec::validate`]) to enforce its range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DivergenceSpec {
    Kl,
    Tv,
    ChiSquared,
    Power { p: f64 },
    #[serde(alias = "js")]
    JensenShannon,
    #[serde(alias = "lecam")]
    LeCam,
    Renyi { alpha: f64 },
}

impl DivergenceSpec {
    pub fn power(p: f64) -> Result<Self> {
        let spec = Self::Power { p };
        spec.validate()?;
        Ok(spec)
    }

    pub fn renyi(alpha: f64) -> Result<Self> {
        let spec = Self::Renyi { alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Power { p } if !(p.is_finite() && p > 1.0) => Err(DivergenceError::InvalidPower(p)),
            Self::Renyi { alpha } if !(alpha.is_finite() && alpha >= 0.0 && alpha != 1.0) => {
                Err(DivergenceError::InvalidAlpha(alpha))
            }
            _ => Ok(()),
        }
    }

    pub fn is_renyi(&self) -> bool {
        matches!(self, Self::Renyi { .. })
    }

    /// Position in the canonical reporting order (KL, TV, χ², Power, JS, LC, Rényi).
    pub fn order(&self) -> usize {
        match self {
            Self::Kl => 0,
            Self::Tv => 1,
            Self::ChiSquared => 2,
            Self::Power { .. } => 3,
            Self::JensenShannon => 4,
            Self::LeCam => 5,
            Self::Renyi { .. } => 6,
        }
    }

    /// The generator of an f-divergence kind, `None` for Rényi.
    pub fn generator(&self) -> Option<StandardGenerator> {
        if self.is_renyi() {
            None
        } else {
            Some(StandardGenerator(*self))
        }
    }

    /// Whether predictions with a zero entry under a positive target make the
    /// risk infinite.
    pub fn requires_positive_predictions(&self) -> bool {
        match *self {
            Self::Kl | Self::ChiSquared | Self::Power { .. } => true,
            Self::Renyi { alpha } => alpha > 1.0,
            Self::Tv | Self::JensenShannon | Self::LeCam => false,
        }
    }
}

impl fmt::Display for DivergenceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Kl => write!(f, "KL"),
            Self::Tv => write!(f, "TV"),
            Self::ChiSquared => write!(f, "ChiSquared"),
            Self::Power { p } => write!(f, "Power(p={p})"),
            Self::JensenShannon => write!(f, "JS"),
            Self::LeCam => write!(f, "LeCam"),
            Self::Renyi { alpha } => write!(f, "Renyi(alpha={alpha})"),
        }
    }
}

/// Parses `kl`, `tv`, `chi-squared`, `power:<p>`, `js`, `le-cam` and `renyi:<alpha>`.
impl std::str::FromStr for DivergenceSpec {
    type Err = DivergenceError;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || DivergenceError::UnknownName(s.to_string());
        let lower = s.trim().to_ascii_lowercase();
        let (name, param) = match lower.split_once(':') {
            Some((n, p)) => (n, Some(p.trim().parse::<f64>().map_err(|_| unknown())?)),
            None => (lower.as_str(), None),
        };
        let spec = match (name, param) {
            ("kl", None) => Self::Kl,
            ("tv", None) => Self::Tv,
            ("chi-squared" | "chi2", None) => Self::ChiSquared,
            ("js" | "jensen-shannon", None) => Self::JensenShannon,
            ("le-cam" | "lecam", None) => Self::LeCam,
            ("power", Some(p)) => Self::Power { p },
            ("renyi", Some(alpha)) => Self::Renyi { alpha },
            _ => return Err(unknown()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A convex generator `f` with `f(1) = 0`.
pub trait Generator {
    /// `f(t)` for `t > 0`.
    fn value(&self, t: f64) -> f64;
    /// Right limit `f(0+)`; may be `+∞`.
    fn at_zero(&self) -> f64;
    /// `lim_{t→∞} f(t)/t`, or `None` when it diverges.
    fn slope_at_infinity(&self) -> Option<f64>;
    /// `f'(t)` for `t > 0`, choosing 0 as the subgradient at kinks.
    fn derivative(&self, t: f64) -> f64;
}

/// Generator of one of the built-in f-divergence kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardGenerator(DivergenceSpec);

impl Generator for StandardGenerator {
    fn value(&self, t: f64) -> f64 {
        if t == 1.0 {
            return 0.0;
        }
        match self.0 {
            DivergenceSpec::Kl => t * t.max(LOG_FLOOR).ln(),
            DivergenceSpec::Tv => 0.5 * (t - 1.0).abs(),
            DivergenceSpec::ChiSquared => (1.0 - t).powi(2),
            DivergenceSpec::Power { p } => t.powf(p) - 1.0,
            DivergenceSpec::JensenShannon => {
                t * (2.0 * t / (1.0 + t)).max(LOG_FLOOR).ln() + (2.0 / (1.0 + t)).ln()
            }
            DivergenceSpec::LeCam => (1.0 - t).powi(2) / (2.0 * (1.0 + t)),
            DivergenceSpec::Renyi { .. } => unreachable!("Rényi has no generator"),
        }
    }

    fn at_zero(&self) -> f64 {
        match self.0 {
            DivergenceSpec::Kl => 0.0,
            DivergenceSpec::Tv => 0.5,
            DivergenceSpec::ChiSquared => 1.0,
            DivergenceSpec::Power { .. } => -1.0,
            DivergenceSpec::JensenShannon => LN_2,
            DivergenceSpec::LeCam => 0.5,
            DivergenceSpec::Renyi { .. } => unreachable!("Rényi has no generator"),
        }
    }

    fn slope_at_infinity(&self) -> Option<f64> {
        match self.0 {
            DivergenceSpec::Tv | DivergenceSpec::LeCam => Some(0.5),
            DivergenceSpec::JensenShannon => Some(LN_2),
            _ => None,
        }
    }

    fn derivative(&self, t: f64) -> f64 {
        match self.0 {
            DivergenceSpec::Kl => t.max(LOG_FLOOR).ln() + 1.0,
            DivergenceSpec::Tv => {
                if t > 1.0 {
                    0.5
                } else if t < 1.0 {
                    -0.5
                } else {
                    0.0
                }
            }
            DivergenceSpec::ChiSquared => 2.0 * (t - 1.0),
            DivergenceSpec::Power { p } => p * t.powf(p - 1.0),
            DivergenceSpec::JensenShannon => (2.0 * t / (1.0 + t)).max(LOG_FLOOR).ln(),
            DivergenceSpec::LeCam => -(1.0 - t) * (3.0 + t) / (2.0 * (1.0 + t).powi(2)),
            DivergenceSpec::Renyi { .. } => unreachable!("Rényi has no generator"),
        }
    }
}

/// `f(t)` with `f(0)` taken as the right limit.
pub fn generator_value(spec: DivergenceSpec, t: f64) -> Result<f64> {
    spec.validate()?;
    let generator = spec.generator().ok_or(DivergenceError::NoGenerator(spec))?;
    if t.is_nan() || t < 0.0 {
        return Err(DivergenceError::NegativeArgument(t));
    }
    Ok(if t == 0.0 { generator.at_zero() } else { generator.value(t) })
}

/// One summand `q f(p/q)` of an f-divergence with the boundary conventions.
pub(crate) fn generator_term<G: Generator + ?Sized>(generator: &G, p: f64, q: f64) -> f64 {
    if q > 0.0 {
        if p > 0.0 {
            q * generator.value(p / q)
        } else {
            q * generator.at_zero()
        }
    } else if p > 0.0 {
        match generator.slope_at_infinity() {
            Some(slope) => p * slope,
            None => f64::INFINITY,
        }
    } else {
        0.0
    }
}

/// `Σ q_i f(p_i/q_i)` for any generator on raw probability slices.
pub fn f_divergence_with<G: Generator + ?Sized>(generator: &G, p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(DivergenceError::DimensionMismatch(p.len(), q.len()));
    }
    let total: f64 = p.iter().zip(q).map(|(&pi, &qi)| generator_term(generator, pi, qi)).sum();
    finite_or_infinite(total)
}

pub fn f_divergence(spec: DivergenceSpec, p: &Categorical, q: &Categorical) -> Result<f64> {
    spec.validate()?;
    let generator = spec.generator().ok_or(DivergenceError::NoGenerator(spec))?;
    f_divergence_with(&generator, p.probs(), q.probs())
}

/// `log Σ_i p_i^α q_i^{1−α}` over raw (possibly unnormalized) mass vectors,
/// evaluated with a log-sum-exp. Returns `-∞` when every term vanishes and
/// `+∞` when a term is unbounded (`α > 1`, `q_i = 0 < p_i`).
pub(crate) fn renyi_log_moment(alpha: f64, p: &[f64], q: &[f64]) -> f64 {
    let mut logs = Vec::with_capacity(p.len());
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            // 0^α q^{1-α} = 0 for α > 0; for α = 0 the term restricts to supp(p)
            continue;
        }
        if qi <= 0.0 {
            if alpha > 1.0 {
                return f64::INFINITY;
            }
            if alpha < 1.0 {
                continue;
            }
        }
        logs.push(alpha * pi.ln() + (1.0 - alpha) * qi.ln());
    }
    log_sum_exp(&logs)
}

pub(crate) fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logs.iter().map(|&l| (l - max).exp()).sum::<f64>().ln()
}

pub fn renyi_divergence(alpha: f64, p: &Categorical, q: &Categorical) -> Result<f64> {
    DivergenceSpec::renyi(alpha)?;
    if p.k() != q.k() {
        return Err(DivergenceError::DimensionMismatch(p.k(), q.k()));
    }
    let value = renyi_log_moment(alpha, p.probs(), q.probs()) / (alpha - 1.0);
    // rounding can leave a tiny negative value for near-identical inputs
    finite_or_infinite(value.max(0.0))
}

/// `D(p || q)` for any spec.
pub fn divergence(spec: DivergenceSpec, p: &Categorical, q: &Categorical) -> Result<f64> {
    match spec {
        DivergenceSpec::Renyi { alpha } => renyi_divergence(alpha, p, q),
        _ => f_divergence(spec, p, q),
    }
}

/// `H_D(p) = −D(p || Unif(k))`.
pub fn d_entropy(spec: DivergenceSpec, p: &Categorical) -> Result<f64> {
    let uniform = Categorical::uniform(p.k())?;
    Ok(-divergence(spec, p, &uniform)?)
}

/// Increasing map `G` turning a divergence into a metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricTransform {
    Identity,
    Sqrt,
}

impl MetricTransform {
    pub fn apply(&self, d: f64) -> Result<f64> {
        if d.is_nan() || d < 0.0 {
            return Err(DivergenceError::NegativeArgument(d));
        }
        Ok(match self {
            Self::Identity => d,
            Self::Sqrt => d.sqrt(),
        })
    }

    /// Whether `G(D)` is a metric for `spec`.
    pub fn pairs_with(&self, spec: DivergenceSpec) -> bool {
        matches!(
            (self, spec),
            (Self::Identity, DivergenceSpec::Tv)
                | (Self::Sqrt, DivergenceSpec::JensenShannon)
                | (Self::Sqrt, DivergenceSpec::LeCam)
        )
    }

    /// Returns an error unless the pairing is one of the known metrics.
    pub fn check_pairing(&self, spec: DivergenceSpec) -> Result<()> {
        if self.pairs_with(spec) {
            Ok(())
        } else {
            Err(DivergenceError::IncompatibleTransform { transform: *self, spec })
        }
    }
}

pub fn apply_metric_transform(g: MetricTransform, d: f64) -> Result<f64> {
    g.apply(d)
}

pub(crate) fn finite_or_infinite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DivergenceError::Infinite)
    }
}
