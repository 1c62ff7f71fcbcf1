//! Divergence-based empirical risks (DERs).
//!
//! A batch of rows defines two joint distributions over (row, class): the
//! targets weighted by `w_s` and the model predictions weighted by the same
//! `w_s`. The DER is the divergence between them. For f-divergences this
//! decomposes into `Σ_s w_s D_f(target_s || prediction_s)`; the Rényi DER is
//! `1/(α−1) · log Σ_s w_s Σ_i t_si^α q_si^{1−α}` and does not decompose.

use crate::divergence::{
    self, finite_or_infinite, generator_term, log_sum_exp, renyi_log_moment, Categorical, DivergenceError,
    DivergenceSpec, Generator, StandardGenerator, MASS_TOLERANCE,
};
use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error("{spec} risk is infinite at row {row}")]
    Infinite { spec: DivergenceSpec, row: usize },
    #[error("batch is empty")]
    Empty,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch { what: &'static str, got: usize, expected: usize },
    #[error("row weights must be finite, non-negative and sum to 1 (sum = {0})")]
    BadWeights(f64),
    #[error("supervised risk requires uniform weights")]
    NonUniformWeights,
    #[error("row {0} has a soft target where a hard label is required")]
    SoftTarget(usize),
    #[error("row {row}: class {class} out of range for k = {k}")]
    ClassOutOfRange { row: usize, class: usize, k: usize },
    #[error("beta must lie in [0, 1], got {0}")]
    InvalidBeta(f64),
    #[error("regularization weights must be finite and non-negative (lambda_h = {0}, lambda_u = {1})")]
    InvalidRegularization(f64, f64),
    #[error("logit at row {row}, column {col} is not finite")]
    NonFiniteLogit { row: usize, col: usize },
}

pub type Result<T> = std::result::Result<T, RiskError>;

/// Target distribution of one row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelAssignment {
    Hard(usize),
    Soft(Categorical),
}

impl LabelAssignment {
    /// Target mass on `class`.
    pub fn prob(&self, class: usize) -> f64 {
        match self {
            Self::Hard(c) => (*c == class) as u8 as f64,
            Self::Soft(dist) => dist.probs()[class],
        }
    }

    pub fn hard(&self) -> Option<usize> {
        match self {
            Self::Hard(c) => Some(*c),
            Self::Soft(_) => None,
        }
    }

    pub fn to_categorical(&self, k: usize) -> std::result::Result<Categorical, DivergenceError> {
        match self {
            Self::Hard(c) => Categorical::one_hot(k, *c),
            Self::Soft(dist) => Ok(dist.clone()),
        }
    }

    fn check(&self, row: usize, k: usize) -> Result<()> {
        match self {
            Self::Hard(c) if *c >= k => Err(RiskError::ClassOutOfRange { row, class: *c, k }),
            Self::Soft(dist) if dist.k() != k => Err(RiskError::LengthMismatch {
                what: "soft target",
                got: dist.k(),
                expected: k,
            }),
            _ => Ok(()),
        }
    }
}

/// Predictions and targets of a set of rows, before weighting.
#[derive(Debug, Clone, Copy)]
pub struct Rows<'a> {
    pub predictions: &'a [Categorical],
    pub targets: &'a [LabelAssignment],
}

impl<'a> Rows<'a> {
    pub fn new(predictions: &'a [Categorical], targets: &'a [LabelAssignment]) -> Result<Self> {
        if predictions.len() != targets.len() {
            return Err(RiskError::LengthMismatch {
                what: "targets",
                got: targets.len(),
                expected: predictions.len(),
            });
        }
        Ok(Self { predictions, targets })
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Rows with joint-distribution weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    predictions: Vec<Categorical>,
    targets: Vec<LabelAssignment>,
    weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn new(predictions: Vec<Categorical>, targets: Vec<LabelAssignment>, weights: Vec<f64>) -> Result<Self> {
        let n = predictions.len();
        if n == 0 {
            return Err(RiskError::Empty);
        }
        for (what, got) in [("targets", targets.len()), ("weights", weights.len())] {
            if got != n {
                return Err(RiskError::LengthMismatch { what, got, expected: n });
            }
        }
        let k = predictions[0].k();
        for (row, (pred, target)) in predictions.iter().zip(&targets).enumerate() {
            if pred.k() != k {
                return Err(RiskError::LengthMismatch { what: "prediction", got: pred.k(), expected: k });
            }
            target.check(row, k)?;
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(RiskError::BadWeights(total));
        }
        Ok(Self { predictions, targets, weights })
    }

    /// Empirical joint with weight `1/n` per row.
    pub fn uniform(predictions: Vec<Categorical>, targets: Vec<LabelAssignment>) -> Result<Self> {
        let n = predictions.len().max(1);
        let weights = vec![1.0 / n as f64; predictions.len()];
        Self::new(predictions, targets, weights)
    }

    /// The β-mixture joint: `β/n` on labeled rows, `(1−β)/m` on pseudo rows.
    /// With no pseudo rows the mixture falls back to `β = 1`.
    pub fn mixture(labeled: Rows<'_>, pseudo: Rows<'_>, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(RiskError::InvalidBeta(beta));
        }
        let beta = if pseudo.is_empty() { 1.0 } else { beta };
        let (n, m) = (labeled.len(), pseudo.len());
        if n == 0 && beta > 0.0 {
            return Err(RiskError::Empty);
        }
        let mut weights = Vec::with_capacity(n + m);
        weights.extend(std::iter::repeat_n(if n > 0 { beta / n as f64 } else { 0.0 }, n));
        weights.extend(std::iter::repeat_n(if m > 0 { (1.0 - beta) / m as f64 } else { 0.0 }, m));
        let predictions = labeled.predictions.iter().chain(pseudo.predictions).cloned().collect();
        let targets = labeled.targets.iter().chain(pseudo.targets).cloned().collect();
        Self::new(predictions, targets, weights)
    }

    pub fn predictions(&self) -> &[Categorical] {
        &self.predictions
    }

    pub fn targets(&self) -> &[LabelAssignment] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn k(&self) -> usize {
        self.predictions[0].k()
    }

    fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| (x - w).abs() <= 1e-12)
    }
}

/// `D_f(target || prediction)` for one row through the generator.
fn row_f_divergence(generator: &StandardGenerator, target: &LabelAssignment, q: &[f64]) -> f64 {
    q.iter().enumerate().map(|(i, &qi)| generator_term(generator, target.prob(i), qi)).sum()
}

/// `log Σ_i t_i^α q_i^{1−α}` for one row.
fn row_renyi_log_moment(alpha: f64, target: &LabelAssignment, q: &[f64]) -> f64 {
    match target {
        LabelAssignment::Hard(c) => {
            if q[*c] > 0.0 {
                (1.0 - alpha) * q[*c].ln()
            } else if alpha < 1.0 {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            }
        }
        LabelAssignment::Soft(dist) => renyi_log_moment(alpha, dist.probs(), q),
    }
}

/// Divergence between the target joint and the prediction joint of `batch`.
pub fn joint_divergence(spec: DivergenceSpec, batch: &WeightedBatch) -> Result<f64> {
    spec.validate()?;
    let rows = batch
        .predictions
        .iter()
        .zip(&batch.targets)
        .zip(&batch.weights)
        .map(|((p, t), &w)| (t, p.probs(), w));
    joint_divergence_rows(spec, rows)
}

fn joint_divergence_rows<'a>(
    spec: DivergenceSpec,
    rows: impl Iterator<Item = (&'a LabelAssignment, &'a [f64], f64)>,
) -> Result<f64> {
    match spec {
        DivergenceSpec::Renyi { alpha } => {
            let mut logs = Vec::new();
            for (row, (target, q, w)) in rows.enumerate() {
                if w == 0.0 {
                    continue;
                }
                let log_moment = row_renyi_log_moment(alpha, target, q);
                if log_moment == f64::INFINITY {
                    return Err(RiskError::Infinite { spec, row });
                }
                logs.push(w.ln() + log_moment);
            }
            if logs.is_empty() {
                return Ok(0.0);
            }
            let value = log_sum_exp(&logs) / (alpha - 1.0);
            finite_or_infinite(value.max(0.0)).map_err(|_| RiskError::Infinite { spec, row: 0 })
        }
        _ => {
            let generator = spec.generator().expect("f-divergence kind");
            let mut total = 0.0;
            for (row, (target, q, w)) in rows.enumerate() {
                if w == 0.0 {
                    continue;
                }
                let d = row_f_divergence(&generator, target, q);
                if !d.is_finite() {
                    return Err(RiskError::Infinite { spec, row });
                }
                total += w * d;
            }
            Ok(total)
        }
    }
}

/// Supervised DER over hard-labeled rows with uniform weights.
pub fn der_sl(spec: DivergenceSpec, batch: &WeightedBatch) -> Result<f64> {
    if let Some(row) = batch.targets.iter().position(|t| t.hard().is_none()) {
        return Err(RiskError::SoftTarget(row));
    }
    if !batch.is_uniform() {
        return Err(RiskError::NonUniformWeights);
    }
    joint_divergence(spec, batch)
}

/// Semi-supervised DER over the β-mixture of labeled and pseudo-labeled rows.
pub fn der_ssl(spec: DivergenceSpec, labeled: Rows<'_>, pseudo: Rows<'_>, beta: f64) -> Result<f64> {
    if let Some(row) = labeled.targets.iter().position(|t| t.hard().is_none()) {
        return Err(RiskError::SoftTarget(row));
    }
    joint_divergence(spec, &WeightedBatch::mixture(labeled, pseudo, beta)?)
}

/// Per-sample hard-label DER term `D(δ_y || P_θ(·|x))` as a function of the
/// probability `p_true` assigned to the true class.
pub fn hard_label_term(spec: DivergenceSpec, p_true: f64) -> f64 {
    let p = p_true;
    match spec {
        DivergenceSpec::Kl => -p.ln(),
        DivergenceSpec::Tv => 1.0 - p,
        DivergenceSpec::ChiSquared => 1.0 / p - 1.0,
        DivergenceSpec::Power { p: power } => p.powf(1.0 - power) - 1.0,
        DivergenceSpec::JensenShannon => 2.0 * LN_2 + p * p.ln() - (1.0 + p) * (1.0 + p).ln(),
        DivergenceSpec::LeCam => (1.0 - p) / (1.0 + p),
        DivergenceSpec::Renyi { alpha } => p.powf(1.0 - alpha).ln() / (alpha - 1.0),
    }
}

/// Closed-form supervised DER from the true-class probabilities `p_true`.
///
/// `P log P` is taken as 0 at `P = 0` for Jensen-Shannon.
pub fn der_sl_closed_form(spec: DivergenceSpec, p_true: &[f64]) -> Result<f64> {
    spec.validate()?;
    if p_true.is_empty() {
        return Err(RiskError::Empty);
    }
    let n = p_true.len() as f64;
    let value = match spec {
        DivergenceSpec::Renyi { alpha } => {
            let mean = p_true.iter().map(|p| p.powf(1.0 - alpha)).sum::<f64>() / n;
            (mean.ln() / (alpha - 1.0)).max(0.0)
        }
        DivergenceSpec::JensenShannon => {
            p_true
                .iter()
                .map(|&p| {
                    let plogp = if p > 0.0 { p * p.ln() } else { 0.0 };
                    2.0 * LN_2 + plogp - (1.0 + p) * (1.0 + p).ln()
                })
                .sum::<f64>()
                / n
        }
        _ => p_true.iter().map(|&p| hard_label_term(spec, p)).sum::<f64>() / n,
    };
    if value.is_finite() {
        Ok(value)
    } else {
        let row = p_true.iter().position(|&p| p <= 0.0).unwrap_or(0);
        Err(RiskError::Infinite { spec, row })
    }
}

/// Coordinate-wise average of a collection of predictions.
pub fn mean_prediction(predictions: &[Categorical]) -> Result<Categorical> {
    let first = predictions.first().ok_or(RiskError::Empty)?;
    let k = first.k();
    let mut mean = vec![0.0; k];
    for pred in predictions {
        if pred.k() != k {
            return Err(RiskError::LengthMismatch { what: "prediction", got: pred.k(), expected: k });
        }
        for (m, p) in mean.iter_mut().zip(pred.probs()) {
            *m += p;
        }
    }
    let m = predictions.len() as f64;
    mean.iter_mut().for_each(|x| *x /= m);
    Ok(Categorical::from_vec_unchecked(mean))
}

/// Weights `λ_h` (D-entropy) and `λ_u` (mean prediction vs uniform).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationWeights {
    pub lambda_h: f64,
    pub lambda_u: f64,
}

impl RegularizationWeights {
    pub fn new(lambda_h: f64, lambda_u: f64) -> Result<Self> {
        let w = Self { lambda_h, lambda_u };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if ok(self.lambda_h) && ok(self.lambda_u) {
            Ok(())
        } else {
            Err(RiskError::InvalidRegularization(self.lambda_h, self.lambda_u))
        }
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_h == 0.0 && self.lambda_u == 0.0
    }
}

/// Mean per-sample D-entropy of a set of predictions.
pub fn mean_d_entropy(spec: DivergenceSpec, predictions: &[Categorical]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(RiskError::Empty);
    }
    let mut total = 0.0;
    for pred in predictions {
        total += divergence::d_entropy(spec, pred)?;
    }
    Ok(total / predictions.len() as f64)
}

/// The full objective: a DER under `risk_spec` plus `λ_h` times the mean
/// D-entropy and `λ_u` times `D(P̄ || Unif)`, both under `regularizer_spec`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub risk_spec: DivergenceSpec,
    pub regularizer_spec: DivergenceSpec,
    pub reg: RegularizationWeights,
}

impl Objective {
    /// Same divergence for the risk and the regularizers.
    pub fn new(spec: DivergenceSpec, reg: RegularizationWeights) -> Self {
        Self { risk_spec: spec, regularizer_spec: spec, reg }
    }

    pub fn validate(&self) -> Result<()> {
        self.risk_spec.validate()?;
        self.regularizer_spec.validate()?;
        self.reg.validate()
    }

    /// Regularizer terms `λ_h · mean H_D + λ_u · D(P̄ || Unif)`.
    pub fn regularizer(&self, unlabeled: &[Categorical]) -> Result<f64> {
        if self.reg.is_zero() || unlabeled.is_empty() {
            return Ok(0.0);
        }
        let spec = self.regularizer_spec;
        let mut value = 0.0;
        if self.reg.lambda_h != 0.0 {
            value += self.reg.lambda_h * mean_d_entropy(spec, unlabeled)?;
        }
        if self.reg.lambda_u != 0.0 {
            let mean = mean_prediction(unlabeled)?;
            value += self.reg.lambda_u * divergence::divergence(spec, &mean, &Categorical::uniform(mean.k())?)?;
        }
        Ok(value)
    }

    /// Objective value and its gradient with respect to the logits.
    ///
    /// Row `s` contributes `weights[s]` of its target to the DER (rows with
    /// weight 0 or no target are skipped) and enters the regularizers when
    /// `regularized[s]` holds. DER weights are used as given.
    pub fn value_and_gradient(
        &self,
        logits: ArrayView2<'_, f64>,
        targets: &[Option<&LabelAssignment>],
        weights: &[f64],
        regularized: &[bool],
    ) -> Result<(f64, Array2<f64>)> {
        let (rows, k) = logits.dim();
        for (what, got) in [("targets", targets.len()), ("weights", weights.len()), ("regularized", regularized.len())] {
            if got != rows {
                return Err(RiskError::LengthMismatch { what, got, expected: rows });
            }
        }
        if let Some(((row, col), _)) = logits.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(RiskError::NonFiniteLogit { row, col });
        }
        for (row, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                t.check(row, k)?;
            }
        }
        let probs = softmax_rows(logits);
        let mut grad_q = Array2::<f64>::zeros((rows, k));
        let risk = self.der_part(&probs, targets, weights, &mut grad_q)?;
        let reg = self.regularizer_part(&probs, regularized, &mut grad_q)?;
        Ok((risk + reg, softmax_backward(&probs, &grad_q)))
    }

    fn der_part(
        &self,
        probs: &Array2<f64>,
        targets: &[Option<&LabelAssignment>],
        weights: &[f64],
        grad_q: &mut Array2<f64>,
    ) -> Result<f64> {
        let spec = self.risk_spec;
        let active = || {
            targets
                .iter()
                .zip(weights)
                .enumerate()
                .filter_map(|(s, (t, &w))| t.filter(|_| w > 0.0).map(|t| (s, t, w)))
        };
        let value = joint_divergence_rows(spec, active().map(|(s, t, w)| (t, probs.row(s).to_slice().unwrap(), w)))
            .map_err(|e| match e {
                RiskError::Infinite { spec, row } => {
                    RiskError::Infinite { spec, row: active().nth(row).map_or(row, |a| a.0) }
                }
                other => other,
            })?;
        match spec {
            DivergenceSpec::Renyi { alpha } => {
                let log_s: f64 = log_sum_exp(
                    &active()
                        .map(|(s, t, w)| w.ln() + row_renyi_log_moment(alpha, t, probs.row(s).to_slice().unwrap()))
                        .collect::<Vec<_>>(),
                );
                for (s, t, w) in active() {
                    for i in 0..probs.ncols() {
                        let ti = t.prob(i);
                        if ti > 0.0 {
                            let qi = probs[[s, i]];
                            grad_q[[s, i]] -= w * (alpha * (ti.ln() - qi.ln()) - log_s).exp();
                        }
                    }
                }
            }
            _ => {
                let generator = spec.generator().expect("f-divergence kind");
                for (s, t, w) in active() {
                    for i in 0..probs.ncols() {
                        let ti = t.prob(i);
                        let qi = probs[[s, i]];
                        let d = if ti > 0.0 {
                            let r = ti / qi;
                            generator.value(r) - r * generator.derivative(r)
                        } else {
                            generator.at_zero()
                        };
                        grad_q[[s, i]] += w * d;
                    }
                }
            }
        }
        Ok(value)
    }

    fn regularizer_part(&self, probs: &Array2<f64>, regularized: &[bool], grad_q: &mut Array2<f64>) -> Result<f64> {
        let members: Vec<usize> = (0..probs.nrows()).filter(|&s| regularized[s]).collect();
        if self.reg.is_zero() || members.is_empty() {
            return Ok(0.0);
        }
        let k = probs.ncols();
        let m = members.len() as f64;
        let spec = self.regularizer_spec;
        let uniform = vec![1.0 / k as f64; k];
        let mut value = 0.0;
        if self.reg.lambda_h != 0.0 {
            let lambda = self.reg.lambda_h;
            let mut total = 0.0;
            for &s in &members {
                let q = probs.row(s);
                total -= divergence_to_uniform(spec, q, &uniform)?;
                let d = divergence_to_uniform_gradient(spec, q);
                for i in 0..k {
                    grad_q[[s, i]] -= lambda / m * d[i];
                }
            }
            value += lambda * total / m;
        }
        if self.reg.lambda_u != 0.0 {
            let lambda = self.reg.lambda_u;
            let mut mean = vec![0.0; k];
            for &s in &members {
                for (acc, q) in mean.iter_mut().zip(probs.row(s)) {
                    *acc += q;
                }
            }
            mean.iter_mut().for_each(|x| *x /= m);
            let mean = ndarray::Array1::from(mean);
            value += lambda * divergence_to_uniform(spec, mean.view(), &uniform)?;
            let d = divergence_to_uniform_gradient(spec, mean.view());
            for &s in &members {
                for i in 0..k {
                    grad_q[[s, i]] += lambda / m * d[i];
                }
            }
        }
        Ok(value)
    }
}

fn divergence_to_uniform(spec: DivergenceSpec, q: ArrayView1<'_, f64>, uniform: &[f64]) -> Result<f64> {
    let q = q.to_vec();
    let value = match spec {
        DivergenceSpec::Renyi { alpha } => (renyi_log_moment(alpha, &q, uniform) / (alpha - 1.0)).max(0.0),
        _ => divergence::f_divergence_with(&spec.generator().expect("f-divergence kind"), &q, uniform)?,
    };
    Ok(finite_or_infinite(value)?)
}

/// `∂ D(q || Unif) / ∂ q_i` for strictly positive `q`.
fn divergence_to_uniform_gradient(spec: DivergenceSpec, q: ArrayView1<'_, f64>) -> Vec<f64> {
    let k = q.len() as f64;
    match spec {
        DivergenceSpec::Renyi { alpha } => {
            let logs: Vec<f64> = q.iter().map(|x| alpha * x.ln()).collect();
            let log_sum = log_sum_exp(&logs);
            q.iter()
                .map(|&x| alpha / (alpha - 1.0) * ((alpha - 1.0) * x.ln() - log_sum).exp())
                .collect()
        }
        _ => {
            let generator = spec.generator().expect("f-divergence kind");
            q.iter().map(|&x| generator.derivative(k * x)).collect()
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(probs: &Array2<f64>, grad_q: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((q, g), mut o) in probs.outer_iter().zip(grad_q.outer_iter()).zip(out.outer_iter_mut()) {
        let dot: f64 = q.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &qi), &gi) in o.iter_mut().zip(q).zip(g) {
            *o = qi * (gi - dot);
        }
    }
    out
}

/// Regularized risk: supervised DER plus both regularizers under one spec.
pub fn regularized_risk(
    spec: DivergenceSpec,
    labeled: &WeightedBatch,
    unlabeled_predictions: &[Categorical],
    reg: RegularizationWeights,
) -> Result<f64> {
    let objective = Objective::new(spec, reg);
    objective.validate()?;
    Ok(der_sl(spec, labeled)? + objective.regularizer(unlabeled_predictions)?)
}

/// Gradient of the full objective (DER plus both regularizers) with respect
/// to per-row logits. Every row with a target enters the DER with its weight;
/// rows flagged in `regularized` enter the regularizers.
pub fn der_gradient(
    spec: DivergenceSpec,
    logits: ArrayView2<'_, f64>,
    targets: &[Option<&LabelAssignment>],
    weights: &[f64],
    regularized: &[bool],
    reg: RegularizationWeights,
) -> Result<Array2<f64>> {
    let objective = Objective::new(spec, reg);
    objective.validate()?;
    Ok(objective.value_and_gradient(logits, targets, weights, regularized)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn cat(v: &[f64]) -> Categorical {
        Categorical::new(v.to_vec()).unwrap()
    }

    fn hard_batch(p_true: &[f64]) -> WeightedBatch {
        let preds = p_true.iter().map(|&p| cat(&[p, 1.0 - p])).collect();
        let targets = p_true.iter().map(|_| LabelAssignment::Hard(0)).collect();
        WeightedBatch::uniform(preds, targets).unwrap()
    }

    #[test]
    fn der_sl_examples() {
        let kl = der_sl(DivergenceSpec::Kl, &hard_batch(&[0.5, 0.25])).unwrap();
        assert_abs_diff_eq!(kl, 0.5 * (-(0.5f64.ln()) - 0.25f64.ln()), epsilon = 1e-12);
        assert_abs_diff_eq!(kl, 1.0397, epsilon = 1e-4);
        assert_eq!(der_sl(DivergenceSpec::Tv, &hard_batch(&[1.0, 1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(der_sl(DivergenceSpec::ChiSquared, &hard_batch(&[0.5])).unwrap(), 1.0, epsilon = 1e-12);
        let renyi = der_sl(DivergenceSpec::Renyi { alpha: 0.5 }, &hard_batch(&[0.25])).unwrap();
        assert_abs_diff_eq!(renyi, 2.0 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn der_sl_rejects_soft_and_weighted() {
        let b = WeightedBatch::uniform(vec![cat(&[0.5, 0.5])], vec![LabelAssignment::Soft(cat(&[0.3, 0.7]))]).unwrap();
        assert_eq!(der_sl(DivergenceSpec::Kl, &b), Err(RiskError::SoftTarget(0)));
        let b = WeightedBatch::new(
            vec![cat(&[0.5, 0.5]), cat(&[0.5, 0.5])],
            vec![LabelAssignment::Hard(0), LabelAssignment::Hard(1)],
            vec![0.3, 0.7],
        )
        .unwrap();
        assert_eq!(der_sl(DivergenceSpec::Kl, &b), Err(RiskError::NonUniformWeights));
    }

    #[test]
    fn zero_prediction_is_infinite_with_row() {
        let b = WeightedBatch::uniform(
            vec![cat(&[0.5, 0.5]), cat(&[0.0, 1.0])],
            vec![LabelAssignment::Hard(0), LabelAssignment::Hard(0)],
        )
        .unwrap();
        assert_eq!(der_sl(DivergenceSpec::Kl, &b), Err(RiskError::Infinite { spec: DivergenceSpec::Kl, row: 1 }));
        // bounded generators stay finite
        assert_abs_diff_eq!(der_sl(DivergenceSpec::Tv, &b).unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn batch_validation() {
        assert_eq!(WeightedBatch::uniform(vec![], vec![]), Err(RiskError::Empty));
        assert!(matches!(
            WeightedBatch::new(vec![cat(&[0.5, 0.5])], vec![LabelAssignment::Hard(0)], vec![0.5]),
            Err(RiskError::BadWeights(_))
        ));
        assert!(matches!(
            WeightedBatch::uniform(vec![cat(&[0.5, 0.5])], vec![LabelAssignment::Hard(2)]),
            Err(RiskError::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn der_ssl_examples() {
        let lp = [cat(&[0.5, 0.5])];
        let lt = [LabelAssignment::Hard(0)];
        let pp = [cat(&[0.25, 0.75])];
        let pt = [LabelAssignment::Hard(0)];
        let labeled = Rows::new(&lp, &lt).unwrap();
        let pseudo = Rows::new(&pp, &pt).unwrap();
        let kl = der_ssl(DivergenceSpec::Kl, labeled, pseudo, 0.5).unwrap();
        assert_abs_diff_eq!(kl, 0.5 * -(0.5f64.ln()) + 0.5 * -(0.25f64.ln()), epsilon = 1e-12);

        let renyi = der_ssl(DivergenceSpec::Renyi { alpha: 0.6 }, labeled, pseudo, 0.5).unwrap();
        let expected = (0.5 * 0.5f64.powf(0.4) + 0.5 * 0.25f64.powf(0.4)).ln() / -0.4;
        assert_abs_diff_eq!(renyi, expected, epsilon = 1e-12);

        // β = 1 reduces to the supervised DER
        for spec in [DivergenceSpec::Kl, DivergenceSpec::Renyi { alpha: 0.6 }, DivergenceSpec::LeCam] {
            let ssl = der_ssl(spec, labeled, pseudo, 1.0).unwrap();
            let sl = der_sl(spec, &WeightedBatch::uniform(lp.to_vec(), lt.to_vec()).unwrap()).unwrap();
            assert_abs_diff_eq!(ssl, sl, epsilon = 1e-14);
        }
        assert_eq!(der_ssl(DivergenceSpec::Kl, labeled, pseudo, 1.5), Err(RiskError::InvalidBeta(1.5)));
    }

    #[test]
    fn der_ssl_renyi_matches_flattened_joint() {
        // Joint over 2 rows × 2 classes, flattened to 4 outcomes.
        let alpha = 0.6;
        let lp = [cat(&[0.5, 0.5])];
        let lt = [LabelAssignment::Hard(0)];
        let pp = [cat(&[0.25, 0.75])];
        let pt = [LabelAssignment::Hard(0)];
        let got = der_ssl(
            DivergenceSpec::Renyi { alpha },
            Rows::new(&lp, &lt).unwrap(),
            Rows::new(&pp, &pt).unwrap(),
            0.5,
        )
        .unwrap();
        let target = cat(&[0.5, 0.0, 0.5, 0.0]);
        let model = cat(&[0.25, 0.25, 0.125, 0.375]);
        let direct = divergence::renyi_divergence(alpha, &target, &model).unwrap();
        assert_abs_diff_eq!(got, direct, epsilon = 1e-12);
    }

    #[test]
    fn empty_pseudo_falls_back_to_supervised() {
        let lp = [cat(&[0.7, 0.3])];
        let lt = [LabelAssignment::Hard(1)];
        let got = der_ssl(DivergenceSpec::Kl, Rows::new(&lp, &lt).unwrap(), Rows::new(&[], &[]).unwrap(), 0.2).unwrap();
        assert_abs_diff_eq!(got, -(0.3f64.ln()), epsilon = 1e-12);
    }

    #[test]
    fn mean_prediction_examples() {
        assert_eq!(mean_prediction(&[cat(&[1.0, 0.0]), cat(&[0.0, 1.0])]).unwrap().probs(), &[0.5, 0.5]);
        assert_eq!(mean_prediction(&[cat(&[0.2, 0.8])]).unwrap().probs(), &[0.2, 0.8]);
        let m = mean_prediction(&[cat(&[0.6, 0.4]), cat(&[0.2, 0.8]), cat(&[0.7, 0.3])]).unwrap();
        assert_abs_diff_eq!(m.probs()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.probs()[1], 0.5, epsilon = 1e-15);
        assert_eq!(mean_prediction(&[]), Err(RiskError::Empty));
    }

    #[test]
    fn regularized_risk_examples() {
        let labeled = hard_batch(&[0.6, 0.9]);
        let base = der_sl(DivergenceSpec::Kl, &labeled).unwrap();
        let unl = [cat(&[0.3, 0.7])];
        let none = RegularizationWeights::new(0.0, 0.0).unwrap();
        assert_eq!(regularized_risk(DivergenceSpec::Kl, &labeled, &unl, none).unwrap(), base);

        let uniform = [cat(&[0.5, 0.5]), cat(&[0.5, 0.5])];
        let reg = RegularizationWeights::new(0.7, 3.0).unwrap();
        assert_abs_diff_eq!(regularized_risk(DivergenceSpec::Kl, &labeled, &uniform, reg).unwrap(), base, epsilon = 1e-15);

        let reg = RegularizationWeights::new(0.4, 0.0).unwrap();
        let got = regularized_risk(DivergenceSpec::Kl, &labeled, &[cat(&[1.0, 0.0])], reg).unwrap();
        assert_abs_diff_eq!(got, base + 0.4 * -LN_2, epsilon = 1e-12);
        assert!(RegularizationWeights::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn soft_target_term_matches_formula() {
        // previous prediction (0.9, 0.1) as soft target against current q
        let q = cat(&[0.6, 0.4]);
        let b = WeightedBatch::uniform(vec![q.clone()], vec![LabelAssignment::Soft(cat(&[0.9, 0.1]))]).unwrap();
        let got = joint_divergence(DivergenceSpec::Kl, &b).unwrap();
        assert_abs_diff_eq!(got, 0.9 * (0.9f64 / 0.6).ln() + 0.1 * (0.1f64 / 0.4).ln(), epsilon = 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_confident_correct_prediction() {
        let logits = array![[40.0, 0.0, 0.0]];
        let t = LabelAssignment::Hard(0);
        let g = der_gradient(DivergenceSpec::Kl, logits.view(), &[Some(&t)], &[1.0], &[false], Default::default()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn gradient_rejects_non_finite_logits() {
        let logits = array![[0.0, f64::NAN]];
        let t = LabelAssignment::Hard(0);
        assert_eq!(
            der_gradient(DivergenceSpec::Kl, logits.view(), &[Some(&t)], &[1.0], &[false], Default::default()),
            Err(RiskError::NonFiniteLogit { row: 0, col: 1 })
        );
    }

    #[test]
    fn renyi_objective_without_targets_is_regularizer_only() {
        let logits = array![[0.3, -0.2, 0.1], [1.0, 0.0, -1.0]];
        let reg = RegularizationWeights::new(0.0, 0.8).unwrap();
        let objective = Objective::new(DivergenceSpec::Renyi { alpha: 0.6 }, reg);
        let (value, grad) = objective.value_and_gradient(logits.view(), &[None, None], &[0.5, 0.5], &[true, true]).unwrap();
        assert!(value.is_finite() && value > 0.0);
        assert!(grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn objective_value_matches_component_functions() {
        let logits = array![[0.3, -1.2, 0.8], [1.5, 0.1, -0.4], [-0.2, 0.9, 0.0]];
        let probs = softmax_rows(logits.view());
        let preds: Vec<Categorical> = probs.outer_iter().map(|r| cat(r.as_slice().unwrap())).collect();
        let targets = [LabelAssignment::Hard(2), LabelAssignment::Hard(0)];
        let reg = RegularizationWeights::new(0.4, 0.8).unwrap();
        for spec in [DivergenceSpec::Kl, DivergenceSpec::Renyi { alpha: 0.6 }, DivergenceSpec::JensenShannon] {
            let obj = Objective::new(spec, reg);
            let (value, _) = obj
                .value_and_gradient(logits.view(), &[Some(&targets[0]), Some(&targets[1]), None], &[0.5, 0.5, 0.0], &[
                    false, false, true,
                ])
                .unwrap();
            let labeled = WeightedBatch::uniform(preds[..2].to_vec(), targets.to_vec()).unwrap();
            let expected = regularized_risk(spec, &labeled, &preds[2..], reg).unwrap();
            assert_abs_diff_eq!(value, expected, epsilon = 1e-12);
        }
    }
}
