//! Numerical checks of the bounds relating fully supervised and
//! pseudo-labeled risks, the metric property behind them, finiteness of
//! hard-label risks and the inequalities between risks.
//!
//! Every random object is drawn from seeded streams: distributions from the
//! flat simplex sampler, labels uniformly. A report lists violation counts and
//! the worst slack so that a failure can be replayed from its seed.

use crate::divergence::{
    self, f_divergence_with, Categorical, DivergenceError, DivergenceSpec, Generator, MetricTransform,
};
use crate::random::{self, derive_seed, flat_simplex, SeedRng};
use crate::risk::{self, LabelAssignment, Objective, RegularizationWeights, RiskError, WeightedBatch};
use crate::selftrain;
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("{transform:?} does not turn {spec} into a metric")]
    NotAMetric { spec: DivergenceSpec, transform: MetricTransform },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    SelfTrain(#[from] selftrain::SelfTrainError),
}

pub type Result<T> = std::result::Result<T, TheoryError>;

/// Absolute tolerance for the symmetry and triangle checks.
pub const METRIC_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance for the per-instance bound.
pub const BOUND_TOLERANCE: f64 = 1e-6;
/// Absolute tolerance for the risk inequalities.
pub const INEQUALITY_TOLERANCE: f64 = 1e-9;

/// Divergence/transform pairs for which `G(D)` is a metric.
pub const METRIC_PAIRS: [(DivergenceSpec, MetricTransform); 3] = [
    (DivergenceSpec::Tv, MetricTransform::Identity),
    (DivergenceSpec::JensenShannon, MetricTransform::Sqrt),
    (DivergenceSpec::LeCam, MetricTransform::Sqrt),
];

fn g(transform: MetricTransform, d: f64) -> f64 {
    match transform {
        MetricTransform::Identity => d,
        MetricTransform::Sqrt => d.max(0.0).sqrt(),
    }
}

/// Common view of every report.
pub trait Report {
    fn violations(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAxiomReport {
    pub spec: DivergenceSpec,
    pub transform: MetricTransform,
    pub trials: usize,
    pub k: usize,
    pub identity_violations: usize,
    pub symmetry_violations: usize,
    pub triangle_violations: usize,
    /// Largest `|G(D(p||q)) − G(D(q||p))|`.
    pub max_asymmetry: f64,
    /// Smallest `G(D(p||q)) + G(D(q||r)) − G(D(p||r))`.
    pub min_triangle_slack: f64,
}

impl Report for MetricAxiomReport {
    fn violations(&self) -> usize {
        self.identity_violations + self.symmetry_violations + self.triangle_violations
    }
}

/// Symmetry, identity and the triangle inequality of `G(D)` on `trials`
/// random triples. Any divergence may be probed; non-metrics show violations.
pub fn check_metric_axioms(spec: DivergenceSpec, transform: MetricTransform, trials: usize, k: usize, seed: u64) -> Result<MetricAxiomReport> {
    spec.validate()?;
    let mut rng = random::rng(seed);
    let mut report = MetricAxiomReport {
        spec,
        transform,
        trials,
        k,
        identity_violations: 0,
        symmetry_violations: 0,
        triangle_violations: 0,
        max_asymmetry: 0.0,
        min_triangle_slack: f64::INFINITY,
    };
    let d = |p: &Categorical, q: &Categorical| -> f64 {
        match divergence::divergence(spec, p, q) {
            Ok(v) => g(transform, v),
            Err(_) => f64::INFINITY,
        }
    };
    for _ in 0..trials {
        let (p, q, r) = (flat_simplex(k, &mut rng), flat_simplex(k, &mut rng), flat_simplex(k, &mut rng));
        if d(&p, &p).abs() > METRIC_TOLERANCE {
            report.identity_violations += 1;
        }
        let asym = (d(&p, &q) - d(&q, &p)).abs();
        report.max_asymmetry = report.max_asymmetry.max(asym);
        if asym.is_nan() || asym > METRIC_TOLERANCE {
            report.symmetry_violations += 1;
        }
        // all orderings of the triple
        for (a, b, c) in [(&p, &q, &r), (&q, &r, &p), (&r, &p, &q)] {
            let slack = d(a, b) + d(b, c) - d(a, c);
            report.min_triangle_slack = report.min_triangle_slack.min(slack);
            if slack.is_nan() || slack < -METRIC_TOLERANCE {
                report.triangle_violations += 1;
            }
        }
    }
    Ok(report)
}

/// Labeled and unlabeled rows with true labels, pseudo-labels for the
/// unlabeled rows, and β-mixture weights shared by every joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryInstance {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub beta: f64,
    /// `n + m` true labels, labeled rows first.
    pub true_labels: Vec<usize>,
    /// `m` pseudo-labels of the unlabeled rows.
    pub pseudo_labels: Vec<usize>,
}

impl TheoryInstance {
    pub fn new(k: usize, n: usize, true_labels: Vec<usize>, pseudo_labels: Vec<usize>, beta: f64) -> Result<Self> {
        let m = pseudo_labels.len();
        if k < 2 || n == 0 || true_labels.len() != n + m || !(0.0..=1.0).contains(&beta) {
            return Err(TheoryError::InvalidInstance(format!("k = {k}, n = {n}, {} true labels, m = {m}, beta = {beta}", true_labels.len())));
        }
        if true_labels.iter().chain(&pseudo_labels).any(|&y| y >= k) {
            return Err(TheoryError::InvalidInstance("label out of range".into()));
        }
        Ok(Self { k, n, m, beta: if m == 0 { 1.0 } else { beta }, true_labels, pseudo_labels })
    }

    /// Uniform true labels; pseudo-labels are the true labels with `noise`
    /// injected; `β = n / (n + m)`.
    pub fn random(k: usize, n: usize, m: usize, noise: f64, seed: u64) -> Result<Self> {
        let mut rng = random::rng(seed);
        let true_labels: Vec<usize> = (0..n + m).map(|_| rng.random_range(0..k)).collect();
        let pseudo_labels = selftrain::inject_label_noise(&true_labels[n..], noise, k, derive_seed(seed, 1))?;
        Self::new(k, n, true_labels, pseudo_labels, n as f64 / (n + m) as f64)
    }

    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![self.beta / self.n as f64; self.n];
        if self.m > 0 {
            w.extend(std::iter::repeat_n((1.0 - self.beta) / self.m as f64, self.m));
        }
        w
    }

    pub fn true_targets(&self) -> Vec<LabelAssignment> {
        self.true_labels.iter().map(|&y| LabelAssignment::Hard(y)).collect()
    }

    /// Labeled rows keep their labels; unlabeled rows carry pseudo-labels.
    pub fn pseudo_targets(&self) -> Vec<LabelAssignment> {
        self.true_labels[..self.n].iter().chain(&self.pseudo_labels).map(|&y| LabelAssignment::Hard(y)).collect()
    }

    /// Fraction of pseudo-labels that differ from the truth.
    pub fn noise_rate(&self) -> f64 {
        if self.m == 0 {
            return 0.0;
        }
        self.pseudo_labels.iter().zip(&self.true_labels[self.n..]).filter(|(a, b)| a != b).count() as f64 / self.m as f64
    }

    fn joint(&self, spec: DivergenceSpec, targets: Vec<LabelAssignment>, predictions: Vec<Categorical>) -> Result<f64> {
        Ok(risk::joint_divergence(spec, &WeightedBatch::new(predictions, targets, self.weights())?)?)
    }

    /// `D(P_t || P_θ)`.
    pub fn fsl_risk(&self, spec: DivergenceSpec, predictions: &[Categorical]) -> Result<f64> {
        self.joint(spec, self.true_targets(), predictions.to_vec())
    }

    /// `D(P̂ || P_θ)`.
    pub fn ssl_risk(&self, spec: DivergenceSpec, predictions: &[Categorical]) -> Result<f64> {
        self.joint(spec, self.pseudo_targets(), predictions.to_vec())
    }

    /// `D(P_t || P̂)`, independent of the model.
    pub fn pseudo_label_cost(&self, spec: DivergenceSpec) -> Result<f64> {
        let pseudo = self.pseudo_targets().iter().map(|t| Categorical::one_hot(self.k, t.hard().unwrap())).collect::<std::result::Result<Vec<_>, _>>()?;
        self.joint(spec, self.true_targets(), pseudo)
    }
}

/// Gradient-descent budget for the free-logit minimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizationBudget {
    pub steps: usize,
    pub learning_rate: f64,
    /// Converged once the risk is within this of its infimum 0.
    pub tolerance: f64,
}

impl Default for OptimizationBudget {
    fn default() -> Self {
        Self { steps: 3000, learning_rate: 1.0, tolerance: 1e-3 }
    }
}

/// Approximate minimizer of the pseudo-label risk over one free logit vector
/// per row. Returns the best iterate and whether its risk came within the
/// tolerance of 0, the infimum over free predictions.
pub fn minimize_ssl_risk(instance: &TheoryInstance, spec: DivergenceSpec, budget: &OptimizationBudget, seed: u64) -> Result<(Vec<Categorical>, f64, bool)> {
    let rows = instance.n + instance.m;
    let k = instance.k;
    let mut rng: SeedRng = random::rng(seed);
    let mut logits = Array2::from_shape_fn((rows, k), |_| { let z: f64 = StandardNormal.sample(&mut rng); 0.1 * z });
    let targets = instance.pseudo_targets();
    let target_refs: Vec<Option<&LabelAssignment>> = targets.iter().map(Some).collect();
    let weights = instance.weights();
    let regularized = vec![false; rows];
    let objective = Objective::new(spec, RegularizationWeights::default());
    let mut best = (f64::INFINITY, logits.clone());
    let mut converged = false;
    for _ in 0..=budget.steps {
        let (value, grad) = objective.value_and_gradient(logits.view(), &target_refs, &weights, &regularized)?;
        if value < best.0 {
            best = (value, logits.clone());
        }
        if value <= budget.tolerance {
            converged = true;
            break;
        }
        // per-row preconditioning by the row weight
        for (mut row, (g_row, &w)) in logits.outer_iter_mut().zip(grad.outer_iter().zip(&weights)) {
            if w == 0.0 {
                continue;
            }
            for (x, &gx) in row.iter_mut().zip(g_row) {
                *x -= budget.learning_rate * gx / w;
            }
        }
    }
    let probs = risk::softmax_rows(best.1.view());
    let predictions = probs.outer_iter().map(|r| Categorical::new(r.to_vec())).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((predictions, best.0, converged))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub noise_rate: f64,
    /// `D(P_t || P_θ*)`.
    pub fsl_risk: f64,
    /// `D(P_t || P̂)`.
    pub pseudo_label_cost: f64,
    /// `D(P̂ || P_θ*)`.
    pub ssl_risk: f64,
    /// Right side minus left side of the checked inequality.
    pub slack: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub spec: DivergenceSpec,
    pub transform: MetricTransform,
    pub noise: f64,
    pub rows: Vec<BoundRow>,
    pub violations: usize,
    pub min_slack: f64,
    pub unconverged: usize,
}

impl Report for Theorem1Report {
    fn violations(&self) -> usize {
        self.violations
    }
}

fn ensure_metric(spec: DivergenceSpec, transform: MetricTransform) -> Result<()> {
    if transform.pairs_with(spec) {
        Ok(())
    } else {
        Err(TheoryError::NotAMetric { spec, transform })
    }
}

fn bound_row(instance: &TheoryInstance, spec: DivergenceSpec, transform: MetricTransform, budget: &OptimizationBudget, seed: u64) -> Result<BoundRow> {
    let (theta, _, converged) = minimize_ssl_risk(instance, spec, budget, seed)?;
    let fsl = instance.fsl_risk(spec, &theta)?;
    let cost = instance.pseudo_label_cost(spec)?;
    let ssl = instance.ssl_risk(spec, &theta)?;
    Ok(BoundRow {
        noise_rate: instance.noise_rate(),
        fsl_risk: fsl,
        pseudo_label_cost: cost,
        ssl_risk: ssl,
        slack: g(transform, cost) + g(transform, ssl) - g(transform, fsl),
        converged,
    })
}

/// `G(D(P_t||P_θ*)) ≤ G(D(P_t||P̂)) + G(D(P̂||P_θ*))` on the given instances,
/// with `θ*` the free-logit minimizer of the pseudo-label risk.
pub fn check_theorem1(instances: &[TheoryInstance], spec: DivergenceSpec, transform: MetricTransform, budget: &OptimizationBudget, seed: u64) -> Result<Theorem1Report> {
    ensure_metric(spec, transform)?;
    let mut rows = Vec::with_capacity(instances.len());
    for (i, instance) in instances.iter().enumerate() {
        rows.push(bound_row(instance, spec, transform, budget, derive_seed(seed, i as u64))?);
    }
    let noise = if instances.is_empty() { 0.0 } else { rows.iter().map(|r| r.noise_rate).sum::<f64>() / rows.len() as f64 };
    Ok(Theorem1Report {
        spec,
        transform,
        noise,
        violations: rows.iter().filter(|r| !(r.slack >= -BOUND_TOLERANCE)).count(),
        min_slack: rows.iter().map(|r| r.slack).fold(f64::INFINITY, f64::min),
        unconverged: rows.iter().filter(|r| !r.converged).count(),
        rows,
    })
}

/// Random instances with `noise` injected into the pseudo-labels.
pub fn random_instances(count: usize, k: usize, n: usize, m: usize, noise: f64, seed: u64) -> Result<Vec<TheoryInstance>> {
    (0..count).map(|i| TheoryInstance::random(k, n, m, noise, derive_seed(seed, i as u64))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corollary1Report {
    pub spec: DivergenceSpec,
    pub transform: MetricTransform,
    pub noise: f64,
    pub resamples: usize,
    pub mean_fsl_risk: f64,
    pub mean_pseudo_label_cost: f64,
    pub mean_ssl_risk: f64,
    /// Standard error of `fsl − 2·cost − 2·ssl` over resamples.
    pub standard_error: f64,
    /// `2·mean cost + 2·mean ssl + 3·se − mean fsl`.
    pub mean_slack: f64,
    /// Resamples where `fsl ≤ 2·cost + 2·ssl` fails.
    pub pointwise_violations: usize,
    /// Grid points where `2G(t/2) ≤ G(2t)` fails.
    pub scalar_violations: usize,
    pub scalar_max_excess: f64,
}

impl Report for Corollary1Report {
    fn violations(&self) -> usize {
        self.pointwise_violations + self.scalar_violations + usize::from(!(self.mean_slack >= -BOUND_TOLERANCE))
    }
}

/// Grid `t ∈ (0, 4]` on which the scalar condition is evaluated.
pub fn scalar_condition_grid() -> Vec<f64> {
    (1..=400).map(|i| i as f64 / 100.0).collect()
}

/// Worst excess of `2G(t/2)` over `G(2t)` on the grid and its violation count
/// at tolerance `1e-12`.
pub fn check_scalar_condition(transform: MetricTransform) -> (usize, f64) {
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for t in scalar_condition_grid() {
        let excess = 2.0 * g(transform, t / 2.0) - g(transform, 2.0 * t);
        worst = worst.max(excess);
        if excess > 1e-12 {
            violations += 1;
        }
    }
    (violations, worst)
}

/// Monte Carlo form of the true-risk bound over `resamples` random instances.
#[allow(clippy::too_many_arguments)]
pub fn check_corollary1(
    spec: DivergenceSpec,
    transform: MetricTransform,
    resamples: usize,
    k: usize,
    n: usize,
    m: usize,
    noise: f64,
    budget: &OptimizationBudget,
    seed: u64,
) -> Result<Corollary1Report> {
    ensure_metric(spec, transform)?;
    let (scalar_violations, scalar_max_excess) = check_scalar_condition(transform);
    let instances = random_instances(resamples, k, n, m, noise, seed)?;
    let mut rows = Vec::with_capacity(resamples);
    for (i, instance) in instances.iter().enumerate() {
        rows.push(bound_row(instance, spec, transform, budget, derive_seed(seed ^ 0xC0, i as u64))?);
    }
    let count = rows.len().max(1) as f64;
    let mean = |f: &dyn Fn(&BoundRow) -> f64| rows.iter().map(f).sum::<f64>() / count;
    let diffs: Vec<f64> = rows.iter().map(|r| r.fsl_risk - 2.0 * r.pseudo_label_cost - 2.0 * r.ssl_risk).collect();
    let diff_mean = diffs.iter().sum::<f64>() / count;
    let standard_error = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - diff_mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64 / diffs.len() as f64).sqrt()
    } else {
        0.0
    };
    let (mean_fsl, mean_cost, mean_ssl) = (mean(&|r| r.fsl_risk), mean(&|r| r.pseudo_label_cost), mean(&|r| r.ssl_risk));
    Ok(Corollary1Report {
        spec,
        transform,
        noise,
        resamples,
        mean_fsl_risk: mean_fsl,
        mean_pseudo_label_cost: mean_cost,
        mean_ssl_risk: mean_ssl,
        standard_error,
        mean_slack: 2.0 * mean_cost + 2.0 * mean_ssl + 3.0 * standard_error - mean_fsl,
        pointwise_violations: diffs.iter().filter(|&&d| !(d <= BOUND_TOLERANCE)).count(),
        scalar_violations,
        scalar_max_excess,
    })
}

/// Reverse KL generator `f(t) = −log t`; `f(0) = +∞`.
#[derive(Debug, Clone, Copy)]
pub struct ReverseKlGenerator;

impl Generator for ReverseKlGenerator {
    fn value(&self, t: f64) -> f64 {
        -t.ln()
    }
    fn at_zero(&self) -> f64 {
        f64::INFINITY
    }
    fn slope_at_infinity(&self) -> Option<f64> {
        Some(0.0)
    }
    fn derivative(&self, t: f64) -> f64 {
        -1.0 / t
    }
}

/// Symmetrized KL generator `f(t) = (t − 1) log t`; `f(0) = +∞`.
#[derive(Debug, Clone, Copy)]
pub struct SymmetricKlGenerator;

impl Generator for SymmetricKlGenerator {
    fn value(&self, t: f64) -> f64 {
        (t - 1.0) * t.ln()
    }
    fn at_zero(&self) -> f64 {
        f64::INFINITY
    }
    fn slope_at_infinity(&self) -> Option<f64> {
        None
    }
    fn derivative(&self, t: f64) -> f64 {
        t.ln() + 1.0 - 1.0 / t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposition1Report {
    pub specs: Vec<DivergenceSpec>,
    pub trials: usize,
    /// Batches whose risk was infinite, NaN or negative.
    pub failures: usize,
    pub max_risk: f64,
    /// The reverse and symmetrized KL risks are infinite on a hard-label batch.
    pub reverse_kl_infinite: bool,
    pub symmetric_kl_infinite: bool,
}

impl Report for Proposition1Report {
    fn violations(&self) -> usize {
        self.failures + usize::from(!self.reverse_kl_infinite) + usize::from(!self.symmetric_kl_infinite)
    }
}

fn random_hard_batch(k: usize, n: usize, rng: &mut SeedRng) -> (Vec<Categorical>, Vec<usize>) {
    let predictions = (0..n).map(|_| flat_simplex(k, rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
    (predictions, labels)
}

/// Mean hard-label risk through an arbitrary generator; `None` when infinite.
pub fn generator_risk<G: Generator>(generator: &G, predictions: &[Categorical], labels: &[usize]) -> Result<Option<f64>> {
    let mut total = 0.0;
    for (q, &y) in predictions.iter().zip(labels) {
        let target = Categorical::one_hot(q.k(), y)?;
        match f_divergence_with(generator, target.probs(), q.probs()) {
            Ok(v) => total += v,
            Err(DivergenceError::Infinite) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(total / predictions.len() as f64))
}

/// Finiteness and non-negativity of hard-label risks for generators with
/// `f(0) < ∞`, plus the reverse/symmetrized KL counterexamples.
pub fn check_proposition1(specs: &[DivergenceSpec], trials: usize, k: usize, n: usize, seed: u64) -> Result<Proposition1Report> {
    let mut rng = random::rng(seed);
    let mut failures = 0;
    let mut max_risk: f64 = 0.0;
    for _ in 0..trials {
        let (predictions, labels) = random_hard_batch(k, n, &mut rng);
        let targets: Vec<LabelAssignment> = labels.iter().map(|&y| LabelAssignment::Hard(y)).collect();
        let batch = WeightedBatch::uniform(predictions, targets)?;
        for &spec in specs {
            match risk::der_sl(spec, &batch) {
                Ok(v) if v.is_finite() && v >= 0.0 => max_risk = max_risk.max(v),
                _ => failures += 1,
            }
        }
    }
    let (predictions, labels) = random_hard_batch(k, n.max(1), &mut rng);
    Ok(Proposition1Report {
        specs: specs.to_vec(),
        trials,
        failures,
        max_risk,
        reverse_kl_infinite: generator_risk(&ReverseKlGenerator, &predictions, &labels)?.is_none(),
        symmetric_kl_infinite: generator_risk(&SymmetricKlGenerator, &predictions, &labels)?.is_none(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub trials: usize,
    pub k: usize,
    pub n: usize,
    pub alpha_grid: Vec<f64>,
    pub pinsker_violations: usize,
    pub kl_chi2_violations: usize,
    pub js_lecam_violations: usize,
    pub bound_violations: usize,
    pub renyi_monotonicity_violations: usize,
    pub renyi_limit_violations: usize,
    /// Largest `|R_α − R_KL|` at `α = 1 ± 1e-5`.
    pub max_renyi_limit_gap: f64,
}

impl Report for InequalityReport {
    fn violations(&self) -> usize {
        self.pinsker_violations
            + self.kl_chi2_violations
            + self.js_lecam_violations
            + self.bound_violations
            + self.renyi_monotonicity_violations
            + self.renyi_limit_violations
    }
}

pub const ALPHA_GRID: [f64; 5] = [0.3, 0.6, 0.9, 1.5, 2.0];

/// Risks of one hard-label batch under the specs compared by the inequality suite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskSet {
    pub kl: f64,
    pub tv: f64,
    pub chi2: f64,
    pub js: f64,
    pub le_cam: f64,
}

pub fn risk_set(batch: &WeightedBatch) -> Result<RiskSet> {
    Ok(RiskSet {
        kl: risk::der_sl(DivergenceSpec::Kl, batch)?,
        tv: risk::der_sl(DivergenceSpec::Tv, batch)?,
        chi2: risk::der_sl(DivergenceSpec::ChiSquared, batch)?,
        js: risk::der_sl(DivergenceSpec::JensenShannon, batch)?,
        le_cam: risk::der_sl(DivergenceSpec::LeCam, batch)?,
    })
}

/// Counts violated inequalities of one batch into `report`.
fn tally(report: &mut InequalityReport, batch: &WeightedBatch) -> Result<()> {
    let r = risk_set(batch)?;
    let tol = INEQUALITY_TOLERANCE;
    let ln2 = std::f64::consts::LN_2;
    report.pinsker_violations += usize::from(!(2.0 * r.tv * r.tv <= r.kl + tol));
    report.kl_chi2_violations += usize::from(!(r.kl <= r.chi2 + tol));
    report.js_lecam_violations += usize::from(!(r.js <= 2.0 * ln2 * r.le_cam + tol));
    report.bound_violations += usize::from(!(r.tv <= 1.0 + tol && r.js <= 2.0 * ln2 + tol && r.le_cam <= 1.0 + tol));
    let renyi: Vec<f64> = report.alpha_grid.iter().map(|&a| risk::der_sl(DivergenceSpec::Renyi { alpha: a }, batch)).collect::<risk::Result<_>>()?;
    report.renyi_monotonicity_violations += renyi.windows(2).filter(|w| !(w[0] <= w[1] + tol)).count();
    for alpha in [1.0 - 1e-5, 1.0 + 1e-5] {
        let gap = (risk::der_sl(DivergenceSpec::Renyi { alpha }, batch)? - r.kl).abs();
        report.max_renyi_limit_gap = report.max_renyi_limit_gap.max(gap);
        report.renyi_limit_violations += usize::from(!(gap <= 1e-3));
    }
    Ok(())
}

/// The risk inequalities on `trials` random hard-label batches of `n` rows.
pub fn check_der_inequalities(trials: usize, k: usize, n: usize, seed: u64) -> Result<InequalityReport> {
    let mut report = InequalityReport {
        trials,
        k,
        n,
        alpha_grid: ALPHA_GRID.to_vec(),
        pinsker_violations: 0,
        kl_chi2_violations: 0,
        js_lecam_violations: 0,
        bound_violations: 0,
        renyi_monotonicity_violations: 0,
        renyi_limit_violations: 0,
        max_renyi_limit_gap: 0.0,
    };
    let mut rng = random::rng(seed);
    for _ in 0..trials {
        let (predictions, labels) = random_hard_batch(k, n, &mut rng);
        let batch = WeightedBatch::uniform(predictions, labels.into_iter().map(LabelAssignment::Hard).collect())?;
        tally(&mut report, &batch)?;
    }
    Ok(report)
}

/// Sizes of the consolidated theory suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryBudgets {
    /// Random triples or batches per metric, finiteness and inequality check.
    pub trials: usize,
    /// Instances per bound check and noise level.
    pub instances: usize,
    pub resamples: usize,
    pub k: usize,
    pub n: usize,
    pub m: usize,
    /// Pseudo-label noise of the noisy bound checks; a noiseless pass always runs.
    pub noise: f64,
    pub optimization: OptimizationBudget,
    pub seed: u64,
}

impl Default for TheoryBudgets {
    fn default() -> Self {
        Self { trials: 1000, instances: 5, resamples: 20, k: 5, n: 8, m: 24, noise: 0.2, optimization: OptimizationBudget::default(), seed: 1 }
    }
}

/// Outcome of every theory check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheorySuiteReport {
    pub budgets: TheoryBudgets,
    pub metric_axioms: Vec<MetricAxiomReport>,
    pub theorem1: Vec<Theorem1Report>,
    pub corollary1: Vec<Corollary1Report>,
    pub proposition1: Proposition1Report,
    pub inequalities: InequalityReport,
    /// KL treated as a metric; expected to fail.
    pub kl_probe: Option<MetricAxiomReport>,
}

impl Report for TheorySuiteReport {
    fn violations(&self) -> usize {
        self.metric_axioms.iter().map(Report::violations).sum::<usize>()
            + self.theorem1.iter().map(Report::violations).sum::<usize>()
            + self.corollary1.iter().map(Report::violations).sum::<usize>()
            + self.proposition1.violations()
            + self.inequalities.violations()
            + self.kl_probe.as_ref().map_or(0, Report::violations)
    }
}

impl TheorySuiteReport {
    /// One human-readable line per check.
    pub fn lines(&self) -> Vec<String> {
        let mut out = Vec::new();
        for r in &self.metric_axioms {
            out.push(format!("metric axioms {} {:?}: {} trials, {} violations, min triangle slack {:.3e}", r.spec, r.transform, r.trials, r.violations(), r.min_triangle_slack));
        }
        for r in &self.theorem1 {
            out.push(format!("bound {} realized noise {:.3}: {} instances, {} violations, min slack {:.3e}, {} unconverged", r.spec, r.noise, r.rows.len(), r.violations(), r.min_slack, r.unconverged));
        }
        for r in &self.corollary1 {
            out.push(format!("expected bound {}: {} resamples, {} violations, mean slack {:.3e}", r.spec, r.resamples, r.violations(), r.mean_slack));
        }
        let p = &self.proposition1;
        out.push(format!("finiteness: {} trials, {} violations, reverse KL infinite {}, symmetric KL infinite {}", p.trials, p.violations(), p.reverse_kl_infinite, p.symmetric_kl_infinite));
        let i = &self.inequalities;
        out.push(format!("risk inequalities: {} trials, {} violations", i.trials, i.violations()));
        if let Some(r) = &self.kl_probe {
            out.push(format!("KL metric probe: {} violations", r.violations()));
        }
        out.push(format!("total violations: {}", self.violations()));
        out
    }
}

/// Runs every check. With `trials = 0` the instance and resample counts are
/// also zero, which yields an empty report.
pub fn run_theory_suite(budgets: &TheoryBudgets, kl_probe: bool) -> Result<TheorySuiteReport> {
    let b = budgets;
    let (instances, resamples) = if b.trials == 0 { (0, 0) } else { (b.instances, b.resamples) };
    let seed = |tag: u64| derive_seed(b.seed, tag);
    let mut metric_axioms = Vec::new();
    let mut theorem1 = Vec::new();
    let mut corollary1 = Vec::new();
    for (i, (spec, transform)) in METRIC_PAIRS.into_iter().enumerate() {
        let i = i as u64;
        metric_axioms.push(check_metric_axioms(spec, transform, b.trials, b.k, seed(10 + i))?);
        for (j, noise) in [0.0, b.noise].into_iter().enumerate() {
            let family = random_instances(instances, b.k, b.n, b.m, noise, seed(20 + j as u64))?;
            theorem1.push(check_theorem1(&family, spec, transform, &b.optimization, seed(30 + i))?);
        }
        corollary1.push(check_corollary1(spec, transform, resamples, b.k, b.n, b.m, b.noise, &b.optimization, seed(40 + i))?);
    }
    let finite_specs = [DivergenceSpec::Kl, DivergenceSpec::Tv, DivergenceSpec::ChiSquared, DivergenceSpec::Power { p: 1.5 }, DivergenceSpec::JensenShannon, DivergenceSpec::LeCam];
    let proposition1 = check_proposition1(&finite_specs, b.trials, b.k, b.n, seed(50))?;
    let inequalities = check_der_inequalities(b.trials, b.k, b.n, seed(60))?;
    let kl_probe = if kl_probe { Some(check_metric_axioms(DivergenceSpec::Kl, MetricTransform::Identity, b.trials.max(10), b.k, seed(70))?) } else { None };
    Ok(TheorySuiteReport { budgets: *b, metric_axioms, theorem1, corollary1, proposition1, inequalities, kl_probe })
}
