//! Self-training loops.
//!
//! [`dp_ssl`] is the pseudo-labeling loop: a warm-up on labeled rows, then
//! per iteration a confidence/uncertainty gate over every unlabeled row,
//! accumulation into the pseudo-labeled set, class balancing and retraining
//! of a freshly initialized model. [`dem_ssl`] replaces the gate with the
//! previous model's soft predictions plus the entropy regularizers.

use crate::data::{HeldOutLabels, LabeledView, UnlabeledView};
use crate::divergence::{self, Categorical, DivergenceSpec};
use crate::model::{
    self, ClassifierModel, ModelConfig, ModelError, OptimizerConfig, OptimizerState, TrainingSet,
};
use crate::random::{self, derive_seed};
use crate::risk::{LabelAssignment, Objective, RegularizationWeights, RiskError};
use ndarray::{Array2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelfTrainError {
    #[error("threshold {name} = {value} is outside [0, 1]")]
    Threshold { name: &'static str, value: f64 },
    #[error("iterations must be >= 1")]
    NoIterations,
    #[error("beta = {0} is outside [0, 1]")]
    Beta(f64),
    #[error("noise rate {0} is outside [0, 1]")]
    NoiseRate(f64),
    #[error("no labeled rows")]
    NoLabeledRows,
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("features have {got} columns, expected {expected}")]
    FeatureDims { got: usize, expected: usize },
    #[error("uncertainty gate needs at least 2 dropout passes, got {0}")]
    Passes(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

pub type Result<T> = std::result::Result<T, SelfTrainError>;

/// Gate parameters: confidence floor `tau_p` and uncertainty ceiling `kappa_p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionThresholds {
    pub tau_p: f64,
    pub kappa_p: f64,
    pub use_uncertainty: bool,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        Self { tau_p: 0.7, kappa_p: 0.005, use_uncertainty: false }
    }
}

impl SelectionThresholds {
    pub fn new(tau_p: f64, kappa_p: f64, use_uncertainty: bool) -> Result<Self> {
        let t = Self { tau_p, kappa_p, use_uncertainty };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("tau_p", self.tau_p), ("kappa_p", self.kappa_p)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(SelfTrainError::Threshold { name, value });
            }
        }
        Ok(())
    }

    /// `1[confidence ≥ τ_p] · 1[uncertainty ≤ κ_p]`, the second factor only
    /// when the uncertainty gate is on.
    pub fn passes(&self, confidence: f64, uncertainty: Option<f64>) -> bool {
        confidence >= self.tau_p && (!self.use_uncertainty || uncertainty.is_some_and(|u| u <= self.kappa_p))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    /// Row of the unlabeled view.
    pub index: usize,
    pub class: usize,
    pub confidence: f64,
    /// Present when the uncertainty gate was evaluated.
    pub uncertainty: Option<f64>,
    /// Iteration that produced the label.
    pub iteration: usize,
}

/// Pseudo-labeled rows keyed by unlabeled row index, one entry per row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoLabeledSet {
    entries: BTreeMap<usize, PseudoLabel>,
}

impl PseudoLabeledSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &PseudoLabel> {
        self.entries.values()
    }

    pub fn get(&self, index: usize) -> Option<&PseudoLabel> {
        self.entries.get(&index)
    }

    /// Adds `other`; an entry for an already present row replaces it.
    pub fn merge(&mut self, other: PseudoLabeledSet) {
        self.entries.extend(other.entries);
    }

    /// Entry counts per class (length `k`).
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0; k];
        self.entries().for_each(|e| counts[e.class] += 1);
        counts
    }

    /// Fraction of entries whose class equals the held-out truth.
    pub fn precision(&self, truth: &HeldOutLabels) -> Option<f64> {
        if self.is_empty() {
            return None;
        }
        let correct = self.entries().filter(|e| truth.get(e.index) == e.class).count();
        Some(correct as f64 / self.len() as f64)
    }
}

impl FromIterator<PseudoLabel> for PseudoLabeledSet {
    fn from_iter<I: IntoIterator<Item = PseudoLabel>>(iter: I) -> Self {
        Self { entries: iter.into_iter().map(|e| (e.index, e)).collect() }
    }
}

/// Applies the gate to every unlabeled row. Uncertainty is estimated with
/// `passes` dropout passes.
pub fn select_pseudo_labels(
    model: &ClassifierModel,
    unlabeled: &UnlabeledView,
    thresholds: &SelectionThresholds,
    passes: usize,
    seed: u64,
    iteration: usize,
) -> Result<PseudoLabeledSet> {
    thresholds.validate()?;
    if unlabeled.is_empty() {
        return Ok(PseudoLabeledSet::default());
    }
    let probs = model.predict(unlabeled.features())?;
    let candidates: Vec<(usize, usize, f64)> = probs
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let class = model::argmax(row);
            (i, class, row[class])
        })
        .filter(|&(_, _, confidence)| confidence >= thresholds.tau_p)
        .collect();
    let uncertainty: Vec<Option<f64>> = if thresholds.use_uncertainty && !candidates.is_empty() {
        if passes < 2 {
            return Err(SelfTrainError::Passes(passes));
        }
        // every row, so that a row's estimate does not depend on the candidate set
        let all = model::mc_uncertainty_batch(model, unlabeled.features(), passes, seed)?;
        candidates.iter().map(|c| Some(all[c.0])).collect()
    } else {
        vec![None; candidates.len()]
    };
    Ok(candidates
        .into_iter()
        .zip(uncertainty)
        .filter(|&((_, _, confidence), u)| thresholds.passes(confidence, u))
        .map(|((index, class, confidence), uncertainty)| PseudoLabel { index, class, confidence, uncertainty, iteration })
        .collect())
}

/// Undersamples every represented class to the smallest represented count.
pub fn balance(pseudo: &PseudoLabeledSet, seed: u64) -> PseudoLabeledSet {
    let mut by_class: BTreeMap<usize, Vec<PseudoLabel>> = BTreeMap::new();
    for e in pseudo.entries() {
        by_class.entry(e.class).or_default().push(*e);
    }
    let Some(min) = by_class.values().map(Vec::len).min() else {
        return PseudoLabeledSet::default();
    };
    let mut rng = random::rng(seed);
    by_class
        .into_values()
        .flat_map(|entries| {
            let mut kept: Vec<PseudoLabel> = entries.choose_multiple(&mut rng, min).copied().collect();
            kept.sort_by_key(|e| e.index);
            kept
        })
        .collect()
}

/// Replaces each label, with probability `rate`, by a uniformly drawn
/// different class.
pub fn inject_label_noise(labels: &[usize], rate: f64, k: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(SelfTrainError::NoiseRate(rate));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= k) {
        return Err(SelfTrainError::LabelOutOfRange { label, k });
    }
    let mut rng = random::rng(seed);
    Ok(labels
        .iter()
        .map(|&y| {
            if k < 2 || !rng.random_bool(rate) {
                return y;
            }
            let other = rng.random_range(0..k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        })
        .collect())
}

/// Noisy copy of a pseudo-labeled set, see [`inject_label_noise`].
pub fn inject_pseudo_label_noise(pseudo: &PseudoLabeledSet, rate: f64, k: usize, seed: u64) -> Result<PseudoLabeledSet> {
    let labels: Vec<usize> = pseudo.entries().map(|e| e.class).collect();
    let noisy = inject_label_noise(&labels, rate, k, seed)?;
    Ok(pseudo.entries().zip(noisy).map(|(e, class)| PseudoLabel { class, ..*e }).collect())
}

/// Weight of the labeled part of the joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetaChoice {
    /// `n / (n + m)` with `m` the number of pseudo-labeled rows in training.
    Auto,
    Fixed(f64),
}

impl BetaChoice {
    /// β for `n` labeled and `m` pseudo-labeled rows; 1 when `m = 0`.
    pub fn resolve(&self, n: usize, m: usize) -> f64 {
        if m == 0 {
            return 1.0;
        }
        match *self {
            BetaChoice::Auto => n as f64 / (n + m) as f64,
            BetaChoice::Fixed(b) => b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfTrainConfig {
    pub iterations: usize,
    pub thresholds: SelectionThresholds,
    pub beta: BetaChoice,
    pub reg: RegularizationWeights,
    pub spec: DivergenceSpec,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub balance: bool,
    /// Dropout passes for the uncertainty estimate.
    pub mc_passes: usize,
    /// Label noise injected into the pseudo-labels used for training.
    pub pseudo_noise: f64,
    pub seed: u64,
}

impl Default for SelfTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5,
            thresholds: SelectionThresholds::default(),
            beta: BetaChoice::Auto,
            reg: RegularizationWeights::default(),
            spec: DivergenceSpec::Kl,
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            balance: true,
            mc_passes: 10,
            pseudo_noise: 0.0,
            seed: 1,
        }
    }
}

impl SelfTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(SelfTrainError::NoIterations);
        }
        self.thresholds.validate()?;
        if let BetaChoice::Fixed(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(SelfTrainError::Beta(b));
            }
        }
        if !(0.0..=1.0).contains(&self.pseudo_noise) {
            return Err(SelfTrainError::NoiseRate(self.pseudo_noise));
        }
        self.spec.validate().map_err(RiskError::from)?;
        Objective::new(self.spec, self.reg).validate()?;
        Ok(())
    }
}

/// Evaluation-only inputs; never reach the training objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct Evaluation<'a> {
    pub held_out: Option<&'a HeldOutLabels>,
    pub test: Option<&'a LabeledView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    /// 1-based; iteration 1 is the warm-up.
    pub iteration: usize,
    /// Size of the accumulated pseudo-labeled set before balancing.
    pub pseudo_total: usize,
    /// Pseudo-labeled rows used for training.
    pub pseudo_trained: usize,
    /// Rows newly accepted by the gate in this iteration.
    pub pseudo_selected: usize,
    /// Precision of the accumulated set against held-out labels.
    pub pseudo_precision: Option<f64>,
    /// Precision of this iteration's gate output.
    pub selected_precision: Option<f64>,
    pub beta: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Mean minibatch objective of the final epoch.
    pub objective: f64,
    /// `D(P̄ || Unif)` of the model's mean prediction over unlabeled rows.
    pub marginal_divergence: Option<f64>,
    /// Set when the gate accepted nothing and training used labeled rows only.
    pub labeled_only: bool,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutput {
    pub model: ClassifierModel,
    pub metrics: Vec<IterationMetrics>,
    pub pseudo: PseudoLabeledSet,
}

impl SelfTrainOutput {
    pub fn final_metrics(&self) -> &IterationMetrics {
        self.metrics.last().expect("at least one iteration")
    }
}

fn check_inputs(labeled: &LabeledView, unlabeled: &UnlabeledView, k: usize) -> Result<()> {
    if labeled.is_empty() {
        return Err(SelfTrainError::NoLabeledRows);
    }
    if let Some(&label) = labeled.labels.iter().find(|&&y| y >= k) {
        return Err(SelfTrainError::LabelOutOfRange { label, k });
    }
    let d = labeled.features.ncols();
    if !unlabeled.is_empty() && unlabeled.features().ncols() != d {
        return Err(SelfTrainError::FeatureDims { got: unlabeled.features().ncols(), expected: d });
    }
    Ok(())
}

// Seed streams per iteration.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_SELECT: u64 = 2;
const STREAM_BALANCE: u64 = 3;
const STREAM_NOISE: u64 = 4;

fn stream(seed: u64, iteration: usize, kind: u64) -> u64 {
    derive_seed(derive_seed(seed, iteration as u64), kind)
}

/// Fresh model trained on `set` with a per-iteration cosine schedule.
fn train_fresh(config: &SelfTrainConfig, objective: &Objective, set: &TrainingSet, k: usize, iteration: usize) -> Result<(ClassifierModel, f64)> {
    let d = set.features.ncols();
    let mut model = ClassifierModel::new(d, k, config.model, stream(config.seed, iteration, STREAM_INIT))?;
    let opt = config.optimizer;
    let total = opt.epochs * model::steps_per_epoch(set.len(), opt.batch_size);
    let mut state = OptimizerState::new(opt, total);
    let trace = model::train_epochs(
        &mut model,
        objective,
        set,
        &mut state,
        opt.epochs,
        opt.batch_size,
        stream(config.seed, iteration, STREAM_SHUFFLE),
    )?;
    Ok((model, trace.last().copied().unwrap_or(0.0)))
}

fn labeled_rows(labeled: &LabeledView, weight: f64) -> TrainingSet {
    let n = labeled.len();
    TrainingSet {
        features: labeled.features.clone(),
        targets: labeled.labels.iter().map(|&y| Some(LabelAssignment::Hard(y))).collect(),
        weights: vec![weight; n],
        regularized: vec![false; n],
    }
}

fn append(set: &mut TrainingSet, features: Array2<f64>, targets: Vec<Option<LabelAssignment>>, weight: f64, regularized: bool) {
    let m = features.nrows();
    set.features = ndarray::concatenate(Axis(0), &[set.features.view(), features.view()]).expect("same width");
    set.targets.extend(targets);
    set.weights.extend(std::iter::repeat_n(weight, m));
    set.regularized.extend(std::iter::repeat_n(regularized, m));
}

struct Evaluator<'a> {
    eval: Evaluation<'a>,
    labeled: &'a LabeledView,
    unlabeled: &'a UnlabeledView,
    spec: DivergenceSpec,
}

impl Evaluator<'_> {
    fn accuracies(&self, model: &ClassifierModel) -> Result<(f64, Option<f64>)> {
        let train = model.accuracy(self.labeled.features.view(), &self.labeled.labels)?;
        let test = match self.eval.test {
            Some(t) if !t.is_empty() => Some(model.accuracy(t.features.view(), &t.labels)?),
            _ => None,
        };
        Ok((train, test))
    }

    fn marginal_divergence(&self, probs: Option<&Array2<f64>>) -> Option<f64> {
        let probs = probs?;
        let k = probs.ncols();
        let mean = probs.mean_axis(Axis(0))?;
        let mean = Categorical::new(mean.to_vec()).ok()?;
        divergence::divergence(self.spec, &mean, &Categorical::uniform(k).ok()?).ok()
    }

    fn unlabeled_probs(&self, model: &ClassifierModel) -> Result<Option<Array2<f64>>> {
        if self.unlabeled.is_empty() {
            return Ok(None);
        }
        Ok(Some(model.predict(self.unlabeled.features())?))
    }
}

/// Pseudo-labeling self-training. Iteration 1 trains on `labeled` only.
pub fn dp_ssl(labeled: &LabeledView, unlabeled: &UnlabeledView, k: usize, config: &SelfTrainConfig, eval: Evaluation<'_>) -> Result<SelfTrainOutput> {
    config.validate()?;
    check_inputs(labeled, unlabeled, k)?;
    let evaluator = Evaluator { eval, labeled, unlabeled, spec: config.spec };
    let objective = Objective::new(config.spec, RegularizationWeights::default());
    let n = labeled.len();

    let (mut model, objective_value) = train_fresh(config, &objective, &labeled_rows(labeled, 1.0 / n as f64), k, 1)?;
    let (train_accuracy, test_accuracy) = evaluator.accuracies(&model)?;
    let mut metrics = vec![IterationMetrics {
        iteration: 1,
        pseudo_total: 0,
        pseudo_trained: 0,
        pseudo_selected: 0,
        pseudo_precision: None,
        selected_precision: None,
        beta: 1.0,
        train_accuracy,
        test_accuracy,
        objective: objective_value,
        marginal_divergence: evaluator.marginal_divergence(evaluator.unlabeled_probs(&model)?.as_ref()),
        labeled_only: true,
    }];
    let mut accumulated = PseudoLabeledSet::default();

    for iteration in 2..=config.iterations {
        let selected = select_pseudo_labels(
            &model,
            unlabeled,
            &config.thresholds,
            config.mc_passes,
            stream(config.seed, iteration, STREAM_SELECT),
            iteration,
        )?;
        let pseudo_selected = selected.len();
        let selected_precision = eval.held_out.and_then(|t| selected.precision(t));
        accumulated.merge(selected);
        let mut training = if config.balance {
            balance(&accumulated, stream(config.seed, iteration, STREAM_BALANCE))
        } else {
            accumulated.clone()
        };
        if config.pseudo_noise > 0.0 {
            training = inject_pseudo_label_noise(&training, config.pseudo_noise, k, stream(config.seed, iteration, STREAM_NOISE))?;
        }
        let m = training.len();
        let beta = config.beta.resolve(n, m);
        let mut set = labeled_rows(labeled, beta / n as f64);
        if m > 0 {
            let rows: Vec<usize> = training.entries().map(|e| e.index).collect();
            let targets = training.entries().map(|e| Some(LabelAssignment::Hard(e.class))).collect();
            append(&mut set, unlabeled.features().select(Axis(0), &rows), targets, (1.0 - beta) / m as f64, false);
        }
        let (next, objective_value) = train_fresh(config, &objective, &set, k, iteration)?;
        model = next;
        let (train_accuracy, test_accuracy) = evaluator.accuracies(&model)?;
        metrics.push(IterationMetrics {
            iteration,
            pseudo_total: accumulated.len(),
            pseudo_trained: m,
            pseudo_selected,
            pseudo_precision: eval.held_out.and_then(|t| accumulated.precision(t)),
            selected_precision,
            beta,
            train_accuracy,
            test_accuracy,
            objective: objective_value,
            marginal_divergence: evaluator.marginal_divergence(evaluator.unlabeled_probs(&model)?.as_ref()),
            labeled_only: m == 0,
        });
    }
    Ok(SelfTrainOutput { model, metrics, pseudo: accumulated })
}

/// Entropy-minimization self-training: after the warm-up, every unlabeled row
/// carries the previous model's prediction as a soft label and enters the
/// D-entropy and mean-prediction regularizers.
pub fn dem_ssl(labeled: &LabeledView, unlabeled: &UnlabeledView, k: usize, config: &SelfTrainConfig, eval: Evaluation<'_>) -> Result<SelfTrainOutput> {
    config.validate()?;
    check_inputs(labeled, unlabeled, k)?;
    let evaluator = Evaluator { eval, labeled, unlabeled, spec: config.spec };
    let n = labeled.len();
    let m = unlabeled.len();

    let warm_up = Objective::new(config.spec, RegularizationWeights::default());
    let (mut model, objective_value) = train_fresh(config, &warm_up, &labeled_rows(labeled, 1.0 / n as f64), k, 1)?;
    let (train_accuracy, test_accuracy) = evaluator.accuracies(&model)?;
    let mut probs = evaluator.unlabeled_probs(&model)?;
    let mut metrics = vec![IterationMetrics {
        iteration: 1,
        pseudo_total: 0,
        pseudo_trained: 0,
        pseudo_selected: 0,
        pseudo_precision: None,
        selected_precision: None,
        beta: 1.0,
        train_accuracy,
        test_accuracy,
        objective: objective_value,
        marginal_divergence: evaluator.marginal_divergence(probs.as_ref()),
        labeled_only: true,
    }];
    let objective = Objective::new(config.spec, config.reg);

    for iteration in 2..=config.iterations {
        let beta = config.beta.resolve(n, m);
        let mut set = labeled_rows(labeled, beta / n as f64);
        let mut precision = None;
        if let Some(p) = &probs {
            let soft: Vec<Option<LabelAssignment>> = p
                .outer_iter()
                .map(|row| Some(LabelAssignment::Soft(Categorical::new(row.to_vec()).expect("softmax row"))))
                .collect();
            if let Some(truth) = eval.held_out {
                let correct = p.outer_iter().enumerate().filter(|(i, row)| model::argmax(row.view()) == truth.get(*i)).count();
                precision = Some(correct as f64 / m as f64);
            }
            append(&mut set, unlabeled.features().to_owned(), soft, (1.0 - beta) / m as f64, true);
        }
        let (next, objective_value) = train_fresh(config, &objective, &set, k, iteration)?;
        model = next;
        let (train_accuracy, test_accuracy) = evaluator.accuracies(&model)?;
        probs = evaluator.unlabeled_probs(&model)?;
        metrics.push(IterationMetrics {
            iteration,
            pseudo_total: m,
            pseudo_trained: m,
            pseudo_selected: m,
            pseudo_precision: precision,
            selected_precision: precision,
            beta,
            train_accuracy,
            test_accuracy,
            objective: objective_value,
            marginal_divergence: evaluator.marginal_divergence(probs.as_ref()),
            labeled_only: m == 0,
        });
    }
    Ok(SelfTrainOutput { model, metrics, pseudo: PseudoLabeledSet::default() })
}
