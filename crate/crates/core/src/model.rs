//! Feedforward softmax classifier, SGD with Nesterov momentum and cosine
//! annealing, and Monte Carlo dropout uncertainty.

use crate::divergence::Categorical;
use crate::random::{self, SeedRng};
use crate::risk::{softmax_rows, LabelAssignment, Objective, RiskError};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    InvalidDropout(f64),
    #[error("input has {got} features, model expects {expected}")]
    InputDims { got: usize, expected: usize },
    #[error("input value at row {row}, column {col} is not finite")]
    NonFiniteInput { row: usize, col: usize },
    #[error("Monte Carlo uncertainty needs at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("training set is inconsistent: {0}")]
    InvalidTrainingSet(String),
    #[error("objective is infinite in epoch {epoch} at sample {sample} under {spec}")]
    InfiniteObjective {
        epoch: usize,
        sample: usize,
        spec: crate::divergence::DivergenceSpec,
    },
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Relu => x.max(0.0),
            Self::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Relu => (x > 0.0) as u8 as f64,
            Self::Tanh => 1.0 - y * y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        }
    }
}

/// Network shape and regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: 128, hidden_layers: 2, dropout: 0.2, activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layer {
    /// `fan_in × fan_out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Parameter gradients, laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Layer>,
}

impl Gradients {
    /// Gradient entry in the flat parameter order of [`ClassifierModel::param`].
    pub fn get(&self, index: usize) -> f64 {
        let (l, part, i) = locate(&self.layers, index);
        if part == 0 {
            self.layers[l].weight.as_slice().unwrap()[i]
        } else {
            self.layers[l].bias[i]
        }
    }
}

fn locate(layers: &[Layer], mut index: usize) -> (usize, usize, usize) {
    for (l, layer) in layers.iter().enumerate() {
        if index < layer.weight.len() {
            return (l, 0, index);
        }
        index -= layer.weight.len();
        if index < layer.bias.len() {
            return (l, 1, index);
        }
        index -= layer.bias.len();
    }
    panic!("parameter index out of range");
}

/// Forward-pass mode: dropout active with the supplied generator, or off.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

/// Intermediate values kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input to each layer (the features, then each hidden output after dropout).
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardPass {
    /// Activation pattern of every ReLU unit (true where the pre-activation is positive).
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre.iter().flat_map(|p| p.iter().map(|&x| x > 0.0).collect::<Vec<_>>()).collect()
    }
}

/// Feedforward classifier producing `P_θ(Y | x)` through a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    input_dim: usize,
    classes: usize,
    config: ModelConfig,
    layers: Vec<Layer>,
}

impl ClassifierModel {
    /// Weights uniform in `±1/√fan_in`, zero biases, deterministic in `seed`.
    pub fn new(input_dim: usize, classes: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        if input_dim == 0 || classes < 2 || config.hidden == 0 {
            return Err(ModelError::InvalidDims(format!(
                "d = {input_dim}, k = {classes}, hidden = {}",
                config.hidden
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(ModelError::InvalidDropout(config.dropout));
        }
        let mut rng = random::rng(seed);
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(config.hidden, config.hidden_layers));
        widths.push(classes);
        let layers = widths
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-scale..scale));
                Layer { weight, bias: Array1::zeros(w[1]) }
            })
            .collect();
        Ok(Self { input_dim, classes, config, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// Parameter in flat order: per layer, row-major weights then biases.
    pub fn param(&self, index: usize) -> f64 {
        let (l, part, i) = locate(&self.layers, index);
        if part == 0 {
            self.layers[l].weight.as_slice().unwrap()[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, part, i) = locate(&self.layers, index);
        if part == 0 {
            self.layers[l].weight.as_slice_mut().unwrap()[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }

    fn check_input(&self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(ModelError::InputDims { got: x.ncols(), expected: self.input_dim });
        }
        if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(ModelError::NonFiniteInput { row, col });
        }
        Ok(())
    }

    /// Batched forward pass over the rows of `x`.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>, mut mode: Mode<'_>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let hidden_count = self.layers.len() - 1;
        let keep = 1.0 - self.config.dropout;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden_count);
        let mut post = Vec::with_capacity(hidden_count);
        let mut masks = Vec::with_capacity(hidden_count);
        let mut current = x.to_owned();
        for layer in &self.layers[..hidden_count] {
            let z = current.dot(&layer.weight) + &layer.bias;
            let a = z.mapv(|v| self.config.activation.apply(v));
            let mask = match &mut mode {
                Mode::Train(rng) if self.config.dropout > 0.0 => {
                    Some(Array2::from_shape_simple_fn(a.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }))
                }
                _ => None,
            };
            inputs.push(current);
            current = match &mask {
                Some(m) => &a * m,
                None => a.clone(),
            };
            pre.push(z);
            post.push(a);
            masks.push(mask);
        }
        let last = &self.layers[hidden_count];
        let logits = current.dot(&last.weight) + &last.bias;
        inputs.push(current);
        let probs = softmax_rows(logits.view());
        Ok(ForwardPass { inputs, pre, post, masks, logits, probs })
    }

    /// Single-sample forward pass returning logits and the predicted distribution.
    pub fn forward(&self, x: ArrayView1<'_, f64>, mode: Mode<'_>) -> Result<(Array1<f64>, Categorical)> {
        let pass = self.forward_batch(x.insert_axis(Axis(0)), mode)?;
        let probs = pass.probs.row(0).to_vec();
        Ok((pass.logits.row(0).to_owned(), Categorical::from_vec_unchecked(probs)))
    }

    /// Evaluation-mode class probabilities, one row per input row.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.classes));
        for start in (0..x.nrows()).step_by(4096) {
            let end = (start + 4096).min(x.nrows());
            let pass = self.forward_batch(x.slice(s![start..end, ..]), Mode::Eval)?;
            out.slice_mut(s![start..end, ..]).assign(&pass.probs);
        }
        Ok(out)
    }

    /// Fraction of rows whose argmax prediction equals the label.
    pub fn accuracy(&self, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let probs = self.predict(x)?;
        let correct = probs.outer_iter().zip(labels).filter(|(row, &y)| argmax(row.view()) == y).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Backpropagates a gradient with respect to the logits.
    pub fn backward(&self, pass: &ForwardPass, grad_logits: &Array2<f64>) -> Gradients {
        let mut grads: Vec<Layer> = self.layers.iter().map(Layer::zeros_like).collect();
        let mut g = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            grads[l].weight = pass.inputs[l].t().dot(&g);
            grads[l].bias = g.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut back = g.dot(&self.layers[l].weight.t());
            if let Some(mask) = &pass.masks[l - 1] {
                back *= mask;
            }
            let act = self.config.activation;
            ndarray::Zip::from(&mut back)
                .and(&pass.pre[l - 1])
                .and(&pass.post[l - 1])
                .for_each(|b, &z, &a| *b *= act.derivative(z, a));
            g = back;
        }
        Gradients { layers: grads }
    }

    /// Writes the checkpoint text format (see README).
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "divrisk-checkpoint 1")?;
        writeln!(out, "input {}", self.input_dim)?;
        writeln!(out, "classes {}", self.classes)?;
        writeln!(out, "hidden {} {}", self.config.hidden, self.config.hidden_layers)?;
        writeln!(out, "activation {}", self.config.activation.name())?;
        writeln!(out, "dropout {}", self.config.dropout)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            writeln!(out, "layer {l} {rows} {cols}")?;
            for row in layer.weight.outer_iter() {
                writeln!(out, "{}", join(row.iter()))?;
            }
            writeln!(out, "{}", join(layer.bias.iter()))?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |expect: &str| -> Result<(usize, Vec<String>)> {
            let (no, line) = lines
                .next()
                .ok_or_else(|| ModelError::Checkpoint { line: 0, message: format!("missing {expect}") })?;
            Ok((no, line?.split_whitespace().map(str::to_owned).collect()))
        };
        let bad = |line: usize, message: String| ModelError::Checkpoint { line, message };
        let header = |key: &str, fields: &(usize, Vec<String>)| -> Result<Vec<String>> {
            if fields.1.first().map(String::as_str) != Some(key) {
                return Err(bad(fields.0, format!("expected `{key}`")));
            }
            Ok(fields.1[1..].to_vec())
        };
        let num = |line: usize, s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| bad(line, format!("bad number `{s}`: {e}")))
        };
        let int = |line: usize, s: &str| -> Result<usize> {
            s.parse::<usize>().map_err(|e| bad(line, format!("bad integer `{s}`: {e}")))
        };

        let magic = next("header")?;
        if magic.1 != ["divrisk-checkpoint", "1"] {
            return Err(bad(magic.0, "not a version 1 checkpoint".into()));
        }
        let f = next("input")?;
        let input_dim = int(f.0, &header("input", &f)?[0])?;
        let f = next("classes")?;
        let classes = int(f.0, &header("classes", &f)?[0])?;
        let f = next("hidden")?;
        let h = header("hidden", &f)?;
        let (hidden, hidden_layers) = (int(f.0, &h[0])?, int(f.0, &h[1])?);
        let f = next("activation")?;
        let activation = match header("activation", &f)?[0].as_str() {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(bad(f.0, format!("unknown activation `{other}`"))),
        };
        let f = next("dropout")?;
        let dropout = num(f.0, &header("dropout", &f)?[0])?;
        let config = ModelConfig { hidden, hidden_layers, dropout, activation };
        let mut model = Self::new(input_dim, classes, config, 0)?;
        for l in 0..model.layers.len() {
            let f = next("layer")?;
            let dims = header("layer", &f)?;
            let (rows, cols) = model.layers[l].weight.dim();
            if dims.len() != 3 || int(f.0, &dims[0])? != l || int(f.0, &dims[1])? != rows || int(f.0, &dims[2])? != cols {
                return Err(bad(f.0, format!("expected layer {l} {rows} {cols}")));
            }
            for r in 0..rows {
                let (no, vals) = next("weights")?;
                if vals.len() != cols {
                    return Err(bad(no, format!("expected {cols} weights")));
                }
                for (c, v) in vals.iter().enumerate() {
                    model.layers[l].weight[[r, c]] = num(no, v)?;
                }
            }
            let (no, vals) = next("bias")?;
            if vals.len() != cols {
                return Err(bad(no, format!("expected {cols} biases")));
            }
            for (c, v) in vals.iter().enumerate() {
                model.layers[l].bias[c] = num(no, v)?;
            }
        }
        Ok(model)
    }
}

fn join<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}

pub fn init_model(d: usize, k: usize, hidden: usize, dropout: f64, seed: u64) -> Result<ClassifierModel> {
    ClassifierModel::new(d, k, ModelConfig { hidden, dropout, ..ModelConfig::default() }, seed)
}

/// SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 0.03, momentum: 0.9, nesterov: true, weight_decay: 0.0, epochs: 64, batch_size: 512 }
    }
}

/// Momentum buffers and a cosine-annealed learning rate over a fixed number of steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    total_steps: usize,
    step: usize,
    velocity: Option<Vec<Layer>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, total_steps: usize) -> Self {
        Self { config, total_steps, step: 0, velocity: None }
    }

    /// `lr₀ · ½(1 + cos(π t / T))`, held at 0 once `t ≥ T`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.config.learning_rate;
        }
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.config.learning_rate * 0.5 * (1.0 + (PI * t).cos())
    }

    pub fn current_step(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, model: &mut ClassifierModel, grads: &Gradients) {
        let lr = self.learning_rate_at(self.step);
        let OptimizerConfig { momentum, nesterov, weight_decay, .. } = self.config;
        let velocity = self.velocity.get_or_insert_with(|| model.layers.iter().map(Layer::zeros_like).collect());
        for ((layer, grad), vel) in model.layers.iter_mut().zip(&grads.layers).zip(velocity.iter_mut()) {
            let update = |param: &mut f64, g: f64, v: &mut f64| {
                let g = g + weight_decay * *param;
                *v = momentum * *v + g;
                let step = if nesterov { g + momentum * *v } else { *v };
                *param -= lr * step;
            };
            ndarray::Zip::from(&mut layer.weight)
                .and(&grad.weight)
                .and(&mut vel.weight)
                .for_each(|p, &g, v| update(p, g, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut vel.bias)
                .for_each(|p, &g, v| update(p, g, v));
        }
        self.step += 1;
    }
}

/// Rows to train on: features, optional targets with joint weights, and a
/// flag marking rows that enter the unlabeled regularizers.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: Array2<f64>,
    pub targets: Vec<Option<LabelAssignment>>,
    pub weights: Vec<f64>,
    pub regularized: Vec<bool>,
}

impl TrainingSet {
    fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.targets.len() != n || self.weights.len() != n || self.regularized.len() != n {
            return Err(ModelError::InvalidTrainingSet(format!(
                "{} rows but {} targets, {} weights, {} flags",
                n,
                self.targets.len(),
                self.weights.len(),
                self.regularized.len()
            )));
        }
        if n == 0 {
            return Err(ModelError::InvalidTrainingSet("no rows".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// Mean minibatch objective per epoch.
pub type LossTrace = Vec<f64>;

/// Steps per epoch for `rows` rows.
pub fn steps_per_epoch(rows: usize, batch_size: usize) -> usize {
    rows.div_ceil(batch_size.max(1))
}

/// Minibatch SGD on `objective`. Rows are shuffled each epoch from `seed`;
/// within a minibatch the DER weights are renormalized to sum to one.
pub fn train_epochs(
    model: &mut ClassifierModel,
    objective: &Objective,
    data: &TrainingSet,
    optimizer: &mut OptimizerState,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<LossTrace> {
    objective.validate()?;
    data.validate()?;
    if batch_size == 0 {
        return Err(ModelError::InvalidTrainingSet("batch size must be positive".into()));
    }
    let mut rng = random::rng(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let x = data.features.select(Axis(0), chunk);
            let targets: Vec<Option<&LabelAssignment>> = chunk.iter().map(|&i| data.targets[i].as_ref()).collect();
            let mut weights: Vec<f64> =
                chunk.iter().map(|&i| if data.targets[i].is_some() { data.weights[i] } else { 0.0 }).collect();
            let mass: f64 = weights.iter().sum();
            if mass > 0.0 {
                weights.iter_mut().for_each(|w| *w /= mass);
            }
            let regularized: Vec<bool> = chunk.iter().map(|&i| data.regularized[i]).collect();
            if mass == 0.0 && !regularized.iter().any(|&r| r) {
                continue;
            }
            let pass = model.forward_batch(x.view(), Mode::Train(&mut rng))?;
            let (value, grad) = objective
                .value_and_gradient(pass.logits.view(), &targets, &weights, &regularized)
                .map_err(|e| match e {
                    RiskError::Infinite { spec, row } => ModelError::InfiniteObjective { epoch, sample: chunk[row], spec },
                    other => other.into(),
                })?;
            let grads = model.backward(&pass, &grad);
            optimizer.apply(model, &grads);
            total += value;
            batches += 1;
        }
        trace.push(if batches > 0 { total / batches as f64 } else { 0.0 });
    }
    Ok(trace)
}

/// Monte Carlo dropout uncertainty for each row: the sample standard deviation
/// over `passes` dropout forward passes of the probability assigned to the
/// evaluation-mode argmax class, clipped to `[0, 1]`.
pub fn mc_uncertainty_batch(model: &ClassifierModel, x: ArrayView2<'_, f64>, passes: usize, seed: u64) -> Result<Vec<f64>> {
    if passes < 2 {
        return Err(ModelError::TooFewPasses(passes));
    }
    let eval = model.predict(x)?;
    if model.config.dropout == 0.0 {
        return Ok(vec![0.0; x.nrows()]);
    }
    let classes: Vec<usize> = eval.outer_iter().map(argmax).collect();
    let mut rng = random::rng(seed);
    let mut sum = vec![0.0; x.nrows()];
    let mut sum_sq = vec![0.0; x.nrows()];
    for _ in 0..passes {
        for start in (0..x.nrows()).step_by(4096) {
            let end = (start + 4096).min(x.nrows());
            let pass = model.forward_batch(x.slice(s![start..end, ..]), Mode::Train(&mut rng))?;
            for (offset, row) in pass.probs.outer_iter().enumerate() {
                let i = start + offset;
                let p = row[classes[i]];
                sum[i] += p;
                sum_sq[i] += p * p;
            }
        }
    }
    let t = passes as f64;
    Ok(sum
        .iter()
        .zip(&sum_sq)
        .map(|(&s, &sq)| {
            let var = ((sq - s * s / t) / (t - 1.0)).max(0.0);
            var.sqrt().clamp(0.0, 1.0)
        })
        .collect())
}

pub fn mc_uncertainty(model: &ClassifierModel, x: ArrayView1<'_, f64>, passes: usize, seed: u64) -> Result<f64> {
    Ok(mc_uncertainty_batch(model, x.insert_axis(Axis(0)), passes, seed)?[0])
}
