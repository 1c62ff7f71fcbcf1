//! Experiment configuration and the scenario runner.
//!
//! A configuration is a TOML file. Relative dataset paths resolve against the
//! directory of the file. Each seed produces one [`RunRecord`]; records and
//! per-iteration lines are written as JSON lines, wall times go to a
//! separate file so the metrics file is byte-identical across re-runs.

use crate::data::{self, DataError, LabeledView, SslDataset, UnlabeledView};
use crate::divergence::DivergenceSpec;
use crate::model::{ModelConfig, OptimizerConfig};
use crate::random::derive_seed;
use crate::risk::RegularizationWeights;
use crate::selftrain::{self, BetaChoice, Evaluation, IterationMetrics, SelectionThresholds, SelfTrainConfig, SelfTrainError};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("{path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("{path}: {error}")]
    Io { path: PathBuf, error: std::io::Error },
    #[error("{path}: {error}")]
    Data { path: String, error: DataError },
    #[error(transparent)]
    SelfTrain(#[from] SelfTrainError),
    #[error("line {line}: {error}")]
    Record { line: usize, error: serde_json::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn config_error(path: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config { path: path.into(), message: message.into() }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |error| ExperimentError::Io { path: path.to_owned(), error }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Labeled rows only.
    Sl,
    DpSsl,
    DemSsl,
    /// Labeled and unlabeled rows with their true labels.
    Fsl,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Sl => "SL",
            Scenario::DpSsl => "DP-SSL",
            Scenario::DemSsl => "DEM-SSL",
            Scenario::Fsl => "FSL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Gaussian mixture with either `per_class` rows per class or `total` rows
    /// spread as evenly as possible; the generation seed is derived from
    /// `seed` and the run seed.
    Synthetic {
        classes: usize,
        dims: usize,
        #[serde(default)]
        per_class: usize,
        #[serde(default)]
        total: usize,
        spread: f64,
        seed: u64,
    },
    /// `label index:value ...` text.
    Sparse { path: PathBuf, dims: Option<usize> },
    /// `label,v1,...,vd` rows.
    Csv { path: PathBuf },
    /// Dataset cache with fixed splits.
    Cache { path: PathBuf },
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Labeled rows (ignored for caches).
    #[serde(default)]
    pub labeled: usize,
    /// Test rows (ignored for caches).
    #[serde(default)]
    pub test: usize,
    #[serde(default = "default_true")]
    pub stratified: bool,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Ratio between the last and first class sizes of the unlabeled pool.
    #[serde(default = "default_one")]
    pub unlabeled_imbalance: f64,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_iterations() -> usize {
    5
}

fn default_beta() -> BetaChoice {
    BetaChoice::Auto
}

fn default_passes() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub scenario: Scenario,
    /// Column label in tables; defaults to the scenario name.
    #[serde(default)]
    pub label: Option<String>,
    pub divergence: DivergenceSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_beta")]
    pub beta: BetaChoice,
    #[serde(default = "default_true")]
    pub balance: bool,
    #[serde(default)]
    pub pseudo_noise: f64,
    #[serde(default = "default_passes")]
    pub mc_passes: usize,
    /// Required for DP-SSL.
    #[serde(default)]
    pub thresholds: Option<SelectionThresholds>,
    /// Required for DEM-SSL.
    #[serde(default)]
    pub regularization: Option<RegularizationWeights>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_error(path))?;
        let mut config: Self = toml::from_str(&text)?;
        if let Some(base) = path.parent() {
            match &mut config.dataset.source {
                DataSource::Sparse { path, .. } | DataSource::Csv { path } | DataSource::Cache { path } if path.is_relative() => {
                    *path = base.join(&*path);
                }
                _ => {}
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Column label used in tables.
    pub fn column(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.scenario.to_string())
    }

    /// Checks ranges and scenario-required sections; errors carry field paths.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if self.iterations == 0 {
            return Err(config_error("iterations", "must be >= 1"));
        }
        self.divergence.validate().map_err(|e| config_error("divergence", e.to_string()))?;
        if let BetaChoice::Fixed(b) = self.beta {
            if !(0.0..=1.0).contains(&b) {
                return Err(config_error("beta.fixed", format!("{b} is outside [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.pseudo_noise) {
            return Err(config_error("pseudo_noise", format!("{} is outside [0, 1]", self.pseudo_noise)));
        }
        match (self.scenario, &self.thresholds) {
            (Scenario::DpSsl, None) => return Err(config_error("thresholds", "required for dp-ssl")),
            (_, Some(t)) => {
                for (name, v) in [("tau_p", t.tau_p), ("kappa_p", t.kappa_p)] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(config_error(&format!("thresholds.{name}"), format!("{v} is outside [0, 1]")));
                    }
                }
                if t.use_uncertainty && self.mc_passes < 2 {
                    return Err(config_error("mc_passes", "the uncertainty gate needs at least 2 passes"));
                }
            }
            _ => {}
        }
        match (self.scenario, &self.regularization) {
            (Scenario::DemSsl, None) => return Err(config_error("regularization", "required for dem-ssl")),
            (_, Some(r)) => {
                for (name, v) in [("lambda_h", r.lambda_h), ("lambda_u", r.lambda_u)] {
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(config_error(&format!("regularization.{name}"), format!("{v} must be finite and >= 0")));
                    }
                }
            }
            _ => {}
        }
        let m = &self.model;
        if m.hidden == 0 {
            return Err(config_error("model.hidden", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(config_error("model.dropout", format!("{} is outside [0, 1)", m.dropout)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate.is_finite() && o.learning_rate > 0.0) {
            return Err(config_error("optimizer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(config_error("optimizer.momentum", "must be in [0, 1)"));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(config_error("optimizer.weight_decay", "must be >= 0"));
        }
        if o.batch_size == 0 {
            return Err(config_error("optimizer.batch_size", "must be >= 1"));
        }
        let d = &self.dataset;
        if !(d.unlabeled_imbalance > 0.0 && d.unlabeled_imbalance <= 1.0) {
            return Err(config_error("dataset.unlabeled_imbalance", "must be in (0, 1]"));
        }
        if !matches!(d.source, DataSource::Cache { .. }) && d.labeled == 0 {
            return Err(config_error("dataset.labeled", "must be >= 1"));
        }
        if let DataSource::Synthetic { classes, dims, per_class, total, spread, .. } = d.source {
            if classes < 2 {
                return Err(config_error("dataset.source.classes", "must be >= 2"));
            }
            if dims == 0 {
                return Err(config_error("dataset.source.dims", "must be >= 1"));
            }
            if (per_class == 0) == (total == 0) {
                return Err(config_error("dataset.source", "set exactly one of per_class and total"));
            }
            if total != 0 && total < classes {
                return Err(config_error("dataset.source.total", "must be >= classes"));
            }
            if !(spread.is_finite() && spread >= 0.0) {
                return Err(config_error("dataset.source.spread", "must be >= 0"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form without `name`, `label` and `seeds`.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("struct");
        for key in ["name", "label", "seeds"] {
            map.remove(key);
        }
        // serde_json maps are key-sorted, which makes the text canonical
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn self_train_config(&self, seed: u64) -> SelfTrainConfig {
        SelfTrainConfig {
            iterations: self.iterations,
            thresholds: self.thresholds.unwrap_or_default(),
            beta: self.beta,
            reg: self.regularization.unwrap_or_default(),
            spec: self.divergence,
            model: self.model,
            optimizer: self.optimizer,
            balance: self.balance,
            mc_passes: self.mc_passes,
            pseudo_noise: self.pseudo_noise,
            seed,
        }
    }
}

fn read_labeled(source: &DataSource) -> Result<data::LabeledData> {
    let open = |path: &Path| File::open(path).map_err(io_error(path));
    let data_error = |path: &Path| {
        let path = path.display().to_string();
        move |error| ExperimentError::Data { path, error }
    };
    match source {
        DataSource::Sparse { path, dims } => data::parse_sparse_dataset(BufReader::new(open(path)?), *dims).map_err(data_error(path)),
        DataSource::Csv { path } => data::parse_dense_csv(open(path)?).map_err(data_error(path)),
        _ => unreachable!("file sources only"),
    }
}

/// The dataset of one run: generated or read, split with `seed`, optionally
/// made imbalanced and standardized.
pub fn load_dataset(config: &DatasetConfig, seed: u64) -> Result<SslDataset> {
    let split = |labeled: &data::LabeledData| {
        data::split(labeled, config.labeled, config.test, seed, config.stratified)
            .map_err(|error| ExperimentError::Data { path: "dataset".into(), error })
    };
    let mut ds = match &config.source {
        DataSource::Synthetic { classes, dims, per_class, total, spread, seed: data_seed } => {
            let counts: Vec<usize> = if *total == 0 {
                vec![*per_class; *classes]
            } else {
                (0..*classes).map(|c| total / classes + usize::from(c < total % classes)).collect()
            };
            let labeled = data::make_synthetic_mixture_counts(&counts, *dims, *spread, derive_seed(*data_seed, seed))
                .map_err(|error| ExperimentError::Data { path: "dataset.source".into(), error })?;
            split(&labeled)?
        }
        DataSource::Sparse { .. } | DataSource::Csv { .. } => split(&read_labeled(&config.source)?)?,
        DataSource::Cache { path } => {
            let file = File::open(path).map_err(io_error(path))?;
            SslDataset::load_cache(BufReader::new(file)).map_err(|error| ExperimentError::Data { path: path.display().to_string(), error })?
        }
    };
    if config.unlabeled_imbalance < 1.0 {
        ds = ds
            .imbalance_unlabeled(config.unlabeled_imbalance, derive_seed(seed, 0x1B))
            .map_err(|error| ExperimentError::Data { path: "dataset.unlabeled_imbalance".into(), error })?;
    }
    if config.normalize {
        ds = data::normalize_features(&ds).map_err(|error| ExperimentError::Data { path: "dataset".into(), error })?.0;
    }
    Ok(ds)
}

/// Outcome of one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub name: String,
    pub scenario: Scenario,
    pub column: String,
    pub divergence: DivergenceSpec,
    pub seed: u64,
    pub iterations: Vec<IterationMetrics>,
    pub final_test_accuracy: f64,
    pub final_train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_secs: f64,
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum MetricsLine {
    Iteration { config_hash: String, seed: u64, metrics: IterationMetrics },
    Run(RunRecord),
}

/// Mean and sample standard deviation of final test accuracy, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let count = values.len();
        if count == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, count };
        }
        let mean = values.iter().sum::<f64>() / count as f64;
        let std = if count > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt() } else { 0.0 };
        Self { mean, std, count }
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.std)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub records: Vec<RunRecord>,
    pub timings: Vec<RunTiming>,
}

impl ExperimentOutcome {
    pub fn summary(&self) -> Summary {
        Summary::of(&self.records.iter().map(|r| 100.0 * r.final_test_accuracy).collect::<Vec<_>>())
    }
}

/// Runs one seed of the configured scenario.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<(RunRecord, RunTiming)> {
    config.validate()?;
    let start = Instant::now();
    let ds = load_dataset(&config.dataset, seed)?;
    let k = ds.k();
    let test = ds.test();
    let held_out = ds.held_out_labels();
    let st = config.self_train_config(seed);
    let output = match config.scenario {
        Scenario::Sl => selftrain::dp_ssl(&ds.labeled(), &ds.unlabeled(), k, &SelfTrainConfig { iterations: 1, ..st }, Evaluation { held_out: None, test: Some(&test) })?,
        Scenario::Fsl => {
            let all: LabeledView = ds.fully_labeled();
            let none = UnlabeledView::new(Array2::zeros((0, ds.dim())));
            selftrain::dp_ssl(&all, &none, k, &SelfTrainConfig { iterations: 1, ..st }, Evaluation { held_out: None, test: Some(&test) })?
        }
        Scenario::DpSsl => selftrain::dp_ssl(&ds.labeled(), &ds.unlabeled(), k, &st, Evaluation { held_out: Some(&held_out), test: Some(&test) })?,
        Scenario::DemSsl => selftrain::dem_ssl(&ds.labeled(), &ds.unlabeled(), k, &st, Evaluation { held_out: Some(&held_out), test: Some(&test) })?,
    };
    let last = output.final_metrics().clone();
    let hash = config.hash();
    let record = RunRecord {
        config_hash: hash.clone(),
        name: config.name.clone(),
        scenario: config.scenario,
        column: config.column(),
        divergence: config.divergence,
        seed,
        final_test_accuracy: last.test_accuracy.unwrap_or(f64::NAN),
        final_train_accuracy: last.train_accuracy,
        iterations: output.metrics,
    };
    Ok((record, RunTiming { config_hash: hash, seed, wall_time_secs: start.elapsed().as_secs_f64() }))
}

/// Runs every configured seed in order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut records = Vec::with_capacity(config.seeds.len());
    let mut timings = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (record, timing) = run_seed(config, seed)?;
        records.push(record);
        timings.push(timing);
    }
    Ok(ExperimentOutcome { records, timings })
}

/// Metrics lines of `records`: per-iteration lines, then the run line, per seed.
pub fn metrics_lines(records: &[RunRecord]) -> Vec<MetricsLine> {
    records
        .iter()
        .flat_map(|r| {
            r.iterations
                .iter()
                .map(|m| MetricsLine::Iteration { config_hash: r.config_hash.clone(), seed: r.seed, metrics: m.clone() })
                .chain(std::iter::once(MetricsLine::Run(r.clone())))
        })
        .collect()
}

pub fn write_jsonl<W: Write, T: Serialize>(mut out: W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n").map_err(io_error(Path::new("<output>")))?;
    }
    out.flush().map_err(io_error(Path::new("<output>")))?;
    Ok(())
}

/// Run records of a metrics file; iteration lines are skipped.
pub fn read_run_records<R: BufRead>(input: R) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(io_error(Path::new("<input>")))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line).map_err(|error| ExperimentError::Record { line: i + 1, error })? {
            MetricsLine::Run(r) => records.push(r),
            MetricsLine::Iteration { .. } => {}
        }
    }
    Ok(records)
}

/// Paths written by [`write_outcome`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub metrics: PathBuf,
    pub timing: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<name>.metrics.jsonl`, `<name>.timing.jsonl` and
/// `<name>.summary.txt` into `dir`.
pub fn write_outcome(dir: &Path, config: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<OutputFiles> {
    std::fs::create_dir_all(dir).map_err(io_error(dir))?;
    let files = OutputFiles {
        metrics: dir.join(format!("{}.metrics.jsonl", config.name)),
        timing: dir.join(format!("{}.timing.jsonl", config.name)),
        summary: dir.join(format!("{}.summary.txt", config.name)),
    };
    let create = |path: &Path| File::create(path).map(BufWriter::new).map_err(io_error(path));
    write_jsonl(create(&files.metrics)?, &metrics_lines(&outcome.records))?;
    write_jsonl(create(&files.timing)?, &outcome.timings)?;
    let line = format!("{}\t{}\t{}\t{} ({} seeds)\n", config.name, config.column(), config.divergence, outcome.summary(), outcome.records.len());
    std::fs::write(&files.summary, line).map_err(io_error(&files.summary))?;
    Ok(files)
}
