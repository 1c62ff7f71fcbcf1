//! Datasets: sparse `label idx:val` text, dense CSV, synthetic Gaussian
//! mixtures, labeled/unlabeled/test splits and feature standardization.
//!
//! Training code only ever receives a [`LabeledView`] or an
//! [`UnlabeledView`]; the latter carries features only. True labels of the
//! unlabeled rows live in [`HeldOutLabels`], which evaluation code reads.

use crate::random;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("cannot split {total} rows into {labeled} labeled and {test} test rows")]
    InfeasibleSplit { total: usize, labeled: usize, test: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("unsupported cache version {0}")]
    CacheVersion(u32),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Fully labeled rows with contiguous 0-based class ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Original label of each class id.
    pub label_names: Vec<String>,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        self.labels.iter().for_each(|&y| counts[y] += 1);
        counts
    }

    fn select(&self, rows: &[usize]) -> LabeledData {
        LabeledData {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            k: self.k,
            label_names: self.label_names.clone(),
        }
    }
}

/// Orders raw labels: numerically when every label parses as a number,
/// lexicographically otherwise.
fn remap_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = raw.to_vec();
    names.sort();
    names.dedup();
    if names.iter().all(|n| n.parse::<f64>().is_ok()) {
        names.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let labels = raw.iter().map(|r| index[r.as_str()]).collect();
    (labels, names)
}

/// Parses `<label> <index>:<value> ...` lines with 1-based ascending indices.
/// `dims` fixes the feature count; otherwise the largest index seen is used.
pub fn parse_sparse_dataset<R: BufRead>(input: R, dims: Option<usize>) -> Result<LabeledData> {
    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0;
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| DataError::Parse { line: line_no, message };
        let mut tokens = line.split_whitespace();
        let label = tokens.next().unwrap();
        if label.contains(':') || label.parse::<f64>().is_err() {
            return Err(err(format!("invalid label `{label}`")));
        }
        let mut entries = Vec::new();
        let mut previous = 0;
        for token in tokens {
            let (idx, val) = token.split_once(':').ok_or_else(|| err(format!("expected index:value, got `{token}`")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("invalid index `{idx}`")))?;
            let val: f64 = val.parse().map_err(|_| err(format!("invalid value `{val}`")))?;
            if idx == 0 {
                return Err(err("indices are 1-based".into()));
            }
            if idx <= previous {
                return Err(err(format!("index {idx} does not ascend after {previous}")));
            }
            if !val.is_finite() {
                return Err(err(format!("non-finite value at index {idx}")));
            }
            if let Some(d) = dims {
                if idx > d {
                    return Err(err(format!("index {idx} exceeds {d} features")));
                }
            }
            previous = idx;
            entries.push((idx - 1, val));
        }
        max_index = max_index.max(previous);
        raw_labels.push(label.to_owned());
        rows.push(entries);
    }
    if rows.is_empty() {
        return Err(DataError::Empty);
    }
    let d = dims.unwrap_or(max_index).max(1);
    let mut features = Array2::zeros((rows.len(), d));
    for (r, entries) in rows.iter().enumerate() {
        for &(c, v) in entries {
            features[[r, c]] = v;
        }
    }
    let (labels, label_names) = remap_labels(&raw_labels);
    Ok(LabeledData { features, labels, k: label_names.len(), label_names })
}

/// Parses dense `label,v1,...,vd` rows (no header).
pub fn parse_dense_csv<R: Read>(input: R) -> Result<LabeledData> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut raw_labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| DataError::Parse { line, message: e.to_string() })?;
        let d = record.len().saturating_sub(1);
        if *width.get_or_insert(d) != d || d == 0 {
            return Err(DataError::Parse { line, message: format!("expected {} features, got {d}", width.unwrap()) });
        }
        raw_labels.push(record[0].to_owned());
        for field in record.iter().skip(1) {
            let v: f64 = field.parse().map_err(|_| DataError::Parse { line, message: format!("invalid value `{field}`") })?;
            values.push(v);
        }
    }
    let d = width.ok_or(DataError::Empty)?;
    let features = Array2::from_shape_vec((raw_labels.len(), d), values).expect("row widths checked");
    let (labels, label_names) = remap_labels(&raw_labels);
    Ok(LabeledData { features, labels, k: label_names.len(), label_names })
}

/// Class means: the vertices `±e_i` of the cross-polytope when `k ≤ 2d`,
/// otherwise points of the integer grid `{0, .., s−1}^d` in enumeration order.
pub fn mixture_means(k: usize, d: usize) -> Array2<f64> {
    let mut means = Array2::zeros((k, d));
    if k <= 2 * d {
        for c in 0..k {
            if c < d {
                means[[c, c]] = 1.0;
            } else {
                means[[c, c - d]] = -1.0;
            }
        }
    } else {
        let side = (1..).find(|s: &usize| s.checked_pow(d as u32).is_none_or(|v| v >= k)).unwrap();
        for c in 0..k {
            let mut rest = c;
            for j in 0..d {
                means[[c, j]] = (rest % side) as f64;
                rest /= side;
            }
        }
    }
    means
}

/// Gaussian blobs around [`mixture_means`] with isotropic standard deviation
/// `spread`; `counts[c]` rows for class `c`, rows grouped by class.
pub fn make_synthetic_mixture_counts(counts: &[usize], d: usize, spread: f64, seed: u64) -> Result<LabeledData> {
    let k = counts.len();
    if k < 2 || d == 0 || counts.iter().any(|&c| c == 0) || !(spread.is_finite() && spread >= 0.0) {
        return Err(DataError::InvalidParams(format!("k = {k}, d = {d}, counts = {counts:?}, spread = {spread}")));
    }
    let means = mixture_means(k, d);
    let total: usize = counts.iter().sum();
    let mut rng = random::rng(seed);
    let mut features = Array2::zeros((total, d));
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for (c, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features[[row, j]] = means[[c, j]] + spread * noise;
            }
            labels.push(c);
            row += 1;
        }
    }
    Ok(LabeledData { features, labels, k, label_names: (0..k).map(|c| c.to_string()).collect() })
}

pub fn make_synthetic_mixture(k: usize, d: usize, per_class: usize, spread: f64, seed: u64) -> Result<LabeledData> {
    if per_class == 0 {
        return Err(DataError::InvalidParams("per_class must be >= 1".into()));
    }
    make_synthetic_mixture_counts(&vec![per_class; k], d, spread, seed)
}

/// Split role of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitRole {
    Labeled,
    Unlabeled,
    Test,
}

/// Labeled rows handed to training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledView {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Unlabeled rows handed to training: features only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledView {
    features: Array2<f64>,
}

impl UnlabeledView {
    pub fn new(features: Array2<f64>) -> Self {
        Self { features }
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

/// True labels of the unlabeled rows, for evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutLabels(Vec<usize>);

impl HeldOutLabels {
    pub fn get(&self, i: usize) -> usize {
        self.0[i]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

/// Rows with a split role each. Row order is: labeled, unlabeled, test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    roles: Vec<SplitRole>,
    k: usize,
}

impl SslDataset {
    pub fn from_parts(labeled: &LabeledData, unlabeled: &LabeledData, test: &LabeledData) -> Result<Self> {
        let d = labeled.dim();
        let k = labeled.k.max(unlabeled.k).max(test.k);
        if unlabeled.dim() != d || test.dim() != d {
            return Err(DataError::InvalidParams("feature dimensions differ between parts".into()));
        }
        let features = ndarray::concatenate(
            Axis(0),
            &[labeled.features.view(), unlabeled.features.view(), test.features.view()],
        )
        .expect("same width");
        let labels = [&labeled.labels[..], &unlabeled.labels, &test.labels].concat();
        let roles = [
            vec![SplitRole::Labeled; labeled.len()],
            vec![SplitRole::Unlabeled; unlabeled.len()],
            vec![SplitRole::Test; test.len()],
        ]
        .concat();
        Ok(Self { features, labels, roles, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn roles(&self) -> &[SplitRole] {
        &self.roles
    }

    fn rows(&self, role: SplitRole) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    pub fn count(&self, role: SplitRole) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    pub fn labeled(&self) -> LabeledView {
        let rows = self.rows(SplitRole::Labeled);
        LabeledView { features: self.features.select(Axis(0), &rows), labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    pub fn unlabeled(&self) -> UnlabeledView {
        UnlabeledView { features: self.features.select(Axis(0), &self.rows(SplitRole::Unlabeled)) }
    }

    pub fn test(&self) -> LabeledView {
        let rows = self.rows(SplitRole::Test);
        LabeledView { features: self.features.select(Axis(0), &rows), labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    /// All training rows (labeled and unlabeled) with their true labels.
    pub fn fully_labeled(&self) -> LabeledView {
        let mut rows = self.rows(SplitRole::Labeled);
        rows.extend(self.rows(SplitRole::Unlabeled));
        LabeledView { features: self.features.select(Axis(0), &rows), labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    pub fn held_out_labels(&self) -> HeldOutLabels {
        HeldOutLabels(self.rows(SplitRole::Unlabeled).iter().map(|&r| self.labels[r]).collect())
    }

    /// Undersamples the unlabeled rows so that class `c` keeps
    /// `round(count_c · ratio^(c/(k−1)))` of them (at least one). Labeled and
    /// test rows are untouched.
    pub fn imbalance_unlabeled(&self, ratio: f64, seed: u64) -> Result<SslDataset> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(DataError::InvalidParams(format!("imbalance ratio {ratio} is outside (0, 1]")));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.k];
        for r in self.rows(SplitRole::Unlabeled) {
            by_class[self.labels[r]].push(r);
        }
        let mut rng = random::rng(seed);
        let mut dropped = vec![false; self.roles.len()];
        for (c, rows) in by_class.iter_mut().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let exponent = if self.k > 1 { c as f64 / (self.k - 1) as f64 } else { 0.0 };
            let keep = ((rows.len() as f64 * ratio.powf(exponent)).round() as usize).clamp(1, rows.len());
            rows.shuffle(&mut rng);
            rows[keep..].iter().for_each(|&r| dropped[r] = true);
        }
        let kept: Vec<usize> = (0..self.roles.len()).filter(|&r| !dropped[r]).collect();
        Ok(SslDataset {
            features: self.features.select(Axis(0), &kept),
            labels: kept.iter().map(|&r| self.labels[r]).collect(),
            roles: kept.iter().map(|&r| self.roles[r]).collect(),
            k: self.k,
        })
    }

    /// Unlabeled row counts per class, from the held-out labels.
    pub fn unlabeled_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        self.rows(SplitRole::Unlabeled).iter().for_each(|&r| counts[self.labels[r]] += 1);
        counts
    }

    /// Writes the versioned JSON cache.
    pub fn save_cache<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, &CacheFile { format: CACHE_FORMAT.into(), version: CACHE_VERSION, dataset: self.clone() })?;
        Ok(())
    }

    pub fn load_cache<R: Read>(input: R) -> Result<Self> {
        let file: CacheFile = serde_json::from_reader(input)?;
        if file.format != CACHE_FORMAT || file.version != CACHE_VERSION {
            return Err(DataError::CacheVersion(file.version));
        }
        Ok(file.dataset)
    }
}

const CACHE_FORMAT: &str = "divrisk-dataset";
const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheFile {
    format: String,
    version: u32,
    dataset: SslDataset,
}

/// Splits `data` into labeled, unlabeled and test rows.
///
/// Test rows are drawn uniformly; the labeled rows are drawn per class in
/// round-robin order when `stratified`, which keeps per-class counts within
/// one of each other whenever every class has enough rows.
pub fn split(data: &LabeledData, n_labeled: usize, n_test: usize, seed: u64, stratified: bool) -> Result<SslDataset> {
    let total = data.len();
    if n_labeled == 0 || n_labeled + n_test > total {
        return Err(DataError::InfeasibleSplit { total, labeled: n_labeled, test: n_test });
    }
    let mut rng = random::rng(seed);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng);
    let test: Vec<usize> = order[..n_test].to_vec();
    let pool = &order[n_test..];
    let labeled: Vec<usize> = if stratified {
        let mut per_class: Vec<std::collections::VecDeque<usize>> = vec![Default::default(); data.k];
        for &r in pool {
            per_class[data.labels[r]].push_back(r);
        }
        let mut class_order: Vec<usize> = (0..data.k).collect();
        class_order.shuffle(&mut rng);
        let mut picked = Vec::with_capacity(n_labeled);
        while picked.len() < n_labeled {
            for &c in &class_order {
                if picked.len() == n_labeled {
                    break;
                }
                if let Some(r) = per_class[c].pop_front() {
                    picked.push(r);
                }
            }
        }
        picked
    } else {
        pool[..n_labeled].to_vec()
    };
    let mut is_labeled = vec![false; total];
    labeled.iter().for_each(|&r| is_labeled[r] = true);
    let unlabeled: Vec<usize> = pool.iter().copied().filter(|&r| !is_labeled[r]).collect();
    SslDataset::from_parts(&data.select(&labeled), &data.select(&unlabeled), &data.select(&test))
}

/// Per-dimension standardization `(x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub shift: Array1<f64>,
    pub scale: Array1<f64>,
}

impl AffineTransform {
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.shift) / &self.scale
    }
}

/// Standardizes features with statistics of the training rows (labeled and
/// unlabeled) only; test rows reuse the same transform. Zero-variance
/// dimensions keep scale 1.
pub fn normalize_features(dataset: &SslDataset) -> Result<(SslDataset, AffineTransform)> {
    let train: Vec<usize> = (0..dataset.roles.len()).filter(|&i| dataset.roles[i] != SplitRole::Test).collect();
    if train.is_empty() {
        return Err(DataError::Empty);
    }
    let rows = dataset.features.select(Axis(0), &train);
    let shift = rows.mean_axis(Axis(0)).expect("non-empty");
    let scale = rows.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
    let transform = AffineTransform { shift, scale };
    let mut out = dataset.clone();
    out.features = transform.apply(dataset.features.view());
    Ok((out, transform))
}
