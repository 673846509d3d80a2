//! Tabular datasets, stratified splitting, standardisation and forget-set
//! construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, purpose};

/// Minimum forget-set size, regardless of fraction.
pub const FORGET_FLOOR: usize = 10;
/// Smallest dataset the full protocol accepts.
pub const MIN_PROTOCOL_RECORDS: usize = 50;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class {class} has only {count} record(s); need at least 2")]
    DegenerateClass { class: u8, count: usize },
    #[error("parse error at row {row}, column '{column}': {message}")]
    ParseError {
        row: usize,
        column: String,
        message: String,
    },
    #[error("label column has {0} distinct values and binarisation is strict")]
    NonBinaryLabel(usize),
    #[error("label column '{0}' not found in header")]
    MissingLabelColumn(String),
    #[error("dataset '{name}' is unusable: {reason}")]
    InvalidDataset { name: String, reason: String },
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("training set has {0} records; need more than {FORGET_FLOOR}")]
    TrainTooSmall(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Binary-labelled tabular data, `n × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub name: String,
    features: Vec<f64>,
    labels: Vec<u8>,
    n_features: usize,
    /// Records planted by the synthetic generator to be memorised.
    planted: Vec<usize>,
}

impl TabularDataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        labels: Vec<u8>,
        n_features: usize,
    ) -> Result<Self, DataError> {
        let name = name.into();
        let invalid = |reason: String| DataError::InvalidDataset {
            name: name.clone(),
            reason,
        };
        if n_features == 0 || labels.is_empty() {
            return Err(invalid("empty dataset".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(invalid(format!(
                "{} feature values for {} records of width {n_features}",
                features.len(),
                labels.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature".into()));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(invalid("labels must be 0 or 1".into()));
        }
        Ok(Self {
            name,
            features,
            labels,
            n_features,
            planted: Vec::new(),
        })
    }

    pub fn n_records(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.n_features..(r + 1) * self.n_features]
    }

    pub fn planted(&self) -> &[usize] {
        &self.planted
    }

    pub fn class_counts(&self) -> [usize; 2] {
        let mut c = [0usize; 2];
        for &y in &self.labels {
            c[y as usize] += 1;
        }
        c
    }

    /// Checks the requirements of the full train/unlearn protocol: both
    /// classes present and at least 50 records.
    pub fn validate_for_protocol(&self) -> Result<(), DataError> {
        let counts = self.class_counts();
        if counts.contains(&0) {
            return Err(DataError::InvalidDataset {
                name: self.name.clone(),
                reason: "only one class present".into(),
            });
        }
        if self.n_records() < MIN_PROTOCOL_RECORDS {
            return Err(DataError::InvalidDataset {
                name: self.name.clone(),
                reason: format!(
                    "{} records; the protocol needs at least {MIN_PROTOCOL_RECORDS}",
                    self.n_records()
                ),
            });
        }
        Ok(())
    }

    /// Content fingerprint over name, shape, features and labels.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::with_capacity(self.features.len() * 8 + self.labels.len() + 64);
        buf.extend_from_slice(self.name.as_bytes());
        buf.extend_from_slice(&(self.n_features as u64).to_le_bytes());
        for v in &self.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&self.labels);
        rng::fingerprint(&buf)
    }

    /// Gathers feature rows for `idx` into a fresh row-major buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.n_features);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn gather_labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Same records with standardised features.
    pub fn standardized(&self, std: &Standardizer) -> Self {
        Self {
            name: self.name.clone(),
            features: std.apply(&self.features),
            labels: self.labels.clone(),
            n_features: self.n_features,
            planted: self.planted.clone(),
        }
    }
}

/// Retain / forget / test index sets over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
    pub test: Vec<usize>,
    pub ff: f64,
    pub split_seed: u64,
    pub forget_seed: u64,
}

impl PartitionSpec {
    /// Sorted `retain ∪ forget`.
    pub fn train(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.retain.iter().chain(&self.forget).copied().collect();
        t.sort_unstable();
        t
    }

    pub fn n_records(&self) -> usize {
        self.retain.len() + self.forget.len() + self.test.len()
    }

    /// Sorts the sets, then checks pairwise disjointness and that the three
    /// sets cover exactly `0..n_records`.
    pub fn validate(&mut self, n_records: usize) -> Result<(), DataError> {
        self.retain.sort_unstable();
        self.forget.sort_unstable();
        self.test.sort_unstable();
        if !(self.ff > 0.0 && self.ff < 1.0) {
            return Err(DataError::BadFraction(self.ff));
        }
        let mut seen = vec![false; n_records];
        for (set, label) in [
            (&self.retain, "retain"),
            (&self.forget, "forget"),
            (&self.test, "test"),
        ] {
            for &i in set.iter() {
                if i >= n_records {
                    return Err(DataError::InvalidPartition(format!(
                        "{label} index {i} out of range for {n_records} records"
                    )));
                }
                if seen[i] {
                    return Err(DataError::InvalidPartition(format!(
                        "record {i} appears in more than one set ({label})"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DataError::InvalidPartition(format!(
                "record {missing} belongs to no set"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, DataError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str, n_records: usize) -> Result<Self, DataError> {
        let mut p: Self = serde_json::from_str(s)?;
        p.validate(n_records)?;
        Ok(p)
    }
}

/// Per-class stratified split; returns sorted `(train, test)`.
pub fn stratified_split(
    ds: &TabularDataset,
    test_frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(DataError::BadFraction(test_frac));
    }
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y as usize].push(i);
    }
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < 2 {
            return Err(DataError::DegenerateClass {
                class: class as u8,
                count: idx.len(),
            });
        }
    }
    let mut rng = rng::keyed_stream(purpose::SPLIT, &ds.name, seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut idx in by_class {
        rng::shuffle(&mut rng, &mut idx);
        let n_test = ((test_frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// `max(10, ⌊ff·n⌋)`.
pub fn forget_set_size(n_train: usize, ff: f64) -> usize {
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let raw = (ff * n_train as f64 + 1e-9).floor() as usize;
    raw.max(FORGET_FLOOR)
}

/// Draws the forget set from `train_idx` without replacement. Returns sorted
/// `(retain, forget)`. The draw depends only on `(scope, seed, train_idx, ff)`,
/// so every method and training seed sharing those inputs sees the same set.
pub fn sample_forget_set(
    scope: &str,
    train_idx: &[usize],
    ff: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(ff > 0.0 && ff < 1.0) {
        return Err(DataError::BadFraction(ff));
    }
    if train_idx.len() <= FORGET_FLOOR {
        return Err(DataError::TrainTooSmall(train_idx.len()));
    }
    let mut sorted = train_idx.to_vec();
    sorted.sort_unstable();
    let k = forget_set_size(sorted.len(), ff).min(sorted.len() - 1);
    let mut rng = rng::keyed_stream(purpose::FORGET, scope, seed);
    let picks = rng::sample_positions(&mut rng, sorted.len(), k);
    let mut is_forget = vec![false; sorted.len()];
    for p in picks {
        is_forget[p] = true;
    }
    let (mut forget, mut retain) = (Vec::with_capacity(k), Vec::new());
    for (pos, &i) in sorted.iter().enumerate() {
        if is_forget[pos] {
            forget.push(i);
        } else {
            retain.push(i);
        }
    }
    Ok((retain, forget))
}

/// Split, then sample the forget set, producing a validated partition.
pub fn build_partition(
    ds: &TabularDataset,
    test_frac: f64,
    ff: f64,
    split_seed: u64,
    forget_seed: u64,
) -> Result<PartitionSpec, DataError> {
    let (train, test) = stratified_split(ds, test_frac, split_seed)?;
    let (retain, forget) = sample_forget_set(&ds.name, &train, ff, forget_seed)?;
    let mut p = PartitionSpec {
        retain,
        forget,
        test,
        ff,
        split_seed,
        forget_seed,
    };
    p.validate(ds.n_records())?;
    Ok(p)
}

/// Per-feature affine standardiser fitted on a training partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Fingerprint of the index set the fit used.
    pub fitted_on: u64,
}

impl Standardizer {
    /// Population (1/n) moments over `train_idx`. Features whose spread is
    /// below the floor get unit scale, so they map to zero on the training
    /// data and stay finite elsewhere.
    pub fn fit(ds: &TabularDataset, train_idx: &[usize]) -> Result<Self, DataError> {
        if train_idx.is_empty() {
            return Err(DataError::InvalidPartition("empty training set".into()));
        }
        let d = ds.n_features();
        let n = train_idx.len() as f64;
        let mut means = vec![0.0; d];
        let mut stds = vec![0.0; d];
        for j in 0..d {
            let first = ds.row(train_idx[0])[j];
            if train_idx.iter().all(|&i| ds.row(i)[j] == first) {
                means[j] = first;
                stds[j] = 1.0;
                continue;
            }
            let mean = train_idx.iter().map(|&i| ds.row(i)[j]).sum::<f64>() / n;
            let var = train_idx
                .iter()
                .map(|&i| {
                    let c = ds.row(i)[j] - mean;
                    c * c
                })
                .sum::<f64>()
                / n;
            means[j] = mean;
            let sd = var.sqrt();
            stds[j] = if sd < STD_FLOOR { 1.0 } else { sd };
        }
        Ok(Self {
            means,
            stds,
            fitted_on: rng::fingerprint_indices(train_idx),
        })
    }

    /// Transforms a row-major feature buffer of matching width.
    pub fn apply(&self, features: &[f64]) -> Vec<f64> {
        let d = self.means.len();
        assert_eq!(features.len() % d, 0, "feature width mismatch");
        features
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                let j = k % d;
                (v - self.means[j]) / self.stds[j]
            })
            .collect()
    }
}

/// How a label column with more than two values is reduced to two classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Binarization {
    /// Fail on anything but two distinct labels.
    Strict,
    /// The most frequent label becomes class 0, all others class 1.
    #[default]
    MajorityVsRest,
    /// The named label becomes class 0, all others class 1.
    OneVsRest(String),
}

/// Reads a headed CSV; every column except `label_column` is a numeric
/// feature. Row order is preserved.
pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    rule: &Binarization,
) -> Result<TabularDataset, DataError> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_pos = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| DataError::MissingLabelColumn(label_column.to_string()))?;
    let d = headers.len() - 1;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        for (col, cell) in rec.iter().enumerate() {
            if col == label_pos {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|e| DataError::ParseError {
                row,
                column: headers[col].to_string(),
                message: format!("{e}"),
            })?;
            if !v.is_finite() {
                return Err(DataError::ParseError {
                    row,
                    column: headers[col].to_string(),
                    message: format!("non-finite value '{}'", cell.trim()),
                });
            }
            features.push(v);
        }
    }
    let labels = binarize(&raw_labels, rule)?;
    TabularDataset::new(name, features, labels, d)
}

fn binarize(raw: &[String], rule: &Binarization) -> Result<Vec<u8>, DataError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in raw {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    if counts.len() <= 2 {
        let keys: Vec<&str> = counts.keys().copied().collect();
        // "0"/"1" map to themselves; other pairs map in lexical order.
        let zero = if keys.contains(&"0") && (keys.len() == 1 || keys.contains(&"1")) {
            "0"
        } else {
            keys.first().copied().unwrap_or("")
        };
        if keys.len() == 1 && keys[0] == "1" {
            return Ok(vec![1; raw.len()]);
        }
        return Ok(raw.iter().map(|l| u8::from(l != zero)).collect());
    }
    let zero_class = match rule {
        Binarization::Strict => return Err(DataError::NonBinaryLabel(counts.len())),
        Binarization::OneVsRest(c) => c.clone(),
        Binarization::MajorityVsRest => counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
            .map(|(k, _)| k.to_string())
            .unwrap(),
    };
    Ok(raw.iter().map(|l| u8::from(*l != zero_class)).collect())
}

/// Parameters of the two-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// Distance between the two class means.
    pub class_sep: f64,
    /// Fraction of records placed in small, isolated, label-scrambled
    /// near-duplicate clusters that can only be fitted by memorisation.
    #[serde(default)]
    pub memorization_strength: f64,
    pub seed: u64,
}

const PLANTED_CLUSTER: usize = 3;
const PLANTED_JITTER: f64 = 0.05;
const PLANTED_OFFSET: f64 = 3.0;

/// Two Gaussian blobs with optional planted memorisation clusters.
pub fn make_synthetic(name: &str, spec: &SyntheticSpec) -> Result<TabularDataset, DataError> {
    use rand::Rng;
    let SyntheticSpec {
        n, d, class_sep, ..
    } = *spec;
    if n < 2 || d == 0 {
        return Err(DataError::InvalidDataset {
            name: name.into(),
            reason: "need n >= 2 and d >= 1".into(),
        });
    }
    let mut rng = rng::keyed_stream(purpose::SYNTHETIC, name, spec.seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    rng::shuffle(&mut rng, &mut labels);

    let axis = 1.0 / (d as f64).sqrt();
    let mut features = Vec::with_capacity(n * d);
    for &y in &labels {
        let shift = if y == 1 { 0.5 } else { -0.5 } * class_sep * axis;
        for _ in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(z + shift);
        }
    }

    let n_planted = ((spec.memorization_strength.clamp(0.0, 1.0) * n as f64).round() as usize)
        / PLANTED_CLUSTER
        * PLANTED_CLUSTER;
    let mut planted = Vec::with_capacity(n_planted);
    if n_planted > 0 {
        let mut picks = rng::sample_positions(&mut rng, n, n_planted);
        picks.sort_unstable();
        rng::shuffle(&mut rng, &mut picks);
        for cluster in picks.chunks(PLANTED_CLUSTER) {
            let centre: Vec<f64> = (0..d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * PLANTED_OFFSET
                })
                .collect();
            let label = u8::from(rng.random_bool(0.5));
            for &r in cluster {
                labels[r] = label;
                for (j, c) in centre.iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    features[r * d + j] = c + PLANTED_JITTER * z;
                }
            }
            planted.extend_from_slice(cluster);
        }
        planted.sort_unstable();
    }
    let mut ds = TabularDataset::new(name, features, labels, d)?;
    ds.planted = planted;
    Ok(ds)
}
