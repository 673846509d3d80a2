//! Tabular MLP (`d → 128 → 128 → 2`, ReLU, dropout 0.2 after each ReLU),
//! full-batch Adam training, the five unlearning procedures, penultimate
//! embedding extraction, and a finite-difference gradient check.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PartitionSpec, TabularDataset};
use crate::embedding::{EmbeddingError, EmbeddingMatrix, ModelRole};
use crate::rng::{self, purpose, KeyedRng};
use crate::scalar::Scalar;

pub const HIDDEN: usize = 128;
pub const N_CLASSES: usize = 2;
pub const DROPOUT_RATE: f64 = 0.2;

pub const RULM_MAGIC: &[u8; 4] = b"RULM";
pub const RULM_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("unlearning must start from the original model, got {0:?}")]
    WrongStartingModel(ModelKind),
    #[error("feature width {got} does not match model input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("{0} is not an unlearning procedure")]
    NotAMethod(Method),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("bad model file: {0}")]
    Format(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Original,
    Oracle,
    Unlearned,
    RandomTeacher,
    Loaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "GA", alias = "GradientAscent")]
    GradientAscent,
    #[serde(rename = "NegGradPlus", alias = "NG+")]
    NegGradPlus,
    #[serde(rename = "FineTune", alias = "FT")]
    FineTune,
    #[serde(rename = "SCRUB")]
    Scrub,
    #[serde(rename = "BadTeacher")]
    BadTeacher,
    /// Control: the oracle itself stands in for the unlearned model.
    #[serde(rename = "OracleControl")]
    OracleControl,
    /// Embeddings supplied by an outside pipeline.
    #[serde(rename = "External")]
    External,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::GradientAscent,
        Method::NegGradPlus,
        Method::FineTune,
        Method::Scrub,
        Method::BadTeacher,
    ];

    pub fn default_epochs(self) -> usize {
        match self {
            Method::GradientAscent => 5,
            Method::OracleControl | Method::External => 0,
            _ => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::GradientAscent => "GA",
            Method::NegGradPlus => "NegGradPlus",
            Method::FineTune => "FineTune",
            Method::Scrub => "SCRUB",
            Method::BadTeacher => "BadTeacher",
            Method::OracleControl => "OracleControl",
            Method::External => "External",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown method '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 50,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn fingerprint(&self) -> u64 {
        rng::fingerprint(serde_json::to_string(self).unwrap().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub method: Method,
    #[serde(default = "default_unlearn_lr")]
    pub lr: f64,
    /// Overrides the per-method default (GA 5, others 10).
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_unlearn_seed")]
    pub unlearn_seed: u64,
    #[serde(default = "default_unlearn_seed")]
    pub teacher_seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

fn default_unlearn_lr() -> f64 {
    5e-4
}
fn default_alpha() -> f64 {
    0.6
}
fn default_temperature() -> f64 {
    2.0
}
fn default_unlearn_seed() -> u64 {
    100
}

impl UnlearnConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            lr: default_unlearn_lr(),
            epochs: None,
            alpha: default_alpha(),
            temperature: default_temperature(),
            unlearn_seed: default_unlearn_seed(),
            teacher_seed: default_unlearn_seed(),
            adam: AdamConfig::default(),
        }
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or_else(|| self.method.default_epochs())
    }
}

/// Weights and biases; `w*` are `(fan_in, fan_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S: Scalar> {
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
    pub w3: Array2<S>,
    pub b3: Array1<S>,
}

impl<S: Scalar> MlpParams<S> {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Array2::zeros((d, HIDDEN)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w3: Array2::zeros((HIDDEN, N_CLASSES)),
            b3: Array1::zeros(N_CLASSES),
        }
    }

    pub fn n_features(&self) -> usize {
        self.w1.nrows()
    }

    pub fn slices(&self) -> [&[S]; 6] {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [S]; 6] {
        [
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> MlpParams<T> {
        let c2 = |a: &Array2<S>| a.mapv(|v| T::of(v.as_f64()));
        let c1 = |a: &Array1<S>| a.mapv(|v| T::of(v.as_f64()));
        MlpParams {
            w1: c2(&self.w1),
            b1: c1(&self.b1),
            w2: c2(&self.w2),
            b2: c1(&self.b2),
            w3: c2(&self.w3),
            b3: c1(&self.b3),
        }
    }

    fn add_scaled(&mut self, other: &Self, k: S) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + k * y;
            }
        }
    }

    /// Bytes of every parameter in f64 LE, layer by layer.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::with_capacity(self.n_params() * 8);
        for s in self.slices() {
            for v in s {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        rng::fingerprint(&buf)
    }
}

/// Bias-corrected Adam state over a full parameter set.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    cfg: AdamConfig,
    m: MlpParams<S>,
    v: MlpParams<S>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(d: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: MlpParams::zeros(d),
            v: MlpParams::zeros(d),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams<S>, grads: &MlpParams<S>, lr: f64) {
        self.t += 1;
        let b1 = S::of(self.cfg.beta1);
        let b2 = S::of(self.cfg.beta2);
        let one = S::one();
        let bc1 = S::of(1.0 - self.cfg.beta1.powi(self.t));
        let bc2 = S::of(1.0 - self.cfg.beta2.powi(self.t));
        let lr = S::of(lr);
        let eps = S::of(self.cfg.eps);
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in params
            .slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(ms)
            .zip(vs)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<S: Scalar> {
    pub params: MlpParams<S>,
    pub dropout_rate: f64,
    pub init_seed: u64,
    pub kind: ModelKind,
}

/// Intermediate activations kept for the backward pass.
struct Forward<S: Scalar> {
    z1: Array2<S>,
    a1: Array2<S>,
    mask1: Option<Array2<S>>,
    z2: Array2<S>,
    h: Array2<S>,
    mask2: Option<Array2<S>>,
    logits: Array2<S>,
}

fn relu<S: Scalar>(z: &Array2<S>) -> Array2<S> {
    z.mapv(|v| if v > S::zero() { v } else { S::zero() })
}

fn dropout_mask<S: Scalar>(shape: (usize, usize), rate: f64, rng: &mut KeyedRng) -> Array2<S> {
    let keep = 1.0 - rate;
    let scale = S::of(1.0 / keep);
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < keep {
            scale
        } else {
            S::zero()
        }
    })
}

/// Row-wise softmax of `logits / temperature`, in f64.
pub fn softmax_t<S: Scalar>(logits: &Array2<S>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v.as_f64() / temperature);
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax of `logits / temperature`.
fn log_softmax_t<S: Scalar>(logits: &Array2<S>, temperature: f64) -> Array2<f64> {
    let mut out = logits.mapv(|v| v.as_f64() / temperature);
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean cross-entropy and its gradient w.r.t. logits.
pub fn cross_entropy<S: Scalar>(logits: &Array2<S>, labels: &[u8]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let logp = log_softmax_t(logits, 1.0);
    let mut grad = logp.mapv(f64::exp);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp[[i, y as usize]];
        grad[[i, y as usize]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

/// Temperature-softened distillation loss `T² · mean KL(teacher ‖ student)`
/// and its gradient w.r.t. student logits, `T (p_s − p_t) / n`.
pub fn distill_kl<S: Scalar>(
    student_logits: &Array2<S>,
    teacher_probs: &Array2<f64>,
    temperature: f64,
) -> (f64, Array2<f64>) {
    let n = student_logits.nrows() as f64;
    let log_ps = log_softmax_t(student_logits, temperature);
    let mut kl = 0.0;
    Zip::from(&log_ps).and(teacher_probs).for_each(|&lp, &pt| {
        if pt > 0.0 {
            kl += pt * (pt.ln() - lp);
        }
    });
    let mut grad = log_ps.mapv(f64::exp) - teacher_probs;
    grad.mapv_inplace(|g| g * temperature / n);
    (temperature * temperature * kl / n, grad)
}

/// Per-record cross-entropy.
pub fn per_record_ce<S: Scalar>(logits: &Array2<S>, labels: &[u8]) -> Vec<f64> {
    let logp = log_softmax_t(logits, 1.0);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -logp[[i, y as usize]])
        .collect()
}

/// Which records a loss term ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Retain,
    Forget,
}

#[derive(Debug, Clone)]
pub enum TermKind {
    CrossEntropy,
    /// Match the given teacher probabilities (already softened at `temperature`).
    Distill {
        teacher_probs: Array2<f64>,
        temperature: f64,
    },
}

/// One weighted term of a full-batch objective; negative weights ascend.
#[derive(Debug, Clone)]
pub struct Term {
    pub subset: Subset,
    pub weight: f64,
    pub kind: TermKind,
}

/// Features and labels for one subset, laid out for the forward pass.
#[derive(Debug, Clone)]
pub struct Batch<S: Scalar> {
    pub x: Array2<S>,
    pub y: Vec<u8>,
}

impl<S: Scalar> Batch<S> {
    pub fn from_dataset(ds: &TabularDataset, idx: &[usize]) -> Self {
        let d = ds.n_features();
        let x = Array2::from_shape_vec((idx.len(), d), ds.gather(idx))
            .expect("shape")
            .mapv(S::of);
        Self {
            x,
            y: ds.gather_labels(idx),
        }
    }

    pub fn from_rows(features: &[f64], labels: Vec<u8>, d: usize) -> Self {
        let n = labels.len();
        let x = Array2::from_shape_vec((n, d), features.to_vec())
            .expect("shape")
            .mapv(S::of);
        Self { x, y: labels }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

impl<S: Scalar> Mlp<S> {
    /// Uniform `±1/√fan_in` initialisation for weights and biases from the
    /// `(init, scope, seed)` stream.
    pub fn init(n_features: usize, scope: &str, seed: u64) -> Self {
        let mut rng = rng::keyed_stream(purpose::INIT, scope, seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                S::of(rng.random_range(-bound..bound))
            });
            let b =
                Array1::from_shape_simple_fn(fan_out, || S::of(rng.random_range(-bound..bound)));
            (w, b)
        };
        let (w1, b1) = layer(n_features, HIDDEN);
        let (w2, b2) = layer(HIDDEN, HIDDEN);
        let (w3, b3) = layer(HIDDEN, N_CLASSES);
        Self {
            params: MlpParams {
                w1,
                b1,
                w2,
                b2,
                w3,
                b3,
            },
            dropout_rate: DROPOUT_RATE,
            init_seed: seed,
            kind: ModelKind::Original,
        }
    }

    pub fn with_kind(mut self, kind: ModelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn n_features(&self) -> usize {
        self.params.n_features()
    }

    pub fn cast<T: Scalar>(&self) -> Mlp<T> {
        Mlp {
            params: self.params.cast(),
            dropout_rate: self.dropout_rate,
            init_seed: self.init_seed,
            kind: self.kind,
        }
    }

    fn forward(&self, x: &Array2<S>, dropout: Option<&mut KeyedRng>) -> Forward<S> {
        let p = &self.params;
        let n = x.nrows();
        let z1 = x.dot(&p.w1) + &p.b1;
        let mut a1 = relu(&z1);
        let (mask1, mask2) = match dropout {
            Some(rng) => (
                Some(dropout_mask((n, HIDDEN), self.dropout_rate, rng)),
                Some(dropout_mask((n, HIDDEN), self.dropout_rate, rng)),
            ),
            None => (None, None),
        };
        if let Some(m) = &mask1 {
            a1 = a1 * m;
        }
        let z2 = a1.dot(&p.w2) + &p.b2;
        let h = relu(&z2);
        let hd = match &mask2 {
            Some(m) => &h * m,
            None => h.clone(),
        };
        let logits = hd.dot(&p.w3) + &p.b3;
        Forward {
            z1,
            a1,
            mask1,
            z2,
            h,
            mask2,
            logits,
        }
    }

    fn backward(&self, x: &Array2<S>, fw: &Forward<S>, dlogits: &Array2<f64>) -> MlpParams<S> {
        let p = &self.params;
        let dl = dlogits.mapv(S::of);
        let hd = match &fw.mask2 {
            Some(m) => &fw.h * m,
            None => fw.h.clone(),
        };
        let dw3 = hd.t().dot(&dl);
        let db3 = dl.sum_axis(Axis(0));
        let mut dh = dl.dot(&p.w3.t());
        if let Some(m) = &fw.mask2 {
            dh = dh * m;
        }
        let dz2 = Zip::from(&dh)
            .and(&fw.z2)
            .map_collect(|&g, &z| if z > S::zero() { g } else { S::zero() });
        let dw2 = fw.a1.t().dot(&dz2);
        let db2 = dz2.sum_axis(Axis(0));
        let mut da1 = dz2.dot(&p.w2.t());
        if let Some(m) = &fw.mask1 {
            da1 = da1 * m;
        }
        let dz1 =
            Zip::from(&da1)
                .and(&fw.z1)
                .map_collect(|&g, &z| if z > S::zero() { g } else { S::zero() });
        let dw1 = x.t().dot(&dz1);
        let db1 = dz1.sum_axis(Axis(0));
        MlpParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
            w3: dw3,
            b3: db3,
        }
    }

    /// Eval-mode logits (dropout off).
    pub fn logits(&self, x: &Array2<S>) -> Array2<S> {
        self.forward(x, None).logits
    }

    /// Eval-mode penultimate activations (output of the second ReLU).
    pub fn penultimate(&self, x: &Array2<S>) -> Array2<S> {
        self.forward(x, None).h
    }

    pub fn predict(&self, x: &Array2<S>) -> Vec<u8> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| u8::from(r[1] > r[0]))
            .collect()
    }

    pub fn losses(&self, batch: &Batch<S>) -> Vec<f64> {
        per_record_ce(&self.logits(&batch.x), &batch.y)
    }

    /// Eval-mode mean cross-entropy and parameter gradient.
    pub fn ce_gradient(&self, batch: &Batch<S>) -> (f64, MlpParams<S>) {
        let fw = self.forward(&batch.x, None);
        let (loss, dl) = cross_entropy(&fw.logits, &batch.y);
        (loss, self.backward(&batch.x, &fw, &dl))
    }

    /// Loss and gradient of a weighted multi-term objective. Each subset is
    /// forwarded once, with fresh dropout masks when `dropout` is given.
    pub fn objective_gradient(
        &self,
        batches: &[(Subset, &Batch<S>)],
        terms: &[Term],
        mut dropout: Option<&mut KeyedRng>,
    ) -> (f64, MlpParams<S>) {
        let mut total = 0.0;
        let mut grads = MlpParams::zeros(self.n_features());
        for &(subset, batch) in batches {
            let active: Vec<&Term> = terms.iter().filter(|t| t.subset == subset).collect();
            if active.is_empty() || batch.is_empty() {
                continue;
            }
            let fw = self.forward(&batch.x, dropout.as_deref_mut());
            let mut dl = Array2::<f64>::zeros(fw.logits.raw_dim());
            for term in active {
                let (loss, g) = match &term.kind {
                    TermKind::CrossEntropy => cross_entropy(&fw.logits, &batch.y),
                    TermKind::Distill {
                        teacher_probs,
                        temperature,
                    } => distill_kl(&fw.logits, teacher_probs, *temperature),
                };
                total += term.weight * loss;
                dl.scaled_add(term.weight, &g);
            }
            let g = self.backward(&batch.x, &fw, &dl);
            grads.add_scaled(&g, S::one());
        }
        (total, grads)
    }

    /// Eval-mode penultimate embeddings for every record of `features`
    /// (row-major, width `n_features`), un-normalised, stored as f32.
    pub fn extract_embeddings(
        &self,
        features: &[f64],
        role: ModelRole,
    ) -> Result<EmbeddingMatrix<f32>, TrainError> {
        let d = self.n_features();
        if !features.len().is_multiple_of(d) {
            return Err(TrainError::WidthMismatch {
                expected: d,
                got: features.len(),
            });
        }
        let n = features.len() / d;
        let x = Array2::from_shape_vec((n, d), features.to_vec())
            .expect("shape")
            .mapv(S::of);
        let h = self.penultimate(&x);
        let data: Vec<f32> = h.iter().map(|v| v.as_f64() as f32).collect();
        Ok(EmbeddingMatrix::new(n, HIDDEN, data, role)?)
    }
}

fn check_width(ds: &TabularDataset, d: usize) -> Result<(), TrainError> {
    if ds.n_features() != d {
        return Err(TrainError::WidthMismatch {
            expected: d,
            got: ds.n_features(),
        });
    }
    Ok(())
}

/// Full-batch Adam minimisation of a fixed objective.
fn optimise<S: Scalar>(
    model: &mut Mlp<S>,
    batches: &[(Subset, &Batch<S>)],
    terms: &[Term],
    epochs: usize,
    lr: f64,
    adam: &AdamConfig,
    mut dropout: KeyedRng,
) -> Result<Vec<f64>, TrainError> {
    let mut opt = Adam::new(model.n_features(), adam.clone());
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let (loss, grads) = model.objective_gradient(batches, terms, Some(&mut dropout));
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        opt.step(&mut model.params, &grads, lr);
        trace.push(loss);
    }
    Ok(trace)
}

/// Trains a fresh model on `train_idx`. The initial weights depend only on
/// `(dataset name, feature width, init_seed)`, so an original model and an
/// oracle trained on its retain subset from the same seed start identical.
pub fn train<S: Scalar>(
    ds: &TabularDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<Mlp<S>, TrainError> {
    Ok(train_with_trace(ds, train_idx, cfg, init_seed)?.0)
}

/// As [`train`], also returning the per-epoch training loss.
pub fn train_with_trace<S: Scalar>(
    ds: &TabularDataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<(Mlp<S>, Vec<f64>), TrainError> {
    if train_idx.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    let mut model = Mlp::init(ds.n_features(), &ds.name, init_seed);
    let batch = Batch::from_dataset(ds, train_idx);
    let terms = [Term {
        subset: Subset::Retain,
        weight: 1.0,
        kind: TermKind::CrossEntropy,
    }];
    let dropout = rng::keyed_stream(purpose::DROPOUT, &ds.name, init_seed);
    let trace = optimise(
        &mut model,
        &[(Subset::Retain, &batch)],
        &terms,
        cfg.epochs,
        cfg.lr,
        &cfg.adam,
        dropout,
    )?;
    Ok((model, trace))
}

/// The objective each method minimises, as weighted terms.
fn method_terms<S: Scalar>(
    original: &Mlp<S>,
    ds: &TabularDataset,
    retain: &Batch<S>,
    forget: &Batch<S>,
    cfg: &UnlearnConfig,
) -> Vec<Term> {
    let a = cfg.alpha;
    let t = cfg.temperature;
    let ce = |subset, weight| Term {
        subset,
        weight,
        kind: TermKind::CrossEntropy,
    };
    let distill = |teacher: &Mlp<S>, batch: &Batch<S>, subset, weight| Term {
        subset,
        weight,
        kind: TermKind::Distill {
            teacher_probs: softmax_t(&teacher.logits(&batch.x), t),
            temperature: t,
        },
    };
    match cfg.method {
        Method::GradientAscent => vec![ce(Subset::Forget, -1.0)],
        Method::NegGradPlus => vec![ce(Subset::Retain, a), ce(Subset::Forget, -(1.0 - a))],
        Method::FineTune => vec![ce(Subset::Retain, 1.0)],
        Method::Scrub => vec![
            distill(original, retain, Subset::Retain, a),
            ce(Subset::Retain, a),
            distill(original, forget, Subset::Forget, -(1.0 - a)),
        ],
        Method::BadTeacher => {
            // Scope is prefixed so the teacher never coincides with a trained model's init.
            let scope = format!("{}/{}", purpose::TEACHER, ds.name);
            let teacher = Mlp::<S>::init(ds.n_features(), &scope, cfg.teacher_seed)
                .with_kind(ModelKind::RandomTeacher);
            vec![
                distill(&teacher, retain, Subset::Retain, a),
                ce(Subset::Retain, a),
                distill(&teacher, forget, Subset::Forget, 1.0 - a),
            ]
        }
        Method::OracleControl | Method::External => Vec::new(),
    }
}

/// Applies `cfg.method` to a clone of `original`; `original` is not touched.
pub fn unlearn<S: Scalar>(
    original: &Mlp<S>,
    ds: &TabularDataset,
    part: &PartitionSpec,
    cfg: &UnlearnConfig,
) -> Result<Mlp<S>, TrainError> {
    Ok(unlearn_with_trace(original, ds, part, cfg)?.0)
}

pub fn unlearn_with_trace<S: Scalar>(
    original: &Mlp<S>,
    ds: &TabularDataset,
    part: &PartitionSpec,
    cfg: &UnlearnConfig,
) -> Result<(Mlp<S>, Vec<f64>), TrainError> {
    if original.kind != ModelKind::Original {
        return Err(TrainError::WrongStartingModel(original.kind));
    }
    if matches!(cfg.method, Method::OracleControl | Method::External) {
        return Err(TrainError::NotAMethod(cfg.method));
    }
    check_width(ds, original.n_features())?;
    if part.forget.is_empty() {
        return Err(TrainError::EmptySet("forget"));
    }
    let retain = Batch::from_dataset(ds, &part.retain);
    let forget = Batch::from_dataset(ds, &part.forget);
    let terms = method_terms(original, ds, &retain, &forget, cfg);
    let mut model = original.clone().with_kind(ModelKind::Unlearned);
    let dropout = rng::keyed_stream(purpose::UNLEARN, &ds.name, cfg.unlearn_seed);
    let trace = optimise(
        &mut model,
        &[(Subset::Retain, &retain), (Subset::Forget, &forget)],
        &terms,
        cfg.epochs(),
        cfg.lr,
        &cfg.adam,
        dropout,
    )?;
    Ok((model, trace))
}

/// Max relative error between analytic and central-difference gradients of
/// eval-mode mean cross-entropy, over 100 sampled parameters.
pub fn grad_check<S: Scalar>(model: &Mlp<S>, batch: &Batch<f64>, seed: u64) -> f64 {
    grad_check_with(model, batch, seed, |_| {})
}

/// As [`grad_check`], with a hook that may alter the analytic gradient
/// before comparison.
pub fn grad_check_with<S: Scalar>(
    model: &Mlp<S>,
    batch: &Batch<f64>,
    seed: u64,
    tamper: impl FnOnce(&mut MlpParams<f64>),
) -> f64 {
    const SAMPLES: usize = 100;
    const STEP: f64 = 1e-5;
    let shadow: Mlp<f64> = model.cast();
    let (_, mut analytic) = shadow.ce_gradient(batch);
    tamper(&mut analytic);
    let sizes: Vec<usize> = shadow.params.slices().iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng::keyed_stream(purpose::GRAD_CHECK, "", seed);
    let mut worst: f64 = 0.0;
    for _ in 0..SAMPLES {
        let mut flat = rng.random_range(0..total);
        let mut layer = 0;
        while flat >= sizes[layer] {
            flat -= sizes[layer];
            layer += 1;
        }
        let mut plus = shadow.clone();
        plus.params.slices_mut()[layer][flat] += STEP;
        let mut minus = shadow.clone();
        minus.params.slices_mut()[layer][flat] -= STEP;
        let lp = cross_entropy(&plus.logits(&batch.x), &batch.y).0;
        let lm = cross_entropy(&minus.logits(&batch.x), &batch.y).0;
        let numeric = (lp - lm) / (2.0 * STEP);
        let a = analytic.slices()[layer][flat];
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

impl Mlp<f64> {
    /// `RULM` v1: magic, version u32, then d, hidden and class counts as u64,
    /// then every weight as f64, all little-endian.
    pub fn write_rulm<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        w.write_all(RULM_MAGIC)?;
        w.write_all(&RULM_VERSION.to_le_bytes())?;
        for dim in [self.n_features(), HIDDEN, N_CLASSES] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for s in self.params.slices() {
            for v in s {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_rulm<R: Read>(
        mut r: R,
        kind: ModelKind,
        init_seed: u64,
    ) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RULM_MAGIC {
            return Err(TrainError::Format("missing RULM magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != RULM_VERSION {
            return Err(TrainError::Format("unsupported version".into()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            *d = u64::from_le_bytes(b8) as usize;
        }
        if dims[1] != HIDDEN || dims[2] != N_CLASSES || dims[0] == 0 || dims[0] > 1 << 24 {
            return Err(TrainError::Format(format!(
                "unexpected layer dims {dims:?}"
            )));
        }
        let mut params = MlpParams::<f64>::zeros(dims[0]);
        for s in params.slices_mut() {
            for v in s.iter_mut() {
                let mut b8 = [0u8; 8];
                r.read_exact(&mut b8)?;
                *v = f64::from_le_bytes(b8);
            }
        }
        Ok(Self {
            params,
            dropout_rate: DROPOUT_RATE,
            init_seed,
            kind,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_rulm(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(
        path: impl AsRef<Path>,
        kind: ModelKind,
        init_seed: u64,
    ) -> Result<Self, TrainError> {
        Self::read_rulm(BufReader::new(File::open(path)?), kind, init_seed)
    }
}
