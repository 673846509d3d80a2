//! Output-level evaluation: loss-threshold membership inference with balanced
//! accuracy, plain accuracy, and the ±0.05 MIA pass window.
//!
//! The threshold is chosen in-sample, so finite-sample balanced accuracy sits
//! slightly above 0.5 even when members and non-members are exchangeable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MIA_WINDOW: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum OutputError {
    #[error("{0} population is empty")]
    EmptyPopulation(&'static str),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("losses must be finite and non-negative")]
    InvalidLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Forget,
    Test,
    Retain,
}

/// Per-record cross-entropy losses for one population.
#[derive(Debug, Clone, PartialEq)]
pub struct LossVector {
    losses: Vec<f64>,
    pub population: Population,
}

impl LossVector {
    pub fn new(losses: Vec<f64>, population: Population) -> Result<Self, OutputError> {
        if losses.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(OutputError::InvalidLoss);
        }
        Ok(Self { losses, population })
    }

    pub fn values(&self) -> &[f64] {
        &self.losses
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputReport {
    pub mia_balanced_acc: f64,
    #[serde(with = "extended_float")]
    pub mia_threshold: f64,
    pub retain_acc: f64,
    pub forget_acc: f64,
    pub test_acc: f64,
}

/// JSON has no infinities; they travel as the strings `"inf"` / `"-inf"`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(serde::de::Error::custom(format!("bad float '{t}'"))),
            },
        }
    }
}

/// Best balanced accuracy of the rule "positive if score <= t" over every
/// midpoint of the pooled sorted scores plus ±∞. Ties in accuracy resolve
/// to the smallest threshold.
pub fn sweep_balanced_accuracy(positives: &[f64], negatives: &[f64]) -> (f64, f64) {
    let mut pooled: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    // t = -inf: nothing predicted positive.
    let mut best = (0.5, f64::NEG_INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let t = if i < pooled.len() {
            (v + pooled[i].0) / 2.0
        } else {
            f64::INFINITY
        };
        let ba = 0.5 * (tp as f64 / np + (nn - fp as f64) / nn);
        if ba > best.0 {
            best = (ba, t);
        }
    }
    best
}

/// Members are predicted when their loss is at or below the threshold.
/// Returns `(balanced_accuracy, threshold)`.
pub fn mia_threshold_attack(
    members: &LossVector,
    nonmembers: &LossVector,
) -> Result<(f64, f64), OutputError> {
    if members.losses.is_empty() {
        return Err(OutputError::EmptyPopulation("member"));
    }
    if nonmembers.losses.is_empty() {
        return Err(OutputError::EmptyPopulation("non-member"));
    }
    Ok(sweep_balanced_accuracy(&members.losses, &nonmembers.losses))
}

pub fn accuracy(predicted: &[u8], labels: &[u8]) -> Result<f64, OutputError> {
    if predicted.len() != labels.len() {
        return Err(OutputError::LengthMismatch(predicted.len(), labels.len()));
    }
    if predicted.is_empty() {
        return Err(OutputError::EmptyPopulation("prediction"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `|mean − 0.5| < 0.05`, strictly.
pub fn pass_window(mia_means: &[f64]) -> bool {
    if mia_means.is_empty() {
        return false;
    }
    let mean = mia_means.iter().sum::<f64>() / mia_means.len() as f64;
    (mean - 0.5).abs() < MIA_WINDOW
}
