//! Oracle-comparative metrics: M1 (forget-set similarity to the oracle), M2
//! (M1 minus the retain-set baseline) and M3 (shift toward the oracle).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PartitionSpec;
use crate::embedding::{check_pair, EmbeddingError, EmbeddingMatrix};
use crate::rng::{self, purpose};
use crate::scalar::{dot_f64, Scalar};

/// Records drawn from the retain set for the M2 baseline.
pub const RETAIN_SUBSAMPLE: usize = 500;

#[derive(Debug, Error)]
pub enum Lens1Error {
    #[error("original and oracle were not trained from a shared seed")]
    UnpairedSeeds,
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error("retain set is empty")]
    EmptyRetainSet,
    #[error("model triple matrices disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Original, unlearned and oracle embeddings over one record indexing.
#[derive(Debug, Clone)]
pub struct ModelTriple<S: Scalar> {
    pub original: EmbeddingMatrix<S>,
    pub unlearned: EmbeddingMatrix<S>,
    pub oracle: EmbeddingMatrix<S>,
    pub paired_seed: bool,
}

impl<S: Scalar> ModelTriple<S> {
    pub fn new(
        original: EmbeddingMatrix<S>,
        unlearned: EmbeddingMatrix<S>,
        oracle: EmbeddingMatrix<S>,
        paired_seed: bool,
    ) -> Result<Self, Lens1Error> {
        let shape = |m: &EmbeddingMatrix<S>| (m.n_records(), m.dim());
        if shape(&original) != shape(&unlearned) || shape(&original) != shape(&oracle) {
            return Err(Lens1Error::Mismatch(format!(
                "shapes {:?} / {:?} / {:?}",
                shape(&original),
                shape(&unlearned),
                shape(&oracle)
            )));
        }
        Ok(Self {
            original,
            unlearned,
            oracle,
            paired_seed,
        })
    }

    fn check(&self) -> Result<(), Lens1Error> {
        if !self.paired_seed {
            return Err(Lens1Error::UnpairedSeeds);
        }
        check_pair(&self.unlearned, &self.oracle)?;
        check_pair(&self.original, &self.oracle)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    #[default]
    Median,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lens1Result {
    pub m1: f64,
    pub m2: f64,
    /// Absent when no original-model embeddings were supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub m3: Option<f64>,
    pub retain_baseline: f64,
    pub baseline_kind: BaselineKind,
    pub retain_subsample_size: usize,
    pub retain_subsample_seed: u64,
}

fn cross_sims<S: Scalar>(
    a: &EmbeddingMatrix<S>,
    b: &EmbeddingMatrix<S>,
    idx: &[usize],
) -> Result<Vec<f64>, Lens1Error> {
    let n = a.n_records().min(b.n_records());
    idx.iter()
        .map(|&i| {
            if i >= n {
                return Err(EmbeddingError::IndexOutOfRange {
                    index: i,
                    n_records: n,
                }
                .into());
            }
            Ok(dot_f64(a.row(i), b.row(i)))
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median; even-length samples average the two central order statistics.
pub fn median(v: &[f64]) -> f64 {
    assert!(!v.is_empty(), "median of empty sample");
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    if s.len() % 2 == 1 {
        s[mid]
    } else {
        (s[mid - 1] + s[mid]) / 2.0
    }
}

/// Retain records used for the baseline: `min(500, |retain|)` drawn without
/// replacement from the keyed stream, returned sorted.
pub fn retain_subsample(retain: &[usize], seed: u64) -> Vec<usize> {
    let k = retain.len().min(RETAIN_SUBSAMPLE);
    let mut rng = rng::keyed_stream(purpose::RETAIN_BASELINE, "", seed);
    let mut out: Vec<usize> = rng::sample_positions(&mut rng, retain.len(), k)
        .into_iter()
        .map(|p| retain[p])
        .collect();
    out.sort_unstable();
    out
}

/// Forget-set mean of unlearned-vs-oracle similarity, without the
/// paired-seed gate. Used directly by oracle-pair calibration.
pub fn forget_similarity<S: Scalar>(
    unlearned: &EmbeddingMatrix<S>,
    oracle: &EmbeddingMatrix<S>,
    part: &PartitionSpec,
) -> Result<f64, Lens1Error> {
    check_pair(unlearned, oracle)?;
    if part.forget.is_empty() {
        return Err(Lens1Error::EmptyForgetSet);
    }
    Ok(mean(&cross_sims(unlearned, oracle, &part.forget)?))
}

/// M1 minus the retain baseline for an arbitrary pair of models. This is
/// the calibration-gap computation shared by `m2` and the oracle-pair null.
pub fn calibration_gap<S: Scalar>(
    unlearned: &EmbeddingMatrix<S>,
    oracle: &EmbeddingMatrix<S>,
    part: &PartitionSpec,
    kind: BaselineKind,
    subsample_seed: u64,
) -> Result<Lens1Result, Lens1Error> {
    let m1 = forget_similarity(unlearned, oracle, part)?;
    if part.retain.is_empty() {
        return Err(Lens1Error::EmptyRetainSet);
    }
    let sub = retain_subsample(&part.retain, subsample_seed);
    let sims = cross_sims(unlearned, oracle, &sub)?;
    let retain_baseline = match kind {
        BaselineKind::Median => median(&sims),
        BaselineKind::Mean => mean(&sims),
    };
    Ok(Lens1Result {
        m1,
        m2: m1 - retain_baseline,
        m3: None,
        retain_baseline,
        baseline_kind: kind,
        retain_subsample_size: sub.len(),
        retain_subsample_seed: subsample_seed,
    })
}

/// Both baselines over one shared retain subsample.
pub fn calibration_gap_both<S: Scalar>(
    unlearned: &EmbeddingMatrix<S>,
    oracle: &EmbeddingMatrix<S>,
    part: &PartitionSpec,
    subsample_seed: u64,
) -> Result<(Lens1Result, Lens1Result), Lens1Error> {
    let med = calibration_gap(
        unlearned,
        oracle,
        part,
        BaselineKind::Median,
        subsample_seed,
    )?;
    let sub = retain_subsample(&part.retain, subsample_seed);
    let base = mean(&cross_sims(unlearned, oracle, &sub)?);
    let mean_res = Lens1Result {
        m2: med.m1 - base,
        retain_baseline: base,
        baseline_kind: BaselineKind::Mean,
        ..med.clone()
    };
    Ok((med, mean_res))
}

pub fn m1<S: Scalar>(triple: &ModelTriple<S>, part: &PartitionSpec) -> Result<f64, Lens1Error> {
    triple.check()?;
    forget_similarity(&triple.unlearned, &triple.oracle, part)
}

/// M1, M2 and M3 together.
pub fn m2<S: Scalar>(
    triple: &ModelTriple<S>,
    part: &PartitionSpec,
    kind: BaselineKind,
    subsample_seed: u64,
) -> Result<Lens1Result, Lens1Error> {
    triple.check()?;
    let mut res = calibration_gap(
        &triple.unlearned,
        &triple.oracle,
        part,
        kind,
        subsample_seed,
    )?;
    res.m3 = Some(m3(triple, part)?);
    Ok(res)
}

pub fn m3<S: Scalar>(triple: &ModelTriple<S>, part: &PartitionSpec) -> Result<f64, Lens1Error> {
    triple.check()?;
    if part.forget.is_empty() {
        return Err(Lens1Error::EmptyForgetSet);
    }
    let after = cross_sims(&triple.unlearned, &triple.oracle, &part.forget)?;
    let before = cross_sims(&triple.original, &triple.oracle, &part.forget)?;
    let shift: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    Ok(mean(&shift))
}
