use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricRecord, PipelineError, RunCell};
use crate::data::PartitionSpec;
use crate::lens1::{self, BaselineKind, Lens1Error, ModelTriple};
use crate::lens2::{self, DEFAULT_CAP};
use crate::train::Method;
use crate::Embeddings;

#[derive(Debug, Clone)]
pub struct VerifyInputs {
    pub unlearned: Embeddings,
    pub oracle: Option<Embeddings>,
    pub original: Option<Embeddings>,
    pub partition: PartitionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    /// Caller's assertion that original and oracle share an initialisation.
    pub paired_seed: bool,
    /// Fail rather than skip Lens 1 when no oracle is given.
    pub require_lens1: bool,
    pub baseline: BaselineKind,
    pub m4_cap: usize,
    pub seed: u64,
    pub label: String,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            paired_seed: false,
            require_lens1: false,
            baseline: BaselineKind::Median,
            m4_cap: DEFAULT_CAP,
            seed: 0,
            label: "external".into(),
        }
    }
}

/// `record.json` plus the per-record M4 audit `m4_ranks.csv`.
pub fn write_verify(record: &MetricRecord, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    let mut f = fs::File::create(dir.join("record.json"))?;
    serde_json::to_writer_pretty(&mut f, record)?;
    writeln!(f)?;
    if let Some(l2) = &record.lens2 {
        lens2::write_rank_csv(l2, fs::File::create(dir.join("m4_ranks.csv"))?)?;
    }
    Ok(())
}

/// Computes whichever metrics the supplied embeddings permit: M4 from the
/// unlearned matrix alone, M1/M2 with an oracle, M3 and the pre-unlearning
/// M4 with the original as well. Absent inputs leave fields absent.
pub fn verify_external(
    inputs: &VerifyInputs,
    opts: &VerifyOptions,
) -> Result<MetricRecord, PipelineError> {
    let VerifyInputs {
        unlearned,
        oracle,
        original,
        partition,
    } = inputs;
    if oracle.is_none() && (original.is_some() || opts.require_lens1) {
        return Err(PipelineError::MissingOracleForLens1);
    }
    let shape = (unlearned.n_records(), unlearned.dim());
    for m in oracle.iter().chain(original.iter()) {
        if (m.n_records(), m.dim()) != shape {
            return Err(PipelineError::DimMismatch(format!(
                "{:?} vs {:?}",
                (m.n_records(), m.dim()),
                shape
            )));
        }
    }
    let mut part = partition.clone();
    part.validate(shape.0)?;
    let unl = unlearned.l2_normalize()?;
    let lens2 = lens2::m4(&unl, &part, opts.m4_cap, opts.seed)?;
    let mut m4_pre = None;
    let lens1 = match oracle {
        None => None,
        Some(oracle) => {
            if !opts.paired_seed {
                return Err(Lens1Error::UnpairedSeeds.into());
            }
            let ora = oracle.l2_normalize()?;
            Some(match original {
                Some(orig) => {
                    let orig = orig.l2_normalize()?;
                    m4_pre = Some(lens2::m4(&orig, &part, opts.m4_cap, opts.seed)?.aggregate);
                    let triple = ModelTriple::new(orig, unl.clone(), ora, true)?;
                    lens1::m2(&triple, &part, opts.baseline, opts.seed)?
                }
                None => lens1::calibration_gap(&unl, &ora, &part, opts.baseline, opts.seed)?,
            })
        }
    };
    Ok(MetricRecord {
        cell: RunCell {
            dataset: opts.label.clone(),
            ff: part.ff,
            train_seed: opts.seed,
            unlearn_seed: opts.seed,
            method: Method::External,
        },
        lens1,
        lens2: Some(lens2),
        output: None,
        m4_pre_unlearning: m4_pre,
        oracle_retain_acc: None,
        original_fingerprint: None,
        forget_size: part.forget.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingMatrix, ModelRole};
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Embeddings {
        let mut r = rng::seeded(seed);
        let data: Vec<f32> = (0..n * d)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut r);
                v as f32
            })
            .collect();
        EmbeddingMatrix::new(n, d, data, ModelRole::External).unwrap()
    }

    fn part() -> PartitionSpec {
        PartitionSpec {
            retain: (0..40).collect(),
            forget: (40..50).collect(),
            test: (50..60).collect(),
            ff: 0.2,
            split_seed: 0,
            forget_seed: 0,
        }
    }

    #[test]
    fn capability_gating() {
        let only = VerifyInputs {
            unlearned: gaussian(60, 8, 1),
            oracle: None,
            original: None,
            partition: part(),
        };
        let rec = verify_external(&only, &VerifyOptions::default()).unwrap();
        assert!(rec.lens1.is_none());
        assert!(rec.lens2.is_some());
        let json = serde_json::to_string(&rec).unwrap();
        assert!(!json.contains("\"lens1\""));

        let strict = VerifyOptions {
            require_lens1: true,
            ..Default::default()
        };
        assert!(matches!(
            verify_external(&only, &strict),
            Err(PipelineError::MissingOracleForLens1)
        ));

        let orig_no_oracle = VerifyInputs {
            original: Some(gaussian(60, 8, 2)),
            ..only.clone()
        };
        assert!(matches!(
            verify_external(&orig_no_oracle, &VerifyOptions::default()),
            Err(PipelineError::MissingOracleForLens1)
        ));
    }

    #[test]
    fn full_triple_and_checks() {
        let full = VerifyInputs {
            unlearned: gaussian(60, 8, 1),
            oracle: Some(gaussian(60, 8, 2)),
            original: Some(gaussian(60, 8, 3)),
            partition: part(),
        };
        let opts = VerifyOptions {
            paired_seed: true,
            ..Default::default()
        };
        let rec = verify_external(&full, &opts).unwrap();
        assert!(rec.lens1.as_ref().unwrap().m3.is_some());
        assert!(rec.m4_pre_unlearning.is_some());
        assert!(rec.output.is_none());

        let unpaired = verify_external(&full, &VerifyOptions::default());
        assert!(matches!(
            unpaired,
            Err(PipelineError::Lens1(Lens1Error::UnpairedSeeds))
        ));

        let bad = VerifyInputs {
            oracle: Some(gaussian(60, 4, 2)),
            ..full
        };
        assert!(matches!(
            verify_external(&bad, &opts),
            Err(PipelineError::DimMismatch(_))
        ));
    }
}
