//! Experiment orchestration: cells of (dataset, forget fraction, training
//! seed, method), each producing one [`MetricRecord`], plus aggregation into
//! a [`StatReport`], oracle-pair calibration, sweeps and external-embedding
//! verification.

mod cache;
mod calibrate;
mod config;
mod report;
mod sweep;
mod verify;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{ModelCache, ModelKey, CACHE_ENV};
pub use calibrate::{calibrate_oracle_pairs, CalibrationReport, OraclePair};
pub use config::{
    scaled_epochs, CalibrationConfig, CsvSource, DatasetConfig, DatasetSource, RunConfig,
    SweepAxis, SweepConfig, UnlearnSettings,
};
pub use report::{
    aggregate, write_pairwise_csv, write_summary_csv, MetricSummary, PairwiseComparison,
    PrimarySource, StatReport, STAT_REPORT_VERSION,
};
pub use sweep::{
    baseline_flip, sd_table, sweep, BaselineFlip, BaselineRow, HoldsRow, SdRow, SweepPoint,
    SweepReport,
};
pub use verify::{verify_external, write_verify, VerifyInputs, VerifyOptions};

use crate::data::{self, DataError, PartitionSpec, Standardizer, TabularDataset};
use crate::embedding::{EmbeddingError, ModelRole};
use crate::lens1::{self, Lens1Error, Lens1Result, ModelTriple};
use crate::lens2::{self, Lens2Error, Lens2Result};
use crate::output::{self, LossVector, OutputError, OutputReport, Population};
use crate::stats::StatError;
use crate::train::{self, Batch, Method, ModelKind, TrainError};
use crate::{Embeddings, TabularMlp};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("Lens-1 metrics need oracle embeddings")]
    MissingOracleForLens1,
    #[error("calibration needs at least two oracle seeds, got {0}")]
    TooFewOracles(usize),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Lens1(#[from] Lens1Error),
    #[error(transparent)]
    Lens2(#[from] Lens2Error),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error(transparent)]
    Stat(#[from] StatError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCell {
    pub dataset: String,
    pub ff: f64,
    pub train_seed: u64,
    pub unlearn_seed: u64,
    pub method: Method,
}

impl RunCell {
    /// Total order used for every report: dataset, ff, seed, method.
    pub fn key_cmp(&self, other: &Self) -> Ordering {
        self.dataset
            .cmp(&other.dataset)
            .then(self.ff.total_cmp(&other.ff))
            .then(self.train_seed.cmp(&other.train_seed))
            .then(self.unlearn_seed.cmp(&other.unlearn_seed))
            .then(self.method.cmp(&other.method))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub cell: RunCell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lens1: Option<Lens1Result>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lens2: Option<Lens2Result>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m4_pre_unlearning: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_retain_acc: Option<f64>,
    /// Fingerprint of the starting weights the method was applied to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_fingerprint: Option<String>,
    #[serde(default)]
    pub forget_size: usize,
}

impl MetricRecord {
    /// Named scalar metric, if this record carries it.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "m1" => self.lens1.as_ref().map(|l| l.m1),
            "m2" => self.lens1.as_ref().map(|l| l.m2),
            "m3" => self.lens1.as_ref().and_then(|l| l.m3),
            "m4" => self.lens2.as_ref().map(|l| l.aggregate),
            "m4_pre" => self.m4_pre_unlearning,
            "mia" => self.output.as_ref().map(|o| o.mia_balanced_acc),
            "retain_acc" => self.output.as_ref().map(|o| o.retain_acc),
            "forget_acc" => self.output.as_ref().map(|o| o.forget_acc),
            "test_acc" => self.output.as_ref().map(|o| o.test_acc),
            "oracle_retain_acc" => self.oracle_retain_acc,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: RunCell,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Sorted by cell key.
    pub records: Vec<MetricRecord>,
    pub failures: Vec<CellFailure>,
    pub report: StatReport,
}

impl RunOutput {
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    /// Writes `records.jsonl`, `stat_report.json` and CSV mirrors.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        write_records_jsonl(&self.records, fs::File::create(dir.join("records.jsonl"))?)?;
        write_failures_jsonl(
            &self.failures,
            fs::File::create(dir.join("failures.jsonl"))?,
        )?;
        write_stat_report(
            &self.report,
            fs::File::create(dir.join("stat_report.json"))?,
        )?;
        write_records_csv(&self.records, fs::File::create(dir.join("records.csv"))?)?;
        write_summary_csv(&self.report, fs::File::create(dir.join("summary.csv"))?)?;
        write_pairwise_csv(&self.report, fs::File::create(dir.join("pairwise.csv"))?)?;
        Ok(())
    }
}

pub fn write_records_jsonl<W: Write>(records: &[MetricRecord], w: W) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(w);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_failures_jsonl<W: Write>(failures: &[CellFailure], w: W) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(w);
    for f in failures {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<Result<Vec<T>, _>>()?)
}

pub fn read_failures_jsonl(path: &Path) -> Result<Vec<CellFailure>, PipelineError> {
    let mut f: Vec<CellFailure> = read_jsonl(path)?;
    f.sort_by(|a, b| a.cell.key_cmp(&b.cell));
    Ok(f)
}

/// Re-aggregates a finished run from its `records.jsonl`, picking up a
/// sibling `failures.jsonl` when present.
pub fn report_from_records(records_path: &Path) -> Result<RunOutput, PipelineError> {
    let records = read_records_jsonl(records_path)?;
    let failures_path = records_path.with_file_name("failures.jsonl");
    let failures = if failures_path.exists() {
        read_failures_jsonl(&failures_path)?
    } else {
        Vec::new()
    };
    let report = aggregate(&records, &failures);
    Ok(RunOutput {
        records,
        failures,
        report,
    })
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<MetricRecord>, PipelineError> {
    let mut recs: Vec<MetricRecord> = read_jsonl(path)?;
    recs.sort_by(|a, b| a.cell.key_cmp(&b.cell));
    Ok(recs)
}

pub fn write_stat_report<W: Write>(report: &StatReport, w: W) -> Result<(), PipelineError> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RecordRow<'a> {
    dataset: &'a str,
    ff: f64,
    train_seed: u64,
    unlearn_seed: u64,
    method: &'a str,
    forget_size: usize,
    m1: Option<f64>,
    m2: Option<f64>,
    m3: Option<f64>,
    m4: Option<f64>,
    m4_pre: Option<f64>,
    mia: Option<f64>,
    retain_acc: Option<f64>,
    forget_acc: Option<f64>,
    test_acc: Option<f64>,
    oracle_retain_acc: Option<f64>,
}

pub fn write_records_csv<W: Write>(records: &[MetricRecord], w: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(w);
    for r in records {
        w.serialize(RecordRow {
            dataset: &r.cell.dataset,
            ff: r.cell.ff,
            train_seed: r.cell.train_seed,
            unlearn_seed: r.cell.unlearn_seed,
            method: r.cell.method.name(),
            forget_size: r.forget_size,
            m1: r.metric("m1"),
            m2: r.metric("m2"),
            m3: r.metric("m3"),
            m4: r.metric("m4"),
            m4_pre: r.metric("m4_pre"),
            mia: r.metric("mia"),
            retain_acc: r.metric("retain_acc"),
            forget_acc: r.metric("forget_acc"),
            test_acc: r.metric("test_acc"),
            oracle_retain_acc: r.metric("oracle_retain_acc"),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// A dataset after loading, split and standardisation.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub data: TabularDataset,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl PreparedDataset {
    /// Splits `raw` and standardises every record with moments fitted on
    /// the training split.
    pub fn new(raw: &TabularDataset, test_frac: f64, split_seed: u64) -> Result<Self, DataError> {
        let (train, test) = data::stratified_split(raw, test_frac, split_seed)?;
        let std = Standardizer::fit(raw, &train)?;
        Ok(Self {
            data: raw.standardized(&std),
            train,
            test,
        })
    }

    pub fn partition(
        &self,
        ff: f64,
        split_seed: u64,
        forget_seed: u64,
    ) -> Result<PartitionSpec, DataError> {
        let (retain, forget) =
            data::sample_forget_set(&self.data.name, &self.train, ff, forget_seed)?;
        let mut p = PartitionSpec {
            retain,
            forget,
            test: self.test.clone(),
            ff,
            split_seed,
            forget_seed,
        };
        p.validate(self.data.n_records())?;
        Ok(p)
    }
}

/// Shared state for one run.
pub struct Runner<'a> {
    pub config: &'a RunConfig,
    pub cache: &'a ModelCache,
}

/// Output-level report for `model` on a partition.
pub fn output_report(
    model: &TabularMlp,
    ds: &TabularDataset,
    part: &PartitionSpec,
) -> Result<OutputReport, PipelineError> {
    let eval = |idx: &[usize]| -> Result<(Vec<f64>, f64), PipelineError> {
        let b = Batch::<f64>::from_dataset(ds, idx);
        let acc = output::accuracy(&model.predict(&b.x), &b.y)?;
        Ok((model.losses(&b), acc))
    };
    let (forget_loss, forget_acc) = eval(&part.forget)?;
    let (test_loss, test_acc) = eval(&part.test)?;
    let (_, retain_acc) = eval(&part.retain)?;
    let (mia, t) = output::mia_threshold_attack(
        &LossVector::new(forget_loss, Population::Forget)?,
        &LossVector::new(test_loss, Population::Test)?,
    )?;
    Ok(OutputReport {
        mia_balanced_acc: mia,
        mia_threshold: t,
        retain_acc,
        forget_acc,
        test_acc,
    })
}

pub fn normalized_embeddings(
    model: &TabularMlp,
    ds: &TabularDataset,
    role: ModelRole,
) -> Result<Embeddings, PipelineError> {
    Ok(model
        .extract_embeddings(ds.features(), role)?
        .l2_normalize()?)
}

impl Runner<'_> {
    pub fn original(
        &self,
        ds: &PreparedDataset,
        part: &PartitionSpec,
        seed: u64,
    ) -> Result<TabularMlp, PipelineError> {
        Ok(self.cache.get_or_train(
            &ds.data,
            &part.train(),
            seed,
            &self.config.train,
            ModelKind::Original,
        )?)
    }

    pub fn oracle(
        &self,
        ds: &PreparedDataset,
        part: &PartitionSpec,
        seed: u64,
    ) -> Result<TabularMlp, PipelineError> {
        Ok(self.cache.get_or_train(
            &ds.data,
            &part.retain,
            seed,
            &self.config.train,
            ModelKind::Oracle,
        )?)
    }

    /// Every method for one (dataset, partition, seed); the original and
    /// oracle are trained once and shared.
    pub fn run_group(
        &self,
        ds: &PreparedDataset,
        part: &PartitionSpec,
        seed: u64,
        methods: &[Method],
    ) -> Vec<Result<MetricRecord, CellFailure>> {
        let cell = |method| RunCell {
            dataset: ds.data.name.clone(),
            ff: part.ff,
            train_seed: seed,
            unlearn_seed: self.config.unlearn_seed,
            method,
        };
        let shared = (|| -> Result<_, PipelineError> {
            let orig = self.original(ds, part, seed)?;
            let oracle = self.oracle(ds, part, seed)?;
            let emb_o = normalized_embeddings(&orig, &ds.data, ModelRole::Original)?;
            let emb_r = normalized_embeddings(&oracle, &ds.data, ModelRole::Oracle)?;
            let pre = lens2::m4(&emb_o, part, self.config.m4_cap, seed)?.aggregate;
            let oracle_acc = output_report(&oracle, &ds.data, part)?.retain_acc;
            Ok((orig, oracle, emb_o, emb_r, pre, oracle_acc))
        })();
        let (orig, oracle, emb_o, emb_r, pre, oracle_acc) = match shared {
            Ok(s) => s,
            Err(e) => {
                return methods
                    .iter()
                    .map(|&m| {
                        Err(CellFailure {
                            cell: cell(m),
                            error: e.to_string(),
                        })
                    })
                    .collect()
            }
        };
        let fp = format!("{:016x}", orig.params.fingerprint());
        methods
            .iter()
            .map(|&method| {
                let res = (|| -> Result<MetricRecord, PipelineError> {
                    let unlearned = match method {
                        Method::OracleControl => oracle.clone().with_kind(ModelKind::Unlearned),
                        m => train::unlearn(
                            &orig,
                            &ds.data,
                            part,
                            &self.config.unlearn.for_method(m, self.config.unlearn_seed),
                        )?,
                    };
                    let emb_u = normalized_embeddings(&unlearned, &ds.data, ModelRole::Unlearned)?;
                    let triple = ModelTriple::new(emb_o.clone(), emb_u, emb_r.clone(), true)?;
                    let l1 = lens1::m2(&triple, part, self.config.baseline, seed)?;
                    let mut l2 = lens2::m4(&triple.unlearned, part, self.config.m4_cap, seed)?;
                    // The retain-side distribution is reproducible from the
                    // inputs and would dominate the record size.
                    l2.s_r_values.clear();
                    Ok(MetricRecord {
                        cell: cell(method),
                        lens1: Some(l1),
                        lens2: Some(l2),
                        output: Some(output_report(&unlearned, &ds.data, part)?),
                        m4_pre_unlearning: Some(pre),
                        oracle_retain_acc: Some(oracle_acc),
                        original_fingerprint: Some(fp.clone()),
                        forget_size: part.forget.len(),
                    })
                })();
                res.map_err(|e| CellFailure {
                    cell: cell(method),
                    error: e.to_string(),
                })
            })
            .collect()
    }
}

/// Loads and prepares every configured dataset, keyed by name.
pub fn prepare_datasets(
    config: &RunConfig,
) -> Result<BTreeMap<String, Result<PreparedDataset, String>>, PipelineError> {
    let mut out = BTreeMap::new();
    for d in &config.datasets {
        let prepared = d
            .load(&config.base_dir)
            .and_then(|raw| {
                Ok(PreparedDataset::new(
                    &raw,
                    config.test_frac,
                    config.split_seed,
                )?)
            })
            .map_err(|e| e.to_string());
        out.insert(d.name.clone(), prepared);
    }
    Ok(out)
}

/// Runs every cell of `config` on a pool of `threads` workers (0 = rayon's
/// default) and aggregates. Results do not depend on the worker count.
pub fn run_pipeline(
    config: &RunConfig,
    cache: &ModelCache,
    threads: usize,
) -> Result<RunOutput, PipelineError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run_in_pool(config, cache))
}

fn run_in_pool(config: &RunConfig, cache: &ModelCache) -> Result<RunOutput, PipelineError> {
    let datasets = prepare_datasets(config)?;
    let runner = Runner { config, cache };
    let mut groups = Vec::new();
    for (name, prepared) in &datasets {
        for &ff in &config.forget_fractions {
            for &seed in &config.train_seeds {
                groups.push((name.as_str(), prepared, ff, seed));
            }
        }
    }
    let results: Vec<Result<MetricRecord, CellFailure>> = groups
        .par_iter()
        .flat_map_iter(|&(name, prepared, ff, seed)| {
            let fail = |error: String| -> Vec<Result<MetricRecord, CellFailure>> {
                config
                    .methods
                    .iter()
                    .map(|&method| {
                        Err(CellFailure {
                            cell: RunCell {
                                dataset: name.to_string(),
                                ff,
                                train_seed: seed,
                                unlearn_seed: config.unlearn_seed,
                                method,
                            },
                            error: error.clone(),
                        })
                    })
                    .collect()
            };
            match prepared {
                Err(e) => fail(e.clone()),
                Ok(ds) => match ds.partition(ff, config.split_seed, config.forget_seed) {
                    Err(e) => fail(e.to_string()),
                    Ok(part) => runner.run_group(ds, &part, seed, &config.methods),
                },
            }
        })
        .collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| a.cell.key_cmp(&b.cell));
    failures.sort_by(|a, b| a.cell.key_cmp(&b.cell));
    let report = aggregate(&records, &failures);
    Ok(RunOutput {
        records,
        failures,
        report,
    })
}
