use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{normalized_embeddings, ModelCache, PipelineError, PreparedDataset, RunConfig, Runner};
use crate::embedding::ModelRole;
use crate::lens1::{self, BaselineKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePair {
    pub seed_a: u64,
    pub seed_b: u64,
    pub m1: f64,
    pub m2: f64,
    pub retain_baseline: f64,
}

/// Empirical null of M2 from pairs of independently retrained oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub dataset: String,
    pub ff: f64,
    pub forget_size: usize,
    pub baseline: BaselineKind,
    pub seeds: Vec<u64>,
    pub pairs: Vec<OraclePair>,
    pub mean_m2: f64,
    pub sd_m2: f64,
    /// `sd / sqrt(pairs)`, treating pairs as independent.
    pub se_m2: f64,
    /// `|mean| < 2 · se`.
    pub centred: bool,
}

impl CalibrationReport {
    /// `calibration.json` plus `calibration_pairs.csv`.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("calibration.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        let mut w = csv::Writer::from_path(dir.join("calibration_pairs.csv"))?;
        for p in &self.pairs {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trains one oracle per seed on the retain set and computes M2 for every
/// unordered pair, the first seed of the pair playing the unlearned role.
pub fn calibrate_oracle_pairs(
    config: &RunConfig,
    cache: &ModelCache,
    threads: usize,
) -> Result<CalibrationReport, PipelineError> {
    config.validate()?;
    let seeds = &config.calibration.seeds;
    if seeds.len() < 2 {
        return Err(PipelineError::TooFewOracles(seeds.len()));
    }
    let ds_cfg = match &config.calibration.dataset {
        Some(name) => config
            .datasets
            .iter()
            .find(|d| &d.name == name)
            .ok_or_else(|| {
                PipelineError::Config(format!("unknown calibration dataset '{name}'"))
            })?,
        None => &config.datasets[0],
    };
    let ff = config.calibration.ff.unwrap_or(config.forget_fractions[0]);
    let raw = ds_cfg.load(&config.base_dir)?;
    let ds = PreparedDataset::new(&raw, config.test_frac, config.split_seed)?;
    let part = ds.partition(ff, config.split_seed, config.forget_seed)?;
    let runner = Runner { config, cache };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let embeddings = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let m = runner.oracle(&ds, &part, s)?;
                normalized_embeddings(&m, &ds.data, ModelRole::Oracle)
            })
            .collect::<Result<Vec<_>, PipelineError>>()
    })?;
    let mut pairs = Vec::new();
    for i in 0..seeds.len() {
        for j in i + 1..seeds.len() {
            let r = lens1::calibration_gap(
                &embeddings[i],
                &embeddings[j],
                &part,
                config.baseline,
                seeds[i],
            )?;
            pairs.push(OraclePair {
                seed_a: seeds[i],
                seed_b: seeds[j],
                m1: r.m1,
                m2: r.m2,
                retain_baseline: r.retain_baseline,
            });
        }
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.m2).sum::<f64>() / n;
    let sd = if pairs.len() > 1 {
        (pairs.iter().map(|p| (p.m2 - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let se = sd / n.sqrt();
    Ok(CalibrationReport {
        dataset: ds.data.name.clone(),
        ff,
        forget_size: part.forget.len(),
        baseline: config.baseline,
        seeds: seeds.clone(),
        pairs,
        mean_m2: mean,
        sd_m2: sd,
        se_m2: se,
        centred: mean.abs() < 2.0 * se,
    })
}
