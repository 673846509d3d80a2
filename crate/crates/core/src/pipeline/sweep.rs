use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::ALPHA;
use super::{
    run_pipeline, scaled_epochs, MetricRecord, ModelCache, PipelineError, RunConfig, StatReport,
    SweepAxis,
};
use crate::lens1::BaselineKind;
use crate::train::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldsRow {
    pub method: Method,
    pub ff: f64,
    pub m2_mean: f64,
    pub m4_mean: f64,
    /// `M2 < 0` and `M4 > 0.5`.
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub value: serde_json::Value,
    /// Epochs used per method at this point (learning-rate sweeps only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub epochs: BTreeMap<String, usize>,
    pub n_failed: usize,
    pub holds: Vec<HoldsRow>,
    pub n_holds: usize,
    pub report: StatReport,
}

/// Across-forget-seed variability for one (dataset, ff).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdRow {
    pub dataset: String,
    pub ff: f64,
    pub forget_size: usize,
    /// Seed-averaged M2 values that are negative, out of `n_values`.
    pub n_negative: usize,
    pub n_values: usize,
    /// Median across methods of the across-seed SD.
    pub m2_sd: f64,
    pub m4_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub method: Method,
    pub ff: f64,
    pub m2_median: f64,
    pub m2_mean: f64,
    /// Mean-baseline M2 minus median-baseline M2.
    pub shift: f64,
    pub sign_flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFlip {
    pub rows: Vec<BaselineRow>,
    pub n_conditions: usize,
    pub n_sign_flips: usize,
    pub significant_median: usize,
    pub significant_mean: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sd_table: Option<Vec<SdRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_flip: Option<BaselineFlip>,
}

#[derive(Serialize)]
struct HoldsCsvRow<'a> {
    point: &'a str,
    method: &'a str,
    ff: f64,
    m2_mean: f64,
    m4_mean: f64,
    holds: bool,
}

impl SweepReport {
    /// `sweep.json` plus CSV tables: `holds.csv`, and `sd_table.csv` or
    /// `baseline_flip.csv` when the axis produces them.
    pub fn write(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("sweep.json"))?;
        serde_json::to_writer_pretty(&mut f, self)?;
        writeln!(f)?;
        let mut w = csv::Writer::from_path(dir.join("holds.csv"))?;
        for p in &self.points {
            for h in &p.holds {
                w.serialize(HoldsCsvRow {
                    point: &p.label,
                    method: h.method.name(),
                    ff: h.ff,
                    m2_mean: h.m2_mean,
                    m4_mean: h.m4_mean,
                    holds: h.holds,
                })?;
            }
        }
        w.flush()?;
        if let Some(rows) = &self.sd_table {
            let mut w = csv::Writer::from_path(dir.join("sd_table.csv"))?;
            for r in rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        if let Some(flip) = &self.baseline_flip {
            let mut w = csv::Writer::from_path(dir.join("baseline_flip.csv"))?;
            for r in &flip.rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn exit_code(&self) -> i32 {
        if self.points.iter().any(|p| p.n_failed > 0) {
            2
        } else {
            0
        }
    }
}

fn holds_rows(report: &StatReport) -> Vec<HoldsRow> {
    let mut rows = Vec::new();
    for s in report.summaries.iter().filter(|s| s.metric == "m2") {
        if let Some(m4) = report.summary(s.method, s.ff, "m4") {
            rows.push(HoldsRow {
                method: s.method,
                ff: s.ff,
                m2_mean: s.mean,
                m4_mean: m4.mean,
                holds: s.mean < 0.0 && m4.mean > 0.5,
            });
        }
    }
    rows
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    crate::lens1::median(&v)
}

/// Variability of seed-averaged M2 and M4 across forget-set seeds.
pub fn sd_table(runs: &[(u64, Vec<MetricRecord>)]) -> Vec<SdRow> {
    // (dataset, ff) -> method -> forget seed -> (m2 values, m4 values, forget size)
    type PerSeed = BTreeMap<u64, (Vec<f64>, Vec<f64>, usize)>;
    let mut acc: BTreeMap<(String, u64), BTreeMap<Method, PerSeed>> = BTreeMap::new();
    for (seed, recs) in runs {
        for r in recs {
            let (Some(m2), Some(m4)) = (r.metric("m2"), r.metric("m4")) else {
                continue;
            };
            let e = acc
                .entry((r.cell.dataset.clone(), r.cell.ff.to_bits()))
                .or_default()
                .entry(r.cell.method)
                .or_default()
                .entry(*seed)
                .or_default();
            e.0.push(m2);
            e.1.push(m4);
            e.2 = r.forget_size;
        }
    }
    let mut rows = Vec::new();
    for ((dataset, ff_bits), methods) in acc {
        let (mut m2_sds, mut m4_sds) = (Vec::new(), Vec::new());
        let (mut n_negative, mut n_values, mut forget_size) = (0, 0, 0);
        for per_seed in methods.values() {
            let m2: Vec<f64> = per_seed.values().map(|(v, _, _)| mean(v)).collect();
            let m4: Vec<f64> = per_seed.values().map(|(_, v, _)| mean(v)).collect();
            n_negative += m2.iter().filter(|v| **v < 0.0).count();
            n_values += m2.len();
            forget_size = per_seed.values().map(|e| e.2).max().unwrap_or(0);
            m2_sds.push(sd(&m2));
            m4_sds.push(sd(&m4));
        }
        rows.push(SdRow {
            dataset,
            ff: f64::from_bits(ff_bits),
            forget_size,
            n_negative,
            n_values,
            m2_sd: median(m2_sds),
            m4_sd: median(m4_sds),
        });
    }
    rows
}

/// Sign comparison of mean M2 under the median and mean baselines.
pub fn baseline_flip(median_report: &StatReport, mean_report: &StatReport) -> BaselineFlip {
    let mut rows = Vec::new();
    let (mut sig_med, mut sig_mean) = (0, 0);
    for s in median_report.summaries.iter().filter(|s| s.metric == "m2") {
        let Some(t) = mean_report.summary(s.method, s.ff, "m2") else {
            continue;
        };
        sig_med += usize::from(s.primary_p.is_some_and(|p| p < ALPHA));
        sig_mean += usize::from(t.primary_p.is_some_and(|p| p < ALPHA));
        rows.push(BaselineRow {
            method: s.method,
            ff: s.ff,
            m2_median: s.mean,
            m2_mean: t.mean,
            shift: t.mean - s.mean,
            sign_flipped: (s.mean < 0.0) != (t.mean < 0.0),
        });
    }
    BaselineFlip {
        n_conditions: rows.len(),
        n_sign_flips: rows.iter().filter(|r| r.sign_flipped).count(),
        significant_median: sig_med,
        significant_mean: sig_mean,
        rows,
    }
}

/// Reruns the pipeline once per value of `axis`. Learning-rate points scale
/// every method's epochs by `reference_lr / lr`.
pub fn sweep(
    config: &RunConfig,
    cache: &ModelCache,
    threads: usize,
    axis: SweepAxis,
) -> Result<SweepReport, PipelineError> {
    config.validate()?;
    let sc = &config.sweep;
    let mut variants: Vec<(
        String,
        serde_json::Value,
        RunConfig,
        BTreeMap<String, usize>,
    )> = Vec::new();
    match axis {
        SweepAxis::LrU => {
            if sc.lr_values.iter().any(|&lr| lr <= 0.0) || sc.reference_lr <= 0.0 {
                return Err(PipelineError::Config(
                    "sweep learning rates must be positive".into(),
                ));
            }
            for &lr in &sc.lr_values {
                let mut c = config.clone();
                c.unlearn.lr = lr;
                let mut used = BTreeMap::new();
                for &m in &config.methods {
                    let base = config
                        .unlearn
                        .epochs
                        .get(&m)
                        .copied()
                        .unwrap_or_else(|| m.default_epochs());
                    if base == 0 {
                        continue;
                    }
                    let e = scaled_epochs(base, sc.reference_lr, lr);
                    c.unlearn.epochs.insert(m, e);
                    used.insert(m.name().to_string(), e);
                }
                variants.push((format!("lr_u={lr:e}"), serde_json::json!(lr), c, used));
            }
        }
        SweepAxis::ForgetSeed => {
            for &s in &sc.forget_seeds {
                let mut c = config.clone();
                c.forget_seed = s;
                variants.push((
                    format!("forget_seed={s}"),
                    serde_json::json!(s),
                    c,
                    BTreeMap::new(),
                ));
            }
        }
        SweepAxis::BaselineKind => {
            for &b in &sc.baselines {
                let mut c = config.clone();
                c.baseline = b;
                variants.push((
                    format!(
                        "baseline={}",
                        serde_json::to_value(b)?.as_str().unwrap_or("?")
                    ),
                    serde_json::to_value(b)?,
                    c,
                    BTreeMap::new(),
                ));
            }
        }
    }
    if variants.is_empty() {
        return Err(PipelineError::Config("sweep axis has no values".into()));
    }
    let mut points = Vec::new();
    let mut runs = Vec::new();
    for (label, value, c, epochs) in variants {
        let out = run_pipeline(&c, cache, threads)?;
        let holds = holds_rows(&out.report);
        if axis == SweepAxis::ForgetSeed {
            runs.push((c.forget_seed, out.records.clone()));
        }
        points.push(SweepPoint {
            label,
            value,
            epochs,
            n_failed: out.failures.len(),
            n_holds: holds.iter().filter(|h| h.holds).count(),
            holds,
            report: out.report,
        });
    }
    let sd = (axis == SweepAxis::ForgetSeed).then(|| sd_table(&runs));
    let flip = if axis == SweepAxis::BaselineKind {
        let find = |k: BaselineKind| {
            sc.baselines
                .iter()
                .position(|&b| b == k)
                .map(|i| &points[i].report)
        };
        match (find(BaselineKind::Median), find(BaselineKind::Mean)) {
            (Some(a), Some(b)) => Some(baseline_flip(a, b)),
            _ => None,
        }
    } else {
        None
    };
    Ok(SweepReport {
        axis,
        points,
        sd_table: sd,
        baseline_flip: flip,
    })
}
