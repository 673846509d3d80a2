use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{CellFailure, MetricRecord, PipelineError};
use crate::output;
use crate::stats::{self, LmmFit, WilcoxonResult};
use crate::train::Method;

pub const STAT_REPORT_VERSION: u32 = 1;
pub const ALPHA: f64 = 0.05;

/// Summarised metrics and the null each is tested against.
pub const SUMMARY_METRICS: [(&str, Option<f64>); 9] = [
    ("m1", None),
    ("m2", Some(0.0)),
    ("m3", Some(0.0)),
    ("m4", Some(0.5)),
    ("m4_pre", Some(0.5)),
    ("mia", Some(0.5)),
    ("retain_acc", None),
    ("forget_acc", None),
    ("test_acc", None),
];

pub const PAIRWISE_METRICS: [&str; 4] = ["m2", "m4", "mia", "retain_acc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimarySource {
    Lmm,
    /// The mixed model was singular or could not be fitted; the p-value is
    /// the Wilcoxon test on dataset-level means.
    WilcoxonFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: Method,
    pub ff: f64,
    pub metric: String,
    pub null_value: Option<f64>,
    pub n_obs: usize,
    pub n_datasets: usize,
    pub mean: f64,
    pub sd: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmm: Option<LmmFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lmm_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilcoxon: Option<WilcoxonResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilcoxon_error: Option<String>,
    /// Signed-rank test over every record, seeds pooled. Reported alongside;
    /// the fallback always uses dataset means.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wilcoxon_records: Option<WilcoxonResult>,
    pub primary_p: Option<f64>,
    pub primary_source: Option<PrimarySource>,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseComparison {
    pub ff: f64,
    pub metric: String,
    pub method_a: Method,
    pub method_b: Method,
    pub n_datasets: usize,
    /// Mean over datasets of `a − b`.
    pub mean_diff: f64,
    pub p: Option<f64>,
    pub p_adj: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub schema_version: u32,
    pub n_records: usize,
    pub n_failed: usize,
    pub failed_cells: Vec<CellFailure>,
    pub summaries: Vec<MetricSummary>,
    pub pairwise: Vec<PairwiseComparison>,
}

impl StatReport {
    pub fn summary(&self, method: Method, ff: f64, metric: &str) -> Option<&MetricSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.ff == ff && s.metric == metric)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-dataset means, in dataset order.
fn dataset_means(obs: &[(String, f64)]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (d, v) in obs {
        let e = acc.entry(d.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(d, (s, n))| (d, s / n as f64))
        .collect()
}

fn verdict(metric: &str, values: &[f64], mean: f64, p: Option<f64>, null: Option<f64>) -> String {
    let Some(null) = null else {
        return "descriptive".into();
    };
    if metric == "mia" {
        return if output::pass_window(values) {
            "pass".into()
        } else {
            "fail".into()
        };
    }
    let significant = p.is_some_and(|p| p < ALPHA);
    let text = match (significant, mean < null, metric) {
        (false, _, _) => "consistent with null",
        (true, true, "m2") => "residual memorisation",
        (true, false, "m2") => "closer to oracle than retain records",
        (true, true, "m3") => "moved away from oracle",
        (true, false, "m3") => "moved toward oracle",
        (true, true, _) => "over-displacement",
        (true, false, _) => "residual memorisation",
    };
    text.into()
}

fn summarise(
    method: Method,
    ff: f64,
    metric: &str,
    null: Option<f64>,
    obs: &[(String, f64)],
) -> MetricSummary {
    let values: Vec<f64> = obs.iter().map(|(_, v)| *v).collect();
    let groups: Vec<&str> = obs.iter().map(|(d, _)| d.as_str()).collect();
    let means = dataset_means(obs);
    let m = mean(&values);
    let mut s = MetricSummary {
        method,
        ff,
        metric: metric.to_string(),
        null_value: null,
        n_obs: values.len(),
        n_datasets: means.len(),
        mean: m,
        sd: sample_sd(&values),
        lmm: None,
        lmm_error: None,
        wilcoxon: None,
        wilcoxon_error: None,
        wilcoxon_records: None,
        primary_p: None,
        primary_source: None,
        verdict: String::new(),
    };
    if let Some(null) = null {
        let centred: Vec<f64> = values.iter().map(|v| v - null).collect();
        match stats::lmm_reml(&centred, &groups) {
            Ok(f) => s.lmm = Some(f),
            Err(e) => s.lmm_error = Some(e.to_string()),
        }
        let dm: Vec<f64> = means.values().copied().collect();
        match stats::wilcoxon_one_sample(&dm, null) {
            Ok(w) => s.wilcoxon = Some(w),
            Err(e) => s.wilcoxon_error = Some(e.to_string()),
        }
        s.wilcoxon_records = stats::wilcoxon_one_sample(&values, null).ok();
        match (&s.lmm, &s.wilcoxon) {
            (Some(f), _) if !f.singular => {
                s.primary_p = Some(f.p_wald);
                s.primary_source = Some(PrimarySource::Lmm);
            }
            (_, Some(w)) => {
                s.primary_p = Some(w.p_two_sided);
                s.primary_source = Some(PrimarySource::WilcoxonFallback);
            }
            _ => {}
        }
    }
    s.verdict = verdict(metric, &values, m, s.primary_p, null);
    s
}

type Condition = (Method, u64);

fn condition_key(method: Method, ff: f64) -> Condition {
    // ff is positive, so its bit pattern orders like the value.
    (method, ff.to_bits())
}

/// LMM, Wilcoxon fallback and verdict per (method, ff, metric), plus
/// BH-adjusted pairwise method comparisons per ff. `records` must be sorted
/// by cell key; the result is then independent of how they were produced.
pub fn aggregate(records: &[MetricRecord], failures: &[CellFailure]) -> StatReport {
    let mut by_cond: BTreeMap<Condition, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_cond
            .entry(condition_key(r.cell.method, r.cell.ff))
            .or_default()
            .push(r);
    }
    let mut summaries = Vec::new();
    for (&(method, ff_bits), recs) in &by_cond {
        let ff = f64::from_bits(ff_bits);
        for (metric, null) in SUMMARY_METRICS {
            let obs: Vec<(String, f64)> = recs
                .iter()
                .filter_map(|r| r.metric(metric).map(|v| (r.cell.dataset.clone(), v)))
                .collect();
            if obs.is_empty() {
                continue;
            }
            summaries.push(summarise(method, ff, metric, null, &obs));
        }
    }
    StatReport {
        schema_version: STAT_REPORT_VERSION,
        n_records: records.len(),
        n_failed: failures.len(),
        failed_cells: failures.to_vec(),
        summaries,
        pairwise: pairwise(records),
    }
}

fn pairwise(records: &[MetricRecord]) -> Vec<PairwiseComparison> {
    // ff -> method -> metric -> observations
    let mut by_ff: BTreeMap<u64, BTreeMap<Method, Vec<&MetricRecord>>> = BTreeMap::new();
    for r in records {
        by_ff
            .entry(r.cell.ff.to_bits())
            .or_default()
            .entry(r.cell.method)
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for (ff_bits, methods) in by_ff {
        let ff = f64::from_bits(ff_bits);
        let names: Vec<Method> = methods.keys().copied().collect();
        let mut block = Vec::new();
        for metric in PAIRWISE_METRICS {
            let means: BTreeMap<Method, BTreeMap<String, f64>> = methods
                .iter()
                .map(|(m, recs)| {
                    let obs: Vec<(String, f64)> = recs
                        .iter()
                        .filter_map(|r| r.metric(metric).map(|v| (r.cell.dataset.clone(), v)))
                        .collect();
                    (*m, dataset_means(&obs))
                })
                .collect();
            for (i, &a) in names.iter().enumerate() {
                for &b in &names[i + 1..] {
                    let (ma, mb) = (&means[&a], &means[&b]);
                    let (xa, xb): (Vec<f64>, Vec<f64>) = ma
                        .iter()
                        .filter_map(|(d, va)| mb.get(d).map(|vb| (*va, *vb)))
                        .unzip();
                    let mean_diff = if xa.is_empty() {
                        f64::NAN
                    } else {
                        xa.iter().zip(&xb).map(|(a, b)| a - b).sum::<f64>() / xa.len() as f64
                    };
                    let (p, error) = match stats::wilcoxon_paired(&xa, &xb) {
                        Ok(w) => (Some(w.p_two_sided), None),
                        Err(e) => (None, Some(e.to_string())),
                    };
                    block.push(PairwiseComparison {
                        ff,
                        metric: metric.to_string(),
                        method_a: a,
                        method_b: b,
                        n_datasets: xa.len(),
                        mean_diff,
                        p,
                        p_adj: None,
                        error,
                    });
                }
            }
        }
        let tested: Vec<usize> = (0..block.len()).filter(|&i| block[i].p.is_some()).collect();
        let ps: Vec<f64> = tested.iter().map(|&i| block[i].p.unwrap()).collect();
        if let Ok(adj) = stats::benjamini_hochberg(&ps) {
            for (&i, q) in tested.iter().zip(adj) {
                block[i].p_adj = Some(q);
            }
        }
        out.extend(block);
    }
    out
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    method: &'a str,
    ff: f64,
    metric: &'a str,
    n_obs: usize,
    n_datasets: usize,
    mean: f64,
    sd: f64,
    lmm_intercept: Option<f64>,
    lmm_p: Option<f64>,
    icc: Option<f64>,
    singular: Option<bool>,
    wilcoxon_p: Option<f64>,
    r_rb: Option<f64>,
    wilcoxon_records_p: Option<f64>,
    r_rb_records: Option<f64>,
    primary_p: Option<f64>,
    primary_source: &'a str,
    verdict: &'a str,
}

pub fn write_summary_csv<W: Write>(report: &StatReport, w: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(w);
    for s in &report.summaries {
        w.serialize(SummaryRow {
            method: s.method.name(),
            ff: s.ff,
            metric: &s.metric,
            n_obs: s.n_obs,
            n_datasets: s.n_datasets,
            mean: s.mean,
            sd: s.sd,
            lmm_intercept: s.lmm.as_ref().map(|f| f.intercept),
            lmm_p: s.lmm.as_ref().map(|f| f.p_wald),
            icc: s.lmm.as_ref().map(|f| f.icc),
            singular: s.lmm.as_ref().map(|f| f.singular),
            wilcoxon_p: s.wilcoxon.as_ref().map(|x| x.p_two_sided),
            r_rb: s.wilcoxon.as_ref().map(|x| x.r_rb),
            wilcoxon_records_p: s.wilcoxon_records.as_ref().map(|x| x.p_two_sided),
            r_rb_records: s.wilcoxon_records.as_ref().map(|x| x.r_rb),
            primary_p: s.primary_p,
            primary_source: match s.primary_source {
                Some(PrimarySource::Lmm) => "lmm",
                Some(PrimarySource::WilcoxonFallback) => "fallback",
                None => "",
            },
            verdict: &s.verdict,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_pairwise_csv<W: Write>(report: &StatReport, w: W) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record([
        "ff",
        "metric",
        "method_a",
        "method_b",
        "n_datasets",
        "mean_diff",
        "p",
        "p_adj",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &report.pairwise {
        w.write_record([
            c.ff.to_string(),
            c.metric.clone(),
            c.method_a.name().to_string(),
            c.method_b.name().to_string(),
            c.n_datasets.to_string(),
            c.mean_diff.to_string(),
            opt(c.p),
            opt(c.p_adj),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lens1::{BaselineKind, Lens1Result};
    use crate::output::OutputReport;
    use crate::pipeline::RunCell;

    fn rec(dataset: &str, seed: u64, method: Method, m2: f64, mia: f64) -> MetricRecord {
        MetricRecord {
            cell: RunCell {
                dataset: dataset.into(),
                ff: 0.05,
                train_seed: seed,
                unlearn_seed: 100,
                method,
            },
            lens1: Some(Lens1Result {
                m1: 0.9 + m2,
                m2,
                m3: Some(0.01),
                retain_baseline: 0.9,
                baseline_kind: BaselineKind::Median,
                retain_subsample_size: 10,
                retain_subsample_seed: seed,
            }),
            lens2: None,
            output: Some(OutputReport {
                mia_balanced_acc: mia,
                mia_threshold: 1.0,
                retain_acc: 0.9,
                forget_acc: 0.9,
                test_acc: 0.85,
            }),
            m4_pre_unlearning: None,
            oracle_retain_acc: Some(0.9),
            original_fingerprint: None,
            forget_size: 10,
        }
    }

    #[test]
    fn constant_offsets_fall_back_to_wilcoxon() {
        // Identical per-dataset means: zero between-dataset variance.
        let mut recs = Vec::new();
        for d in ["a", "b", "c", "d", "e", "f"] {
            for (s, noise) in [(0, -0.001), (1, 0.001)] {
                recs.push(rec(d, s, Method::FineTune, -0.01 + noise, 0.52));
            }
        }
        let r = aggregate(&recs, &[]);
        let m2 = r.summary(Method::FineTune, 0.05, "m2").unwrap();
        assert!(m2.lmm.as_ref().unwrap().singular);
        assert_eq!(m2.primary_source, Some(PrimarySource::WilcoxonFallback));
        assert_eq!(
            m2.primary_p,
            Some(m2.wilcoxon.as_ref().unwrap().p_two_sided)
        );
        assert_eq!(m2.n_datasets, 6);
        assert_eq!(m2.wilcoxon_records.as_ref().unwrap().n_effective, 12);
        assert_eq!(
            r.summary(Method::FineTune, 0.05, "mia").unwrap().verdict,
            "pass"
        );
        assert_eq!(
            r.summary(Method::FineTune, 0.05, "m1").unwrap().verdict,
            "descriptive"
        );
    }

    #[test]
    fn pairwise_uses_bh_within_ff() {
        let mut recs = Vec::new();
        for (i, d) in ["a", "b", "c", "d", "e", "f", "g", "h"].iter().enumerate() {
            let x = i as f64 * 0.001;
            recs.push(rec(d, 0, Method::FineTune, -0.01 - x, 0.5));
            recs.push(rec(d, 0, Method::NegGradPlus, -0.02 - 2.0 * x, 0.6));
            recs.push(rec(d, 0, Method::Scrub, -0.01 - x * 1.5, 0.55));
        }
        recs.sort_by(|a, b| a.cell.key_cmp(&b.cell));
        let r = aggregate(&recs, &[]);
        // 3 pairs × 4 metrics
        assert_eq!(r.pairwise.len(), 12);
        let tested: Vec<&PairwiseComparison> =
            r.pairwise.iter().filter(|c| c.p.is_some()).collect();
        let ps: Vec<f64> = tested.iter().map(|c| c.p.unwrap()).collect();
        let adj = stats::benjamini_hochberg(&ps).unwrap();
        for (c, q) in tested.iter().zip(adj) {
            assert_eq!(c.p_adj, Some(q));
        }
        // retain accuracies are identical everywhere: untestable, not fabricated
        assert!(r
            .pairwise
            .iter()
            .filter(|c| c.metric == "retain_acc")
            .all(|c| c.p.is_none() && c.error.is_some()));
    }
}
