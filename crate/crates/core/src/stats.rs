//! Inference stack: Wilcoxon signed-rank tests, rank-biserial effect size,
//! random-intercept linear mixed model fitted by REML, and
//! Benjamini–Hochberg adjustment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest effective sample size that gets the exact null distribution.
pub const EXACT_MAX_N: usize = 20;

const LAMBDA_MIN: f64 = 1e-10;
const LAMBDA_MAX: f64 = 1e6;
const SINGULAR_RATIO: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum StatError {
    #[error("every difference is zero")]
    AllZeroDifferences,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFewValues { needed: usize, got: usize },
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("response has no variance")]
    ZeroVariance,
    #[error("p-value {0} outside [0, 1]")]
    OutOfRange(f64),
}

/// Standard normal upper tail, `P(Z > z)`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    /// Exact when `n_effective <= 20`, normal otherwise.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub w_plus: f64,
    pub w_minus: f64,
    pub w: f64,
    pub n_effective: usize,
    pub p_two_sided: f64,
    pub exact: bool,
    pub r_rb: f64,
}

/// Midranks of `abs_vals` (1-based), ties sharing the mean rank.
pub fn midranks(abs_vals: &[f64]) -> Vec<f64> {
    let n = abs_vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs_vals[a].total_cmp(&abs_vals[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_vals[order[j + 1]] == abs_vals[order[i]] {
            j += 1;
        }
        let r = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p: `min(1, 2·P(W+ <= w))` under independent fair signs on
/// the observed (mid)ranks. Midranks are half-integers, so doubled ranks are
/// integers and the null distribution is counted exactly.
fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let limit = (w * 2.0).round() as usize;
    let tail: u64 = counts[..=limit.min(total)].iter().sum();
    let p = 2.0 * tail as f64 / 2f64.powi(ranks.len() as i32);
    p.min(1.0)
}

/// Normal approximation with tie-corrected variance and 0.5 continuity
/// correction.
fn normal_p(ranks: &[f64], abs_vals: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut sorted = abs_vals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((mu - w).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * normal_sf(z)).min(1.0)
}

pub fn wilcoxon_one_sample(values: &[f64], null_value: f64) -> Result<WilcoxonResult, StatError> {
    wilcoxon_with(values, null_value, PMethod::Auto)
}

/// Signed-rank test of `values` against `null_value` with a chosen p route.
pub fn wilcoxon_with(
    values: &[f64],
    null_value: f64,
    method: PMethod,
) -> Result<WilcoxonResult, StatError> {
    if values.iter().any(|v| !v.is_finite()) || !null_value.is_finite() {
        return Err(StatError::NonFiniteInput);
    }
    let diffs: Vec<f64> = values
        .iter()
        .map(|v| v - null_value)
        .filter(|&d| d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(StatError::AllZeroDifferences);
    }
    let abs_vals: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs_vals);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let n = diffs.len();
    let w_minus = (n * (n + 1)) as f64 / 2.0 - w_plus;
    let w = w_plus.min(w_minus);
    let exact = match method {
        PMethod::Auto => n <= EXACT_MAX_N,
        PMethod::Exact => true,
        PMethod::Normal => false,
    };
    let p = if exact {
        exact_p(&ranks, w)
    } else {
        normal_p(&ranks, &abs_vals, w)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        w,
        n_effective: n,
        p_two_sided: p,
        exact,
        r_rb: rank_biserial(w, n),
    })
}

/// Signed-rank test on the paired differences `a - b`.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatError> {
    if a.len() != b.len() {
        return Err(StatError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatError::TooFewValues {
            needed: 2,
            got: a.len(),
        });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    wilcoxon_one_sample(&d, 0.0)
}

/// `1 − 4W / [n(n+1)]`.
pub fn rank_biserial(w: f64, n: usize) -> f64 {
    let n = n as f64;
    1.0 - 4.0 * w / (n * (n + 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub intercept: f64,
    pub se_intercept: f64,
    pub wald_z: f64,
    pub p_wald: f64,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    pub icc: f64,
    pub singular: bool,
    pub n_groups: usize,
    pub n_obs: usize,
    /// Variance ratio `sigma_u2 / sigma_e2` at the optimum.
    pub lambda: f64,
    pub reml_loglik: f64,
}

/// Per-group sufficient statistics for the random-intercept model.
#[derive(Debug, Clone)]
pub struct GroupedData {
    sizes: Vec<f64>,
    means: Vec<f64>,
    ssw: f64,
    n_obs: usize,
}

impl GroupedData {
    pub fn new<G: Ord + Clone>(values: &[f64], group_ids: &[G]) -> Result<Self, StatError> {
        if values.len() != group_ids.len() {
            return Err(StatError::LengthMismatch(values.len(), group_ids.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatError::NonFiniteInput);
        }
        let mut groups: std::collections::BTreeMap<G, Vec<f64>> = Default::default();
        for (v, g) in values.iter().zip(group_ids) {
            groups.entry(g.clone()).or_default().push(*v);
        }
        if groups.len() < 2 {
            return Err(StatError::TooFewGroups(groups.len()));
        }
        if values.len() < 3 {
            return Err(StatError::TooFewValues {
                needed: 3,
                got: values.len(),
            });
        }
        let mut sizes = Vec::new();
        let mut means = Vec::new();
        let mut ssw = 0.0;
        for vals in groups.values() {
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            ssw += vals.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            sizes.push(vals.len() as f64);
            means.push(m);
        }
        Ok(Self {
            sizes,
            means,
            ssw,
            n_obs: values.len(),
        })
    }

    /// GLS intercept, weights sum and residual quadratic form at ratio `lambda`.
    fn gls(&self, lambda: f64) -> (f64, f64, f64) {
        let w: Vec<f64> = self.sizes.iter().map(|&n| n / (1.0 + n * lambda)).collect();
        let sw: f64 = w.iter().sum();
        let beta = w.iter().zip(&self.means).map(|(w, m)| w * m).sum::<f64>() / sw;
        let q = self.ssw
            + w.iter()
                .zip(&self.means)
                .map(|(w, m)| w * (m - beta).powi(2))
                .sum::<f64>();
        (beta, sw, q)
    }

    /// REML log-likelihood with the residual variance profiled out, up to an
    /// additive constant.
    pub fn profiled_reml(&self, lambda: f64) -> f64 {
        let (_, sw, q) = self.gls(lambda);
        let df = (self.n_obs - 1) as f64;
        let logdet: f64 = self.sizes.iter().map(|&n| (1.0 + n * lambda).ln()).sum();
        -0.5 * (df * (q / df).ln() + logdet + sw.ln() + df)
    }

    /// Derivative of [`Self::profiled_reml`] with respect to `lambda`.
    fn reml_score(&self, lambda: f64) -> f64 {
        let (beta, sw, q) = self.gls(lambda);
        let df = (self.n_obs - 1) as f64;
        let w: Vec<f64> = self.sizes.iter().map(|&n| n / (1.0 + n * lambda)).collect();
        let sw2: f64 = w.iter().map(|w| w * w).sum();
        let dq: f64 = -w
            .iter()
            .zip(&self.means)
            .map(|(w, m)| w * w * (m - beta).powi(2))
            .sum::<f64>();
        -0.5 * (df * dq / q + sw - sw2 / sw)
    }
}

/// Root of a decreasing-through-zero `score` on `[a, b]`, by bisection to
/// floating-point resolution.
fn bisect_root(score: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return mid;
        }
        if score(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// `y_ij = β0 + u_i + ε_ij` by REML over `λ = σu²/σε²`.
///
/// The profiled likelihood is scanned on a log-spaced grid over
/// `[1e-10, 1e6]`, then refined around the best grid point: by bisection on
/// the analytic score when it changes sign there, else by golden-section
/// search in `log λ`. The `λ = 0` boundary is compared explicitly; a boundary
/// optimum (ratio below 1e-10) marks the fit singular with `σu² = 0`.
pub fn lmm_reml<G: Ord + Clone>(values: &[f64], group_ids: &[G]) -> Result<LmmFit, StatError> {
    let data = GroupedData::new(values, group_ids)?;
    let (_, _, q0) = data.gls(0.0);
    if q0 <= 0.0 {
        return Err(StatError::ZeroVariance);
    }
    let f = |log_l: f64| data.profiled_reml(log_l.exp());
    let (lo, hi) = (LAMBDA_MIN.ln(), LAMBDA_MAX.ln());
    const GRID: usize = 200;
    let step = (hi - lo) / GRID as f64;
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for k in 0..=GRID {
        let v = f(lo + k as f64 * step);
        if v > best_val {
            best_val = v;
            best = k;
        }
    }
    let a = lo + (best.saturating_sub(1)) as f64 * step;
    let b = (lo + (best + 1) as f64 * step).min(hi);
    let (la, lb) = (a.exp(), b.exp());
    let mut log_l = if data.reml_score(la) > 0.0 && data.reml_score(lb) < 0.0 {
        bisect_root(|l| data.reml_score(l), la, lb).ln()
    } else {
        golden_max(f, a, b, 1e-12)
    };
    if f(lo) >= f(log_l) {
        log_l = lo;
    }
    let mut lambda = log_l.exp();
    let mut loglik = f(log_l);
    let at_zero = data.profiled_reml(0.0);
    let singular = log_l - lo < 1e-6 || at_zero >= loglik;
    if singular {
        lambda = 0.0;
        loglik = at_zero;
    }
    let (beta, _, q) = data.gls(lambda);
    let sigma_e2 = q / (data.n_obs - 1) as f64;
    let sigma_u2 = if singular { 0.0 } else { lambda * sigma_e2 };
    let singular = singular || sigma_u2 < SINGULAR_RATIO * sigma_e2;
    let sigma_u2 = if singular { 0.0 } else { sigma_u2 };
    let info: f64 = data
        .sizes
        .iter()
        .map(|&n| n / (sigma_e2 + n * sigma_u2))
        .sum();
    let se = info.powf(-0.5);
    let z = beta / se;
    Ok(LmmFit {
        intercept: beta,
        se_intercept: se,
        wald_z: z,
        p_wald: (2.0 * normal_sf(z.abs())).min(1.0),
        sigma_u2,
        sigma_e2,
        icc: sigma_u2 / (sigma_u2 + sigma_e2),
        singular,
        n_groups: data.sizes.len(),
        n_obs: data.n_obs,
        lambda: if singular { 0.0 } else { lambda },
        reml_loglik: loglik,
    })
}

/// Step-up adjusted p-values, returned in input order.
pub fn benjamini_hochberg(pvalues: &[f64]) -> Result<Vec<f64>, StatError> {
    if let Some(&bad) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(StatError::OutOfRange(bad));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = f64::INFINITY;
    for (pos, &i) in order.iter().enumerate().rev() {
        let rank = pos + 1;
        let candidate = (m as f64 / rank as f64) * pvalues[i];
        running = running.min(candidate);
        adjusted[i] = running.min(1.0);
    }
    Ok(adjusted)
}
