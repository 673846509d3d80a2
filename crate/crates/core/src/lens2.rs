//! Oracle-free metric M4: where each forget record's nearest-retain-neighbour
//! similarity falls among the retain set's leave-one-out nearest-neighbour
//! similarities, all measured inside the unlearned model.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::PartitionSpec;
use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::rng::{self, purpose};
use crate::scalar::Scalar;

/// Default ceiling on the retain pool.
pub const DEFAULT_CAP: usize = 2000;
const BLOCK: usize = 256;

#[derive(Debug, Error)]
pub enum Lens2Error {
    #[error("retain set is empty")]
    EmptyRetainSet,
    #[error("retain pool has {0} record(s); leave-one-out needs at least 2")]
    RetainTooSmall(usize),
    #[error("forget set is empty")]
    EmptyForgetSet,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lens2Result {
    /// Forget record indices, aligned with the per-record vectors.
    pub forget_idx: Vec<usize>,
    pub per_record_rank: Vec<f64>,
    pub aggregate: f64,
    pub retain_cap_applied: bool,
    pub cap_seed: u64,
    pub s_f_values: Vec<f64>,
    pub s_r_values: Vec<f64>,
}

/// The retain records M4 compares against: the full retain set, or a
/// uniform subsample of `cap` records when it is larger. Sorted.
pub fn retain_pool(retain: &[usize], cap: usize, cap_seed: u64) -> (Vec<usize>, bool) {
    if retain.len() <= cap {
        let mut v = retain.to_vec();
        v.sort_unstable();
        return (v, false);
    }
    let mut rng = rng::keyed_stream(purpose::M4_CAP, "", cap_seed);
    let mut v: Vec<usize> = rng::sample_positions(&mut rng, retain.len(), cap)
        .into_iter()
        .map(|p| retain[p])
        .collect();
    v.sort_unstable();
    (v, true)
}

fn gather<S: Scalar>(m: &EmbeddingMatrix<S>, idx: &[usize]) -> Result<Array2<f64>, Lens2Error> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= m.n_records()) {
        return Err(EmbeddingError::IndexOutOfRange {
            index: bad,
            n_records: m.n_records(),
        }
        .into());
    }
    Ok(Array2::from_shape_vec((idx.len(), m.dim()), m.rows_f64(idx)).expect("shape"))
}

/// Max similarity of every query row against `pool`, optionally skipping the
/// pool entry at the same position (leave-one-out).
fn nearest_sims(queries: ArrayView2<f64>, pool: ArrayView2<f64>, leave_one_out: bool) -> Vec<f64> {
    let n = queries.nrows();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let pool_t = pool.t();
    starts
        .par_iter()
        .flat_map_iter(|&start| {
            let end = (start + BLOCK).min(n);
            let sims = queries.slice(s![start..end, ..]).dot(&pool_t);
            (start..end)
                .map(|q| {
                    let row = sims.row(q - start);
                    row.iter()
                        .enumerate()
                        .filter(|&(j, _)| !(leave_one_out && j == q))
                        .map(|(_, &v)| v)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

fn require_normalized<S: Scalar>(m: &EmbeddingMatrix<S>) -> Result<(), Lens2Error> {
    if !m.is_normalized() {
        return Err(EmbeddingError::NotNormalized.into());
    }
    Ok(())
}

/// Nearest-retain-neighbour similarity of one forget record, over the
/// (capped) retain pool.
pub fn s_forget<S: Scalar>(
    m: &EmbeddingMatrix<S>,
    pool: &[usize],
    x: usize,
) -> Result<f64, Lens2Error> {
    require_normalized(m)?;
    if pool.is_empty() {
        return Err(Lens2Error::EmptyRetainSet);
    }
    let q = gather(m, &[x])?;
    let p = gather(m, pool)?;
    Ok(nearest_sims(q.view(), p.view(), false)[0])
}

/// Leave-one-out nearest-retain-neighbour similarity of the pool member
/// `x`, which must belong to `pool`.
pub fn s_retain_loo<S: Scalar>(
    m: &EmbeddingMatrix<S>,
    pool: &[usize],
    x: usize,
) -> Result<f64, Lens2Error> {
    require_normalized(m)?;
    if pool.len() < 2 {
        return Err(Lens2Error::RetainTooSmall(pool.len()));
    }
    let pos = pool
        .iter()
        .position(|&i| i == x)
        .expect("s_retain_loo: record is not in the retain pool");
    let q = gather(m, &[x])?;
    let p = gather(m, pool)?;
    let sims = q.dot(&p.t());
    Ok(sims
        .row(0)
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != pos)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Fraction of `sorted_sr` at or below `s_f` (non-strict, ties count).
pub fn percentile_rank(sorted_sr: &[f64], s_f: f64) -> f64 {
    sorted_sr.partition_point(|&v| v <= s_f) as f64 / sorted_sr.len() as f64
}

/// Per-record and aggregate M4 for the forget set of `part`.
pub fn m4<S: Scalar>(
    m: &EmbeddingMatrix<S>,
    part: &PartitionSpec,
    cap: usize,
    cap_seed: u64,
) -> Result<Lens2Result, Lens2Error> {
    require_normalized(m)?;
    if part.forget.is_empty() {
        return Err(Lens2Error::EmptyForgetSet);
    }
    if part.retain.is_empty() {
        return Err(Lens2Error::EmptyRetainSet);
    }
    let (pool, capped) = retain_pool(&part.retain, cap, cap_seed);
    if pool.len() < 2 {
        return Err(Lens2Error::RetainTooSmall(pool.len()));
    }
    let pool_rows = gather(m, &pool)?;
    let forget_rows = gather(m, &part.forget)?;
    let s_r = nearest_sims(pool_rows.view(), pool_rows.view(), true);
    let s_f = nearest_sims(forget_rows.view(), pool_rows.view(), false);
    let mut sorted = s_r.clone();
    sorted.sort_by(f64::total_cmp);
    let ranks: Vec<f64> = s_f.iter().map(|&v| percentile_rank(&sorted, v)).collect();
    let aggregate = ranks.iter().sum::<f64>() / ranks.len() as f64;
    Ok(Lens2Result {
        forget_idx: part.forget.clone(),
        per_record_rank: ranks,
        aggregate,
        retain_cap_applied: capped,
        cap_seed,
        s_f_values: s_f,
        s_r_values: s_r,
    })
}

/// Per-record audit export: `record_index,s_f,rank`.
pub fn write_rank_csv<W: Write>(res: &Lens2Result, mut w: W) -> Result<(), Lens2Error> {
    writeln!(w, "record_index,s_f,rank")?;
    for ((i, sf), r) in res
        .forget_idx
        .iter()
        .zip(&res.s_f_values)
        .zip(&res.per_record_rank)
    {
        writeln!(w, "{i},{sf},{r}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::ModelRole;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn unit(rows: &[Vec<f64>]) -> EmbeddingMatrix<f64> {
        EmbeddingMatrix::from_rows(rows, ModelRole::Unlearned)
            .unwrap()
            .l2_normalize()
            .unwrap()
    }

    fn part(retain: Vec<usize>, forget: Vec<usize>) -> PartitionSpec {
        PartitionSpec {
            retain,
            forget,
            test: vec![],
            ff: 0.1,
            split_seed: 0,
            forget_seed: 0,
        }
    }

    #[test]
    fn s_forget_examples() {
        let m = unit(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![0.0, -1.0],
            vec![H, H],
        ]);
        let pool = [0, 1];
        assert!((s_forget(&m, &pool, 2).unwrap() - 1.0).abs() < 1e-12);
        let m2 = unit(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        assert_eq!(s_forget(&m2, &[0, 1], 2).unwrap(), 0.0);
        assert!((s_forget(&m, &pool, 4).unwrap() - H).abs() < 1e-12);
        assert!(matches!(
            s_forget(&m, &[], 2),
            Err(Lens2Error::EmptyRetainSet)
        ));
    }

    #[test]
    fn s_retain_examples() {
        let m = unit(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((s_retain_loo(&m, &[0, 1], 0).unwrap() - 1.0).abs() < 1e-12);
        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![H, H]]);
        assert_eq!(s_retain_loo(&m, &[0, 1], 0).unwrap(), 0.0);
        assert_eq!(s_retain_loo(&m, &[0, 1], 1).unwrap(), 0.0);
        for x in 0..3 {
            assert!((s_retain_loo(&m, &[0, 1, 2], x).unwrap() - H).abs() < 1e-12);
        }
        assert!(matches!(
            s_retain_loo(&m, &[0], 0),
            Err(Lens2Error::RetainTooSmall(1))
        ));
    }

    #[test]
    fn m4_examples() {
        // forget row 3 duplicates retain row 0
        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![H, H], vec![1.0, 0.0]]);
        let r = m4(&m, &part(vec![0, 1, 2], vec![3]), DEFAULT_CAP, 0).unwrap();
        assert_eq!(r.per_record_rank, vec![1.0]);

        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![H, H], vec![-1.0, 0.0]]);
        let r = m4(&m, &part(vec![0, 1, 2], vec![3]), DEFAULT_CAP, 0).unwrap();
        assert_eq!(r.s_f_values, vec![0.0]);
        assert_eq!(r.per_record_rank, vec![0.0]);
        assert_eq!(r.aggregate, 0.0);
        assert!(!r.retain_cap_applied);
        assert_eq!(r.s_r_values.len(), 3);
    }

    #[test]
    fn m4_matches_scalar_routes() {
        let mut rng = rng::seeded(11);
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..5).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let m = unit(&rows);
        let p = part((0..30).collect(), (30..40).collect());
        let r = m4(&m, &p, DEFAULT_CAP, 0).unwrap();
        for (k, &x) in p.forget.iter().enumerate() {
            assert!((r.s_f_values[k] - s_forget(&m, &p.retain, x).unwrap()).abs() < 1e-12);
        }
        for (k, &x) in p.retain.iter().enumerate() {
            assert!((r.s_r_values[k] - s_retain_loo(&m, &p.retain, x).unwrap()).abs() < 1e-12);
        }
        let mean = r.per_record_rank.iter().sum::<f64>() / r.per_record_rank.len() as f64;
        assert_eq!(r.aggregate, mean);
    }

    #[test]
    fn cap_applies_and_is_consistent() {
        let mut rng = rng::seeded(5);
        let rows: Vec<Vec<f64>> = (0..120)
            .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let m = unit(&rows);
        let p = part((0..100).collect(), (100..120).collect());
        let capped = m4(&m, &p, 50, 9).unwrap();
        assert!(capped.retain_cap_applied);
        assert_eq!(capped.s_r_values.len(), 50);
        assert_eq!(capped, m4(&m, &p, 50, 9).unwrap());
        let uncapped = m4(&m, &p, 100, 9).unwrap();
        let other_seed = m4(&m, &p, 1000, 77).unwrap();
        assert!(!uncapped.retain_cap_applied);
        assert_eq!(uncapped.per_record_rank, other_seed.per_record_rank);
        assert_eq!(uncapped.s_r_values, other_seed.s_r_values);
    }

    #[test]
    fn rank_csv_export() {
        let m = unit(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![H, H], vec![-1.0, 0.0]]);
        let r = m4(&m, &part(vec![0, 1, 2], vec![3]), DEFAULT_CAP, 0).unwrap();
        let mut buf = Vec::new();
        write_rank_csv(&r, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "record_index,s_f,rank\n3,0,0\n"
        );
    }

    #[test]
    fn tie_rule_is_non_strict() {
        assert_eq!(percentile_rank(&[0.1, 0.5, 0.5, 0.9], 0.5), 0.75);
        assert_eq!(percentile_rank(&[0.1, 0.5, 0.5, 0.9], 0.4999), 0.25);
    }

    fn random_orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::seeded(seed);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        while basis.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
        basis
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn invariants(seed in 0u64..10_000, bump in 0.0f64..0.5) {
            let d = 6;
            let mut rng = rng::seeded(seed);
            let rows: Vec<Vec<f64>> = (0..50)
                .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let m = unit(&rows);
            let p = part((0..40).collect(), (40..50).collect());
            let base = m4(&m, &p, DEFAULT_CAP, 0).unwrap();
            for r in &base.per_record_rank {
                prop_assert!((0.0..=1.0).contains(r));
            }

            // monotone in s_f
            let mut sorted = base.s_r_values.clone();
            sorted.sort_by(f64::total_cmp);
            for &sf in &base.s_f_values {
                prop_assert!(percentile_rank(&sorted, sf + bump) >= percentile_rank(&sorted, sf));
            }

            // rotation invariance
            let q = random_orthogonal(d, seed ^ 0xABCD);
            let rotated: Vec<Vec<f64>> = m
                .data()
                .chunks(d)
                .map(|row| (0..d).map(|i| (0..d).map(|j| q[i][j] * row[j]).sum()).collect())
                .collect();
            let rm = EmbeddingMatrix::with_flag(
                50, d, rotated.concat(), true, ModelRole::Unlearned,
            ).unwrap();
            let rot = m4(&rm, &p, DEFAULT_CAP, 0).unwrap();
            for (a, b) in base.s_f_values.iter().zip(&rot.s_f_values) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in base.s_r_values.iter().zip(&rot.s_r_values) {
                prop_assert!((a - b).abs() < 1e-6);
            }
            prop_assert!((base.aggregate - rot.aggregate).abs() < 1e-6);
        }
    }
}
