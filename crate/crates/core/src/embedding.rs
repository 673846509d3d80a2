//! Dense per-record embedding storage and cosine-similarity primitives.
//!
//! Normalisation is an explicit state transition: similarity calls refuse
//! matrices whose `normalized` flag is not set.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{dot_f64, Scalar};

const NORM_FLOOR: f64 = 1e-12;
const UNIT_TOLERANCE: f64 = 1e-5;

pub const RULR_MAGIC: &[u8; 4] = b"RULR";
pub const RULR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("row {0} has zero norm (dead embedding)")]
    ZeroNormRow(usize),
    #[error("matrix is not L2-normalised")]
    NotNormalized,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("record count mismatch: {0} vs {1}")]
    CountMismatch(usize, usize),
    #[error("record index {index} out of range for {n_records} records")]
    IndexOutOfRange { index: usize, n_records: usize },
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("row {row} claims to be normalised but has norm {norm}")]
    NotUnitRow { row: usize, norm: f64 },
    #[error("bad embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Original,
    Unlearned,
    Oracle,
    #[default]
    External,
}

/// `n_records × dim` row-major matrix; row `r` is record `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix<S: Scalar> {
    n_records: usize,
    dim: usize,
    data: Vec<S>,
    normalized: bool,
    role: ModelRole,
}

impl<S: Scalar> EmbeddingMatrix<S> {
    /// Builds an un-normalised matrix after checking shape and finiteness.
    pub fn new(
        n_records: usize,
        dim: usize,
        data: Vec<S>,
        role: ModelRole,
    ) -> Result<Self, EmbeddingError> {
        Self::with_flag(n_records, dim, data, false, role)
    }

    /// Builds a matrix with an explicit normalisation flag. A `true` flag is
    /// verified: every row must have unit norm within 1e-5.
    pub fn with_flag(
        n_records: usize,
        dim: usize,
        data: Vec<S>,
        normalized: bool,
        role: ModelRole,
    ) -> Result<Self, EmbeddingError> {
        if n_records == 0 || dim == 0 {
            return Err(EmbeddingError::Shape(format!(
                "need at least one record and one dimension, got {n_records}x{dim}"
            )));
        }
        if data.len() != n_records * dim {
            return Err(EmbeddingError::Shape(format!(
                "data length {} != {n_records}x{dim}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let m = Self {
            n_records,
            dim,
            data,
            normalized,
            role,
        };
        if normalized {
            for r in 0..n_records {
                let norm = m.row_norm(r);
                if (norm - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(EmbeddingError::NotUnitRow { row: r, norm });
                }
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<S>], role: ModelRole) -> Result<Self, EmbeddingError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(EmbeddingError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), dim, data, role)
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn with_role(mut self, role: ModelRole) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn row_norm(&self, r: usize) -> f64 {
        let row = self.row(r);
        dot_f64(row, row).sqrt()
    }

    /// Divides every row by its Euclidean norm. Already-normalised input is
    /// returned unchanged.
    pub fn l2_normalize(&self) -> Result<Self, EmbeddingError> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.n_records {
            let norm = self.row_norm(r);
            if norm < NORM_FLOOR {
                return Err(EmbeddingError::ZeroNormRow(r));
            }
            data.extend(self.row(r).iter().map(|&v| S::of(v.as_f64() / norm)));
        }
        Ok(Self {
            n_records: self.n_records,
            dim: self.dim,
            data,
            normalized: true,
            role: self.role,
        })
    }

    fn check_index(&self, index: usize) -> Result<(), EmbeddingError> {
        if index >= self.n_records {
            return Err(EmbeddingError::IndexOutOfRange {
                index,
                n_records: self.n_records,
            });
        }
        Ok(())
    }

    /// Row-wise copy widened to f64, used by the blocked nearest-neighbour
    /// kernels.
    pub fn rows_f64(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &r in idx {
            out.extend(self.row(r).iter().map(|v| v.as_f64()));
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> EmbeddingMatrix<T> {
        EmbeddingMatrix {
            n_records: self.n_records,
            dim: self.dim,
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
            normalized: self.normalized,
            role: self.role,
        }
    }
}

/// Same-record similarity across two models.
pub fn cosine_cross<S: Scalar>(
    a: &EmbeddingMatrix<S>,
    b: &EmbeddingMatrix<S>,
    record: usize,
) -> Result<f64, EmbeddingError> {
    check_pair(a, b)?;
    a.check_index(record)?;
    b.check_index(record)?;
    Ok(dot_f64(a.row(record), b.row(record)))
}

/// Two-record similarity within one model.
pub fn cosine_within<S: Scalar>(
    m: &EmbeddingMatrix<S>,
    r1: usize,
    r2: usize,
) -> Result<f64, EmbeddingError> {
    if !m.normalized {
        return Err(EmbeddingError::NotNormalized);
    }
    m.check_index(r1)?;
    m.check_index(r2)?;
    // Order the operands so the result is bitwise symmetric.
    let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
    Ok(dot_f64(m.row(lo), m.row(hi)))
}

/// Checks that two matrices can be compared record-for-record.
pub fn check_pair<S: Scalar>(
    a: &EmbeddingMatrix<S>,
    b: &EmbeddingMatrix<S>,
) -> Result<(), EmbeddingError> {
    if !a.normalized || !b.normalized {
        return Err(EmbeddingError::NotNormalized);
    }
    if a.dim != b.dim {
        return Err(EmbeddingError::DimMismatch(a.dim, b.dim));
    }
    Ok(())
}

impl EmbeddingMatrix<f32> {
    /// Writes the `RULR` v1 binary layout.
    pub fn write_rulr<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        w.write_all(RULR_MAGIC)?;
        w.write_all(&RULR_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_records as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&[u8::from(self.normalized)])?;
        Ok(())
    }

    pub fn read_rulr<R: Read>(mut r: R, role: ModelRole) -> Result<Self, EmbeddingError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RULR_MAGIC {
            return Err(EmbeddingError::Format("missing RULR magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != RULR_VERSION {
            return Err(EmbeddingError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let n = u64::from_le_bytes(u64buf) as usize;
        r.read_exact(&mut u64buf)?;
        let dim = u64::from_le_bytes(u64buf) as usize;
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| EmbeddingError::Format("shape overflows".into()))?;
        let mut raw = vec![0u8; len * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let normalized = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(EmbeddingError::Format(format!(
                    "bad normalized flag {other}"
                )))
            }
        };
        Self::with_flag(n, dim, data, normalized, role)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_rulr(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, role: ModelRole) -> Result<Self, EmbeddingError> {
        Self::read_rulr(BufReader::new(File::open(path)?), role)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> EmbeddingMatrix<f32> {
        let rows: Vec<Vec<f32>> = rows.iter().map(|r| r.to_vec()).collect();
        EmbeddingMatrix::from_rows(&rows, ModelRole::External).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = m(&[&[3.0, 4.0]]).l2_normalize().unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert!(n.is_normalized());

        let n = m(&[&[1.0, 0.0, 0.0]]).l2_normalize().unwrap();
        assert_eq!(n.row(0), &[1.0, 0.0, 0.0]);

        let err = m(&[&[1.0, 1.0], &[0.0, 0.0]]).l2_normalize().unwrap_err();
        assert!(matches!(err, EmbeddingError::ZeroNormRow(1)));
    }

    #[test]
    fn cross_similarity_examples() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let a = m(&[&[1.0, 0.0]]).l2_normalize().unwrap();
        let b = m(&[&[0.0, 1.0]]).l2_normalize().unwrap();
        let c = m(&[&[s, s]]).l2_normalize().unwrap();
        assert_eq!(cosine_cross(&a, &b, 0).unwrap(), 0.0);
        assert_eq!(cosine_cross(&a, &a, 0).unwrap(), 1.0);
        assert!((cosine_cross(&a, &c, 0).unwrap() - 0.5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn within_similarity_examples() {
        let x = m(&[&[1.0, 0.0], &[-1.0, 0.0], &[0.8, 0.6]])
            .l2_normalize()
            .unwrap();
        assert!((cosine_within(&x, 2, 2).unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(cosine_within(&x, 0, 1).unwrap(), -1.0);
        assert!((cosine_within(&x, 0, 2).unwrap() - 0.8).abs() < 1e-6);
    }

    #[test]
    fn similarity_errors() {
        let raw = m(&[&[1.0, 0.0]]);
        let unit = raw.l2_normalize().unwrap();
        assert!(matches!(
            cosine_cross(&raw, &unit, 0),
            Err(EmbeddingError::NotNormalized)
        ));
        assert!(matches!(
            cosine_within(&raw, 0, 0),
            Err(EmbeddingError::NotNormalized)
        ));
        let wide = m(&[&[1.0, 0.0, 0.0]]).l2_normalize().unwrap();
        assert!(matches!(
            cosine_cross(&unit, &wide, 0),
            Err(EmbeddingError::DimMismatch(2, 3))
        ));
        assert!(matches!(
            cosine_cross(&unit, &unit, 1),
            Err(EmbeddingError::IndexOutOfRange { index: 1, .. })
        ));
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(EmbeddingMatrix::<f32>::new(0, 2, vec![], ModelRole::External).is_err());
        assert!(EmbeddingMatrix::new(1, 2, vec![1.0f32], ModelRole::External).is_err());
        assert!(matches!(
            EmbeddingMatrix::new(1, 2, vec![1.0f32, f32::NAN], ModelRole::External),
            Err(EmbeddingError::NonFinite { row: 0, col: 1 })
        ));
        assert!(matches!(
            EmbeddingMatrix::with_flag(1, 2, vec![1.0f32, 1.0], true, ModelRole::External),
            Err(EmbeddingError::NotUnitRow { row: 0, .. })
        ));
    }

    #[test]
    fn rulr_layout_is_bit_exact() {
        let x = m(&[&[1.5, -2.0], &[0.25, 8.0]]);
        let mut buf = Vec::new();
        x.write_rulr(&mut buf).unwrap();
        assert_eq!(&buf[0..4], b"RULR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..28], &1.5f32.to_le_bytes());
        assert_eq!(buf.len(), 24 + 16 + 1);
        assert_eq!(buf[40], 0);
        let back = EmbeddingMatrix::read_rulr(&buf[..], ModelRole::External).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn rulr_rejects_garbage() {
        assert!(
            EmbeddingMatrix::read_rulr(&b"NOPE\x01\x00\x00\x00"[..], ModelRole::External).is_err()
        );
        let x = m(&[&[1.0]]);
        let mut buf = Vec::new();
        x.write_rulr(&mut buf).unwrap();
        *buf.last_mut().unwrap() = 7;
        assert!(EmbeddingMatrix::read_rulr(&buf[..], ModelRole::External).is_err());
        buf.truncate(buf.len() - 2);
        assert!(EmbeddingMatrix::read_rulr(&buf[..], ModelRole::External).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
        (1usize..6, 1usize..8).prop_flat_map(|(n, d)| {
            (
                Just(n),
                Just(d),
                prop::collection::vec(
                    (-100.0f32..100.0).prop_filter("nonzero", |v| v.abs() > 1e-2),
                    n * d,
                ),
            )
        })
    }

    proptest! {
        #[test]
        fn rulr_round_trip((n, d, data) in matrix_strategy(), normalize in any::<bool>()) {
            let mut x = EmbeddingMatrix::new(n, d, data, ModelRole::External).unwrap();
            if normalize {
                x = x.l2_normalize().unwrap();
            }
            let mut buf = Vec::new();
            x.write_rulr(&mut buf).unwrap();
            let back = EmbeddingMatrix::read_rulr(&buf[..], ModelRole::External).unwrap();
            let mut again = Vec::new();
            back.write_rulr(&mut again).unwrap();
            prop_assert_eq!(buf, again);
            prop_assert_eq!(back, x);
        }

        #[test]
        fn similarity_properties((n, d, data) in matrix_strategy(), c in 0.01f32..50.0) {
            let x = EmbeddingMatrix::new(n, d, data.clone(), ModelRole::External).unwrap();
            let unit = x.l2_normalize().unwrap();
            let scaled = EmbeddingMatrix::new(
                n, d, data.iter().map(|v| v * c).collect(), ModelRole::External,
            ).unwrap().l2_normalize().unwrap();

            let twice = unit.l2_normalize().unwrap();
            for (a, b) in unit.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
            for r1 in 0..n {
                for r2 in 0..n {
                    let s = cosine_within(&unit, r1, r2).unwrap();
                    prop_assert_eq!(s, cosine_within(&unit, r2, r1).unwrap());
                    prop_assert!(s.abs() <= 1.0 + 1e-6);
                    let t = cosine_within(&scaled, r1, r2).unwrap();
                    prop_assert!((s - t).abs() <= 1e-6);
                }
                prop_assert!(cosine_cross(&unit, &scaled, r1).unwrap().abs() <= 1.0 + 1e-6);
            }
        }
    }
}
