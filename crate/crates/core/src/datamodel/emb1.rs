//! EMB1: `b"EMB1"`, u32 rows, u32 cols (little-endian), then `rows * cols`
//! little-endian f32 values in row-major order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const RAW_TEXT_DIM: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Sentence-encoder output, always [`RAW_TEXT_DIM`] wide.
    RawText,
    /// Output of a domain text encoder.
    Encoded,
}

impl EmbeddingKind {
    fn infer(cols: usize) -> Self {
        if cols == RAW_TEXT_DIM {
            EmbeddingKind::RawText
        } else {
            EmbeddingKind::Encoded
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    kind: EmbeddingKind,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>, kind: EmbeddingKind) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "embedding data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        if kind == EmbeddingKind::RawText && cols != RAW_TEXT_DIM {
            return Err(Error::Data(format!(
                "raw text embeddings must be {RAW_TEXT_DIM} wide, got {cols}"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            kind,
        })
    }

    /// Rounds an `f64` matrix to `f32`.
    pub fn from_matrix(m: &Matrix, kind: EmbeddingKind) -> Result<Self> {
        Self::new(
            m.rows(),
            m.cols(),
            m.data().iter().map(|&v| v as f32).collect(),
            kind,
        )
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            if r >= self.rows {
                return Err(Error::Data(format!(
                    "embedding row {r} out of range ({} rows)",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(r));
        }
        Self::new(rows.len(), self.cols, data, self.kind)
    }
}

pub fn encode_emb1(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + m.data.len() * 4);
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_emb1(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 12 || &bytes[..4] != EMB1_MAGIC {
        return Err(Error::Data("not an EMB1 file (bad magic or header)".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = &bytes[12..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Data("EMB1 header overflows".into()))?;
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "EMB1 payload is {} bytes, header ({rows}, {cols}) requires {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    EmbeddingMatrix::new(rows, cols, data, EmbeddingKind::infer(cols))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_emb1(&bytes)
}

/// Reads an EMB1 file whose row `i` is the embedding of local item `i`.
pub fn load_embeddings(path: impl AsRef<Path>, expected_rows: usize) -> Result<EmbeddingMatrix> {
    let m = read_embeddings(path)?;
    if m.rows != expected_rows {
        return Err(Error::RowCount {
            expected: expected_rows,
            found: m.rows,
        });
    }
    Ok(m)
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_emb1(m)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_four_in_file_order() {
        let mut bytes = b"EMB1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        for v in 0..8 {
            bytes.extend_from_slice(&(v as f32 * 0.5).to_le_bytes());
        }
        let m = decode_emb1(&bytes).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 4));
        assert_eq!(m.row(1), &[2.0, 2.5, 3.0, 3.5]);
        assert_eq!(m.kind(), EmbeddingKind::Encoded);
        assert_eq!(encode_emb1(&m), bytes);
    }

    #[test]
    fn row_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.emb1");
        let m = EmbeddingMatrix::new(3, 2, vec![0.0; 6], EmbeddingKind::Encoded).unwrap();
        write_embeddings(&path, &m).unwrap();
        let err = load_embeddings(&path, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn non_finite_value_reports_position() {
        let mut bytes = b"EMB1".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, f32::NAN] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        match decode_emb1(&bytes).unwrap_err() {
            Error::NonFinite { row, col } => assert_eq!((row, col), (1, 1)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut bytes = b"EMB1".to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(decode_emb1(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(rows in 0usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|k| f32::from_bits((seed.wrapping_mul(2654435761).wrapping_add(k as u32 * 7919)) & 0x3fff_ffff))
                .collect();
            let m = EmbeddingMatrix::new(rows, cols, data, EmbeddingKind::Encoded).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.emb1");
            write_embeddings(&path, &m).unwrap();
            let back = load_embeddings(&path, rows).unwrap();
            let same_bits = back.data().iter().zip(m.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
            prop_assert_eq!(back.rows(), rows);
        }
    }
}
