use std::fs;
use std::path::Path;

use super::{EmbeddingMatrix, Kind};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MMEB";

/// Loads a binary `.mmeb` file, or a headerless CSV when the extension is
/// `.csv`. The row count must equal `expected_n`.
pub fn load_modality_matrix(path: &Path, expected_n: usize, kind: Kind) -> Result<EmbeddingMatrix> {
    let (rows, dim, data) = if path.extension().is_some_and(|e| e == "csv") {
        read_csv(path)?
    } else {
        read_mmeb(path)?
    };
    if rows != expected_n {
        return Err(Error::RowCount {
            path: path.into(),
            got: rows,
            expected: expected_n,
        });
    }
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::BadRow {
            path: path.into(),
            row: i / dim.max(1),
            msg: "non-finite value".into(),
        });
    }
    EmbeddingMatrix::new(kind, rows, dim, data)
}

fn read_mmeb(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| Error::BadFile {
        path: path.into(),
        msg,
    };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing MMEB header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    let row_bytes = dim * 4;
    if body.len() != n * row_bytes {
        let complete = body.len().checked_div(row_bytes).unwrap_or(0);
        return Err(Error::BadRow {
            path: path.into(),
            row: complete,
            msg: format!("missing or truncated row (header declares {n}×{dim})"),
        });
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((n, dim, data))
}

fn read_csv(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut dim = None;
    let mut rows = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::BadRow {
            path: path.into(),
            row,
            msg: e.to_string(),
        })?;
        if *dim.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::BadRow {
                path: path.into(),
                row,
                msg: format!("width {} ≠ {}", rec.len(), dim.unwrap_or(0)),
            });
        }
        for field in rec.iter() {
            let x: f64 = field.trim().parse().map_err(|_| Error::BadRow {
                path: path.into(),
                row,
                msg: format!("cannot parse `{field}`"),
            })?;
            data.push(x);
        }
        rows += 1;
    }
    Ok((rows, dim.unwrap_or(0), data))
}

pub fn save_mmeb(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + m.data().len() * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    for &x in m.data() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}
