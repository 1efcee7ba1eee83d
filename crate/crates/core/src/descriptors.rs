//! Local descriptor sets and the binary descriptor file format.
//!
//! Layout, little-endian throughout:
//!
//! | offset | size      | field                       |
//! |--------|-----------|-----------------------------|
//! | 0      | 4         | magic `WDSC`                |
//! | 4      | 4         | `u32` version, always 1     |
//! | 8      | 4         | `u32` n (rows)              |
//! | 12     | 4         | `u32` d (columns)           |
//! | 16     | 4·n·d     | `f32` payload, row-major    |

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WDSC";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// The local descriptors of one document, one descriptor per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub doc_id: String,
    pub writer_id: String,
    pub descriptors: DMatrix<f64>,
}

impl DescriptorSet {
    pub fn new(doc_id: impl Into<String>, writer_id: impl Into<String>, descriptors: DMatrix<f64>) -> Self {
        Self {
            doc_id: doc_id.into(),
            writer_id: writer_id.into(),
            descriptors,
        }
    }

    /// Unlabeled set, handy for tests and one-off encodes.
    pub fn anonymous(descriptors: DMatrix<f64>) -> Self {
        Self::new("", "", descriptors)
    }

    pub fn len(&self) -> usize {
        self.descriptors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors.ncols()
    }
}

/// Raw 32-bit contents of a descriptor file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDescriptors {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl RawDescriptors {
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.values.iter().map(|&v| v as f64))
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.len());
        for row in m.row_iter() {
            values.extend(row.iter().map(|&v| v as f32));
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            values,
        }
    }
}

pub fn encode_descriptors(raw: &RawDescriptors) -> Result<Vec<u8>> {
    if raw.values.len() != raw.rows * raw.cols {
        return Err(Error::precondition(format!(
            "payload holds {} values, expected {}×{}",
            raw.values.len(),
            raw.rows,
            raw.cols
        )));
    }
    let rows = u32::try_from(raw.rows).map_err(|_| Error::precondition("too many rows"))?;
    let cols = u32::try_from(raw.cols).map_err(|_| Error::precondition("too many columns"))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * raw.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in &raw.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_descriptors(bytes: &[u8]) -> Result<RawDescriptors> {
    let fail = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("header truncated ({} of {HEADER_LEN} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, "bad magic, expected WDSC".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(4))
        .and_then(|c| c.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(8, "header dimensions overflow".into()))?;
    if bytes.len() < expected {
        let whole_rows = (bytes.len() - HEADER_LEN) / (4 * cols.max(1));
        return Err(fail(
            bytes.len(),
            format!("payload truncated: header says {rows}×{cols}, found {whole_rows} complete rows"),
        ));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes after payload", bytes.len() - expected)));
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawDescriptors { rows, cols, values })
}

pub fn write_descriptor_file(path: &Path, raw: &RawDescriptors) -> Result<()> {
    let bytes = encode_descriptors(raw)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_descriptor_file(path: &Path) -> Result<RawDescriptors> {
    decode_descriptors(&fs::read(path)?)
}

/// Reads a descriptor file and promotes it to `f64`.
pub fn load_descriptors(path: &Path) -> Result<DMatrix<f64>> {
    let raw = read_descriptor_file(path)?;
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("{}: non-finite descriptor value", path.display())));
    }
    Ok(raw.to_matrix())
}

/// L2-normalizes every row in place; zero rows stay zero.
pub fn normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
}
