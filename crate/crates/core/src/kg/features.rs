//! MMFT feature matrices.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MMFT" | version: u32 | rows: u32 | cols: u32 | rows*cols f32, row-major
//! ```
//!
//! A companion `<file>.ids` text file lists one entity label per line;
//! line `i` names row `i`.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, KgError, Vocab};
use crate::tensor::Tensor;

pub const MMFT_MAGIC: &[u8; 4] = b"MMFT";
pub const MMFT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
    Structural,
}

impl Modality {
    /// Fusion order used throughout the model.
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Textual, Modality::Structural];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::Structural => "structural",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One modality's `|E| × d_m` feature matrix; row `i` belongs to entity `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub modality: Modality,
    matrix: Tensor<f32>,
}

impl ModalityFeatures {
    pub fn new(modality: Modality, matrix: Tensor<f32>) -> Self {
        assert_eq!(matrix.rank(), 2, "feature matrix must be rank 2");
        Self { modality, matrix }
    }

    pub fn matrix(&self) -> &Tensor<f32> {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Tensor<f32> {
        &mut self.matrix
    }

    pub fn into_matrix(self) -> Tensor<f32> {
        self.matrix
    }

    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }
}

pub fn ids_path(path: &Path) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

/// Reads the raw matrix of an MMFT file without consulting the index file.
pub fn read_mmft(path: &Path) -> Result<Tensor<f32>, KgError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let p = || path.to_path_buf();
    if bytes.len() < 4 || &bytes[..4] != MMFT_MAGIC {
        return Err(KgError::BadMagic { path: p() });
    }
    if bytes.len() < HEADER_LEN {
        return Err(KgError::Truncated {
            path: p(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != MMFT_VERSION {
        return Err(KgError::UnsupportedVersion { path: p(), version });
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(KgError::EmptyMatrix { path: p() });
    }
    let expected = HEADER_LEN + rows * cols * 4;
    if bytes.len() != expected {
        return Err(KgError::Truncated {
            path: p(),
            expected,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::matrix(rows, cols, data).expect("size checked above"))
}

pub fn write_mmft(path: &Path, matrix: &Tensor<f32>) -> Result<(), KgError> {
    assert_eq!(matrix.rank(), 2, "MMFT stores matrices");
    let (rows, cols) = (matrix.shape()[0], matrix.shape()[1]);
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.len() * 4);
    out.extend_from_slice(MMFT_MAGIC);
    out.extend_from_slice(&MMFT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in matrix.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Loads an MMFT file plus its `.ids` companion and reorders rows so that
/// row `i` holds entity `i` of `vocab`.
pub fn read_feature_matrix(
    path: &Path,
    vocab: &Vocab,
    modality: Modality,
    expected_cols: Option<usize>,
) -> Result<ModalityFeatures, KgError> {
    let raw = read_mmft(path)?;
    let (rows, cols) = (raw.shape()[0], raw.shape()[1]);
    if let Some(expected) = expected_cols {
        if cols != expected {
            return Err(KgError::ColumnCount {
                path: path.to_path_buf(),
                expected,
                found: cols,
            });
        }
    }
    if rows != vocab.num_entities() {
        return Err(KgError::RowCount {
            path: path.to_path_buf(),
            rows,
            entities: vocab.num_entities(),
        });
    }
    let ids_file = ids_path(path);
    let text = fs::read_to_string(&ids_file).map_err(io_err(&ids_file))?;
    let labels: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    if labels.len() != rows {
        return Err(KgError::IndexLength {
            path: ids_file,
            ids: labels.len(),
            rows,
        });
    }

    let mut data = vec![0.0f32; rows * cols];
    let mut seen = HashSet::with_capacity(rows);
    for (i, label) in labels.iter().enumerate() {
        let entity = vocab.entity(label).ok_or_else(|| KgError::IndexUnknownEntity {
            path: ids_file.clone(),
            line: i + 1,
            label: label.to_string(),
        })?;
        if !seen.insert(entity) {
            return Err(KgError::IndexDuplicate {
                path: ids_file.clone(),
                line: i + 1,
                label: label.to_string(),
            });
        }
        let src = raw.row(i);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(KgError::NonFinite {
                path: path.to_path_buf(),
                row: i,
            });
        }
        let e = entity.index();
        data[e * cols..(e + 1) * cols].copy_from_slice(src);
    }
    let matrix = Tensor::matrix(rows, cols, data).expect("size checked above");
    Ok(ModalityFeatures::new(modality, matrix))
}

/// Writes the matrix in vocabulary order together with its `.ids` file.
pub fn write_feature_matrix(
    features: &ModalityFeatures,
    vocab: &Vocab,
    path: &Path,
) -> Result<(), KgError> {
    write_entity_matrix(features.matrix(), vocab, path)
}

/// Any `|E| × d` matrix (row `i` = entity `i`) as MMFT plus `.ids`.
pub fn write_entity_matrix(matrix: &Tensor<f32>, vocab: &Vocab, path: &Path) -> Result<(), KgError> {
    write_mmft(path, matrix)?;
    let mut ids = String::new();
    for label in vocab.entity_labels().iter().take(matrix.shape()[0]) {
        ids.push_str(label);
        ids.push('\n');
    }
    let ids_file = ids_path(path);
    fs::write(&ids_file, ids).map_err(io_err(&ids_file))
}
