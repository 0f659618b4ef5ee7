//! Knowledge-graph storage: vocabularies, triple splits, the filter index
//! used by filtered ranking, and per-modality feature matrices.

mod features;
mod filter;
mod triples;
mod vocab;

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use features::{read_feature_matrix, write_entity_matrix, write_feature_matrix, Modality, ModalityFeatures};
pub use features::{ids_path, read_mmft, write_mmft, MMFT_MAGIC, MMFT_VERSION};
pub use filter::FilterIndex;
pub use triples::{load_dataset, load_triples, write_triples, Split, TripleStore, VocabMode};
pub use vocab::Vocab;

/// Dense entity id in `0..|E|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntityId(pub u32);

/// Dense relation id in `0..|R|`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

impl fmt::Display for RelationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

impl Triple {
    pub fn new(head: u32, relation: u32, tail: u32) -> Self {
        Self {
            head: EntityId(head),
            relation: RelationId(relation),
            tail: EntityId(tail),
        }
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row, expected `head<TAB>relation<TAB>tail`")]
    MalformedRow { path: PathBuf, line: usize },
    #[error("{path}:{line}: unknown {kind} `{label}`")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        kind: &'static str,
        label: String,
    },
    #[error("{path}:{line}: triple also appears in the {other} split")]
    OverlappingSplits {
        path: PathBuf,
        line: usize,
        other: Split,
    },
    #[error("filter index needs at least one split")]
    EmptySplitSelection,
    #[error("{path}: bad magic, not an MMFT file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported MMFT version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: {rows} feature rows but the vocabulary has {entities} entities")]
    RowCount {
        path: PathBuf,
        rows: usize,
        entities: usize,
    },
    #[error("{path}: expected {expected} feature columns, header says {found}")]
    ColumnCount {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: index file has {ids} labels for {rows} rows")]
    IndexLength {
        path: PathBuf,
        ids: usize,
        rows: usize,
    },
    #[error("{path}:{line}: index entity `{label}` is not in the vocabulary")]
    IndexUnknownEntity {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{path}:{line}: entity `{label}` listed twice in the index file")]
    IndexDuplicate {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("{path}: row {row} contains a non-finite value")]
    NonFinite { path: PathBuf, row: usize },
    #[error("{path}: empty feature matrix")]
    EmptyMatrix { path: PathBuf },
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> KgError + '_ {
    move |source| KgError::Io {
        path: path.to_path_buf(),
        source,
    }
}
