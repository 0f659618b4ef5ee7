use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{io_err, EntityId, KgError, Triple, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.tsv",
            Split::Valid => "valid.tsv",
            Split::Test => "test.tsv",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

/// Whether loading may add new labels to the vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabMode {
    Build,
    Reuse,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripleStore {
    pub train: Vec<Triple>,
    pub valid: Vec<Triple>,
    pub test: Vec<Triple>,
}

impl TripleStore {
    pub fn split(&self, split: Split) -> &[Triple] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.valid.len(), self.test.len()]
    }

    /// Entities that appear in no training triple.
    pub fn entities_without_training(&self, num_entities: usize) -> Vec<EntityId> {
        let mut seen = vec![false; num_entities];
        for t in &self.train {
            seen[t.head.index()] = true;
            seen[t.tail.index()] = true;
        }
        (0..num_entities)
            .filter(|&i| !seen[i])
            .map(|i| EntityId(i as u32))
            .collect()
    }
}

/// Parses one TSV split. In [`VocabMode::Reuse`] every label must already
/// be known.
pub fn load_triples(path: &Path, vocab: &mut Vocab, mode: VocabMode) -> Result<Vec<Triple>, KgError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let mut cols = row.split('\t');
        let (Some(h), Some(r), Some(t), None) = (cols.next(), cols.next(), cols.next(), cols.next())
        else {
            return Err(KgError::MalformedRow {
                path: path.to_path_buf(),
                line,
            });
        };
        if [h, r, t].iter().any(|c| c.is_empty()) {
            return Err(KgError::MalformedRow {
                path: path.to_path_buf(),
                line,
            });
        }
        let triple = match mode {
            VocabMode::Build => Triple {
                head: vocab.intern_entity(h),
                relation: vocab.intern_relation(r),
                tail: vocab.intern_entity(t),
            },
            VocabMode::Reuse => {
                let unknown = |kind, label: &str| KgError::UnknownLabel {
                    path: path.to_path_buf(),
                    line,
                    kind,
                    label: label.to_string(),
                };
                Triple {
                    head: vocab.entity(h).ok_or_else(|| unknown("entity", h))?,
                    relation: vocab.relation(r).ok_or_else(|| unknown("relation", r))?,
                    tail: vocab.entity(t).ok_or_else(|| unknown("entity", t))?,
                }
            }
        };
        out.push(triple);
    }
    Ok(out)
}

/// Loads `train.tsv` (building the vocabulary) then `valid.tsv` and
/// `test.tsv` against it. Entities unseen in training are rejected, and a
/// triple may belong to only one split.
pub fn load_dataset(dir: &Path) -> Result<(Vocab, TripleStore), KgError> {
    let mut vocab = Vocab::new();
    let train = load_triples(&dir.join(Split::Train.file_name()), &mut vocab, VocabMode::Build)?;
    let valid = load_triples(&dir.join(Split::Valid.file_name()), &mut vocab, VocabMode::Reuse)?;
    let test = load_triples(&dir.join(Split::Test.file_name()), &mut vocab, VocabMode::Reuse)?;

    let mut owner: std::collections::HashMap<Triple, Split> = std::collections::HashMap::new();
    for (split, triples) in [(Split::Train, &train), (Split::Valid, &valid), (Split::Test, &test)] {
        let mut local = HashSet::new();
        for (i, t) in triples.iter().enumerate() {
            if let Some(&other) = owner.get(t) {
                if other != split {
                    return Err(KgError::OverlappingSplits {
                        path: dir.join(split.file_name()),
                        line: i + 1,
                        other,
                    });
                }
            }
            local.insert(*t);
        }
        for t in local {
            owner.insert(t, split);
        }
    }

    let descriptions = dir.join("descriptions.tsv");
    if descriptions.exists() {
        vocab.load_descriptions(&descriptions)?;
    }
    Ok((vocab, TripleStore { train, valid, test }))
}

pub fn write_triples(path: &Path, triples: &[Triple], vocab: &Vocab) -> Result<(), KgError> {
    let mut out = Vec::new();
    for t in triples {
        writeln!(
            out,
            "{}\t{}\t{}",
            vocab.entity_label(t.head),
            vocab.relation_label(t.relation),
            vocab.entity_label(t.tail)
        )
        .expect("write to Vec");
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn three_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.tsv", "a\tr\tb\nb\tr\tc\nc\tr\ta\n");
        let mut v = Vocab::new();
        let ts = load_triples(&p, &mut v, VocabMode::Build).unwrap();
        assert_eq!((v.num_entities(), v.num_relations(), ts.len()), (3, 1, 3));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.tsv", "a\tr\tb\nbroken row\n");
        let err = load_triples(&p, &mut Vocab::new(), VocabMode::Build).unwrap_err();
        assert!(matches!(err, KgError::MalformedRow { line: 2, .. }), "{err}");
        let p = write(dir.path(), "u.tsv", "a\tr\tb\textra\n");
        let err = load_triples(&p, &mut Vocab::new(), VocabMode::Build).unwrap_err();
        assert!(matches!(err, KgError::MalformedRow { line: 1, .. }));
    }

    #[test]
    fn reuse_mode_rejects_unknown_labels() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.tsv", "a\tr\tb\n");
        write(dir.path(), "valid.tsv", "a\tr\tb2\n");
        write(dir.path(), "test.tsv", "");
        let err = load_dataset(dir.path()).unwrap_err();
        match err {
            KgError::UnknownLabel {
                line, kind, label, ..
            } => {
                assert_eq!((line, kind, label.as_str()), (1, "entity", "b2"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "train.tsv", "a\tr\tb\nb\tr\ta\n");
        write(dir.path(), "valid.tsv", "");
        write(dir.path(), "test.tsv", "b\tr\ta\n");
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(
            err,
            KgError::OverlappingSplits {
                line: 1,
                other: Split::Train,
                ..
            }
        ));
    }

    #[test]
    fn rewriting_reproduces_input() {
        let dir = tempfile::tempdir().unwrap();
        let body = "a\tr\tb\nb\tq\tc\na\tr\tb\n";
        let p = write(dir.path(), "t.tsv", body);
        let mut v = Vocab::new();
        let ts = load_triples(&p, &mut v, VocabMode::Build).unwrap();
        let out = dir.path().join("o.tsv");
        write_triples(&out, &ts, &v).unwrap();
        assert_eq!(fs::read_to_string(out).unwrap(), body);
    }
}
