//! Instruction records for the external LoRA fine-tune, built from the
//! validation split so the LLM does not learn the retriever's bias toward
//! training answers.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{build_prompt, EmbeddingSlot, INSTRUCTION};
use super::GlpError;
use crate::kg::{FilterIndex, TripleStore, Vocab};
use crate::query::Query;
use crate::retrieve::{candidates_from, Candidate, CandidateList, Retriever};

pub const TRAIN_FILE: &str = "finetune_train.jsonl";
pub const VALID_FILE: &str = "finetune_valid.jsonl";
pub const MANIFEST_FILE: &str = "finetune_manifest.json";

/// Settings handed to the external fine-tuning job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSettings {
    pub r: usize,
    pub alpha: usize,
    pub dropout: f64,
    pub learning_rate: f64,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            r: 64,
            alpha: 16,
            dropout: 0.1,
            learning_rate: 0.0002,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub k: usize,
    /// Sample this many validation triples first (DB15K-style); `None`
    /// uses all of them.
    pub sample: Option<usize>,
    pub seed: u64,
    pub slot: EmbeddingSlot,
    pub lora: LoraSettings,
    pub workers: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            k: 20,
            sample: None,
            seed: 0,
            slot: EmbeddingSlot::Placeholder,
            lora: LoraSettings::default(),
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneManifest {
    pub lora: LoraSettings,
    pub k: usize,
    pub seed: u64,
    pub source_triples: usize,
    pub sampled_triples: usize,
    pub train_records: usize,
    pub valid_records: usize,
    /// Records whose gold had to be swapped into the last candidate slot.
    pub gold_inserted: usize,
    pub train_file: String,
    pub valid_file: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneExport {
    pub train: Vec<FinetuneRecord>,
    pub valid: Vec<FinetuneRecord>,
    pub manifest: FinetuneManifest,
}

/// Guarantees the gold is a candidate by overwriting the last slot.
/// Returns whether it had to.
pub fn ensure_gold(list: &mut CandidateList, gold_score: f32) -> bool {
    let Some(gold) = list.query.gold else {
        return false;
    };
    if list.position(gold).is_some() {
        return false;
    }
    let g = Candidate {
        entity: gold,
        score: gold_score,
    };
    if list.candidates.len() >= list.k {
        *list.candidates.last_mut().expect("k is positive") = g;
    } else {
        list.candidates.push(g);
    }
    true
}

/// Number of records held out for validation: ⌊n/10⌋.
pub fn valid_count(n: usize) -> usize {
    n / 10
}

pub fn build_finetune_dataset(
    store: &TripleStore,
    retriever: &Retriever,
    vocab: &Vocab,
    config: &FinetuneConfig,
) -> Result<FinetuneExport, GlpError> {
    if config.k == 0 {
        return Err(GlpError::Config("k must be positive".into()));
    }
    let available = store.valid.len();
    if available == 0 {
        return Err(GlpError::TooFewTriples { requested: 1, available });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let triples = match config.sample {
        Some(n) if n > available => return Err(GlpError::TooFewTriples { requested: n, available }),
        Some(n) => sample(&mut rng, available, n).into_iter().map(|i| store.valid[i]).collect(),
        None => store.valid.clone(),
    };
    let queries = Query::both_directions(&triples);
    // candidates exclude other training answers only; the gold is never filtered
    let train_filter = FilterIndex::from_triples(&store.train);

    let mut records = Vec::with_capacity(queries.len());
    let mut inserted = 0;
    for chunk in queries.chunks(512) {
        for ranking in retriever.rank_all(chunk, &train_filter, &train_filter, config.workers)? {
            let mut list = candidates_from(&ranking, config.k);
            let gold = ranking.query.gold.expect("validation queries carry gold");
            if ensure_gold(&mut list, ranking.scores[gold.index()]) {
                inserted += 1;
            }
            let prompt = build_prompt(&list, retriever, vocab, config.slot)?;
            records.push(FinetuneRecord {
                instruction: INSTRUCTION.to_string(),
                input: prompt.text,
                output: vocab.entity_label(gold).to_string(),
            });
        }
    }
    records.shuffle(&mut rng);
    let valid = records.split_off(records.len() - valid_count(records.len()));
    let manifest = FinetuneManifest {
        lora: config.lora.clone(),
        k: config.k,
        seed: config.seed,
        source_triples: available,
        sampled_triples: triples.len(),
        train_records: records.len(),
        valid_records: valid.len(),
        gold_inserted: inserted,
        train_file: TRAIN_FILE.into(),
        valid_file: VALID_FILE.into(),
    };
    Ok(FinetuneExport {
        train: records,
        valid,
        manifest,
    })
}

fn jsonl(records: &[FinetuneRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn write_finetune(dir: &Path, export: &FinetuneExport) -> Result<(), GlpError> {
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| GlpError::Io { path, source })
    };
    fs::create_dir_all(dir).map_err(|source| GlpError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    write(TRAIN_FILE, jsonl(&export.train))?;
    write(VALID_FILE, jsonl(&export.valid))?;
    let mut m = serde_json::to_string_pretty(&export.manifest).expect("manifest serializes");
    m.push('\n');
    write(MANIFEST_FILE, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::EntityId;
    use crate::query::Direction;

    fn list(k: usize, entities: &[u32], gold: u32) -> CandidateList {
        CandidateList {
            query: Query {
                direction: Direction::Tail,
                entity: EntityId(0),
                relation: crate::kg::RelationId(0),
                gold: Some(EntityId(gold)),
            },
            k,
            candidates: entities
                .iter()
                .map(|&e| Candidate {
                    entity: EntityId(e),
                    score: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn gold_replaces_last_candidate() {
        let mut l = list(3, &[4, 5, 6], 9);
        assert!(ensure_gold(&mut l, -2.0));
        assert_eq!(l.entities().collect::<Vec<_>>(), [EntityId(4), EntityId(5), EntityId(9)]);
        let mut l = list(3, &[4, 9, 6], 9);
        assert!(!ensure_gold(&mut l, 0.0));
        // a short list gains the gold instead of losing a candidate
        let mut l = list(3, &[4], 9);
        assert!(ensure_gold(&mut l, 0.0));
        assert_eq!(l.candidates.len(), 2);
    }

    #[test]
    fn nine_to_one_split_sizes() {
        assert_eq!(valid_count(2 * 2665), 533);
        assert_eq!(2 * 2665 - valid_count(2 * 2665), 4797);
        assert_eq!(valid_count(10_000), 1000);
        assert_eq!(valid_count(9), 0);
    }

    #[test]
    fn default_lora_settings() {
        let l = LoraSettings::default();
        assert_eq!((l.r, l.alpha, l.dropout, l.learning_rate), (64, 16, 0.1, 0.0002));
    }
}
