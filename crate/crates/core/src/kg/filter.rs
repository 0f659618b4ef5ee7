use std::collections::{HashMap, HashSet};

use super::{EntityId, KgError, RelationId, Split, Triple, TripleStore};

/// Known answers per `(head, relation)` and `(relation, tail)`, built from a
/// chosen set of splits.
#[derive(Clone, Debug, Default)]
pub struct FilterIndex {
    tails: HashMap<(EntityId, RelationId), HashSet<EntityId>>,
    heads: HashMap<(RelationId, EntityId), HashSet<EntityId>>,
    splits: Vec<Split>,
}

static EMPTY: std::sync::OnceLock<HashSet<EntityId>> = std::sync::OnceLock::new();

impl FilterIndex {
    pub fn build(store: &TripleStore, splits: &[Split]) -> Result<Self, KgError> {
        if splits.is_empty() {
            return Err(KgError::EmptySplitSelection);
        }
        let mut index = Self::default();
        for &split in Split::ALL.iter().filter(|s| splits.contains(s)) {
            index.splits.push(split);
            for t in store.split(split) {
                index.insert(*t);
            }
        }
        Ok(index)
    }

    pub fn from_triples<'a>(triples: impl IntoIterator<Item = &'a Triple>) -> Self {
        let mut index = Self::default();
        for t in triples {
            index.insert(*t);
        }
        index
    }

    fn insert(&mut self, t: Triple) {
        self.tails.entry((t.head, t.relation)).or_default().insert(t.tail);
        self.heads.entry((t.relation, t.tail)).or_default().insert(t.head);
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn includes(&self, split: Split) -> bool {
        self.splits.contains(&split)
    }

    pub fn known_tails(&self, head: EntityId, relation: RelationId) -> &HashSet<EntityId> {
        self.tails
            .get(&(head, relation))
            .unwrap_or_else(|| EMPTY.get_or_init(HashSet::new))
    }

    pub fn known_heads(&self, relation: RelationId, tail: EntityId) -> &HashSet<EntityId> {
        self.heads
            .get(&(relation, tail))
            .unwrap_or_else(|| EMPTY.get_or_init(HashSet::new))
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.known_tails(t.head, t.relation).contains(&t.tail)
    }
}
