use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{io_err, EntityId, KgError, RelationId};

/// Bijective label ↔ id maps for entities and relations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    entities: Vec<String>,
    entity_ids: HashMap<String, EntityId>,
    relations: Vec<String>,
    relation_ids: HashMap<String, RelationId>,
    descriptions: Vec<Option<String>>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the id of `label`, assigning the next dense id if new.
    pub fn intern_entity(&mut self, label: &str) -> EntityId {
        if let Some(&id) = self.entity_ids.get(label) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(label.to_string());
        self.descriptions.push(None);
        self.entity_ids.insert(label.to_string(), id);
        id
    }

    pub fn intern_relation(&mut self, label: &str) -> RelationId {
        if let Some(&id) = self.relation_ids.get(label) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(label.to_string());
        self.relation_ids.insert(label.to_string(), id);
        id
    }

    pub fn entity(&self, label: &str) -> Option<EntityId> {
        self.entity_ids.get(label).copied()
    }

    pub fn relation(&self, label: &str) -> Option<RelationId> {
        self.relation_ids.get(label).copied()
    }

    pub fn entity_label(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn relation_label(&self, id: RelationId) -> &str {
        &self.relations[id.index()]
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn entity_labels(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_labels(&self) -> &[String] {
        &self.relations
    }

    pub fn description(&self, id: EntityId) -> Option<&str> {
        self.descriptions[id.index()].as_deref()
    }

    pub fn set_description(&mut self, id: EntityId, text: impl Into<String>) {
        self.descriptions[id.index()] = Some(text.into());
    }

    /// Reads `label<TAB>description` rows; labels outside the vocabulary
    /// are ignored. Returns how many descriptions were attached.
    pub fn load_descriptions(&mut self, path: &Path) -> Result<usize, KgError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut attached = 0;
        for line in text.lines() {
            if let Some((label, desc)) = line.split_once('\t') {
                if let Some(id) = self.entity(label) {
                    self.set_description(id, desc);
                    attached += 1;
                }
            }
        }
        Ok(attached)
    }

    /// Writes `id<TAB>label` dumps for entities and relations.
    pub fn dump(&self, entities: &Path, relations: &Path) -> Result<(), KgError> {
        write_id_label(entities, &self.entities)?;
        write_id_label(relations, &self.relations)
    }
}

fn write_id_label(path: &Path, labels: &[String]) -> Result<(), KgError> {
    let mut out = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        writeln!(out, "{i}\t{label}").expect("write to Vec");
    }
    fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_is_dense_and_bijective() {
        let mut v = Vocab::new();
        let a = v.intern_entity("a");
        let b = v.intern_entity("b");
        assert_eq!(v.intern_entity("a"), a);
        assert_eq!((a.0, b.0), (0, 1));
        assert_eq!(v.entity_label(b), "b");
        assert_eq!(v.entity("b"), Some(b));
        assert_eq!(v.entity("zz"), None);
        let r = v.intern_relation("likes");
        assert_eq!(v.relation_label(r), "likes");
        assert_eq!(v.num_relations(), 1);
    }

    #[test]
    fn dump_writes_id_label_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Vocab::new();
        v.intern_entity("x");
        v.intern_entity("y");
        v.intern_relation("p");
        let (e, r) = (dir.path().join("e.tsv"), dir.path().join("r.tsv"));
        v.dump(&e, &r).unwrap();
        assert_eq!(fs::read_to_string(e).unwrap(), "0\tx\n1\ty\n");
        assert_eq!(fs::read_to_string(r).unwrap(), "0\tp\n");
    }
}
