use std::fmt;

use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, FilterIndex, RelationId, Triple};

/// Which side of a triple is missing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// `(?, r, t)`
    Head,
    /// `(h, r, ?)`
    Tail,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Head => "head",
            Direction::Tail => "tail",
        })
    }
}

/// An incomplete triple: the known entity, the relation, and optionally the
/// gold answer for evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub direction: Direction,
    pub entity: EntityId,
    pub relation: RelationId,
    pub gold: Option<EntityId>,
}

impl Query {
    pub fn tail(head: EntityId, relation: RelationId, gold: Option<EntityId>) -> Self {
        Self {
            direction: Direction::Tail,
            entity: head,
            relation,
            gold,
        }
    }

    pub fn head(tail: EntityId, relation: RelationId, gold: Option<EntityId>) -> Self {
        Self {
            direction: Direction::Head,
            entity: tail,
            relation,
            gold,
        }
    }

    pub fn from_triple(t: &Triple, direction: Direction) -> Self {
        match direction {
            Direction::Tail => Self::tail(t.head, t.relation, Some(t.tail)),
            Direction::Head => Self::head(t.tail, t.relation, Some(t.head)),
        }
    }

    /// Tail and head query for every triple, in that order.
    pub fn both_directions(triples: &[Triple]) -> Vec<Query> {
        triples
            .iter()
            .flat_map(|t| [Self::from_triple(t, Direction::Tail), Self::from_triple(t, Direction::Head)])
            .collect()
    }

    /// The triple formed by answering this query with `answer`.
    pub fn complete(&self, answer: EntityId) -> Triple {
        match self.direction {
            Direction::Tail => Triple {
                head: self.entity,
                relation: self.relation,
                tail: answer,
            },
            Direction::Head => Triple {
                head: answer,
                relation: self.relation,
                tail: self.entity,
            },
        }
    }

    pub fn known_answers<'a>(&self, filter: &'a FilterIndex) -> &'a std::collections::HashSet<EntityId> {
        match self.direction {
            Direction::Tail => filter.known_tails(self.entity, self.relation),
            Direction::Head => filter.known_heads(self.relation, self.entity),
        }
    }
}
