//! Filtered rankings over all entities and top-k candidate lists.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, FilterIndex, RelationId, Vocab};
use crate::model::{FeatureSet, HerrModel, ModelError};
use crate::query::{Direction, Query};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("query {0:?} has no gold entity")]
    MissingGold(Query),
    #[error("entity {entity} out of range ({entities} entities)")]
    UnknownEntity { entity: EntityId, entities: usize },
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// Scores and orderings for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    pub query: Query,
    pub scores: Vec<f32>,
    /// Filtered rank of the gold entity; `None` when the query has no gold.
    pub rank: Option<f64>,
    /// Entities surviving the candidate filter (gold always kept), best
    /// first, ties broken by lower id.
    pub ordering: Vec<EntityId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: EntityId,
    pub score: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateList {
    pub query: Query,
    pub k: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateList {
    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.candidates.iter().map(|c| c.entity)
    }

    pub fn position(&self, entity: EntityId) -> Option<usize> {
        self.entities().position(|e| e == entity)
    }
}

/// `1 + |greater| + ½·|ties|` over competitors, where competitors are all
/// entities except known answers of the query (the gold itself is never
/// removed).
pub fn filtered_rank(scores: &[f32], query: &Query, filter: &FilterIndex) -> Result<f64, RetrieveError> {
    let gold = query.gold.ok_or(RetrieveError::MissingGold(*query))?;
    let gs = *scores.get(gold.index()).ok_or(RetrieveError::UnknownEntity {
        entity: gold,
        entities: scores.len(),
    })?;
    let known = query.known_answers(filter);
    let (mut greater, mut ties) = (0usize, 0usize);
    for (e, &s) in scores.iter().enumerate() {
        let id = EntityId(e as u32);
        if id == gold || known.contains(&id) {
            continue;
        }
        if s > gs {
            greater += 1;
        } else if s == gs {
            ties += 1;
        }
    }
    Ok(1.0 + greater as f64 + 0.5 * ties as f64)
}

/// Entities that are not known answers (except `query.gold`), in
/// descending score order with ties to the lower id.
pub fn filtered_ordering(scores: &[f32], query: &Query, filter: &FilterIndex) -> Vec<EntityId> {
    let known = query.known_answers(filter);
    let mut order: Vec<EntityId> = (0..scores.len() as u32)
        .map(EntityId)
        .filter(|e| Some(*e) == query.gold || !known.contains(e))
        .collect();
    order.sort_by(|a, b| {
        scores[b.index()]
            .total_cmp(&scores[a.index()])
            .then(a.cmp(b))
    });
    order
}

pub fn top_k_candidates(scores: &[f32], query: &Query, filter: &FilterIndex, k: usize) -> CandidateList {
    let candidates = filtered_ordering(scores, query, filter)
        .into_iter()
        .take(k)
        .map(|entity| Candidate {
            entity,
            score: scores[entity.index()],
        })
        .collect();
    CandidateList {
        query: *query,
        k,
        candidates,
    }
}

/// Promotes `answer` to the top of the ordering and recomputes the gold
/// rank as if `answer` had scored above every other entity. Entities that
/// the rank filter excludes do not affect the gold rank.
pub fn rerank_with_answer(
    ranking: &RankingResult,
    answer: Option<EntityId>,
    rank_filter: &FilterIndex,
) -> RankingResult {
    let Some(answer) = answer else {
        return ranking.clone();
    };
    let mut out = ranking.clone();
    if let Some(pos) = out.ordering.iter().position(|&e| e == answer) {
        out.ordering[..=pos].rotate_right(1);
    }
    if let (Some(gold), Some(rank)) = (ranking.query.gold, ranking.rank) {
        out.rank = Some(if answer == gold {
            1.0
        } else if ranking.query.known_answers(rank_filter).contains(&answer) {
            rank
        } else {
            let (a, g) = (ranking.scores[answer.index()], ranking.scores[gold.index()]);
            if a > g {
                rank
            } else if a == g {
                rank + 0.5
            } else {
                rank + 1.0
            }
        });
    }
    out
}

/// Relation-specific tensors: fused entity matrix and `core ×₂ r`.
struct RelationView {
    fused: Tensor<f32>,
    matrix: Tensor<f32>,
}

/// Frozen model plus lazily built per-relation views.
pub struct Retriever<'a> {
    model: &'a HerrModel,
    features: &'a FeatureSet<f32>,
    views: Vec<OnceLock<Result<RelationView, String>>>,
}

impl<'a> Retriever<'a> {
    pub fn new(model: &'a HerrModel, features: &'a FeatureSet<f32>) -> Result<Self, RetrieveError> {
        model.check_features(features)?;
        let views = (0..model.config.num_relations).map(|_| OnceLock::new()).collect();
        Ok(Self {
            model,
            features,
            views,
        })
    }

    pub fn model(&self) -> &HerrModel {
        self.model
    }

    pub fn num_entities(&self) -> usize {
        self.model.config.num_entities
    }

    fn view(&self, relation: RelationId) -> Result<&RelationView, RetrieveError> {
        let relations = self.views.len();
        let cell = self.views.get(relation.index()).ok_or(ModelError::UnknownRelation { relation, relations })?;
        cell.get_or_init(|| {
            let build = || -> Result<RelationView, ModelError> {
                let fused = self.model.fused_matrix(self.features, relation)?;
                let mut tape = Tape::new();
                let bound = tape.bind(&self.model.params, false);
                let m = self.model.tucker.relation_matrix(&mut tape, &bound, relation)?;
                Ok(RelationView {
                    fused,
                    matrix: tape.value(m).clone(),
                })
            };
            build().map_err(|e| e.to_string())
        })
        .as_ref()
        .map_err(|e| RetrieveError::Model(ModelError::Features(e.clone())))
    }

    /// Fused matrix of all entities under `relation`.
    pub fn fused(&self, relation: RelationId) -> Result<&Tensor<f32>, RetrieveError> {
        Ok(&self.view(relation)?.fused)
    }

    /// Scores of every entity as the missing side of `query`.
    pub fn score_all(&self, query: &Query) -> Result<Vec<f32>, RetrieveError> {
        let view = self.view(query.relation)?;
        let n = self.num_entities();
        if query.entity.index() >= n {
            return Err(RetrieveError::UnknownEntity {
                entity: query.entity,
                entities: n,
            });
        }
        let d = self.model.config.dim;
        let known = view.fused.row(query.entity.index());
        let m = view.matrix.data();
        let mut v = vec![0f64; d];
        match query.direction {
            Direction::Tail => {
                for (i, &h) in known.iter().enumerate() {
                    for (k, vk) in v.iter_mut().enumerate() {
                        *vk += h as f64 * m[i * d + k] as f64;
                    }
                }
            }
            Direction::Head => {
                for (i, vi) in v.iter_mut().enumerate() {
                    *vi = (0..d).map(|k| m[i * d + k] as f64 * known[k] as f64).sum();
                }
            }
        }
        Ok((0..n)
            .map(|e| {
                view.fused
                    .row(e)
                    .iter()
                    .zip(&v)
                    .map(|(&x, &y)| x as f64 * y)
                    .sum::<f64>() as f32
            })
            .collect())
    }

    /// Scores, filtered gold rank and candidate ordering for one query.
    pub fn rank(
        &self,
        query: &Query,
        rank_filter: &FilterIndex,
        candidate_filter: &FilterIndex,
    ) -> Result<RankingResult, RetrieveError> {
        let scores = self.score_all(query)?;
        let rank = match query.gold {
            Some(_) => Some(filtered_rank(&scores, query, rank_filter)?),
            None => None,
        };
        let ordering = filtered_ordering(&scores, query, candidate_filter);
        Ok(RankingResult {
            query: *query,
            scores,
            rank,
            ordering,
        })
    }

    /// Ranks every query on a pool of `workers` threads (0 = rayon
    /// default). Output order follows `queries`.
    pub fn rank_all(
        &self,
        queries: &[Query],
        rank_filter: &FilterIndex,
        candidate_filter: &FilterIndex,
        workers: usize,
    ) -> Result<Vec<RankingResult>, RetrieveError> {
        // build views up front so workers never contend on initialization
        let relations: HashSet<RelationId> = queries.iter().map(|q| q.relation).collect();
        let mut relations: Vec<_> = relations.into_iter().collect();
        relations.sort();
        for r in relations {
            self.view(r)?;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| RetrieveError::Pool(e.to_string()))?;
        pool.install(|| {
            queries
                .par_iter()
                .map(|q| self.rank(q, rank_filter, candidate_filter))
                .collect()
        })
    }
}

pub fn candidates_from(ranking: &RankingResult, k: usize) -> CandidateList {
    CandidateList {
        query: ranking.query,
        k,
        candidates: ranking
            .ordering
            .iter()
            .take(k)
            .map(|&entity| Candidate {
                entity,
                score: ranking.scores[entity.index()],
            })
            .collect(),
    }
}

#[derive(Serialize)]
struct DumpCandidate<'a> {
    label: &'a str,
    score: f32,
}

#[derive(Serialize)]
struct DumpLine<'a> {
    direction: Direction,
    entity: &'a str,
    relation: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    gold: Option<&'a str>,
    candidates: Vec<DumpCandidate<'a>>,
}

/// One JSON object per line.
pub fn write_candidate_dump(path: &Path, lists: &[CandidateList], vocab: &Vocab) -> Result<(), RetrieveError> {
    let io = |source| RetrieveError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for list in lists {
        let q = &list.query;
        let line = DumpLine {
            direction: q.direction,
            entity: vocab.entity_label(q.entity),
            relation: vocab.relation_label(q.relation),
            gold: q.gold.map(|g| vocab.entity_label(g)),
            candidates: list
                .candidates
                .iter()
                .map(|c| DumpCandidate {
                    label: vocab.entity_label(c.entity),
                    score: c.score,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("plain data serializes");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(&out).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn q(entity: u32, gold: u32) -> Query {
        Query::tail(EntityId(entity), RelationId(0), Some(EntityId(gold)))
    }

    #[test]
    fn unique_max_is_rank_one() {
        let f = FilterIndex::default();
        assert_eq!(filtered_rank(&[0.1, 0.9, 0.3], &q(0, 1), &f).unwrap(), 1.0);
    }

    #[test]
    fn tie_at_top_averages() {
        let f = FilterIndex::default();
        assert_eq!(filtered_rank(&[0.9, 0.9, 0.3], &q(2, 1), &f).unwrap(), 1.5);
    }

    #[test]
    fn known_answers_are_skipped_but_gold_kept() {
        let f = FilterIndex::from_triples(&[Triple::new(0, 0, 1), Triple::new(0, 0, 2)]);
        // entity 2 outscores the gold but is a known answer
        assert_eq!(filtered_rank(&[0.0, 0.5, 0.9, 0.7], &q(0, 1), &f).unwrap(), 2.0);
        assert!(matches!(
            filtered_rank(&[0.0], &Query::tail(EntityId(0), RelationId(0), None), &f),
            Err(RetrieveError::MissingGold(_))
        ));
    }

    #[test]
    fn rank_matches_sort_and_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            // coarse scores so ties are frequent
            let scores: Vec<f32> = (0..20).map(|_| rng.random_range(0..6) as f32 * 0.25).collect();
            let gold = rng.random_range(0..20u32);
            let known: Vec<Triple> = (0..5).map(|_| Triple::new(0, 0, rng.random_range(0..20))).collect();
            let f = FilterIndex::from_triples(&known);
            let query = q(0, gold);
            let mut kept: Vec<(f32, u32)> = (0..20u32)
                .filter(|&e| e == gold || !known.iter().any(|t| t.tail.0 == e))
                .map(|e| (scores[e as usize], e))
                .collect();
            kept.sort_by(|a, b| b.0.total_cmp(&a.0));
            let gs = scores[gold as usize];
            let first = kept.iter().position(|&(s, _)| s == gs).unwrap();
            let last = kept.iter().rposition(|&(s, _)| s == gs).unwrap();
            let want = (first + 1 + last + 1) as f64 / 2.0;
            assert_eq!(filtered_rank(&scores, &query, &f).unwrap(), want);
        }
    }

    #[test]
    fn candidates_skip_known_and_respect_k() {
        let f = FilterIndex::from_triples(&[Triple::new(0, 0, 3)]);
        let scores = [0.2, 0.1, 0.5, 0.9, 0.5];
        let query = Query::tail(EntityId(0), RelationId(0), None);
        let all = top_k_candidates(&scores, &query, &f, 10);
        let ids: Vec<u32> = all.entities().map(|e| e.0).collect();
        assert_eq!(ids, vec![2, 4, 0, 1]);
        assert_eq!(top_k_candidates(&scores, &query, &f, 2).candidates.len(), 2);
    }

    fn ranking(scores: Vec<f32>, gold: u32, f: &FilterIndex) -> RankingResult {
        let query = q(0, gold);
        RankingResult {
            rank: Some(filtered_rank(&scores, &query, f).unwrap()),
            ordering: filtered_ordering(&scores, &query, f),
            scores,
            query,
        }
    }

    #[test]
    fn promoting_top_entity_changes_nothing() {
        let f = FilterIndex::default();
        let r = ranking(vec![0.9, 0.5, 0.1], 1, &f);
        assert_eq!(rerank_with_answer(&r, Some(EntityId(0)), &f), r);
        assert_eq!(rerank_with_answer(&r, None, &f), r);
    }

    #[test]
    fn promoting_seventh_shifts_the_rest() {
        let f = FilterIndex::default();
        let scores: Vec<f32> = (0..10).map(|i| 1.0 - i as f32 * 0.1).collect();
        let r = ranking(scores, 3, &f);
        let out = rerank_with_answer(&r, Some(EntityId(6)), &f);
        let ids: Vec<u32> = out.ordering.iter().map(|e| e.0).collect();
        assert_eq!(ids, vec![6, 0, 1, 2, 3, 4, 5, 7, 8, 9]);
        assert_eq!(r.rank, Some(4.0));
        assert_eq!(out.rank, Some(5.0));
        let promoted_gold = rerank_with_answer(&r, Some(EntityId(3)), &f);
        assert_eq!(promoted_gold.rank, Some(1.0));
        let mut sorted = out.ordering.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).map(EntityId).collect::<Vec<_>>());
    }
}
