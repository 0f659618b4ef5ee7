use std::collections::BTreeMap;

use rand::RngCore;

use crate::kg::{EntityId, FilterIndex, RelationId, Triple};
use crate::model::{FeatureSet, HerrModel, ModelError};
use crate::query::Direction;
use crate::tensor::{Bound, Scalar, Tape, Tensor, Var};

/// Summed binary cross-entropy of raw scores against labels in `[0, 1]`.
pub fn bce_loss(scores: &[f64], labels: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::vector(scores.to_vec()));
    let l = tape
        .bce_with_logits(s, labels.to_vec())
        .expect("scores and labels have equal length");
    tape.value(l).item()
}

/// A 1-N training query: every known answer is a positive label.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledQuery {
    pub direction: Direction,
    pub entity: EntityId,
    pub relation: RelationId,
    pub answers: Vec<EntityId>,
}

impl LabeledQuery {
    /// One tail query per distinct `(h, r)` and one head query per distinct
    /// `(r, t)` in `triples`, in a fixed order.
    pub fn from_triples(triples: &[Triple], filter: &FilterIndex) -> Vec<Self> {
        let mut tails = BTreeMap::new();
        let mut heads = BTreeMap::new();
        for t in triples {
            tails.entry((t.relation, t.head)).or_insert_with(|| {
                sorted(filter.known_tails(t.head, t.relation).iter().copied())
            });
            heads.entry((t.relation, t.tail)).or_insert_with(|| {
                sorted(filter.known_heads(t.relation, t.tail).iter().copied())
            });
        }
        let tails = tails.into_iter().map(|((relation, entity), answers)| Self {
            direction: Direction::Tail,
            entity,
            relation,
            answers,
        });
        let heads = heads.into_iter().map(|((relation, entity), answers)| Self {
            direction: Direction::Head,
            entity,
            relation,
            answers,
        });
        tails.chain(heads).collect()
    }
}

fn sorted(it: impl Iterator<Item = EntityId>) -> Vec<EntityId> {
    let mut v: Vec<_> = it.collect();
    v.sort();
    v
}

fn add_opt<T: Scalar>(tape: &mut Tape<T>, acc: Option<Var>, term: Var) -> Result<Var, ModelError> {
    Ok(match acc {
        Some(a) => tape.add(a, term)?,
        None => term,
    })
}

/// Loss of a batch of 1-N queries: every query scores all entities.
/// Labels are smoothed as `(1-ε)·y + ε/|E|`.
pub fn one_vs_all_loss<T: Scalar>(
    model: &HerrModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    features: &FeatureSet<T>,
    batch: &[LabeledQuery],
    smoothing: f64,
    noise: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let n = model.config.num_entities;
    let encoded = model.encode(tape, bound, features, None, noise)?;
    let mut groups: BTreeMap<RelationId, [Vec<&LabeledQuery>; 2]> = BTreeMap::new();
    for q in batch {
        let slot = match q.direction {
            Direction::Tail => 0,
            Direction::Head => 1,
        };
        groups.entry(q.relation).or_default()[slot].push(q);
    }
    let mut total = encoded.aux_loss;
    for (relation, dirs) in groups {
        let fused = model.fuse(tape, bound, &encoded, relation)?;
        for (direction, qs) in [Direction::Tail, Direction::Head].into_iter().zip(dirs) {
            if qs.is_empty() {
                continue;
            }
            let known: Vec<usize> = qs.iter().map(|q| q.entity.index()).collect();
            let scores = model.score_queries(tape, bound, fused, relation, direction, &known)?;
            let mut targets = vec![T::of(smoothing / n as f64); qs.len() * n];
            let pos = T::of(1.0 - smoothing + smoothing / n as f64);
            for (i, q) in qs.iter().enumerate() {
                for a in &q.answers {
                    targets[i * n + a.index()] = pos;
                }
            }
            let l = tape.bce_with_logits(scores, targets)?;
            total = Some(add_opt(tape, total, l)?);
        }
    }
    total.ok_or_else(|| ModelError::Config("empty training batch".into()))
}

/// Loss over explicit labelled triples (positives and sampled negatives).
pub fn sampled_loss<T: Scalar>(
    model: &HerrModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    features: &FeatureSet<T>,
    triples: &[(Triple, f64)],
    noise: Option<&mut dyn RngCore>,
) -> Result<Var, ModelError> {
    let encoded = model.encode(tape, bound, features, None, noise)?;
    let mut groups: BTreeMap<RelationId, Vec<&(Triple, f64)>> = BTreeMap::new();
    for item in triples {
        groups.entry(item.0.relation).or_default().push(item);
    }
    let mut total = encoded.aux_loss;
    for (relation, items) in groups {
        let fused = model.fuse(tape, bound, &encoded, relation)?;
        let m = model.tucker.relation_matrix(tape, bound, relation)?;
        let heads: Vec<usize> = items.iter().map(|(t, _)| t.head.index()).collect();
        let tails: Vec<usize> = items.iter().map(|(t, _)| t.tail.index()).collect();
        let h = tape.gather_rows(fused, &heads)?;
        let t = tape.gather_rows(fused, &tails)?;
        let scores = model.tucker.score_pairs(tape, m, h, t)?;
        let labels = items.iter().map(|(_, y)| T::of(*y)).collect();
        let l = tape.bce_with_logits(scores, labels)?;
        total = Some(add_opt(tape, total, l)?);
    }
    total.ok_or_else(|| ModelError::Config("empty training batch".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn positive_at_zero_costs_ln2() {
        assert!((bce_loss(&[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_negative_costs_nothing() {
        assert!(bce_loss(&[-1e4], &[0.0]) < 1e-300);
        assert!(bce_loss(&[-40.0], &[0.0]) < 1e-17);
    }

    #[test]
    fn matches_naive_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..10).map(|_| rng.random_range(-8.0..8.0)).collect();
            let y: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..=1.0)).collect();
            let naive: f64 = s
                .iter()
                .zip(&y)
                .map(|(&s, &y)| {
                    let p = (1.0 / (1.0 + (-s).exp())).clamp(1e-300, 1.0 - 1e-16);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum();
            assert!((bce_loss(&s, &y) - naive).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_is_sigmoid_minus_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..=1.0)).collect();
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Tensor::vector(s.clone()), true);
        let l = tape.bce_with_logits(v, y.clone()).unwrap();
        let g = tape.backward(l).unwrap();
        for ((gi, si), yi) in g.get(v).unwrap().data().iter().zip(&s).zip(&y) {
            let want = 1.0 / (1.0 + (-si).exp()) - yi;
            assert!((gi - want).abs() < 1e-6);
        }
    }

    #[test]
    fn labeled_queries_collect_all_answers() {
        let ts = [Triple::new(0, 0, 1), Triple::new(0, 0, 2), Triple::new(3, 0, 2)];
        let f = FilterIndex::from_triples(&ts);
        let qs = LabeledQuery::from_triples(&ts, &f);
        assert_eq!(qs.len(), 2 + 2);
        assert_eq!(qs[0].answers, vec![EntityId(1), EntityId(2)]);
        let head2 = qs.iter().find(|q| q.direction == Direction::Head && q.entity == EntityId(2)).unwrap();
        assert_eq!(head2.answers, vec![EntityId(0), EntityId(3)]);
    }
}
