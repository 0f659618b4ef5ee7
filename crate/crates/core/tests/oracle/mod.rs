//! Brute-force reference evaluator shared by integration and acceptance
//! tests. Deliberately naive: linear scans over the raw triple list, no
//! index structures from the library.

#![allow(dead_code)]

use mmkgc::kg::Triple;
use mmkgc::query::{Direction, Query};

/// Filtered rank of the gold: competitors are entities `e` whose completed
/// triple is not in `known`, plus ties counted as half.
pub fn brute_rank(scores: &[f32], query: &Query, known: &[Triple]) -> f64 {
    let gold = query.gold.expect("gold");
    let g = scores[gold.index()];
    let mut rank = 1.0;
    for (e, &s) in scores.iter().enumerate() {
        if e == gold.index() {
            continue;
        }
        let candidate = match query.direction {
            Direction::Tail => (query.entity.0, query.relation.0, e as u32),
            Direction::Head => (e as u32, query.relation.0, query.entity.0),
        };
        let is_known = known
            .iter()
            .any(|t| (t.head.0, t.relation.0, t.tail.0) == candidate);
        if is_known {
            continue;
        }
        if s > g {
            rank += 1.0;
        } else if s == g {
            rank += 0.5;
        }
    }
    rank
}

pub fn brute_mrr(ranks: &[f64]) -> f64 {
    let mut total = 0.0;
    for r in ranks {
        total += 1.0 / r;
    }
    total / ranks.len() as f64
}

pub fn brute_hits(ranks: &[f64], k: usize) -> f64 {
    let mut hit = 0usize;
    for &r in ranks {
        if r <= k as f64 {
            hit += 1;
        }
    }
    hit as f64 / ranks.len() as f64
}

/// A lightly trained 60-entity model, so that gold answers land both
/// inside and outside a top-20 candidate list.
pub mod toy {
    use mmkgc::model::{HerrConfig, HerrModel};
    use mmkgc::synthetic::{SyntheticKg, SyntheticSpec};
    use mmkgc::train::{train, TrainConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn trained(seed: u64) -> (SyntheticKg, HerrModel) {
        let dims = [24, 16, 8];
        let kg = SyntheticKg::generate(&SyntheticSpec::new(60, 3, [240, 30, 40]).with_dims(dims).with_seed(seed));
        let config = HerrConfig {
            num_entities: 60,
            num_relations: 3,
            dim: 16,
            input_dims: dims,
            phm_blocks: 2,
            ..Default::default()
        };
        let model = HerrModel::new(config, None, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let tc = TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.01,
            eval_every: 0,
            seed,
            ..Default::default()
        };
        let out = train(model, &kg.store, &kg.feature_set(), &tc, None).unwrap();
        (kg, out.model)
    }
}
