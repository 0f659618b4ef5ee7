use rand::Rng;

use super::TrainError;
use crate::kg::{EntityId, FilterIndex, Triple};

/// Which side of a positive triple gets replaced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Head,
    Tail,
}

/// Replaces `side` of `positive` with uniform draws until the result is not
/// a known fact. Gives up after `max_attempts` draws.
pub fn corrupt(
    positive: &Triple,
    side: Side,
    num_entities: usize,
    filter: &FilterIndex,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<Triple, TrainError> {
    for _ in 0..max_attempts {
        let e = EntityId(rng.random_range(0..num_entities as u32));
        let mut t = *positive;
        match side {
            Side::Head => t.head = e,
            Side::Tail => t.tail = e,
        }
        if !filter.contains(&t) {
            return Ok(t);
        }
    }
    Err(TrainError::NoNegative {
        triple: *positive,
        attempts: max_attempts,
    })
}

/// `n` corruptions of `positive`, each on a coin-flipped side.
pub fn sample_negatives(
    positive: &Triple,
    num_entities: usize,
    filter: &FilterIndex,
    n: usize,
    max_attempts: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Triple>, TrainError> {
    (0..n)
        .map(|_| {
            let side = if rng.random_bool(0.5) { Side::Head } else { Side::Tail };
            corrupt(positive, side, num_entities, filter, max_attempts, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_entity_tail_corruption_is_forced() {
        let pos = Triple::new(0, 0, 1);
        let f = FilterIndex::from_triples(&[pos]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert_eq!(corrupt(&pos, Side::Tail, 2, &f, 100, &mut rng).unwrap(), Triple::new(0, 0, 0));
        }
    }

    #[test]
    fn seeded_draws_repeat() {
        let pos = Triple::new(3, 0, 7);
        let f = FilterIndex::from_triples(&[pos]);
        let draw = |seed| sample_negatives(&pos, 20, &f, 16, 100, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(draw(4), draw(4));
        assert_ne!(draw(4), draw(5));
    }

    #[test]
    fn negatives_never_hit_training_facts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train: Vec<Triple> = (0..400)
            .map(|_| Triple::new(rng.random_range(0..100), rng.random_range(0..4), rng.random_range(0..100)))
            .collect();
        let f = FilterIndex::from_triples(&train);
        for i in 0..1000 {
            let neg = sample_negatives(&train[i % train.len()], 100, &f, 1, 1000, &mut rng).unwrap();
            assert!(!train.contains(&neg[0]));
        }
    }

    #[test]
    fn saturated_graph_errors() {
        let all: Vec<Triple> = (0..2).flat_map(|h| (0..2).map(move |t| Triple::new(h, 0, t))).collect();
        let f = FilterIndex::from_triples(&all);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            sample_negatives(&all[0], 2, &f, 1, 50, &mut rng),
            Err(TrainError::NoNegative { attempts: 50, .. })
        ));
    }
}
