use std::time::{Duration, Instant};

use mmkgc::eval::Metrics;
use mmkgc::kg::FilterIndex;
use mmkgc::model::{HerrConfig, HerrModel};
use mmkgc::query::Query;
use mmkgc::retrieve::Retriever;
use mmkgc::synthetic::{SyntheticKg, SyntheticSpec};
use mmkgc::train::{train, ScoringMode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const DIMS: [usize; 3] = [64, 32, 16];

fn memorize(mode: ScoringMode) {
    let kg = SyntheticKg::generate(&SyntheticSpec::new(50, 3, [150, 0, 0]).with_dims(DIMS).with_seed(1));
    let features = kg.feature_set();
    let config = HerrConfig {
        num_entities: 50,
        num_relations: 3,
        dim: 32,
        input_dims: DIMS,
        phm_blocks: 2,
        ..Default::default()
    };
    let model = HerrModel::new(config, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 128,
        learning_rate: 0.01,
        mode,
        negatives: 10,
        eval_every: 0,
        ..Default::default()
    };
    let start = Instant::now();
    let out = train(model, &kg.store, &features, &tc, None).unwrap();
    assert!(start.elapsed() < Duration::from_secs(300));
    assert!(out.log.iter().all(|l| l.loss.is_finite()));
    let (first, last) = (out.log[0].loss, out.log.last().unwrap().loss);
    assert!(last < 0.2 * first, "{mode:?}: loss {first} -> {last}");

    let filter = FilterIndex::from_triples(&kg.store.train);
    let retriever = Retriever::new(&out.model, &features).unwrap();
    let ranks: Vec<f64> = retriever
        .rank_all(&Query::both_directions(&kg.store.train), &filter, &filter, 1)
        .unwrap()
        .iter()
        .map(|r| r.rank.unwrap())
        .collect();
    let m = Metrics::from_ranks(&ranks).unwrap();
    assert!(m.hits1 >= 0.95, "{mode:?}: train Hits@1 {}", m.hits1);
}

#[test]
fn one_vs_all_memorizes_fifty_entities() {
    memorize(ScoringMode::OneVsAll);
}

#[test]
fn sampled_memorizes_fifty_entities() {
    memorize(ScoringMode::Sampled);
}
