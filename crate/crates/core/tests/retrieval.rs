use mmkgc::kg::{EntityId, FilterIndex, Split};
use mmkgc::model::{HerrConfig, HerrModel};
use mmkgc::query::{Direction, Query};
use mmkgc::retrieve::{candidates_from, Retriever};
use mmkgc::synthetic::{SyntheticKg, SyntheticSpec};
use mmkgc::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (SyntheticKg, HerrModel) {
    let kg = SyntheticKg::generate(&SyntheticSpec::new(20, 3, [40, 10, 10]).with_dims([16, 8, 8]).with_seed(3));
    let config = HerrConfig {
        num_entities: 20,
        num_relations: 3,
        dim: 8,
        input_dims: [16, 8, 8],
        phm_blocks: 2,
        ..Default::default()
    };
    let model = HerrModel::new(config, None, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    (kg, model)
}

#[test]
fn score_all_matches_per_triple_loop() {
    let (kg, model) = toy();
    let f = kg.feature_set();
    let r = Retriever::new(&model, &f).unwrap();
    for t in &kg.store.train[..5] {
        for q in [Query::from_triple(t, Direction::Tail), Query::from_triple(t, Direction::Head)] {
            let scores = r.score_all(&q).unwrap();
            assert_eq!(scores, r.score_all(&q).unwrap());
            for e in 0..20u32 {
                let want = match q.direction {
                    Direction::Tail => model.score_triple(&f, q.entity, q.relation, EntityId(e)),
                    Direction::Head => model.score_triple(&f, EntityId(e), q.relation, q.entity),
                }
                .unwrap();
                assert!((scores[e as usize] - want).abs() < 1e-6, "{} vs {want}", scores[e as usize]);
            }
        }
    }
}

#[test]
fn trained_model_puts_training_answer_first() {
    let (kg, model) = toy();
    let f = kg.feature_set();
    let tc = TrainConfig {
        epochs: 150,
        batch_size: 64,
        learning_rate: 0.01,
        eval_every: 0,
        ..Default::default()
    };
    let model = train(model, &kg.store, &f, &tc, None).unwrap().model;
    let r = Retriever::new(&model, &f).unwrap();
    let filter = FilterIndex::from_triples(&kg.store.train);
    let mut firsts = 0;
    for t in &kg.store.train {
        let q = Query::from_triple(t, Direction::Tail);
        let res = r.rank(&q, &filter, &filter).unwrap();
        if res.rank == Some(1.0) {
            firsts += 1;
        }
    }
    assert!(firsts as f64 >= 0.95 * kg.store.train.len() as f64, "{firsts}");
}

#[test]
fn parallel_equals_serial_and_candidates_are_prefixes() {
    let (kg, model) = toy();
    let f = kg.feature_set();
    let r = Retriever::new(&model, &f).unwrap();
    let rank_filter = FilterIndex::build(&kg.store, &Split::ALL).unwrap();
    let cand_filter = FilterIndex::build(&kg.store, &[Split::Train, Split::Valid]).unwrap();
    let queries = Query::both_directions(&kg.store.test);
    let serial = r.rank_all(&queries, &rank_filter, &cand_filter, 1).unwrap();
    let parallel = r.rank_all(&queries, &rank_filter, &cand_filter, 4).unwrap();
    assert_eq!(serial, parallel);
    for res in &serial {
        assert!(res.rank.unwrap() >= 1.0);
        let c = candidates_from(res, 5);
        assert_eq!(c.entities().collect::<Vec<_>>(), res.ordering[..5].to_vec());
        for e in c.entities() {
            assert!(!cand_filter.contains(&res.query.complete(e)) || Some(e) == res.query.gold);
        }
        let scores: Vec<f32> = c.candidates.iter().map(|c| c.score).collect();
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}
