//! Finite-difference checks of the full forward pass (experts, gates,
//! fusion, scorer, loss) in 64-bit.

use mmkgc::kg::{FilterIndex, Triple};
use mmkgc::model::{FeatureSet, HerrConfig, HerrModel};
use mmkgc::tensor::gradcheck::{check_params, GroupCheck};
use mmkgc::tensor::{ParamStore, Tape, Tensor};
use mmkgc::train::{one_vs_all_loss, sampled_loss, LabeledQuery};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ENTITIES: usize = 5;

fn setup(config: HerrConfig, seed: u64) -> (HerrModel, FeatureSet<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.input_dims;
    let mut feat = |c: usize| Tensor::from_fn(&[ENTITIES, c], |_| rng.random_range(-1.0f64..1.0));
    let features = FeatureSet::new(feat(dims[0]), feat(dims[1]), feat(dims[2]));
    let structural = features.matrix(mmkgc::kg::Modality::Structural).cast::<f32>();
    let model = HerrModel::new(config, Some(&structural), &mut rng).unwrap();
    (model, features)
}

fn config() -> HerrConfig {
    HerrConfig {
        num_entities: ENTITIES,
        num_relations: 2,
        dim: 8,
        input_dims: [16, 8, 8],
        simple_experts: 2,
        phm_experts: 2,
        phm_blocks: 2,
        top_k: 2,
        ..Default::default()
    }
}

fn triples() -> Vec<Triple> {
    vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(3, 0, 4), Triple::new(2, 1, 0)]
}

enum Loss {
    OneVsAll,
    Sampled,
}

fn run(model: &HerrModel, features: &FeatureSet<f64>, kind: &Loss, noise_seed: Option<u64>) -> Vec<GroupCheck> {
    let ts = triples();
    let queries = LabeledQuery::from_triples(&ts, &FilterIndex::from_triples(&ts));
    let labelled: Vec<(Triple, f64)> = ts
        .iter()
        .map(|t| (*t, 1.0))
        .chain([(Triple::new(4, 0, 2), 0.0), (Triple::new(0, 1, 3), 0.0)])
        .collect();
    let forward = |params: &ParamStore<f64>, trainable: bool| {
        let mut tape = Tape::<f64>::new();
        let bound = tape.bind(params, trainable);
        let mut rng = noise_seed.map(ChaCha8Rng::seed_from_u64);
        let noise = rng.as_mut().map(|r| r as &mut dyn rand::RngCore);
        let loss = match kind {
            Loss::OneVsAll => one_vs_all_loss(model, &mut tape, &bound, features, &queries, 0.1, noise),
            Loss::Sampled => sampled_loss(model, &mut tape, &bound, features, &labelled, noise),
        }
        .unwrap();
        (tape, bound, loss)
    };
    let params = model.params.cast::<f64>();
    let (tape, bound, loss) = forward(&params, true);
    let analytic = tape.backward(loss).unwrap().for_params(&bound);
    check_params(&params, &analytic, 1e-4, 1e-3, |p| {
        let (tape, _, loss) = forward(p, false);
        tape.value(loss).item()
    })
}

fn assert_all(checks: &[GroupCheck], expected_groups: usize) {
    assert_eq!(checks.len(), expected_groups);
    for c in checks {
        assert!(c.max_rel_err < 1e-4, "{}: relative error {:e}", c.name, c.max_rel_err);
    }
}

#[test]
fn one_vs_all_eval_mode() {
    let (model, f) = setup(config(), 1);
    let checks = run(&model, &f, &Loss::OneVsAll, None);
    assert_all(&checks, model.params.len());
}

#[test]
fn sampled_with_gate_noise() {
    let (model, f) = setup(config(), 2);
    let checks = run(&model, &f, &Loss::Sampled, Some(17));
    assert_all(&checks, model.params.len());
}

#[test]
fn balance_term_and_trainable_structure() {
    let mut c = config();
    c.load_balance = 0.01;
    c.trainable_structure = true;
    c.renormalize_top_k = true;
    let (model, f) = setup(c, 3);
    assert!(model.params.find("structure.embedding").is_some());
    let checks = run(&model, &f, &Loss::OneVsAll, Some(5));
    assert_all(&checks, model.params.len());
}

#[test]
fn every_parameter_group_is_reached() {
    let (model, f) = setup(config(), 4);
    let ts = triples();
    let queries = LabeledQuery::from_triples(&ts, &FilterIndex::from_triples(&ts));
    let params = model.params.cast::<f64>();
    let mut tape = Tape::<f64>::new();
    let bound = tape.bind(&params, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let loss = one_vs_all_loss(&model, &mut tape, &bound, &f, &queries, 0.0, Some(&mut rng)).unwrap();
    let grads = tape.backward(loss).unwrap().for_params(&bound);
    // with gate noise on, only experts outside every row's top-k may see
    // zero gradient
    for (name, g) in params.names().iter().zip(&grads) {
        let nonzero = g.data().iter().any(|&x| x != 0.0);
        assert!(nonzero || name.contains(".simple") || name.contains(".phm"), "{name} got no gradient");
    }
}
