//! Seeded random knowledge graphs with random feature matrices, for tests,
//! demos and dataset-sized dry runs.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kg::{
    write_feature_matrix, write_triples, KgError, Modality, ModalityFeatures, Split, Triple, TripleStore, Vocab,
};
use crate::model::FeatureSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub entities: usize,
    pub relations: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Feature widths in [`Modality::ALL`] order.
    pub feature_dims: [usize; 3],
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(entities: usize, relations: usize, [train, valid, test]: [usize; 3]) -> Self {
        Self {
            entities,
            relations,
            train,
            valid,
            test,
            feature_dims: [32, 16, 16],
            seed: 0,
        }
    }

    pub fn with_dims(mut self, dims: [usize; 3]) -> Self {
        self.feature_dims = dims;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticKg {
    pub vocab: Vocab,
    pub store: TripleStore,
    pub features: Vec<ModalityFeatures>,
}

impl SyntheticKg {
    /// Every entity occurs in some training triple (when there are at least
    /// as many training triples as entities) and no triple repeats across
    /// or within splits.
    pub fn generate(spec: &SyntheticSpec) -> Self {
        assert!(spec.entities >= 2 && spec.relations >= 1, "need two entities and a relation");
        let capacity = spec.entities * spec.entities * spec.relations;
        let total = spec.train + spec.valid + spec.test;
        assert!(total <= capacity / 2, "too many triples for {} entities", spec.entities);

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut vocab = Vocab::new();
        for i in 0..spec.entities {
            vocab.intern_entity(&format!("e{i}"));
        }
        for j in 0..spec.relations {
            vocab.intern_relation(&format!("r{j}"));
        }

        let (n, r) = (spec.entities as u32, spec.relations as u32);
        let mut seen = HashSet::with_capacity(total);
        let mut train = Vec::with_capacity(spec.train);
        // a random cycle through all entities covers each of them
        let mut order: Vec<u32> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for i in 0..spec.entities.min(spec.train) {
            let t = Triple::new(order[i], rng.random_range(0..r), order[(i + 1) % spec.entities]);
            if seen.insert(t) {
                train.push(t);
            }
        }
        let mut draw = |count: usize, out: &mut Vec<Triple>, rng: &mut ChaCha8Rng| {
            while out.len() < count {
                let t = Triple::new(rng.random_range(0..n), rng.random_range(0..r), rng.random_range(0..n));
                if seen.insert(t) {
                    out.push(t);
                }
            }
        };
        draw(spec.train, &mut train, &mut rng);
        let mut valid = Vec::with_capacity(spec.valid);
        draw(spec.valid, &mut valid, &mut rng);
        let mut test = Vec::with_capacity(spec.test);
        draw(spec.test, &mut test, &mut rng);

        let features = Modality::ALL
            .iter()
            .zip(spec.feature_dims)
            .map(|(&m, cols)| {
                let t = Tensor::from_fn(&[spec.entities, cols], |_| rng.random_range(-1.0f32..1.0));
                ModalityFeatures::new(m, t)
            })
            .collect();
        Self {
            vocab,
            store: TripleStore { train, valid, test },
            features,
        }
    }

    pub fn feature_set(&self) -> FeatureSet<f32> {
        FeatureSet::from_modalities(&self.features).expect("all three modalities are generated")
    }

    /// Writes `train.tsv`, `valid.tsv`, `test.tsv` and `<modality>.mmft`
    /// (with `.ids`) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), KgError> {
        fs::create_dir_all(dir).map_err(crate::kg::io_err(dir))?;
        for split in Split::ALL {
            write_triples(&dir.join(split.file_name()), self.store.split(split), &self.vocab)?;
        }
        for f in &self.features {
            write_feature_matrix(f, &self.vocab, &dir.join(format!("{}.mmft", f.modality)))?;
        }
        Ok(())
    }
}
