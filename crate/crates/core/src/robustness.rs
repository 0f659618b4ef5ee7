//! Corruptions for complex-environment runs: noisy modality inputs, masked
//! entity rows and sparsified training graphs.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, Modality, ModalityFeatures, TripleStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorruptionKind {
    GaussianNoise,
    EmbeddingMask,
    TripleRemoval,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 3] = [Self::GaussianNoise, Self::EmbeddingMask, Self::TripleRemoval];

    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianNoise => "gaussian-noise",
            Self::EmbeddingMask => "embedding-mask",
            Self::TripleRemoval => "triple-removal",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = CorruptionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorruptionError::UnknownKind(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CorruptionError {
    #[error("unknown corruption `{0}` (expected gaussian-noise, embedding-mask or triple-removal)")]
    UnknownKind(String),
    #[error("corruption fraction must lie in [0, 1], got {0}")]
    Fraction(f64),
    #[error("noise scale must be finite and non-negative, got {0}")]
    Scale(f64),
    #[error("{kind} needs a target modality")]
    MissingModality { kind: CorruptionKind },
    #[error("operation expects a {expected} spec, got {got}")]
    WrongKind { expected: CorruptionKind, got: CorruptionKind },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub fraction: f64,
    /// Required for noise and masking.
    pub modality: Option<Modality>,
    #[serde(default = "unit_scale")]
    pub noise_scale: f64,
    pub seed: u64,
}

fn unit_scale() -> f64 {
    1.0
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, fraction: f64, seed: u64) -> Self {
        Self {
            kind,
            fraction,
            modality: None,
            noise_scale: 1.0,
            seed,
        }
    }

    pub fn on(mut self, modality: Modality) -> Self {
        self.modality = Some(modality);
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.noise_scale = scale;
        self
    }

    pub fn validate(&self) -> Result<(), CorruptionError> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(CorruptionError::Fraction(self.fraction));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(CorruptionError::Scale(self.noise_scale));
        }
        if self.kind != CorruptionKind::TripleRemoval && self.modality.is_none() {
            return Err(CorruptionError::MissingModality { kind: self.kind });
        }
        Ok(())
    }

    fn expect(&self, kind: CorruptionKind) -> Result<(), CorruptionError> {
        if self.kind != kind {
            return Err(CorruptionError::WrongKind {
                expected: kind,
                got: self.kind,
            });
        }
        self.validate()
    }

    /// ⌊p·n⌋, tolerant of products like 0.57·100 that land just below an
    /// integer.
    pub fn count(&self, n: usize) -> usize {
        ((self.fraction * n as f64) + 1e-9).floor().min(n as f64) as usize
    }

    /// Sorted indices of the affected items out of `n`.
    pub fn select(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut idx = sample(&mut rng, n, self.count(n)).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Population standard deviation of each column.
pub fn column_std(features: &ModalityFeatures) -> Vec<f64> {
    let (rows, cols) = (features.rows(), features.cols());
    let mut mean = vec![0.0; cols];
    let mut sq = vec![0.0; cols];
    for i in 0..rows {
        for (j, &v) in features.row(i).iter().enumerate() {
            mean[j] += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
    for i in 0..rows {
        for (j, &v) in features.row(i).iter().enumerate() {
            sq[j] += (v as f64 - mean[j]).powi(2);
        }
    }
    sq.into_iter().map(|s| (s / rows.max(1) as f64).sqrt()).collect()
}

pub fn inject_gaussian_noise(features: &ModalityFeatures, spec: &CorruptionSpec) -> Result<ModalityFeatures, CorruptionError> {
    spec.expect(CorruptionKind::GaussianNoise)?;
    let mut out = features.clone();
    let selected = spec.select(features.rows());
    if selected.is_empty() || spec.noise_scale == 0.0 {
        return Ok(out);
    }
    let sigma: Vec<f64> = column_std(features).into_iter().map(|s| s * spec.noise_scale).collect();
    // a separate stream from the row selection
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let cols = features.cols();
    let data = out.matrix_mut().data_mut();
    for i in selected {
        for (j, s) in sigma.iter().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            if *s > 0.0 {
                let v = &mut data[i * cols + j];
                *v = (*v as f64 + s * z) as f32;
            }
        }
    }
    Ok(out)
}

pub fn mask_embeddings(features: &ModalityFeatures, spec: &CorruptionSpec) -> Result<ModalityFeatures, CorruptionError> {
    spec.expect(CorruptionKind::EmbeddingMask)?;
    let mut out = features.clone();
    let cols = features.cols();
    let data = out.matrix_mut().data_mut();
    for i in spec.select(features.rows()) {
        data[i * cols..(i + 1) * cols].fill(0.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sparsified {
    pub store: TripleStore,
    pub removed: usize,
    /// Entities that had training triples before removal and have none after.
    pub orphaned: Vec<EntityId>,
}

/// Removes ⌊p·|train|⌋ training triples; valid and test are untouched.
/// Orphaned entities are reported and logged, not rejected.
pub fn drop_triples(store: &TripleStore, spec: &CorruptionSpec, num_entities: usize) -> Result<Sparsified, CorruptionError> {
    spec.expect(CorruptionKind::TripleRemoval)?;
    let removed = spec.select(store.train.len());
    let mut drop = vec![false; store.train.len()];
    for &i in &removed {
        drop[i] = true;
    }
    let train = store
        .train
        .iter()
        .zip(&drop)
        .filter(|(_, d)| !**d)
        .map(|(t, _)| *t)
        .collect();
    let out = TripleStore {
        train,
        valid: store.valid.clone(),
        test: store.test.clone(),
    };
    let before = store.entities_without_training(num_entities);
    let orphaned: Vec<EntityId> = out
        .entities_without_training(num_entities)
        .into_iter()
        .filter(|e| before.binary_search(e).is_err())
        .collect();
    if !orphaned.is_empty() {
        log::warn!(
            "removing {} training triples left {} entities without any training triple",
            removed.len(),
            orphaned.len()
        );
    }
    Ok(Sparsified {
        store: out,
        removed: removed.len(),
        orphaned,
    })
}

/// Corrupted copy of a dataset: the targeted modality for noise and
/// masking, the training split for removal.
#[derive(Clone, Debug, PartialEq)]
pub struct Corrupted {
    pub store: TripleStore,
    pub features: Vec<ModalityFeatures>,
    pub orphaned: Vec<EntityId>,
}

pub fn apply_corruption(
    store: &TripleStore,
    features: &[ModalityFeatures],
    spec: &CorruptionSpec,
    num_entities: usize,
) -> Result<Corrupted, CorruptionError> {
    spec.validate()?;
    let mut out = Corrupted {
        store: store.clone(),
        features: features.to_vec(),
        orphaned: Vec::new(),
    };
    match spec.kind {
        CorruptionKind::TripleRemoval => {
            let s = drop_triples(store, spec, num_entities)?;
            out.store = s.store;
            out.orphaned = s.orphaned;
        }
        kind => {
            let target = spec.modality.expect("validated");
            for f in out.features.iter_mut().filter(|f| f.modality == target) {
                *f = match kind {
                    CorruptionKind::GaussianNoise => inject_gaussian_noise(f, spec)?,
                    _ => mask_embeddings(f, spec)?,
                };
            }
        }
    }
    Ok(out)
}
