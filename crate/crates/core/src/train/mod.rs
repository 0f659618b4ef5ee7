//! End-to-end training of the retriever model.

mod checkpoint;
mod loss;
mod negatives;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{blob_path, load_checkpoint, manifest_path, save_checkpoint, Checkpoint, Manifest, TensorEntry};
pub use loss::{bce_loss, one_vs_all_loss, sampled_loss, LabeledQuery};
pub use negatives::{corrupt, sample_negatives, Side};

use crate::eval::mrr;
use crate::kg::{FilterIndex, Split, Triple, TripleStore};
use crate::model::{FeatureSet, HerrModel, ModelError};
use crate::query::Query;
use crate::retrieve::{RetrieveError, Retriever};
use crate::tensor::{AdamConfig, AdamState, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Retrieve(#[from] RetrieveError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no valid negative for {triple:?} after {attempts} draws")]
    NoNegative { triple: Triple, attempts: usize },
    #[error("loss became {loss} at epoch {epoch}, batch {batch} (max |grad| {max_grad:e})")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
        max_grad: f64,
        /// Parameters after the last epoch whose losses were all finite.
        last_finite: Box<crate::tensor::ParamStore<f32>>,
        last_finite_epoch: usize,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training split is empty")]
    EmptyTrain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    #[default]
    OneVsAll,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mode: ScoringMode,
    /// Negatives per positive in sampled mode.
    pub negatives: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    pub max_redraws: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 512,
            learning_rate: 0.001,
            mode: ScoringMode::OneVsAll,
            negatives: 10,
            label_smoothing: 0.0,
            seed: 0,
            patience: 10,
            eval_every: 5,
            grad_clip: 5.0,
            max_redraws: 1000,
            workers: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if self.mode == ScoringMode::Sampled && self.negatives == 0 {
            return bad("sampled mode needs at least one negative");
        }
        if self.max_redraws == 0 {
            return bad("max_redraws must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_mrr: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: HerrModel,
    pub log: Vec<EpochLog>,
    /// Epoch of the returned parameters.
    pub epoch: usize,
    pub valid_mrr: Option<f64>,
}

/// Scales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
    norm
}

pub(crate) fn max_abs(grads: &[Tensor<f32>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .fold(0f64, |m, &x| if x.is_nan() { f64::NAN } else { m.max(x.abs() as f64) })
}

/// Filtered valid MRR over both directions, filtering with every split.
pub fn valid_mrr(
    model: &HerrModel,
    features: &FeatureSet<f32>,
    store: &TripleStore,
    workers: usize,
) -> Result<Option<f64>, TrainError> {
    if store.valid.is_empty() {
        return Ok(None);
    }
    let filter = FilterIndex::build(store, &Split::ALL).expect("non-empty split list");
    let retriever = Retriever::new(model, features)?;
    let queries = Query::both_directions(&store.valid);
    let ranks: Vec<f64> = retriever
        .rank_all(&queries, &filter, &filter, workers)?
        .iter()
        .map(|r| r.rank.expect("valid queries carry gold"))
        .collect();
    Ok(Some(mrr(&ranks).expect("non-empty")))
}

/// Trains `model` on `store.train`. Writes one JSON line per epoch to
/// `log_sink` when given. With validation enabled the best-scoring
/// parameters are restored at the end.
pub fn train(
    mut model: HerrModel,
    store: &TripleStore,
    features: &FeatureSet<f32>,
    config: &TrainConfig,
    mut log_sink: Option<&mut dyn Write>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    model.check_features(features)?;
    if store.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train_filter = FilterIndex::from_triples(&store.train);
    let mut queries = LabeledQuery::from_triples(&store.train, &train_filter);
    let mut positives = store.train.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.params);

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, crate::tensor::ParamStore<f32>)> = None;
    let mut stale = 0usize;
    let mut last_finite = (model.params.clone(), 0usize);

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let batches = match config.mode {
            ScoringMode::OneVsAll => {
                queries.shuffle(&mut rng);
                queries.len().div_ceil(config.batch_size)
            }
            ScoringMode::Sampled => {
                positives.shuffle(&mut rng);
                positives.len().div_ceil(config.batch_size)
            }
        };
        for b in 0..batches {
            let mut tape = Tape::<f32>::new();
            let bound = tape.bind(&model.params, true);
            let loss = match config.mode {
                ScoringMode::OneVsAll => {
                    let end = ((b + 1) * config.batch_size).min(queries.len());
                    let batch = &queries[b * config.batch_size..end];
                    one_vs_all_loss(
                        &model,
                        &mut tape,
                        &bound,
                        features,
                        batch,
                        config.label_smoothing,
                        Some(&mut rng as &mut dyn rand::RngCore),
                    )?
                }
                ScoringMode::Sampled => {
                    let end = ((b + 1) * config.batch_size).min(positives.len());
                    let mut items = Vec::new();
                    for pos in &positives[b * config.batch_size..end] {
                        items.push((*pos, 1.0));
                        for neg in sample_negatives(
                            pos,
                            model.config.num_entities,
                            &train_filter,
                            config.negatives,
                            config.max_redraws,
                            &mut rng,
                        )? {
                            items.push((neg, 0.0));
                        }
                    }
                    sampled_loss(&model, &mut tape, &bound, features, &items, Some(&mut rng as &mut dyn rand::RngCore))?
                }
            };
            let value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?.for_params(&bound);
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss: value,
                    max_grad: max_abs(&grads),
                    last_finite: Box::new(last_finite.0),
                    last_finite_epoch: last_finite.1,
                });
            }
            clip_gradients(&mut grads, config.grad_clip);
            adam.step(&mut model.params, &grads)?;
            epoch_loss += value;
        }
        last_finite = (model.params.clone(), epoch);

        let valid = if config.eval_every > 0 && epoch % config.eval_every == 0 {
            valid_mrr(&model, features, store, config.workers)?
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            loss: epoch_loss,
            valid_mrr: valid,
        };
        log::debug!("epoch {epoch}: loss {epoch_loss:.6} valid_mrr {valid:?}");
        if let Some(sink) = log_sink.as_deref_mut() {
            let line = serde_json::to_string(&entry).expect("log entry serializes");
            writeln!(sink, "{line}").map_err(|source| TrainError::Io {
                path: PathBuf::from("<training log>"),
                source,
            })?;
        }
        log.push(entry);

        if let Some(m) = valid {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    log::info!("early stop at epoch {epoch}");
                    break;
                }
            }
        }
    }

    let (epoch, valid_mrr) = match best {
        Some((m, e, params)) => {
            model.params = params;
            (e, Some(m))
        }
        None => (log.last().map_or(0, |l| l.epoch), None),
    };
    Ok(TrainOutcome {
        model,
        log,
        epoch,
        valid_mrr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GateNoise, HerrConfig};
    use rand::Rng;

    fn toy(seed: u64, n: usize, noise: GateNoise) -> (HerrModel, FeatureSet, TripleStore) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let train: Vec<Triple> = (0..n as u32).map(|i| Triple::new(i, i % 2, (i + 1) % n as u32)).collect();
        let store = TripleStore {
            train,
            ..Default::default()
        };
        let config = HerrConfig {
            num_entities: n,
            num_relations: 2,
            dim: 8,
            input_dims: [8, 8, 8],
            phm_blocks: 2,
            gate_noise: noise,
            ..Default::default()
        };
        let model = HerrModel::new(config, None, &mut rng).unwrap();
        let mut feat = || Tensor::from_fn(&[n, 8], |_| rng.random_range(-1.0f32..1.0));
        let features = FeatureSet::new(feat(), feat(), feat());
        (model, features, store)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (model, f, store) = toy(1, 6, GateNoise::Literal);
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.0,
            batch_size: 4,
            eval_every: 0,
            ..Default::default()
        };
        let out = train(model.clone(), &store, &f, &cfg, None).unwrap();
        for id in model.params.ids() {
            assert_eq!(out.model.params.get(id), model.params.get(id));
        }
        let l0 = out.log[0].loss;
        assert!(out.log.iter().all(|l| (l.loss - l0).abs() < 1e-4 * l0));
    }

    #[test]
    fn same_seed_same_parameters() {
        for mode in [ScoringMode::OneVsAll, ScoringMode::Sampled] {
            let cfg = TrainConfig {
                epochs: 4,
                batch_size: 3,
                learning_rate: 0.01,
                mode,
                negatives: 2,
                eval_every: 0,
                seed: 9,
                ..Default::default()
            };
            let run = || {
                let (model, f, store) = toy(2, 6, GateNoise::NoisyTopK);
                train(model, &store, &f, &cfg, None).unwrap().model.params
            };
            let (a, b) = (run(), run());
            for id in a.ids() {
                assert_eq!(a.get(id), b.get(id));
            }
        }
    }

    #[test]
    fn both_modes_reduce_loss_early() {
        for mode in [ScoringMode::OneVsAll, ScoringMode::Sampled] {
            let (model, f, store) = toy(3, 8, GateNoise::NoisyTopK);
            let cfg = TrainConfig {
                epochs: 20,
                batch_size: 64,
                learning_rate: 0.01,
                mode,
                negatives: 4,
                eval_every: 0,
                ..Default::default()
            };
            let out = train(model, &store, &f, &cfg, None).unwrap();
            let first = out.log.first().unwrap().loss;
            let last = out.log.last().unwrap().loss;
            assert!(last < first, "{mode:?}: {first} -> {last}");
        }
    }

    #[test]
    fn jsonl_log_lines() {
        let (model, f, mut store) = toy(4, 6, GateNoise::NoisyTopK);
        store.valid = vec![Triple::new(0, 1, 3)];
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 8,
            eval_every: 2,
            ..Default::default()
        };
        let mut sink = Vec::new();
        let out = train(model, &store, &f, &cfg, Some(&mut sink)).unwrap();
        let text = String::from_utf8(sink).unwrap();
        let lines: Vec<EpochLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].valid_mrr.is_some() && lines[0].valid_mrr.is_none());
        assert!(out.valid_mrr.is_some());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::vector(vec![3.0f32, 4.0])];
        assert_eq!(clip_gradients(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
    }
}
