//! Plain TuckER pretraining whose entity embeddings become the structural
//! modality.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::eval::{mrr, Metrics};
use crate::kg::{FilterIndex, Modality, ModalityFeatures, RelationId, Split, TripleStore};
use crate::model::{init, TuckerScorer};
use crate::query::{Direction, Query};
use crate::retrieve::filtered_rank;
use crate::tensor::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor};
use crate::train::{clip_gradients, max_abs, LabeledQuery, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    pub grad_clip: f64,
    pub embedding_init: f32,
    pub core_init: f32,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            dim: 200,
            epochs: 200,
            batch_size: 512,
            learning_rate: 0.001,
            label_smoothing: 0.0,
            seed: 0,
            eval_every: 5,
            patience: 10,
            grad_clip: 5.0,
            embedding_init: 0.05,
            core_init: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TuckerBaseline {
    pub params: ParamStore<f32>,
    pub entities: ParamId,
    pub scorer: TuckerScorer,
    pub num_entities: usize,
}

impl TuckerBaseline {
    pub fn new(num_entities: usize, num_relations: usize, config: &StructureConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let entities = params.push(
            "structure.entities",
            init::uniform(&mut rng, &[num_entities, config.dim], config.embedding_init),
        );
        let scorer = TuckerScorer::new(
            &mut params,
            "structure",
            config.dim,
            num_relations,
            config.embedding_init,
            config.core_init,
            &mut rng,
        );
        Self {
            params,
            entities,
            scorer,
            num_entities,
        }
    }

    pub fn embeddings(&self) -> &Tensor<f32> {
        self.params.get(self.entities)
    }

    pub fn into_features(self) -> ModalityFeatures {
        ModalityFeatures::new(Modality::Structural, self.params.get(self.entities).clone())
    }

    /// All-entity scores for each query, `queries × |E|`.
    pub fn score_queries(&self, queries: &[Query]) -> Result<Vec<Vec<f32>>, TrainError> {
        let mut tape = Tape::<f32>::new();
        let bound = tape.bind(&self.params, false);
        let e = bound[self.entities];
        let mut out = vec![Vec::new(); queries.len()];
        for ((relation, direction), idx) in group(queries.iter().map(|q| (q.relation, q.direction))) {
            let known: Vec<usize> = idx.iter().map(|&i| queries[i].entity.index()).collect();
            let m = self.scorer.relation_matrix(&mut tape, &bound, relation)?;
            let k = tape.gather_rows(e, &known)?;
            let s = self.scorer.score_against(&mut tape, m, direction, k, e)?;
            for (row, &i) in tape.value(s).data().chunks(self.num_entities).zip(&idx) {
                out[i] = row.to_vec();
            }
        }
        Ok(out)
    }

    /// Filtered ranks of `queries` (with gold) under `filter`.
    pub fn ranks(&self, queries: &[Query], filter: &FilterIndex) -> Result<Vec<f64>, TrainError> {
        let scores = self.score_queries(queries)?;
        Ok(queries
            .iter()
            .zip(&scores)
            .map(|(q, s)| filtered_rank(s, q, filter).expect("queries carry gold"))
            .collect())
    }
}

fn group(keys: impl Iterator<Item = (RelationId, Direction)>) -> BTreeMap<(RelationId, Direction), Vec<usize>> {
    let mut g: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.enumerate() {
        g.entry(k).or_default().push(i);
    }
    g
}

pub struct StructureOutcome {
    pub model: TuckerBaseline,
    pub losses: Vec<f64>,
    pub valid_mrr: Option<f64>,
}

/// 1-N BCE training on `store.train`; early stopping on filtered valid MRR
/// when a valid split is present.
pub fn train_structure_embeddings(
    store: &TripleStore,
    num_entities: usize,
    num_relations: usize,
    config: &StructureConfig,
) -> Result<StructureOutcome, TrainError> {
    if store.train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if config.batch_size == 0 || config.dim == 0 {
        return Err(TrainError::Config("structure dim and batch_size must be positive".into()));
    }
    let mut model = TuckerBaseline::new(num_entities, num_relations, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let train_filter = FilterIndex::from_triples(&store.train);
    let mut queries = LabeledQuery::from_triples(&store.train, &train_filter);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    let full_filter = FilterIndex::build(store, &Split::ALL).expect("non-empty split list");
    let valid_queries = Query::both_directions(&store.valid);
    let n = num_entities;

    let mut losses = Vec::new();
    let mut best: Option<(f64, ParamStore<f32>)> = None;
    let mut stale = 0;
    let mut last_finite = (model.params.clone(), 0);
    for epoch in 1..=config.epochs {
        queries.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in queries.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::<f32>::new();
            let bound = tape.bind(&model.params, true);
            let e = bound[model.entities];
            let mut total = None;
            for ((relation, direction), idx) in group(batch.iter().map(|q| (q.relation, q.direction))) {
                let known: Vec<usize> = idx.iter().map(|&i| batch[i].entity.index()).collect();
                let m = model.scorer.relation_matrix(&mut tape, &bound, relation)?;
                let k = tape.gather_rows(e, &known)?;
                let s = model.scorer.score_against(&mut tape, m, direction, k, e)?;
                let eps = config.label_smoothing;
                let mut targets = vec![(eps / n as f64) as f32; idx.len() * n];
                for (row, &i) in idx.iter().enumerate() {
                    for a in &batch[i].answers {
                        targets[row * n + a.index()] = (1.0 - eps + eps / n as f64) as f32;
                    }
                }
                let l = tape.bce_with_logits(s, targets)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l)?,
                    None => l,
                });
            }
            let loss = total.expect("non-empty batch");
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
        losses.push(epoch_loss);

        if config.eval_every > 0 && epoch % config.eval_every == 0 && !valid_queries.is_empty() {
            let m = mrr(&model.ranks(&valid_queries, &full_filter)?).expect("non-empty");
            log::debug!("structure epoch {epoch}: loss {epoch_loss:.4} valid_mrr {m:.4}");
            if best.as_ref().is_none_or(|(b, _)| m > *b) {
                best = Some((m, model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    break;
                }
            }
        }
    }
    let valid_mrr = best.map(|(m, p)| {
        model.params = p;
        m
    });
    Ok(StructureOutcome {
        model,
        losses,
        valid_mrr,
    })
}

/// Filtered metrics of the baseline on `triples`, both directions.
pub fn evaluate_baseline(model: &TuckerBaseline, triples: &[crate::kg::Triple], filter: &FilterIndex) -> Result<Metrics, TrainError> {
    let ranks = model.ranks(&Query::both_directions(triples), filter)?;
    Metrics::from_ranks(&ranks).map_err(|e| TrainError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Triple;

    fn cycle() -> TripleStore {
        TripleStore {
            train: vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2), Triple::new(2, 0, 3), Triple::new(3, 0, 0)],
            ..Default::default()
        }
    }

    #[test]
    fn four_cycle_is_memorized() {
        let config = StructureConfig {
            dim: 8,
            epochs: 300,
            learning_rate: 0.01,
            ..Default::default()
        };
        let store = cycle();
        let out = train_structure_embeddings(&store, 4, 1, &config).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
        let filter = FilterIndex::from_triples(&store.train);
        let m = evaluate_baseline(&out.model, &store.train, &filter).unwrap();
        assert_eq!(m.hits1, 1.0);
        assert_eq!(out.model.into_features().rows(), 4);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let config = StructureConfig {
            dim: 8,
            epochs: 0,
            seed: 3,
            ..Default::default()
        };
        let out = train_structure_embeddings(&cycle(), 4, 1, &config).unwrap();
        let init = TuckerBaseline::new(4, 1, &config);
        assert_eq!(out.model.embeddings(), init.embeddings());
        assert!(out.model.embeddings().data().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn seeded_runs_repeat_and_accept_default_width() {
        let config = StructureConfig {
            dim: 8,
            epochs: 5,
            seed: 1,
            ..Default::default()
        };
        let a = train_structure_embeddings(&cycle(), 4, 1, &config).unwrap();
        let b = train_structure_embeddings(&cycle(), 4, 1, &config).unwrap();
        assert_eq!(a.model.embeddings(), b.model.embeddings());
        let wide = StructureConfig {
            dim: 200,
            epochs: 0,
            ..Default::default()
        };
        assert_eq!(TuckerBaseline::new(4, 1, &wide).embeddings().shape(), &[4, 200]);
    }
}
