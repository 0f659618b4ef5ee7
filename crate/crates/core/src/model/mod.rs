//! The multimodal retriever model: a mixture of heterogeneous experts per
//! modality, relation-aware gated fusion, and a TuckER scorer on top.

pub mod experts;
pub mod gating;
pub mod mohe;
pub mod ragmu;
pub mod tucker;

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{EntityId, Modality, ModalityFeatures, RelationId};
use crate::query::Direction;
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, TensorError, Var};

pub use experts::{Expert, PhmExpert, SimpleExpert};
pub use gating::{top_k_indices, GateNoise, GateOutput, GatingNetwork};
pub use mohe::{load_balance_loss, MoheLayer, MoheShape};
pub use ragmu::RagmuUnit;
pub use tucker::{trilinear, TuckerScorer};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("relation {relation} out of range ({relations} relations)")]
    UnknownRelation { relation: RelationId, relations: usize },
    #[error("entity {entity} out of range ({entities} entities)")]
    UnknownEntity { entity: EntityId, entities: usize },
    #[error("features: {0}")]
    Features(String),
}

pub(crate) mod init {
    use rand::Rng;

    use crate::tensor::Tensor;

    /// Glorot uniform `fan_in × fan_out`.
    pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        uniform(rng, &[fan_in, fan_out], a)
    }

    pub fn uniform(rng: &mut impl Rng, shape: &[usize], a: f32) -> Tensor<f32> {
        Tensor::from_fn(shape, |_| rng.random_range(-a..=a))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HerrConfig {
    pub num_entities: usize,
    pub num_relations: usize,
    pub dim: usize,
    /// Feature widths in [`Modality::ALL`] order.
    pub input_dims: [usize; 3],
    pub simple_experts: usize,
    pub phm_experts: usize,
    pub phm_blocks: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub whitening_eps: f64,
    pub gate_noise: GateNoise,
    pub renormalize_top_k: bool,
    /// Coefficient of the expert load-balancing term; 0 disables it.
    pub load_balance: f64,
    /// Learn the structural feature matrix instead of treating it as input.
    pub trainable_structure: bool,
    pub relation_init: f32,
    pub core_init: f32,
}

impl Default for HerrConfig {
    fn default() -> Self {
        Self {
            num_entities: 0,
            num_relations: 0,
            dim: 200,
            input_dims: [4096, 768, 200],
            simple_experts: 2,
            phm_experts: 2,
            phm_blocks: 4,
            top_k: 2,
            temperature: 1.0,
            whitening_eps: 1e-5,
            gate_noise: GateNoise::NoisyTopK,
            renormalize_top_k: false,
            load_balance: 0.0,
            trainable_structure: false,
            relation_init: 0.5,
            core_init: 0.1,
        }
    }
}

impl HerrConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.num_entities == 0 || self.num_relations == 0 {
            return bad("the graph needs at least one entity and one relation".into());
        }
        if self.dim == 0 || self.input_dims.contains(&0) {
            return bad("dimensions must be positive".into());
        }
        let experts = self.simple_experts + self.phm_experts;
        if self.top_k == 0 || self.top_k > experts {
            return bad(format!("top_k={} with {experts} experts", self.top_k));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.phm_experts > 0 {
            for d_in in self.input_dims {
                experts::check_blocks(d_in, self.dim, self.phm_blocks)?;
            }
        }
        if self.load_balance < 0.0 {
            return bad("load_balance must be non-negative".into());
        }
        Ok(())
    }
}

/// Borrowed feature matrices in [`Modality::ALL`] order, as tape inputs.
#[derive(Clone, Debug)]
pub struct FeatureSet<T: Scalar = f32> {
    matrices: [Arc<Tensor<T>>; 3],
}

impl FeatureSet<f32> {
    pub fn from_modalities(features: &[ModalityFeatures]) -> Result<Self, ModelError> {
        let pick = |m: Modality| {
            features
                .iter()
                .find(|f| f.modality == m)
                .map(|f| Arc::new(f.matrix().clone()))
                .ok_or_else(|| ModelError::Features(format!("missing {m} features")))
        };
        Ok(Self {
            matrices: [pick(Modality::Visual)?, pick(Modality::Textual)?, pick(Modality::Structural)?],
        })
    }
}

impl<T: Scalar> FeatureSet<T> {
    pub fn new(visual: Tensor<T>, textual: Tensor<T>, structural: Tensor<T>) -> Self {
        Self {
            matrices: [Arc::new(visual), Arc::new(textual), Arc::new(structural)],
        }
    }

    pub fn matrix(&self, m: Modality) -> &Tensor<T> {
        &self.matrices[m.index()]
    }

    pub fn rows(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> FeatureSet<U> {
        FeatureSet {
            matrices: self.matrices.clone().map(|m| Arc::new(m.cast())),
        }
    }
}

/// Relation-independent part of the forward pass for a set of entities.
pub struct Encoded {
    /// Projected modality vectors, `rows × d` each.
    pub projected: [Var; 3],
    /// Gate logits before the relation scalar, `rows × 3d`.
    pub gate_logits: Var,
    /// Load-balancing term, when enabled.
    pub aux_loss: Option<Var>,
    pub rows: usize,
}

#[derive(Clone, Debug)]
pub struct HerrModel {
    pub config: HerrConfig,
    pub params: ParamStore<f32>,
    pub mohe: [MoheLayer; 3],
    pub ragmu: RagmuUnit,
    pub tucker: TuckerScorer,
    pub structure: Option<ParamId>,
}

impl HerrModel {
    /// `structural` seeds the learnable structure matrix when
    /// `trainable_structure` is set and is ignored otherwise.
    pub fn new(config: HerrConfig, structural: Option<&Tensor<f32>>, rng: &mut impl Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.dim;
        let layer = |params: &mut ParamStore<f32>, m: Modality, rng: &mut _| {
            MoheLayer::new(
                params,
                &format!("mohe.{m}"),
                MoheShape {
                    d_in: config.input_dims[m.index()],
                    d,
                    simple: config.simple_experts,
                    phm: config.phm_experts,
                    phm_blocks: config.phm_blocks,
                    top_k: config.top_k,
                    temperature: config.temperature,
                    whitening_eps: config.whitening_eps,
                    noise: config.gate_noise,
                    renormalize: config.renormalize_top_k,
                },
                rng,
            )
        };
        let mohe = [
            layer(&mut params, Modality::Visual, rng)?,
            layer(&mut params, Modality::Textual, rng)?,
            layer(&mut params, Modality::Structural, rng)?,
        ];
        let names = Modality::ALL.map(|m| m.name());
        let ragmu = RagmuUnit::new(&mut params, &names, d, config.num_relations, rng);
        let tucker = TuckerScorer::new(
            &mut params,
            "tucker",
            d,
            config.num_relations,
            config.relation_init,
            config.core_init,
            rng,
        );
        let structure = if config.trainable_structure {
            let m = structural.ok_or_else(|| {
                ModelError::Features("trainable structure needs an initial structural matrix".into())
            })?;
            if m.shape() != [config.num_entities, config.input_dims[Modality::Structural.index()]] {
                return Err(ModelError::Features(format!(
                    "structural matrix has shape {:?}, expected [{}, {}]",
                    m.shape(),
                    config.num_entities,
                    config.input_dims[2]
                )));
            }
            Some(params.push("structure.embedding", m.clone()))
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            mohe,
            ragmu,
            tucker,
            structure,
        })
    }

    pub fn check_features<T: Scalar>(&self, features: &FeatureSet<T>) -> Result<(), ModelError> {
        for m in Modality::ALL {
            let shape = features.matrix(m).shape();
            let want = [self.config.num_entities, self.config.input_dims[m.index()]];
            if shape != want {
                return Err(ModelError::Features(format!(
                    "{m} features have shape {shape:?}, model expects {want:?}"
                )));
            }
        }
        Ok(())
    }

    /// Runs MoHE, the modality projections and the relation-free gate
    /// logits for `rows` (all entities when `None`). Gate noise is drawn
    /// from `noise` when given.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        features: &FeatureSet<T>,
        rows: Option<&[usize]>,
        mut noise: Option<&mut dyn RngCore>,
    ) -> Result<Encoded, ModelError> {
        let n = rows.map_or(self.config.num_entities, <[usize]>::len);
        if let Some(&bad) = rows.and_then(|r| r.iter().find(|&&i| i >= self.config.num_entities)) {
            return Err(ModelError::UnknownEntity {
                entity: EntityId(bad as u32),
                entities: self.config.num_entities,
            });
        }
        let mut projected = Vec::with_capacity(3);
        let mut aux: Option<Var> = None;
        for m in Modality::ALL {
            let full = match (m, self.structure) {
                (Modality::Structural, Some(id)) => bound[id],
                _ => tape.leaf_shared(features.matrices[m.index()].clone(), false),
            };
            let x = match rows {
                Some(idx) => tape.gather_rows(full, idx)?,
                None => full,
            };
            let out = self.mohe[m.index()].forward(tape, bound, x, noise.as_mut().map(|r| &mut **r as &mut dyn RngCore))?;
            if self.config.load_balance > 0.0 {
                let l = load_balance_loss(tape, out.gate, self.config.load_balance)?;
                aux = Some(match aux {
                    Some(a) => tape.add(a, l)?,
                    None => l,
                });
            }
            projected.push(self.ragmu.project(tape, bound, m.index(), out.hidden)?);
        }
        let gate_logits = self.ragmu.gate_logits(tape, bound, &projected)?;
        Ok(Encoded {
            projected: [projected[0], projected[1], projected[2]],
            gate_logits,
            aux_loss: aux,
            rows: n,
        })
    }

    /// Fused embeddings of the encoded rows under `relation`, `rows × d`.
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        encoded: &Encoded,
        relation: RelationId,
    ) -> Result<Var, ModelError> {
        let z = self.ragmu.gate(tape, bound, encoded.gate_logits, relation)?;
        self.ragmu.fuse(tape, &encoded.projected, z)
    }

    /// Fused embedding of every entity under `relation`, evaluation mode.
    pub fn fused_matrix(&self, features: &FeatureSet<f32>, relation: RelationId) -> Result<Tensor<f32>, ModelError> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let enc = self.encode(&mut tape, &bound, features, None, None)?;
        let f = self.fuse(&mut tape, &bound, &enc, relation)?;
        Ok(tape.value(f).clone())
    }

    /// Fused vector of one entity under `relation`.
    pub fn fused_entity_embedding(
        &self,
        features: &FeatureSet<f32>,
        entity: EntityId,
        relation: RelationId,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let enc = self.encode(&mut tape, &bound, features, Some(&[entity.index()]), noise)?;
        let f = self.fuse(&mut tape, &bound, &enc, relation)?;
        Ok(tape.value(f).data().to_vec())
    }

    /// Score of one triple with both entities fused under its relation.
    pub fn score_triple(
        &self,
        features: &FeatureSet<f32>,
        head: EntityId,
        relation: RelationId,
        tail: EntityId,
    ) -> Result<f32, ModelError> {
        let h = self.fused_entity_embedding(features, head, relation, None)?;
        let t = self.fused_entity_embedding(features, tail, relation, None)?;
        self.tucker.score(&self.params, &h, relation, &t)
    }

    /// Scores of `known` entities' queries against all entities, given the
    /// fused matrix `fused` (`|E| × d`) of their shared relation.
    pub fn score_queries<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        fused: Var,
        relation: RelationId,
        direction: Direction,
        known: &[usize],
    ) -> Result<Var, ModelError> {
        let m = self.tucker.relation_matrix(tape, bound, relation)?;
        let k = tape.gather_rows(fused, known)?;
        self.tucker.score_against(tape, m, direction, k, fused)
    }
}
