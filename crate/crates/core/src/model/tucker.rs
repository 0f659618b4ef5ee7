use rand::Rng;

use super::{init, ModelError};
use crate::kg::RelationId;
use crate::query::Direction;
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Trilinear scorer: a `d×d×d` core contracted with head, relation and
/// tail vectors on modes 1, 2 and 3.
#[derive(Clone, Debug)]
pub struct TuckerScorer {
    pub core: ParamId,
    /// `|R| × d`
    pub relations: ParamId,
    pub d: usize,
    pub num_relations: usize,
}

impl TuckerScorer {
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        d: usize,
        num_relations: usize,
        relation_range: f32,
        core_range: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let relations = store.push(
            format!("{prefix}.relations"),
            init::uniform(rng, &[num_relations, d], relation_range),
        );
        let core = store.push(format!("{prefix}.core"), init::uniform(rng, &[d, d, d], core_range));
        Self {
            core,
            relations,
            d,
            num_relations,
        }
    }

    /// `core ×₂ r`, a `d×d` matrix `M` with `score = hᵀ M t`.
    pub fn relation_matrix<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        relation: RelationId,
    ) -> Result<Var, ModelError> {
        if relation.index() >= self.num_relations {
            return Err(ModelError::UnknownRelation {
                relation,
                relations: self.num_relations,
            });
        }
        let r = tape.gather_rows(bound[self.relations], &[relation.index()])?;
        let r = tape.reshape(r, &[self.d])?;
        Ok(tape.mode_n_product(bound[self.core], r, 2)?)
    }

    /// Scores every query row against every candidate row: `rows × candidates`.
    /// For tail queries `known` holds head vectors; for head queries it holds
    /// tail vectors.
    pub fn score_against<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        relation_matrix: Var,
        direction: Direction,
        known: Var,
        candidates: Var,
    ) -> Result<Var, ModelError> {
        let query = match direction {
            Direction::Tail => tape.matmul(known, relation_matrix)?,
            Direction::Head => tape.matmul_bt(known, relation_matrix)?,
        };
        Ok(tape.matmul_bt(query, candidates)?)
    }

    /// Row-wise scores of `heads[i]` with `tails[i]`: `[rows]`.
    pub fn score_pairs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        relation_matrix: Var,
        heads: Var,
        tails: Var,
    ) -> Result<Var, ModelError> {
        let hm = tape.matmul(heads, relation_matrix)?;
        Ok(tape.row_dot(hm, tails)?)
    }

    /// Score of one triple from raw vectors, by successive mode products.
    pub fn score<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        head: &[T],
        relation: RelationId,
        tail: &[T],
    ) -> Result<T, ModelError> {
        if relation.index() >= self.num_relations {
            return Err(ModelError::UnknownRelation {
                relation,
                relations: self.num_relations,
            });
        }
        let r = store.get(self.relations).row(relation.index());
        Ok(trilinear(store.get(self.core), head, r, tail)?)
    }
}

/// `core ×₁ h ×₂ r ×₃ t`
pub fn trilinear<T: Scalar>(core: &Tensor<T>, h: &[T], r: &[T], t: &[T]) -> Result<T, crate::tensor::TensorError> {
    // contract the last mode first so the remaining modes keep their numbers
    let m = core.mode_n_product(t, 3)?;
    let v = m.mode_n_product(r, 2)?;
    Ok(v.mode_n_product(h, 1)?.item())
}
