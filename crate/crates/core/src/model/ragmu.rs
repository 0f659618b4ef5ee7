use rand::Rng;

use super::{init, ModelError};
use crate::kg::RelationId;
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Relation-aware gated fusion of `M` modality vectors into one.
#[derive(Clone, Debug)]
pub struct RagmuUnit {
    /// Per modality, `d × d` stored input-major.
    pub proj_weight: Vec<ParamId>,
    pub proj_bias: Vec<ParamId>,
    /// `M·d × M·d`
    pub gate_weight: ParamId,
    pub gate_bias: ParamId,
    /// One scalar per relation, starts at 1.
    pub relation_scalars: ParamId,
    pub d: usize,
    pub relations: usize,
}

impl RagmuUnit {
    pub fn new(
        store: &mut ParamStore<f32>,
        modalities: &[&str],
        d: usize,
        relations: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let m = modalities.len();
        let mut proj_weight = Vec::with_capacity(m);
        let mut proj_bias = Vec::with_capacity(m);
        for name in modalities {
            proj_weight.push(store.push(format!("ragmu.{name}.proj.weight"), init::xavier(rng, d, d)));
            proj_bias.push(store.push(format!("ragmu.{name}.proj.bias"), Tensor::zeros(&[d])));
        }
        let gate_weight = store.push("ragmu.gate.weight", init::xavier(rng, m * d, m * d));
        let gate_bias = store.push("ragmu.gate.bias", Tensor::zeros(&[m * d]));
        let relation_scalars = store.push("ragmu.relation_scalars", Tensor::full(&[relations], 1.0));
        Self {
            proj_weight,
            proj_bias,
            gate_weight,
            gate_bias,
            relation_scalars,
            d,
            relations,
        }
    }

    pub fn modalities(&self) -> usize {
        self.proj_weight.len()
    }

    /// `tanh(x W + b)` for modality `m`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, m: usize, x: Var) -> Result<Var, ModelError> {
        let y = tape.matmul(x, bound[self.proj_weight[m]])?;
        let y = tape.add_bias(y, bound[self.proj_bias[m]])?;
        Ok(tape.tanh(y)?)
    }

    /// Relation-independent part of the gate, `concat(h) W_z + b_z`.
    pub fn gate_logits<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, projected: &[Var]) -> Result<Var, ModelError> {
        let concat = if projected.len() == 1 {
            projected[0]
        } else {
            tape.concat_cols(projected)?
        };
        let y = tape.matmul(concat, bound[self.gate_weight])?;
        Ok(tape.add_bias(y, bound[self.gate_bias])?)
    }

    /// Gate `z` as `rows × M·d`; the `M` entries at each position sum to 1.
    pub fn gate<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        logits: Var,
        relation: RelationId,
    ) -> Result<Var, ModelError> {
        if relation.index() >= self.relations {
            return Err(ModelError::UnknownRelation {
                relation,
                relations: self.relations,
            });
        }
        let scalar = tape.gather_rows(bound[self.relation_scalars], &[relation.index()])?;
        let scaled = tape.mul_scalar(logits, scalar)?;
        Ok(tape.softmax_groups(scaled, self.modalities())?)
    }

    /// `Σ_m z_m ⊙ h_m`
    pub fn fuse<T: Scalar>(&self, tape: &mut Tape<T>, projected: &[Var], z: Var) -> Result<Var, ModelError> {
        let d = self.d;
        let mut out: Option<Var> = None;
        for (m, &h) in projected.iter().enumerate() {
            let zm = tape.slice_cols(z, m * d, (m + 1) * d)?;
            let term = tape.mul(zm, h)?;
            out = Some(match out {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        Ok(out.expect("at least one modality"))
    }
}
