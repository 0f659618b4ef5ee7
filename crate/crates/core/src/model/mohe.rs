use rand::{Rng, RngCore};

use super::experts::{Expert, PhmExpert, SimpleExpert};
use super::gating::{GateNoise, GatingNetwork};
use super::ModelError;
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

/// Mixture of heterogeneous experts for one modality.
#[derive(Clone, Debug)]
pub struct MoheLayer {
    pub gating: GatingNetwork,
    pub experts: Vec<Expert>,
    /// Rescale the selected weights to sum to one. Off by default: the
    /// output is the plain masked sum.
    pub renormalize: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct MoheShape {
    pub d_in: usize,
    pub d: usize,
    pub simple: usize,
    pub phm: usize,
    pub phm_blocks: usize,
    pub top_k: usize,
    pub temperature: f64,
    pub whitening_eps: f64,
    pub noise: GateNoise,
    pub renormalize: bool,
}

pub struct MoheOutput {
    /// `rows × d`
    pub hidden: Var,
    /// Full (pre-selection) gate weights, `rows × K`.
    pub gate: Var,
    pub selected: Vec<Vec<usize>>,
}

impl MoheLayer {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, shape: MoheShape, rng: &mut impl Rng) -> Result<Self, ModelError> {
        let k = shape.simple + shape.phm;
        let gating = GatingNetwork::new(
            store,
            &format!("{prefix}.gate"),
            shape.d_in,
            k,
            shape.top_k,
            shape.temperature,
            shape.noise,
            rng,
        )?;
        let mut experts = Vec::with_capacity(k);
        for i in 0..shape.simple {
            experts.push(Expert::Simple(SimpleExpert::new(
                store,
                &format!("{prefix}.simple{i}"),
                shape.d_in,
                shape.d,
                shape.whitening_eps,
                rng,
            )));
        }
        for i in 0..shape.phm {
            experts.push(Expert::Phm(PhmExpert::new(
                store,
                &format!("{prefix}.phm{i}"),
                shape.d_in,
                shape.d,
                shape.phm_blocks,
                rng,
            )?));
        }
        Ok(Self {
            gating,
            experts,
            renormalize: shape.renormalize,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<MoheOutput, ModelError> {
        let gate = self.gating.forward(tape, bound, x, noise)?;
        let k = self.experts.len();
        let rows = gate.selected.len();
        let mut mask = vec![T::zero(); rows * k];
        for (r, sel) in gate.selected.iter().enumerate() {
            for &e in sel {
                mask[r * k + e] = T::one();
            }
        }
        let mask = tape.constant(Tensor::matrix(rows, k, mask)?);
        let mut kept = tape.mul(gate.weights, mask)?;
        if self.renormalize {
            kept = tape.normalize_rows(kept)?;
        }
        let mut hidden: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            if gate.selected.iter().all(|s| !s.contains(&e)) {
                continue;
            }
            let out = expert.forward(tape, bound, x)?;
            let w = tape.slice_cols(kept, e, e + 1)?;
            let term = tape.scale_rows(out, w)?;
            hidden = Some(match hidden {
                Some(h) => tape.add(h, term)?,
                None => term,
            });
        }
        Ok(MoheOutput {
            hidden: hidden.expect("top_k >= 1 selects at least one expert"),
            gate: gate.weights,
            selected: gate.selected,
        })
    }

    /// Single-vector form.
    pub fn apply<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        noise: Option<&mut dyn RngCore>,
    ) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = tape.bind(store, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let out = self.forward(&mut tape, &bound, xv, noise)?;
        Ok(tape.value(out.hidden).data().to_vec())
    }
}

/// Squared coefficient of variation of expert importance (column sums of
/// the gate), times `coef`.
pub fn load_balance_loss<T: Scalar>(tape: &mut Tape<T>, gate: Var, coef: f64) -> Result<Var, ModelError> {
    let (rows, k) = (tape.shape(gate)[0], tape.shape(gate)[1]);
    let ones = tape.constant(Tensor::full(&[1, rows], T::one()));
    let importance = tape.matmul(ones, gate)?;
    let sq = tape.mul(importance, importance)?;
    let total = tape.sum(sq)?;
    // gate rows sum to one, so total importance is `rows`
    let scaled = tape.scale(total, T::of(coef * k as f64 / (rows * rows) as f64))?;
    Ok(tape.offset(scaled, T::of(-coef))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(top_k: usize) -> MoheShape {
        MoheShape {
            d_in: 8,
            d: 8,
            simple: 2,
            phm: 2,
            phm_blocks: 2,
            top_k,
            temperature: 1.0,
            whitening_eps: 1e-5,
            noise: GateNoise::NoisyTopK,
            renormalize: false,
        }
    }

    #[test]
    fn identity_experts_uniform_gate_halve_input() {
        // PHM experts with one block and identity matrices are identity maps.
        let mut store = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let gate = store.push("g", Tensor::zeros(&[4, 4]));
        let noise = store.push("n", Tensor::zeros(&[4, 4]));
        let experts = (0..4)
            .map(|i| {
                let block = store.push(format!("w{i}"), eye.clone());
                let mix = store.push(format!("h{i}"), eye.clone());
                Expert::Phm(PhmExpert {
                    block,
                    mixers: vec![mix],
                    d_in: 4,
                    d: 4,
                })
            })
            .collect();
        let layer = MoheLayer {
            gating: GatingNetwork {
                gate,
                noise,
                temperature: 1.0,
                experts: 4,
                top_k: 2,
                mode: GateNoise::NoisyTopK,
            },
            experts,
            renormalize: false,
        };
        let x = [0.4, -1.2, 2.0, 0.1];
        let h = layer.apply(&store, &x, None).unwrap();
        for (a, b) in h.iter().zip(x) {
            assert!((a - 0.5 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_sum_matches_per_expert_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for top_k in 1..=4 {
            let mut store = ParamStore::<f32>::new();
            let layer = MoheLayer::new(&mut store, "m", shape(top_k), &mut rng).unwrap();
            let store = store.cast::<f64>();
            for _ in 0..10 {
                let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
                let (w, sel) = layer.gating.weights(&store, &x, None).unwrap();
                let mut want = vec![0.0; 8];
                for (e, expert) in layer.experts.iter().enumerate() {
                    let g = if sel.contains(&e) { w[e] } else { 0.0 };
                    let out = expert.apply(&store, &x).unwrap();
                    for j in 0..8 {
                        want[j] += g * out[j];
                    }
                }
                let got = layer.apply(&store, &x, None).unwrap();
                for j in 0..8 {
                    assert!((got[j] - want[j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn renormalized_weights_sum_to_one_over_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::<f32>::new();
        let mut s = shape(2);
        s.renormalize = true;
        let layer = MoheLayer::new(&mut store, "m", s, &mut rng).unwrap();
        let store = store.cast::<f64>();
        let x: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (w, sel) = layer.gating.weights(&store, &x, None).unwrap();
        let total: f64 = sel.iter().map(|&e| w[e]).sum();
        let mut want = vec![0.0; 8];
        for &e in &sel {
            let out = layer.experts[e].apply(&store, &x).unwrap();
            for j in 0..8 {
                want[j] += w[e] / total * out[j];
            }
        }
        let got = layer.apply(&store, &x, None).unwrap();
        for j in 0..8 {
            assert!((got[j] - want[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn balanced_gate_has_zero_balance_loss() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[3, 4], 0.25));
        let l = load_balance_loss(&mut tape, g, 0.01).unwrap();
        assert!(tape.value(l).item().abs() < 1e-15);
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = load_balance_loss(&mut tape, g, 1.0).unwrap();
        assert!((tape.value(l).item() - 1.0).abs() < 1e-12);
    }
}
