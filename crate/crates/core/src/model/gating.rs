use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{init, ModelError};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// How the noise matrix enters the gate logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateNoise {
    /// Training logits are `x·W_gate + ε ⊙ softplus(x·W_noise)` with
    /// `ε ~ N(0, 1)`; evaluation drops the noise term.
    #[default]
    NoisyTopK,
    /// `x·W_gate + x·W_noise` in both modes, no sampling.
    Literal,
}

/// Softmax gate over `K` experts with top-κ selection.
#[derive(Clone, Debug)]
pub struct GatingNetwork {
    /// `d_in × K`
    pub gate: ParamId,
    /// `d_in × K`
    pub noise: ParamId,
    pub temperature: f64,
    pub experts: usize,
    pub top_k: usize,
    pub mode: GateNoise,
}

/// Full gate distribution plus the selected expert indices per row.
#[derive(Clone, Debug)]
pub struct GateOutput {
    /// `rows × K`, rows sum to one before selection.
    pub weights: Var,
    pub selected: Vec<Vec<usize>>,
}

impl GatingNetwork {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        d_in: usize,
        experts: usize,
        top_k: usize,
        temperature: f64,
        mode: GateNoise,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        validate(experts, top_k, temperature)?;
        let gate = store.push(format!("{prefix}.gate"), init::xavier(rng, d_in, experts));
        let noise = store.push(format!("{prefix}.noise"), init::xavier(rng, d_in, experts));
        Ok(Self {
            gate,
            noise,
            temperature,
            experts,
            top_k,
            mode,
        })
    }

    /// Gate for `x[rows × d_in]`. Noise is sampled only when `noise` is
    /// given and the mode is [`GateNoise::NoisyTopK`].
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        noise: Option<&mut dyn RngCore>,
    ) -> Result<GateOutput, ModelError> {
        validate(self.experts, self.top_k, self.temperature)?;
        let clean = tape.matmul(x, bound[self.gate])?;
        let noise_logits = tape.matmul(x, bound[self.noise])?;
        let logits = match (self.mode, noise) {
            (GateNoise::Literal, _) => tape.add(clean, noise_logits)?,
            (GateNoise::NoisyTopK, Some(rng)) => {
                let shape = tape.shape(clean).to_vec();
                let eps = Tensor::from_fn(&shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)));
                let eps = tape.constant(eps);
                let spread = tape.softplus(noise_logits)?;
                let jitter = tape.mul(eps, spread)?;
                tape.add(clean, jitter)?
            }
            (GateNoise::NoisyTopK, None) => clean,
        };
        let scaled = tape.scale(logits, T::of(1.0 / self.temperature))?;
        let weights = tape.softmax_rows(scaled)?;
        let selected = tape
            .value(weights)
            .data()
            .chunks(self.experts)
            .map(|row| top_k_indices(row, self.top_k))
            .collect();
        Ok(GateOutput { weights, selected })
    }

    /// Single-vector form: returns the full weight vector and the selected
    /// expert indices.
    pub fn weights<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &[T],
        noise: Option<&mut dyn RngCore>,
    ) -> Result<(Vec<T>, Vec<usize>), ModelError> {
        let mut tape = Tape::new();
        let bound = tape.bind(store, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let out = self.forward(&mut tape, &bound, xv, noise)?;
        let weights = tape.value(out.weights).data().to_vec();
        Ok((weights, out.selected.into_iter().next().unwrap_or_default()))
    }
}

fn validate(experts: usize, top_k: usize, temperature: f64) -> Result<(), ModelError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(ModelError::Config(format!(
            "gate temperature must be positive, got {temperature}"
        )));
    }
    if top_k == 0 || top_k > experts {
        return Err(ModelError::Config(format!(
            "need 1 <= top_k <= experts, got top_k={top_k} with {experts} experts"
        )));
    }
    Ok(())
}

/// Indices of the `k` largest values; ties go to the lower index.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// One-row gate whose logits equal `x` (identity gate matrix, zero
    /// noise matrix).
    fn identity_gate(k: usize, top_k: usize, temperature: f64) -> (ParamStore<f64>, GatingNetwork) {
        let mut store = ParamStore::<f64>::new();
        let eye = Tensor::from_fn(&[k, k], |i| if i / k == i % k { 1.0 } else { 0.0 });
        let gate = store.push("g", eye);
        let noise = store.push("n", Tensor::zeros(&[k, k]));
        let net = GatingNetwork {
            gate,
            noise,
            temperature,
            experts: k,
            top_k,
            mode: GateNoise::NoisyTopK,
        };
        (store, net)
    }

    fn entropy(p: &[f64]) -> f64 {
        -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
    }

    #[test]
    fn two_experts_analytic_softmax() {
        let (store, net) = identity_gate(2, 1, 1.0);
        let (w, sel) = net.weights(&store, &[2f64.ln(), 0.0], None).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12 && (w[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn zero_logits_uniform_and_tie_break_low_index() {
        let (store, net) = identity_gate(4, 2, 1.0);
        let (w, sel) = net.weights(&store, &[0.0; 4], None).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-12));
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn lower_temperature_sharpens() {
        let x = [0.3, -0.1, 0.8, 0.05];
        let (s1, cold) = identity_gate(4, 2, 0.1);
        let (s2, hot) = identity_gate(4, 2, 10.0);
        let (wc, _) = cold.weights(&s1, &x, None).unwrap();
        let (wh, _) = hot.weights(&s2, &x, None).unwrap();
        assert!(entropy(&wc) < entropy(&wh));
    }

    #[test]
    fn non_positive_temperature_is_config_error() {
        let (store, mut net) = identity_gate(2, 1, 1.0);
        net.temperature = 0.0;
        assert!(matches!(net.weights(&store, &[0.0, 0.0], None), Err(ModelError::Config(_))));
        net.temperature = 1.0;
        net.top_k = 3;
        assert!(matches!(net.weights(&store, &[0.0, 0.0], None), Err(ModelError::Config(_))));
    }

    #[test]
    fn weights_sum_to_one_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f32>::new();
        let net = GatingNetwork::new(&mut store, "g", 6, 4, 2, 0.7, GateNoise::NoisyTopK, &mut rng).unwrap();
        let store = store.cast::<f64>();
        for _ in 0..50 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (w, sel) = net.weights(&store, &x, Some(&mut noise_rng)).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert_eq!(sel.len(), 2);
        }
    }

    #[test]
    fn noise_only_applies_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let net = GatingNetwork::new(&mut store, "g", 3, 4, 2, 1.0, GateNoise::NoisyTopK, &mut rng).unwrap();
        let x = [0.5f32, -1.0, 0.25];
        let a = net.weights(&store, &x, None).unwrap();
        let b = net.weights(&store, &x, None).unwrap();
        assert_eq!(a, b);
        let mut r1 = ChaCha8Rng::seed_from_u64(8);
        let mut r2 = ChaCha8Rng::seed_from_u64(8);
        let n1 = net.weights(&store, &x, Some(&mut r1)).unwrap();
        let n2 = net.weights(&store, &x, Some(&mut r2)).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(n1.0, a.0);
    }

    #[test]
    fn top_k_prefers_larger_then_lower_index() {
        assert_eq!(top_k_indices(&[0.1f32, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.3f32, 0.3, 0.3], 1), vec![0]);
    }
}
