use rand::Rng;

use super::{init, ModelError};
use crate::tensor::{Bound, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Linear map followed by per-row standardization.
#[derive(Clone, Debug)]
pub struct SimpleExpert {
    /// `d_in × d`
    pub weight: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

/// Hypercomplex-style expert: the input is cut into `n` contiguous blocks,
/// every block goes through the shared `block` matrix and then its own
/// mixing matrix, and the results are concatenated.
///
/// `block` is `(d/n) × (d_in/n)` so the expert can also change width; with
/// `d_in == d` it is the usual square block.
#[derive(Clone, Debug)]
pub struct PhmExpert {
    pub block: ParamId,
    /// `n` matrices of `(d/n) × (d/n)`
    pub mixers: Vec<ParamId>,
    pub d_in: usize,
    pub d: usize,
}

#[derive(Clone, Debug)]
pub enum Expert {
    Simple(SimpleExpert),
    Phm(PhmExpert),
}

impl SimpleExpert {
    pub fn new(store: &mut ParamStore<f32>, prefix: &str, d_in: usize, d: usize, eps: f64, rng: &mut impl Rng) -> Self {
        let weight = store.push(format!("{prefix}.weight"), init::xavier(rng, d_in, d));
        let bias = store.push(format!("{prefix}.bias"), Tensor::zeros(&[d]));
        Self { weight, bias, eps }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        let y = tape.matmul(x, bound[self.weight])?;
        let y = tape.add_bias(y, bound[self.bias])?;
        Ok(tape.standardize(y, T::of(self.eps))?)
    }
}

impl PhmExpert {
    pub fn new(
        store: &mut ParamStore<f32>,
        prefix: &str,
        d_in: usize,
        d: usize,
        blocks: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, ModelError> {
        check_blocks(d_in, d, blocks)?;
        let (bi, bo) = (d_in / blocks, d / blocks);
        let block = store.push(format!("{prefix}.block"), init::xavier(rng, bi, bo).reshape(vec![bo, bi])?);
        let mixers = (0..blocks)
            .map(|j| store.push(format!("{prefix}.mix{j}"), init::xavier(rng, bo, bo)))
            .collect();
        Ok(Self { block, mixers, d_in, d })
    }

    pub fn blocks(&self) -> usize {
        self.mixers.len()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        let bi = self.d_in / self.blocks();
        let parts = self
            .mixers
            .iter()
            .enumerate()
            .map(|(j, &mix)| {
                let xj = tape.slice_cols(x, j * bi, (j + 1) * bi)?;
                let shared = tape.matmul_bt(xj, bound[self.block])?;
                Ok(tape.matmul_bt(shared, bound[mix])?)
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        Ok(tape.concat_cols(&parts)?)
    }
}

pub(crate) fn check_blocks(d_in: usize, d: usize, blocks: usize) -> Result<(), ModelError> {
    if blocks == 0 || d % blocks != 0 || d_in % blocks != 0 {
        return Err(ModelError::Config(format!(
            "PHM block count {blocks} must divide both the input width {d_in} and the output width {d}"
        )));
    }
    Ok(())
}

impl Expert {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var, ModelError> {
        match self {
            Expert::Simple(e) => e.forward(tape, bound, x),
            Expert::Phm(e) => e.forward(tape, bound, x),
        }
    }

    /// Applies the expert to a single vector.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: &[T]) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = tape.bind(store, false);
        let xv = tape.constant(Tensor::matrix(1, x.len(), x.to_vec())?);
        let y = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn identity(n: usize) -> Tensor<f64> {
        Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    fn simple_identity(d: usize) -> (ParamStore<f64>, Expert) {
        let mut store = ParamStore::new();
        let weight = store.push("w", identity(d));
        let bias = store.push("b", Tensor::zeros(&[d]));
        (store, Expert::Simple(SimpleExpert { weight, bias, eps: 1e-5 }))
    }

    #[test]
    fn standardized_input_passes_through() {
        let (store, e) = simple_identity(4);
        let y = [1.0, -1.0, 1.0, -1.0];
        let out = e.apply(&store, &y).unwrap();
        for (a, b) in out.iter().zip(y) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_input_whitens_to_zero() {
        let (store, e) = simple_identity(5);
        let out = e.apply(&store, &[3.0; 5]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn whitened_output_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in [8, 16] {
            let mut store = ParamStore::<f32>::new();
            let e = Expert::Simple(SimpleExpert::new(&mut store, "s", 6, d, 1e-5, &mut rng));
            let store = store.cast::<f64>();
            for _ in 0..20 {
                let out = e.apply(&store, &randn(&mut rng, 6)).unwrap();
                let mean = out.iter().sum::<f64>() / d as f64;
                let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
                assert!(mean.abs() < 1e-6, "{mean}");
                assert!((std - 1.0).abs() < 1e-3, "{std}");
            }
        }
    }

    fn phm_from(w: Tensor<f64>, hs: Vec<Tensor<f64>>, d: usize) -> (ParamStore<f64>, Expert) {
        let mut store = ParamStore::new();
        let block = store.push("w", w);
        let mixers = hs.into_iter().enumerate().map(|(j, h)| store.push(format!("h{j}"), h)).collect();
        (store, Expert::Phm(PhmExpert { block, mixers, d_in: d, d }))
    }

    fn small(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(&[n, m], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_block_identity_mixer_is_plain_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = small(4, 4, &mut rng);
        let (store, e) = phm_from(w.clone(), vec![identity(4)], 4);
        let x = randn(&mut rng, 4);
        let out = e.apply(&store, &x).unwrap();
        for i in 0..4 {
            let want: f64 = (0..4).map(|k| w.data()[i * 4 + k] * x[k]).sum();
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_blocks_are_scalar_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let w = small(1, 1, &mut rng);
        let hs: Vec<_> = (0..d).map(|_| small(1, 1, &mut rng)).collect();
        let (store, e) = phm_from(w.clone(), hs.clone(), d);
        let x = randn(&mut rng, d);
        let out = e.apply(&store, &x).unwrap();
        for j in 0..d {
            assert!((out[j] - hs[j].item() * w.item() * x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn block_count_must_divide_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        assert!(matches!(
            PhmExpert::new(&mut store, "p", 6, 8, 4, &mut rng),
            Err(ModelError::Config(_))
        ));
        assert!(PhmExpert::new(&mut store, "p", 12, 8, 4, &mut rng).is_ok());
    }

    #[test]
    fn rectangular_block_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let e = Expert::Phm(PhmExpert::new(&mut store, "p", 12, 8, 4, &mut rng).unwrap());
        let out = e.apply(&store, &[0.5f32; 12]).unwrap();
        assert_eq!(out.len(), 8);
    }
}
