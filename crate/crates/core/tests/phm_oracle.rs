//! The block expert against an explicitly assembled block-diagonal matrix.

use mmkgc::model::{Expert, PhmExpert};
use mmkgc::tensor::ParamStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense `d × d_in` matrix with `mixer_j · block` on the j-th diagonal block.
fn dense(params: &ParamStore<f64>, e: &PhmExpert) -> Vec<Vec<f64>> {
    let n = e.blocks();
    let (bo, bi) = (e.d / n, e.d_in / n);
    let block = params.get(e.block).data();
    let mut m = vec![vec![0.0; e.d_in]; e.d];
    for (j, &mix) in e.mixers.iter().enumerate() {
        let h = params.get(mix).data();
        for r in 0..bo {
            for c in 0..bi {
                let v: f64 = (0..bo).map(|t| h[r * bo + t] * block[t * bi + c]).sum();
                m[j * bo + r][j * bi + c] = v;
            }
        }
    }
    m
}

fn check(rng: &mut ChaCha8Rng, d_in: usize, d: usize, n: usize) -> f64 {
    let mut store = ParamStore::new();
    let e = PhmExpert::new(&mut store, "phm", d_in, d, n, rng).unwrap();
    let mut params: ParamStore<f64> = store.cast();
    // move away from the initializer's distribution
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.get_mut(id).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    let x: Vec<f64> = (0..d_in).map(|_| rng.random_range(-3.0..3.0)).collect();
    let got = Expert::Phm(e.clone()).apply(&params, &x).unwrap();
    let want: Vec<f64> = dense(&params, &e)
        .iter()
        .map(|row| row.iter().zip(&x).map(|(a, b)| a * b).sum())
        .collect();
    assert_eq!(got.len(), d);
    got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_dense_block_diagonal_over_100_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shapes = [(1, 4), (2, 4), (4, 4), (1, 8), (2, 8), (4, 8)];
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let (n, d) = shapes[case % shapes.len()];
        worst = worst.max(check(&mut rng, d, d, n));
    }
    assert!(worst < 1e-6, "max deviation {worst}");
}

#[test]
fn rectangular_blocks_match_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (d_in, d, n) in [(8, 4, 2), (12, 8, 4), (6, 9, 3)] {
        assert!(check(&mut rng, d_in, d, n) < 1e-6);
    }
}

#[test]
fn blocks_do_not_leak() {
    // a unit vector in block j only reaches outputs of block j
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let e = PhmExpert::new(&mut store, "phm", 8, 8, 4, &mut rng).unwrap();
    let params: ParamStore<f64> = store.cast();
    for k in 0..8 {
        let mut x = vec![0.0; 8];
        x[k] = 1.0;
        let y = Expert::Phm(e.clone()).apply(&params, &x).unwrap();
        for (i, v) in y.iter().enumerate() {
            if i / 2 != k / 2 {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
