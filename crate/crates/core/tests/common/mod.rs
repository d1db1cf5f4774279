#![allow(dead_code)]

use ndarray::{Array1, Array2};
use plnpca::model::simulate;
use plnpca::{Dataset, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

pub fn normal_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(len, |_| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Random parameters of moderate size with an intercept row in `B`.
pub fn random_params(rng: &mut ChaCha8Rng, d: usize, p: usize, q: usize) -> ModelParams<f64> {
    let mut b = normal_matrix(rng, d, p, 0.3);
    for j in 0..p {
        b[(0, j)] += 0.5;
    }
    let c = normal_matrix(rng, p, q, 0.5);
    ModelParams::new(b, c).unwrap()
}

pub fn random_covariates(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut x = normal_matrix(rng, n, d, 0.5);
    x.column_mut(0).fill(1.0);
    x
}

/// Parameters plus a dataset simulated from them.
pub fn instance(seed: u64, n: usize, d: usize, p: usize, q: usize) -> (ModelParams<f64>, Dataset<f64>) {
    let mut r = rng(seed);
    let params = random_params(&mut r, d, p, q);
    let x = random_covariates(&mut r, n, d);
    let o = normal_matrix(&mut r, n, p, 0.1);
    let data = simulate(&params, x, o, &mut r).unwrap();
    (params, data)
}

/// One individual with arbitrary small counts.
pub fn single(rng: &mut ChaCha8Rng, d: usize, p: usize, q: usize) -> (ModelParams<f64>, Dataset<f64>) {
    let params = random_params(rng, d, p, q);
    let x = random_covariates(rng, 1, d);
    let o = normal_matrix(rng, 1, p, 0.2);
    let y = Array2::from_shape_fn((1, p), |_| rng.random_range(0..6u64));
    (params, Dataset::new(y, x, o).unwrap())
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}
