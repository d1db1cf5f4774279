mod common;

use common::*;
use ndarray::{array, Array1, Array2};
use plnpca::linalg;
use plnpca::model::{complete_log_density, complete_score, conditional_mode, hessian_covariance, linear_predictor, simulate};
use plnpca::{Dataset, Individual, LatentPoint, ModelParams};
use rand::Rng;

fn direct_log_density(params: &ModelParams<f64>, data: &Dataset<f64>, i: usize, w: &Array1<f64>) -> f64 {
    let (p, q) = (params.p(), params.q());
    let mut prob = 1.0f64;
    for j in 0..p {
        let mut z = data.offsets()[(i, j)];
        for k in 0..params.d() {
            z += params.b()[(k, j)] * data.covariates()[(i, k)];
        }
        for k in 0..q {
            z += params.c()[(j, k)] * w[k];
        }
        let lambda = z.exp();
        let y = data.counts()[(i, j)];
        let mut pmf = (-lambda).exp();
        for m in 1..=y {
            pmf *= lambda / m as f64;
        }
        prob *= pmf;
    }
    let sq: f64 = w.iter().map(|v| v * v).sum();
    let phi = (-0.5 * sq).exp() / (2.0 * std::f64::consts::PI).powf(q as f64 / 2.0);
    (prob * phi).ln()
}

#[test]
fn linear_predictor_matches_elementwise_recomputation() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (params, data) = single(&mut r, 1, 3, 2);
        let w = normal_vector(&mut r, 2, 1.0);
        let z = linear_predictor(&params, &data, 0, LatentPoint::new(w.clone()).unwrap().view()).unwrap();
        for j in 0..3 {
            let expect = params.c()[(j, 0)] * w[0]
                + params.c()[(j, 1)] * w[1]
                + params.b()[(0, j)] * data.covariates()[(0, 0)]
                + data.offsets()[(0, j)];
            assert!((z[j] - expect).abs() < 1e-14);
        }
    }
    let params = ModelParams::new(Array2::zeros((1, 2)), Array2::eye(2)).unwrap();
    let data = Dataset::new(array![[0u64, 0]], array![[1.0]], Array2::zeros((1, 2))).unwrap();
    let z = linear_predictor(&params, &data, 0, array![1.0, 2.0].view()).unwrap();
    assert_eq!(z, array![1.0, 2.0]);
}

#[test]
fn log_density_matches_direct_density() {
    let mut r = rng(12);
    for _ in 0..200 {
        let p = r.random_range(1..=4);
        let q = r.random_range(1..=p.min(3));
        let (params, data) = single(&mut r, 2, p, q);
        let w = normal_vector(&mut r, q, 1.0);
        let got = complete_log_density(&params, &data, 0, w.view()).unwrap();
        let expect = direct_log_density(&params, &data, 0, &w);
        assert!(rel_err(got, expect) < 1e-12, "{got} vs {expect}");
    }
}

#[test]
fn score_matches_finite_differences() {
    let mut r = rng(13);
    let h = 1e-5;
    for _ in 0..100 {
        let p = r.random_range(1..=5);
        let q = r.random_range(1..=p.min(3));
        let d = r.random_range(1..=3);
        let (params, data) = single(&mut r, d, p, q);
        let w = normal_vector(&mut r, q, 1.0);
        let analytic = complete_score(&params, &data, 0, w.view()).unwrap().to_flat();
        let flat = params.to_flat();
        for (k, &g) in analytic.iter().enumerate() {
            let eval = |delta: f64| {
                let mut f = flat.clone();
                f[k] += delta;
                let pp = ModelParams::from_flat(d, p, q, &f).unwrap();
                complete_log_density(&pp, &data, 0, w.view()).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if g.abs() > 1e-3 {
                assert!(rel_err(fd, g) < 1e-6, "coordinate {k}: {fd} vs {g}");
            } else {
                assert!((fd - g).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn mode_matches_grid_search() {
    let mut r = rng(14);
    for _ in 0..10 {
        let (params, data) = single(&mut r, 1, 3, 1);
        let mode = conditional_mode(&params, &data, 0).unwrap();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for k in 0..=200_000 {
            let w = -10.0 + 1e-4 * k as f64;
            let v = complete_log_density(&params, &data, 0, array![w].view()).unwrap();
            if v > best.0 {
                best = (v, w);
            }
        }
        assert!((mode.view()[0] - best.1).abs() < 1e-3);
    }
}

#[test]
fn mode_satisfies_optimality_conditions() {
    let mut r = rng(15);
    for _ in 0..50 {
        let p = r.random_range(1..=5);
        let q = r.random_range(1..=p.min(3));
        let (params, data) = single(&mut r, 2, p, q);
        let ind = Individual::new(&params, &data, 0).unwrap();
        let mode = ind.conditional_mode().unwrap();
        let g = ind.latent_gradient(mode.view());
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6);
        let top = ind.log_density(mode.view());
        for _ in 0..20 {
            let dir = normal_vector(&mut r, q, 1.0);
            let dir = &dir * (0.1 / dir.iter().map(|v| v * v).sum::<f64>().sqrt());
            let v = &mode.view() + &dir;
            assert!(ind.log_density(v.view()) <= top);
        }
    }
}

#[test]
fn hessian_covariance_closed_forms() {
    let mut r = rng(16);
    for _ in 0..1000 {
        let p = r.random_range(1..=5);
        let q = r.random_range(1..=p.min(3));
        let (params, data) = single(&mut r, 1, p, q);
        let mu = normal_vector(&mut r, q, 1.0);
        let s = hessian_covariance(&params, &data, 0, mu.view()).unwrap();
        assert!(linalg::cholesky(s.view()).is_some());
        for a in 0..q {
            for b in 0..q {
                assert!((s[(a, b)] - s[(b, a)]).abs() < 1e-12);
            }
        }
    }

    for _ in 0..100 {
        let (params, data) = single(&mut r, 1, 4, 2);
        let mu = normal_vector(&mut r, 2, 1.0);
        let s = hessian_covariance(&params, &data, 0, mu.view()).unwrap();
        let z = linear_predictor(&params, &data, 0, mu.view()).unwrap();
        let c = params.c();
        let mut h = Array2::<f64>::eye(2);
        for j in 0..4 {
            let e = z[j].exp();
            for a in 0..2 {
                for b in 0..2 {
                    h[(a, b)] += c[(j, a)] * e * c[(j, b)];
                }
            }
        }
        let det = h[(0, 0)] * h[(1, 1)] - h[(0, 1)] * h[(1, 0)];
        let inv = array![[h[(1, 1)] / det, -h[(0, 1)] / det], [-h[(1, 0)] / det, h[(0, 0)] / det]];
        for a in 0..2 {
            for b in 0..2 {
                assert!(rel_err(s[(a, b)], inv[(a, b)]) < 1e-10);
            }
        }
    }

    let (params, data) = single(&mut r, 1, 3, 2);
    let zero_c = ModelParams::new(params.b().clone(), Array2::zeros((3, 2))).unwrap();
    let s = hessian_covariance(&zero_c, &data, 0, array![0.3, -1.0].view()).unwrap();
    assert_eq!(s, Array2::<f64>::eye(2));

    for &(c, z) in &[(1.0f64, 0.0f64), (0.7, -1.3), (-2.0, 0.4)] {
        let params = ModelParams::new(array![[z]], array![[c]]).unwrap();
        let data = Dataset::new(array![[2u64]], array![[1.0]], array![[0.0]]).unwrap();
        let s = hessian_covariance(&params, &data, 0, array![0.0].view()).unwrap();
        assert!((s[(0, 0)] - 1.0 / (1.0 + c * c * z.exp())).abs() < 1e-12);
    }
}

#[test]
fn simulated_poisson_mean_concentrates() {
    let mut r = rng(17);
    let n = 10_000;
    let params = ModelParams::new(array![[4f64.ln()]], array![[0.0]]).unwrap();
    let data = simulate(&params, Array2::ones((n, 1)), Array2::zeros((n, 1)), &mut r).unwrap();
    let mean = data.counts().iter().sum::<u64>() as f64 / n as f64;
    assert!((3.8..=4.2).contains(&mean), "{mean}");
}
