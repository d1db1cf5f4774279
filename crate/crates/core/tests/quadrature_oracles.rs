mod common;

use common::*;
use ndarray::{array, Array2};
use plnpca::linalg;
use plnpca::model::complete_log_density;
use plnpca::quadrature::{gh_marginal_loglik, gh_posterior_moments, gh_score};
use plnpca::{Dataset, Individual, ModelParams, QuadratureRule};
use rand_distr::{Distribution, StandardNormal};

#[test]
fn marginal_loglik_agrees_with_prior_monte_carlo() {
    let rule = QuadratureRule::default();
    for seed in 0..3u64 {
        let mut r = rng(100 + seed);
        let (params, data) = single(&mut r, 1, 3, 1);
        let ind = Individual::new(&params, &data, 0).unwrap();
        // log p(Y | w) = log p(Y, w) − log φ(w)
        let draws = 10_000_000;
        let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut logs = Vec::with_capacity(draws);
        for _ in 0..draws {
            let w: f64 = StandardNormal.sample(&mut r);
            logs.push(ind.log_density(array![w].view()) + 0.5 * w * w + half_log_2pi);
        }
        let lse = linalg::log_sum_exp(&logs);
        let scale = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ratios: Vec<f64> = logs.iter().map(|l| (l - scale).exp()).collect();
        let (m, se) = mean_and_se(&ratios);
        let estimate = lse - (draws as f64).ln();
        let se_log = se / m;
        let exact = gh_marginal_loglik(&params, &data, 0, &rule).unwrap();
        assert!((estimate - exact).abs() < 3.0 * se_log, "{estimate} vs {exact} (se {se_log})");
    }
}

#[test]
fn raising_order_does_not_change_the_value() {
    let low = QuadratureRule::gauss_hermite(60).unwrap();
    let high = QuadratureRule::gauss_hermite(120).unwrap();
    let mut r = rng(101);
    for q in [1usize, 2] {
        for _ in 0..10 {
            let (params, data) = single(&mut r, 2, 4, q);
            let a = gh_marginal_loglik(&params, &data, 0, &low).unwrap();
            let b = gh_marginal_loglik(&params, &data, 0, &high).unwrap();
            assert!((a - b).abs() < 1e-9, "q={q}: {a} vs {b}");
        }
    }
}

#[test]
fn score_matches_finite_differences_of_marginal() {
    let rule = QuadratureRule::default();
    let mut r = rng(102);
    let h = 1e-5;
    for _ in 0..20 {
        let (params, data) = single(&mut r, 2, 3, 1);
        let g = gh_score(&params, &data, 0, &rule).unwrap().to_flat();
        let flat = params.to_flat();
        for (k, &gk) in g.iter().enumerate() {
            let eval = |delta: f64| {
                let mut f = flat.clone();
                f[k] += delta;
                let pp = ModelParams::from_flat(2, 3, 1, &f).unwrap();
                gh_marginal_loglik(&pp, &data, 0, &rule).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if gk.abs() > 1e-3 {
                assert!(rel_err(fd, gk) < 1e-6, "coordinate {k}: {fd} vs {gk}");
            } else {
                assert!((fd - gk).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn exchangeable_coordinates_share_score() {
    let rule = QuadratureRule::default();
    let params = ModelParams::<f64>::new(array![[0.3, 0.3, -0.1]], array![[0.8], [0.8], [0.2]]).unwrap();
    let data = Dataset::new(array![[2u64, 2, 0]], array![[1.0]], array![[0.1, 0.1, 0.0]]).unwrap();
    let g = gh_score(&params, &data, 0, &rule).unwrap();
    assert!((g.b[(0, 0)] - g.b[(0, 1)]).abs() < 1e-12);
    assert!((g.c[(0, 0)] - g.c[(1, 0)]).abs() < 1e-12);
}

#[test]
fn zero_loadings_obey_closed_forms() {
    let rule = QuadratureRule::default();
    let mut r = rng(103);
    for _ in 0..20 {
        let (params, data) = single(&mut r, 2, 3, 2);
        let params = ModelParams::new(params.b().clone(), Array2::zeros((3, 2))).unwrap();
        let g = gh_score(&params, &data, 0, &rule).unwrap();
        let x = data.covariates().row(0);
        let eta = params.b().t().dot(&x) + data.offsets().row(0);
        let y = data.counts().row(0).mapv(|v| v as f64);
        let resid = &y - &eta.mapv(f64::exp);
        for k in 0..2 {
            for j in 0..3 {
                assert!((g.b[(k, j)] - x[k] * resid[j]).abs() < 1e-10);
            }
        }
        assert!(g.c.iter().all(|v| v.abs() < 1e-10));
        let (m, s) = gh_posterior_moments(&params, &data, 0, &rule).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-10));
        assert!((&s - &Array2::<f64>::eye(2)).iter().all(|v| v.abs() < 1e-10));
    }
}

#[test]
fn posterior_moments_match_prior_snis() {
    let rule = QuadratureRule::default();
    let mut r = rng(104);
    let (params, data) = single(&mut r, 1, 3, 1);
    let (gm, gs) = gh_posterior_moments(&params, &data, 0, &rule).unwrap();
    let draws = 1_000_000;
    let w: Vec<f64> = (0..draws).map(|_| StandardNormal.sample(&mut r)).collect();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let logs: Vec<f64> = w
        .iter()
        .map(|&v| complete_log_density(&params, &data, 0, array![v].view()).unwrap() + 0.5 * v * v + half_log_2pi)
        .collect();
    let (_, om) = linalg::softmax(&logs);
    let mean: f64 = om.iter().zip(&w).map(|(a, b)| a * b).sum();
    let var: f64 = om.iter().zip(&w).map(|(a, b)| a * (b - mean).powi(2)).sum();
    // delta-method standard errors of the self-normalized ratios
    let ess = 1.0 / om.iter().map(|a| a * a).sum::<f64>();
    let se_mean = (var / ess).sqrt();
    let fourth: f64 = om.iter().zip(&w).map(|(a, b)| a * (b - mean).powi(4)).sum();
    let se_var = ((fourth - var * var) / ess).sqrt();
    assert!((mean - gm[0]).abs() < 3.0 * se_mean, "{mean} vs {}", gm[0]);
    assert!((var - gs[(0, 0)]).abs() < 3.0 * se_var, "{var} vs {}", gs[(0, 0)]);

    for q in [1usize, 2] {
        let (params, data) = single(&mut r, 1, 4, q);
        let (_, s) = gh_posterior_moments(&params, &data, 0, &rule).unwrap();
        for a in 0..q {
            for b in 0..q {
                assert!((s[(a, b)] - s[(b, a)]).abs() < 1e-12);
            }
        }
    }
}
