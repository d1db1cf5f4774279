mod common;

use common::*;
use ndarray::Array2;
use plnpca::quadrature::gh_total_loglik;
use plnpca::vem::{elbo, elbo_gradient, init_heuristic, vem_fit, VariationalParams, VemConfig};
use plnpca::{Dataset, ModelParams, QuadratureRule};

fn random_vp(seed: u64, n: usize, q: usize) -> VariationalParams<f64> {
    let mut r = rng(seed);
    VariationalParams::new(normal_matrix(&mut r, n, q, 0.5), normal_matrix(&mut r, n, q, 0.3)).unwrap()
}

#[test]
fn gradient_matches_finite_differences() {
    let h = 1e-6;
    for seed in 0..10u64 {
        let (params, data) = instance(300 + seed, 6, 2, 4, 2);
        let vp = random_vp(400 + seed, 6, 2);
        let (_, g) = elbo_gradient(&params, &vp, &data).unwrap();
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            let tol = 1e-5 * analytic.abs().max(1.0);
            assert!((fd - analytic).abs() < tol, "{fd} vs {analytic}");
        };
        let with_b = |k: usize, j: usize, delta: f64| {
            let mut b = params.b().clone();
            b[(k, j)] += delta;
            elbo(&ModelParams::new(b, params.c().clone()).unwrap(), &vp, &data).unwrap()
        };
        for ((k, j), &a) in g.b.indexed_iter() {
            check(a, with_b(k, j, h), with_b(k, j, -h));
        }
        let with_c = |j: usize, k: usize, delta: f64| {
            let mut c = params.c().clone();
            c[(j, k)] += delta;
            elbo(&ModelParams::new(params.b().clone(), c).unwrap(), &vp, &data).unwrap()
        };
        for ((j, k), &a) in g.c.indexed_iter() {
            check(a, with_c(j, k, h), with_c(j, k, -h));
        }
        let with_m = |i: usize, k: usize, delta: f64| {
            let mut m = vp.means().clone();
            m[(i, k)] += delta;
            elbo(&params, &VariationalParams::new(m, vp.log_sds().clone()).unwrap(), &data).unwrap()
        };
        for ((i, k), &a) in g.means.indexed_iter() {
            check(a, with_m(i, k, h), with_m(i, k, -h));
        }
        let with_l = |i: usize, k: usize, delta: f64| {
            let mut l = vp.log_sds().clone();
            l[(i, k)] += delta;
            elbo(&params, &VariationalParams::new(vp.means().clone(), l).unwrap(), &data).unwrap()
        };
        for ((i, k), &a) in g.log_sds.indexed_iter() {
            check(a, with_l(i, k, h), with_l(i, k, -h));
        }
    }
}

#[test]
fn elbo_never_exceeds_quadrature_loglik() {
    let rule = QuadratureRule::default();
    for q in [1usize, 2] {
        for seed in 0..5u64 {
            let (params, data) = instance(500 + seed, 8, 1, 3, q);
            let exact = gh_total_loglik(&params, &data, &rule).unwrap();
            for k in 0..5u64 {
                let vp = random_vp(600 + 10 * seed + k, 8, q);
                let bound = elbo(&params, &vp, &data).unwrap();
                assert!(exact - bound >= -1e-8, "{bound} > {exact}");
            }
        }
    }
}

#[test]
fn fit_recovers_poisson_glm_intercepts() {
    let (_, data) = instance(700, 80, 1, 3, 1);
    let x = Array2::ones((80, 1));
    let data = Dataset::new(data.counts().clone(), x, Array2::zeros((80, 3))).unwrap();
    let init = ModelParams::<f64>::zeros(1, 3, 1).unwrap();
    let config = VemConfig {
        fix_loadings: true,
        ..VemConfig::default()
    };
    let fit = vem_fit(&data, &init, None, &config).unwrap();
    assert!(fit.converged);
    for j in 0..3 {
        let mean = data.counts().column(j).iter().sum::<u64>() as f64 / 80.0;
        assert!((fit.params.b()[(0, j)] - mean.ln()).abs() < 1e-4);
    }
}

#[test]
fn fit_is_monotone_stationary_deterministic_and_bounded() {
    let rule = QuadratureRule::default();
    for seed in 0..4u64 {
        let (_, data) = instance(800 + seed, 40, 1, 4, 1);
        let init = init_heuristic(&data, 1).unwrap();
        let config = VemConfig::default();
        let fit = vem_fit(&data, &init, None, &config).unwrap();
        assert!(fit.converged, "seed {seed} stopped after {} iterations", fit.iterations);
        assert!(fit.elbo_trace.windows(2).all(|w| w[1] >= w[0]));
        let (value, g) = elbo_gradient(&fit.params, &fit.variational, &data).unwrap();
        let norm = [&g.b, &g.c, &g.means, &g.log_sds]
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-4 * (1.0 + value.abs()));
        let exact = gh_total_loglik(&fit.params, &data, &rule).unwrap();
        assert!(exact - value >= -1e-8);
        let again = vem_fit(&data, &init, None, &config).unwrap();
        assert_eq!(again.params, fit.params);
        assert_eq!(again.elbo_trace, fit.elbo_trace);
    }
}

#[test]
fn heuristic_start_beats_zero_parameters() {
    let rule = QuadratureRule::default();
    let mut wins = 0;
    for seed in 0..10u64 {
        let (_, data) = instance(900 + seed, 60, 2, 5, 1);
        let init = init_heuristic(&data, 1).unwrap();
        assert_eq!(init.b().dim(), (2, 5));
        assert_eq!(init.c().dim(), (5, 1));
        let a = gh_total_loglik(&init, &data, &rule).unwrap();
        let b = gh_total_loglik(&ModelParams::zeros(2, 5, 1).unwrap(), &data, &rule).unwrap();
        assert!(a.is_finite());
        if a > b {
            wins += 1;
        }
    }
    assert!(wins >= 9, "{wins}/10");
}
