mod common;

use common::*;
use ndarray::{array, Array1, Array2};
use plnpca::proposal::adapt_hessian;
use plnpca::quadrature::{gh_marginal_loglik, gh_posterior_moments, gh_score};
use plnpca::snis::{compute_weights, ess, marginal_loglik_estimate, snis_moments, snis_score};
use plnpca::{GaussianMixtureProposal, Individual, ModelParams, QuadratureRule};

fn gauss_pdf(v: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    v.iter()
        .zip(mu)
        .zip(var)
        .map(|((x, m), s)| (-(x - m).powi(2) / (2.0 * s)).exp() / (2.0 * std::f64::consts::PI * s).sqrt())
        .product()
}

#[test]
fn weights_match_direct_ratio() {
    let mut r = rng(200);
    for _ in 0..20 {
        let (params, data) = single(&mut r, 1, 3, 2);
        let mu = normal_vector(&mut r, 2, 0.5);
        let var = [0.4, 0.9];
        let chol = Array2::from_diag(&Array1::from(var.to_vec()).mapv(f64::sqrt));
        let prop = GaussianMixtureProposal::new(mu.clone(), chol, 0.2, 1.5).unwrap();
        let particles = normal_matrix(&mut r, 50, 2, 1.0);
        let wp = compute_weights(&params, &data, 0, &prop, particles.clone()).unwrap();
        for (k, row) in particles.outer_iter().enumerate() {
            let v = row.to_vec();
            let mut joint = gauss_pdf(&v, &[0.0, 0.0], &[1.0, 1.0]);
            let z = params.c().dot(&row) + params.b().t().dot(&data.covariates().row(0)) + data.offsets().row(0);
            for j in 0..3 {
                let y = data.counts()[(0, j)];
                let lambda = z[j].exp();
                let mut pmf = (-lambda).exp();
                for m in 1..=y {
                    pmf *= lambda / m as f64;
                }
                joint *= pmf;
            }
            let mu_v = mu.to_vec();
            let nu = 0.8 * gauss_pdf(&v, &mu_v, &var) + 0.2 * gauss_pdf(&v, &mu_v, &[1.5, 1.5]);
            assert!(rel_err(wp.log_weights()[k].exp(), joint / nu) < 1e-10);
        }
    }
}

fn hessian_proposal(params: &ModelParams<f64>, data: &plnpca::Dataset<f64>) -> GaussianMixtureProposal<f64> {
    let mode = Individual::new(params, data, 0).unwrap().conditional_mode().unwrap();
    adapt_hessian(params, data, 0, mode.into_inner(), 0.001, 1.1).unwrap()
}

#[test]
fn estimates_agree_with_quadrature_within_monte_carlo_error() {
    let rule = QuadratureRule::default();
    let mut r = rng(201);
    for _ in 0..3 {
        let (params, data) = single(&mut r, 1, 3, 1);
        let prop = hessian_proposal(&params, &data);
        let particles = prop.sample(1_000_000, &mut r).unwrap();
        let wp = compute_weights(&params, &data, 0, &prop, particles.clone()).unwrap();

        let exact = gh_marginal_loglik(&params, &data, 0, &rule).unwrap();
        let scale = wp.log_weights().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rho: Vec<f64> = wp.log_weights().iter().map(|l| (l - scale).exp()).collect();
        let (m, se) = mean_and_se(&rho);
        let est = marginal_loglik_estimate(&wp);
        assert!((est - exact).abs() < 3.0 * se / m, "{est} vs {exact}");

        let (gm, gs) = gh_posterior_moments(&params, &data, 0, &rule).unwrap();
        let (sm, ss) = snis_moments(&wp);
        let om = wp.norm_weights();
        let v = particles.column(0);
        let n_eff = ess(&wp);
        let se_mean = (ss[(0, 0)] / n_eff).sqrt();
        let fourth: f64 = om.iter().zip(v.iter()).map(|(w, x)| w * (x - sm[0]).powi(4)).sum();
        let se_var = ((fourth - ss[(0, 0)].powi(2)) / n_eff).sqrt();
        assert!((sm[0] - gm[0]).abs() < 3.0 * se_mean);
        assert!((ss[(0, 0)] - gs[(0, 0)]).abs() < 3.0 * se_var);
    }
}

#[test]
fn standard_normal_proposal_score_matches_quadrature() {
    let rule = QuadratureRule::default();
    let params = ModelParams::<f64>::new(array![[0.4, 1.1]], array![[0.5], [-0.3]]).unwrap();
    let data = plnpca::Dataset::new(array![[4u64, 1]], array![[1.0]], array![[0.0, 0.0]]).unwrap();
    let prop = GaussianMixtureProposal::relaxed(array![0.0], array![[1.0]], 1.0, 1.0).unwrap();
    let mut r = rng(202);
    let wp = compute_weights(&params, &data, 0, &prop, prop.sample(1 << 17, &mut r).unwrap()).unwrap();
    let est = snis_score(&params, &data, 0, &wp).unwrap().to_flat();
    let exact = gh_score(&params, &data, 0, &rule).unwrap().to_flat();
    for (a, b) in est.iter().zip(&exact) {
        if b.abs() > 1e-2 {
            assert!(rel_err(*a, *b) < 0.02, "{a} vs {b}");
        }
    }
}

#[test]
fn score_error_decays_at_the_monte_carlo_rate() {
    let rule = QuadratureRule::default();
    let (params, data) = single(&mut rng(203), 2, 5, 1);
    let prop = hessian_proposal(&params, &data);
    let exact = Array1::from(gh_score(&params, &data, 0, &rule).unwrap().to_flat());
    let grid = [1usize << 8, 1 << 10, 1 << 12, 1 << 14];
    let mut r = rng(204);
    let mut log_mse = Vec::new();
    let mut bias = Vec::new();
    for &n in &grid {
        let mut sum = Array1::<f64>::zeros(exact.len());
        let mut sq = 0.0;
        let reps = 200;
        for rep in 0..reps {
            let wp = compute_weights(&params, &data, 0, &prop, prop.sample(n, &mut r).unwrap()).unwrap();
            let g = Array1::from(snis_score(&params, &data, 0, &wp).unwrap().to_flat());
            if rep < 50 {
                sq += (&g - &exact).mapv(|v| v * v).sum();
            }
            sum += &g;
        }
        log_mse.push((sq / 50.0).ln());
        bias.push((&sum / reps as f64 - &exact).mapv(|v| v * v).sum().sqrt());
    }
    let xs: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, log_mse.iter().sum::<f64>() / 4.0);
    let slope = xs.iter().zip(&log_mse).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((-1.3..=-0.7).contains(&slope), "slope {slope}");
    // replicate noise dominates adjacent grid points, so only the ends are compared
    assert!(bias[3] < bias[0], "{bias:?}");
}

#[test]
fn mixture_importance_weights_have_unit_mean() {
    let mut r = rng(205);
    let prop = GaussianMixtureProposal::new(array![0.3, -0.2], array![[0.8, 0.0], [0.3, 0.6]], 0.1, 1.5).unwrap();
    let v = prop.sample(1_000_000, &mut r).unwrap();
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let w: Vec<f64> = v
        .outer_iter()
        .map(|x| {
            let log_phi = -0.5 * x.dot(&x) - 2.0 * half_log_2pi;
            (log_phi - prop.log_density(x)).exp()
        })
        .collect();
    let (m, se) = mean_and_se(&w);
    assert!((m - 1.0).abs() < 3.0 * se, "{m} ± {se}");
}

#[test]
fn sample_and_density_agree_on_entropy() {
    let prop = GaussianMixtureProposal::new(array![1.0], array![[0.5]], 0.3, 2.0).unwrap();
    let mut r = rng(206);
    let a: Vec<f64> = prop.sample(200_000, &mut r).unwrap().outer_iter().map(|x| -prop.log_density(x)).collect();
    let b: Vec<f64> = prop.sample(2_000_000, &mut r).unwrap().outer_iter().map(|x| -prop.log_density(x)).collect();
    let (ma, sa) = mean_and_se(&a);
    let (mb, sb) = mean_and_se(&b);
    assert!((ma - mb).abs() < 3.0 * (sa * sa + sb * sb).sqrt());
}
