//! Gauss–Hermite integration over the latent space for `q ∈ {1, 2}`.
//!
//! Used as a deterministic reference for the marginal log-likelihood, its
//! score and the conditional moments of `W | Y`. The grid is centered at the
//! conditional mode and scaled by the curvature covariance, which keeps the
//! rule accurate when the conditional is much narrower than the prior.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{Dataset, Individual, ModelParams, ParamGradient};
use crate::scalar::Real;

/// Default number of nodes per latent axis.
pub const DEFAULT_ORDER: usize = 60;
/// Smallest order accepted by the integration routines.
pub const MIN_ORDER: usize = 30;

/// Nodes and weights integrating against the standard normal density.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    /// Gauss–Hermite rule of order `m` for `E[f(X)]`, `X ~ N(0, 1)`.
    pub fn gauss_hermite(m: usize) -> Result<Self> {
        if m == 0 {
            return contract("quadrature order must be positive");
        }
        let (nodes, weights) = gauss_hermite_f64(m);
        Ok(Self {
            nodes: nodes.into_iter().map(T::lit).collect(),
            weights: weights.into_iter().map(T::lit).collect(),
        })
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }
}

impl<T: Real> Default for QuadratureRule<T> {
    fn default() -> Self {
        Self::gauss_hermite(DEFAULT_ORDER).expect("default order is valid")
    }
}

/// Orthonormal probabilists' Hermite polynomials `p_0..p_{m}` at `x`.
fn hermite_orthonormal(m: usize, x: f64) -> Vec<f64> {
    let mut p = Vec::with_capacity(m + 1);
    p.push(1.0);
    if m >= 1 {
        p.push(x);
    }
    for k in 1..m {
        let next = (x * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt();
        p.push(next);
    }
    p
}

fn gauss_hermite_f64(m: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub–Welsch for the initial nodes, then Newton polishing on p_m.
    let jacobi = DMatrix::from_fn(m, m, |i, j| {
        if i + 1 == j {
            (j as f64).sqrt()
        } else if j + 1 == i {
            (i as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    for x in nodes.iter_mut() {
        for _ in 0..8 {
            let p = hermite_orthonormal(m, *x);
            let deriv = (m as f64).sqrt() * p[m - 1];
            let dx = p[m] / deriv;
            *x -= dx;
            if dx.abs() < 1e-16 * (1.0 + x.abs()) {
                break;
            }
        }
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let p = hermite_orthonormal(m - 1, x);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..m / 2 {
        let j = m - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if m % 2 == 1 {
        nodes[m / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    (nodes, weights)
}

/// Grid points in latent space with their log integrand contributions,
/// `log weight + log p(Y_i, w) − log φ(x) + log |L|`.
struct Grid<T> {
    points: Array2<T>,
    log_terms: Vec<T>,
}

fn build_grid<T: Real>(ind: &Individual<'_, T>, rule: &QuadratureRule<T>) -> Result<Grid<T>> {
    let q = ind.q();
    if q == 0 || q > 2 {
        return Err(Error::UnsupportedDimension(q));
    }
    if rule.order() < MIN_ORDER {
        return contract(format!(
            "quadrature order {} below the minimum {MIN_ORDER}",
            rule.order()
        ));
    }
    let (center, scale) = match ind.conditional_mode() {
        Ok(mode) => {
            let cov = ind.hessian_covariance(mode.view())?;
            match linalg::cholesky(cov.view()) {
                Some(l) => (mode.into_inner(), l),
                None => (Array1::zeros(q), Array2::eye(q)),
            }
        }
        Err(_) => (Array1::zeros(q), Array2::eye(q)),
    };
    let log_det: T = (0..q).map(|k| scale[(k, k)].ln()).sum();
    let half = T::lit(0.5);
    let gauss_const = T::lit(0.5 * q as f64) * T::ln_2pi();

    let m = rule.order();
    let total = m.pow(q as u32);
    let mut points = Array2::<T>::zeros((total, q));
    let mut log_terms = Vec::with_capacity(total);
    let mut x = Array1::<T>::zeros(q);
    for idx in 0..total {
        let mut rem = idx;
        let mut log_w = T::zero();
        for k in 0..q {
            let a = rem % m;
            rem /= m;
            x[k] = rule.nodes[a];
            log_w = log_w + rule.weights[a].ln();
        }
        let w = &center + &scale.dot(&x);
        let sq: T = x.iter().map(|&v| v * v).sum();
        let log_phi = -half * sq - gauss_const;
        log_terms.push(log_w + ind.log_density(w.view()) - log_phi + log_det);
        points.row_mut(idx).assign(&w);
    }
    Ok(Grid { points, log_terms })
}

/// `log p_θ(Y_i)` by Gauss–Hermite integration.
pub fn gh_marginal_loglik<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    let ind = Individual::new(params, data, i)?;
    let grid = build_grid(&ind, rule)?;
    Ok(linalg::log_sum_exp(&grid.log_terms))
}

/// Sum of [`gh_marginal_loglik`] over all individuals.
pub fn gh_total_loglik<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    rule: &QuadratureRule<T>,
) -> Result<T> {
    let mut total = T::zero();
    for i in 0..data.n() {
        total = total + gh_marginal_loglik(params, data, i, rule)?;
    }
    Ok(total)
}

/// Exact score `∇_θ log p_θ(Y_i)` as the conditional expectation of the
/// complete score under the discretized conditional.
pub fn gh_score<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    rule: &QuadratureRule<T>,
) -> Result<ParamGradient<T>> {
    let ind = Individual::new(params, data, i)?;
    let grid = build_grid(&ind, rule)?;
    let (_, w) = linalg::softmax(&grid.log_terms);
    let mut g = ParamGradient::zeros_like(params);
    for (k, &wk) in w.iter().enumerate() {
        if wk > T::zero() {
            ind.accumulate_score(&mut g, wk, grid.points.row(k));
        }
    }
    Ok(g)
}

/// `(E[W | Y_i], V[W | Y_i])` by quadrature.
pub fn gh_posterior_moments<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    rule: &QuadratureRule<T>,
) -> Result<(Array1<T>, Array2<T>)> {
    let ind = Individual::new(params, data, i)?;
    let grid = build_grid(&ind, rule)?;
    let (_, w) = linalg::softmax(&grid.log_terms);
    Ok(linalg::weighted_moments(grid.points.view(), &w))
}
