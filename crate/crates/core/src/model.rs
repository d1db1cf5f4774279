//! The rank-constrained Poisson log-normal model.
//!
//! Each individual `i` carries a standard Gaussian latent vector `w ∈ ℝ^q`
//! that is mapped to log-intensities through
//! `z = C w + Bᵀ x_i + o_i`, and counts are conditionally independent
//! Poisson draws with means `exp(z_j)`.

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// Model parameters `θ = (B, C)`.
///
/// `B` is `d×p` (regression coefficients), `C` is `p×q` (loadings).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    b: Array2<T>,
    c: Array2<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn new(b: Array2<T>, c: Array2<T>) -> Result<Self> {
        let (d, p) = b.dim();
        let (pc, q) = c.dim();
        if d == 0 {
            return contract("B must have at least one row (d >= 1)");
        }
        if pc != p {
            return contract(format!("B is {d}x{p} but C has {pc} rows"));
        }
        if q == 0 || q > p {
            return contract(format!("latent dimension q = {q} must satisfy 1 <= q <= p = {p}"));
        }
        if b.iter().chain(c.iter()).any(|v| !v.is_finite()) {
            return contract("parameters must be finite");
        }
        Ok(Self { b, c })
    }

    pub fn zeros(d: usize, p: usize, q: usize) -> Result<Self> {
        Self::new(Array2::zeros((d, p)), Array2::zeros((p, q)))
    }

    pub fn b(&self) -> &Array2<T> {
        &self.b
    }

    pub fn c(&self) -> &Array2<T> {
        &self.c
    }

    pub fn d(&self) -> usize {
        self.b.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.c.ncols()
    }

    /// Length of the flattened parameter vector, `p·(q+d)`.
    pub fn dim(&self) -> usize {
        self.p() * (self.q() + self.d())
    }

    /// Column-major `B` followed by column-major `C`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.dim());
        out.extend(self.b.t().iter().copied());
        out.extend(self.c.t().iter().copied());
        out
    }

    /// Inverse of [`to_flat`](Self::to_flat).
    pub fn from_flat(d: usize, p: usize, q: usize, flat: &[T]) -> Result<Self> {
        let (b, c) = unflatten(d, p, q, flat)?;
        Self::new(b, c)
    }

    /// Latent covariance `Σ = C Cᵀ`.
    pub fn sigma(&self) -> Array2<T> {
        self.c.dot(&self.c.t())
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> ModelParams<U> {
        ModelParams {
            b: self.b.mapv(&f),
            c: self.c.mapv(&f),
        }
    }
}

fn unflatten<T: Real>(d: usize, p: usize, q: usize, flat: &[T]) -> Result<(Array2<T>, Array2<T>)> {
    if flat.len() != p * (d + q) {
        return contract(format!(
            "flat parameter length {} does not match p(q+d) = {}",
            flat.len(),
            p * (d + q)
        ));
    }
    let (fb, fc) = flat.split_at(d * p);
    let b = Array2::from_shape_vec((p, d), fb.to_vec())
        .expect("shape checked")
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    let c = Array2::from_shape_vec((q, p), fc.to_vec())
        .expect("shape checked")
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    Ok((b, c))
}

/// Gradient with respect to `(B, C)`, laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient<T> {
    pub b: Array2<T>,
    pub c: Array2<T>,
}

impl<T: Real> ParamGradient<T> {
    pub fn zeros(d: usize, p: usize, q: usize) -> Self {
        Self {
            b: Array2::zeros((d, p)),
            c: Array2::zeros((p, q)),
        }
    }

    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self::zeros(params.d(), params.p(), params.q())
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.b.len() + self.c.len());
        out.extend(self.b.t().iter().copied());
        out.extend(self.c.t().iter().copied());
        out
    }

    pub fn from_flat(d: usize, p: usize, q: usize, flat: &[T]) -> Result<Self> {
        let (b, c) = unflatten(d, p, q, flat)?;
        Ok(Self { b, c })
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, scale: T, other: &Self) {
        self.b.scaled_add(scale, &other.b);
        self.c.scaled_add(scale, &other.c);
    }

    pub fn scale(&mut self, s: T) {
        self.b.mapv_inplace(|v| v * s);
        self.c.mapv_inplace(|v| v * s);
    }

    pub fn norm(&self) -> T {
        self.b
            .iter()
            .chain(self.c.iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.b.iter().chain(self.c.iter()).all(|v| v.is_finite())
    }
}

/// Counts, covariates and offsets for `n` individuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    counts: Array2<u64>,
    covariates: Array2<T>,
    offsets: Array2<T>,
    counts_real: Array2<T>,
    log_factorials: Array1<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(counts: Array2<u64>, covariates: Array2<T>, offsets: Array2<T>) -> Result<Self> {
        let (n, p) = counts.dim();
        if covariates.nrows() != n || offsets.nrows() != n {
            return contract(format!(
                "row counts differ: Y has {n}, X has {}, O has {}",
                covariates.nrows(),
                offsets.nrows()
            ));
        }
        if offsets.ncols() != p {
            return contract(format!("O has {} columns, Y has {p}", offsets.ncols()));
        }
        if covariates.ncols() == 0 {
            return contract("X must have at least one column");
        }
        if covariates.iter().chain(offsets.iter()).any(|v| !v.is_finite()) {
            return contract("covariates and offsets must be finite");
        }
        let counts_real = counts.mapv(|y| T::lit(y as f64));
        let log_factorials = counts
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&y| T::ln_factorial(y)).sum())
            .collect();
        Ok(Self {
            counts,
            covariates,
            offsets,
            counts_real,
            log_factorials,
        })
    }

    /// Dataset with all offsets set to zero.
    pub fn without_offsets(counts: Array2<u64>, covariates: Array2<T>) -> Result<Self> {
        let offsets = Array2::zeros(counts.dim());
        Self::new(counts, covariates, offsets)
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn p(&self) -> usize {
        self.counts.ncols()
    }

    pub fn d(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn covariates(&self) -> &Array2<T> {
        &self.covariates
    }

    pub fn offsets(&self) -> &Array2<T> {
        &self.offsets
    }

    /// Sub-dataset restricted to the given rows, in order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        if rows.iter().any(|&i| i >= self.n()) {
            return contract("row index out of range");
        }
        Self::new(
            self.counts.select(Axis(0), rows),
            self.covariates.select(Axis(0), rows),
            self.offsets.select(Axis(0), rows),
        )
    }
}

/// A point in the latent space `ℝ^q`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoint<T>(Array1<T>);

impl<T: Real> LatentPoint<T> {
    pub fn new(w: Array1<T>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return contract("latent point must be finite");
        }
        Ok(Self(w))
    }

    pub fn zeros(q: usize) -> Self {
        Self(Array1::zeros(q))
    }

    pub fn view(&self) -> ArrayView1<'_, T> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<T> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<T> AsRef<Array1<T>> for LatentPoint<T> {
    fn as_ref(&self) -> &Array1<T> {
        &self.0
    }
}

fn check_compatible<T: Real>(params: &ModelParams<T>, data: &Dataset<T>) -> Result<()> {
    if params.d() != data.d() || params.p() != data.p() {
        return contract(format!(
            "parameters are (d={}, p={}) but data is (d={}, p={})",
            params.d(),
            params.p(),
            data.d(),
            data.p()
        ));
    }
    Ok(())
}

/// Everything needed to evaluate individual `i`'s complete density, with the
/// fixed effect `Bᵀ x_i + o_i` precomputed.
#[derive(Debug, Clone)]
pub struct Individual<'a, T> {
    index: usize,
    loadings: ArrayView2<'a, T>,
    counts: ArrayView1<'a, T>,
    covariates: ArrayView1<'a, T>,
    base: Array1<T>,
    log_factorial: T,
}

impl<'a, T: Real> Individual<'a, T> {
    pub fn new(params: &'a ModelParams<T>, data: &'a Dataset<T>, i: usize) -> Result<Self> {
        check_compatible(params, data)?;
        if i >= data.n() {
            return contract(format!("individual {i} out of range (n = {})", data.n()));
        }
        let covariates = data.covariates.row(i);
        let base = params.b.t().dot(&covariates) + data.offsets.row(i);
        Ok(Self {
            index: i,
            loadings: params.c.view(),
            counts: data.counts_real.row(i),
            covariates,
            base,
            log_factorial: data.log_factorials[i],
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn q(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    fn check_latent(&self, w: ArrayView1<'_, T>) -> Result<()> {
        if w.len() != self.q() {
            return contract(format!("latent point has length {}, expected q = {}", w.len(), self.q()));
        }
        Ok(())
    }

    /// `z = C w + Bᵀ x_i + o_i`
    pub fn predictor(&self, w: ArrayView1<'_, T>) -> Array1<T> {
        self.loadings.dot(&w) + &self.base
    }

    /// Full joint log-density `log p_θ(Y_i, w)` including every normalizing
    /// constant; −∞ when some `z_j` exceeds the overflow cutoff.
    pub fn log_density(&self, w: ArrayView1<'_, T>) -> T {
        let z = self.predictor(w);
        let cutoff = T::lit(T::EXP_CUTOFF);
        let mut acc = T::zero();
        for (&y, &zj) in self.counts.iter().zip(z.iter()) {
            if zj > cutoff || zj.is_nan() {
                return T::neg_infinity();
            }
            acc = acc + y * zj - zj.exp();
        }
        let sq: T = w.iter().map(|&v| v * v).sum();
        acc - self.log_factorial
            - T::lit(0.5) * sq
            - T::lit(0.5 * self.q() as f64) * T::ln_2pi()
    }

    /// `exp(z)` saturated at the largest finite value.
    fn intensities(&self, w: ArrayView1<'_, T>) -> Array1<T> {
        let z = self.predictor(w);
        let mut clamped = false;
        let out = z.mapv(|zj| {
            let e = zj.exp();
            if e.is_finite() {
                e
            } else {
                clamped = true;
                T::max_value()
            }
        });
        if clamped {
            warn!("exp(z) saturated for individual {}", self.index);
        }
        out
    }

    /// Residual `Y_i − exp(z)`.
    pub fn residual(&self, w: ArrayView1<'_, T>) -> Array1<T> {
        &self.counts - &self.intensities(w)
    }

    /// Score of the complete log-density with respect to `(B, C)`.
    pub fn score(&self, w: ArrayView1<'_, T>) -> ParamGradient<T> {
        let mut g = ParamGradient::zeros(self.d(), self.p(), self.q());
        self.accumulate_score(&mut g, T::one(), w);
        g
    }

    /// `acc += weight · score(w)` without materializing the score.
    pub fn accumulate_score(&self, acc: &mut ParamGradient<T>, weight: T, w: ArrayView1<'_, T>) {
        let r = self.residual(w);
        for (k, &xk) in self.covariates.iter().enumerate() {
            let s = weight * xk;
            for (j, &rj) in r.iter().enumerate() {
                acc.b[(k, j)] = acc.b[(k, j)] + s * rj;
            }
        }
        for (j, &rj) in r.iter().enumerate() {
            let s = weight * rj;
            for (k, &wk) in w.iter().enumerate() {
                acc.c[(j, k)] = acc.c[(j, k)] + s * wk;
            }
        }
    }

    /// Gradient of the complete log-density in `w`: `Cᵀ (Y_i − exp z) − w`.
    pub fn latent_gradient(&self, w: ArrayView1<'_, T>) -> Array1<T> {
        self.loadings.t().dot(&self.residual(w)) - w
    }

    /// Negative Hessian in `w`: `I_q + Cᵀ Diag(exp z) C`.
    pub fn latent_neg_hessian(&self, w: ArrayView1<'_, T>) -> Array2<T> {
        let e = self.intensities(w);
        let q = self.q();
        let mut h = Array2::<T>::eye(q);
        for (j, &ej) in e.iter().enumerate() {
            let row = self.loadings.row(j);
            for a in 0..q {
                let s = ej * row[a];
                for b in a..q {
                    h[(a, b)] = h[(a, b)] + s * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h
    }

    /// Maximizer of the complete log-density in `w` by damped Newton from 0.
    pub fn conditional_mode(&self) -> Result<LatentPoint<T>> {
        const MAX_ITER: usize = 100;
        let q = self.q();
        let tol = T::lit(T::NEWTON_TOL);
        let mut w = Array1::<T>::zeros(q);
        let mut f = self.log_density(w.view());
        for _ in 0..MAX_ITER {
            let g = self.latent_gradient(w.view());
            let gmax = g.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if gmax < tol {
                return LatentPoint::new(w);
            }
            let h = self.latent_neg_hessian(w.view());
            let l = linalg::cholesky(h.view()).ok_or_else(|| {
                Error::Factorization(format!("latent Hessian of individual {}", self.index))
            })?;
            let step = linalg::cholesky_solve(l.view(), g.view());
            let slack = T::lit(1e-14) * (T::one() + f.abs());
            let mut t = T::one();
            let mut accepted = false;
            while t > T::lit(1e-12) {
                let cand = &w + &step.mapv(|s| s * t);
                let fc = self.log_density(cand.view());
                if fc.is_finite() && (fc >= f - slack || !f.is_finite()) {
                    w = cand;
                    f = fc;
                    accepted = true;
                    break;
                }
                t = t * T::lit(0.5);
            }
            if !accepted {
                break;
            }
        }
        let g = self.latent_gradient(w.view());
        if g.iter().all(|v| v.abs() < tol) {
            return LatentPoint::new(w);
        }
        Err(Error::ModeNotConverged {
            individual: self.index,
            iterations: MAX_ITER,
            last_iterate: w.iter().map(|v| v.as_f64()).collect(),
        })
    }

    /// [`conditional_mode`](Self::conditional_mode), falling back to the last
    /// Newton iterate, or to the prior mean when even that is unusable.
    pub fn mode_or_fallback(&self) -> Array1<T> {
        match self.conditional_mode() {
            Ok(m) => m.into_inner(),
            Err(Error::ModeNotConverged { last_iterate, .. })
                if last_iterate.iter().all(|v| v.is_finite()) =>
            {
                last_iterate.into_iter().map(T::lit).collect()
            }
            Err(_) => Array1::zeros(self.q()),
        }
    }

    /// `[I_q + Cᵀ Diag(exp f_i(mu)) C]⁻¹`, symmetric positive definite.
    pub fn hessian_covariance(&self, mu: ArrayView1<'_, T>) -> Result<Array2<T>> {
        self.check_latent(mu)?;
        let h = self.latent_neg_hessian(mu);
        let l = linalg::cholesky(h.view()).ok_or_else(|| {
            Error::Factorization(format!("curvature matrix of individual {}", self.index))
        })?;
        Ok(linalg::cholesky_inverse(l.view()))
    }
}

/// `f_i(w) = C w + Bᵀ x_i + o_i`.
pub fn linear_predictor<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    w: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    let ind = Individual::new(params, data, i)?;
    ind.check_latent(w)?;
    Ok(ind.predictor(w))
}

/// `log p_θ(Y_i, w)` with all constants.
pub fn complete_log_density<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    w: ArrayView1<'_, T>,
) -> Result<T> {
    let ind = Individual::new(params, data, i)?;
    ind.check_latent(w)?;
    Ok(ind.log_density(w))
}

/// `∇_θ log p_θ(Y_i, w)`: `x_i rᵀ` for `B` and `r wᵀ` for `C`, with `r = Y_i − exp z`.
pub fn complete_score<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    w: ArrayView1<'_, T>,
) -> Result<ParamGradient<T>> {
    let ind = Individual::new(params, data, i)?;
    ind.check_latent(w)?;
    Ok(ind.score(w))
}

pub fn conditional_mode<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
) -> Result<LatentPoint<T>> {
    Individual::new(params, data, i)?.conditional_mode()
}

pub fn hessian_covariance<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    mu: ArrayView1<'_, T>,
) -> Result<Array2<T>> {
    Individual::new(params, data, i)?.hessian_covariance(mu)
}

/// Draws a dataset from the model: `W_i ~ N(0, I_q)`, `Y_ij ~ Poisson(exp f_i(W_i)_j)`.
pub fn simulate<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    covariates: Array2<T>,
    offsets: Array2<T>,
    rng: &mut R,
) -> Result<Dataset<T>> {
    let n = covariates.nrows();
    if covariates.ncols() != params.d() {
        return contract(format!(
            "X has {} columns, B has {} rows",
            covariates.ncols(),
            params.d()
        ));
    }
    if offsets.dim() != (n, params.p()) {
        return contract(format!("O must be {n}x{}", params.p()));
    }
    let q = params.q();
    let mut counts = Array2::<u64>::zeros((n, params.p()));
    for i in 0..n {
        let w: Array1<T> = (0..q).map(|_| T::std_normal(rng)).collect();
        let z = params.c.dot(&w) + params.b.t().dot(&covariates.row(i)) + offsets.row(i);
        for (j, &zj) in z.iter().enumerate() {
            let lambda = zj.as_f64().exp();
            let overflow = Error::SimulationOverflow {
                individual: i,
                variable: j,
            };
            if !lambda.is_finite() {
                return Err(overflow);
            }
            counts[(i, j)] = if lambda == 0.0 {
                0
            } else {
                let dist = Poisson::new(lambda).map_err(|_| overflow)?;
                dist.sample(rng) as u64
            };
        }
    }
    Dataset::new(counts, covariates, offsets)
}
