//! Self-normalized importance sampling for a single individual, plus the
//! weight-quality diagnostics (ESS and the two Kullback–Leibler estimates).

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{Dataset, Individual, ModelParams, ParamGradient};
use crate::proposal::GaussianMixtureProposal;
use crate::scalar::Real;

/// Latent draws with their log importance weights and normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedParticles<T> {
    individual: usize,
    particles: Array2<T>,
    log_weights: Array1<T>,
    norm_weights: Array1<T>,
}

impl<T: Real> WeightedParticles<T> {
    /// Normalizes `log_weights` by log-sum-exp. Entries equal to −∞ get zero
    /// weight; at least one must be finite.
    pub fn new(individual: usize, particles: Array2<T>, log_weights: Array1<T>) -> Result<Self> {
        let n = particles.nrows();
        if n < 2 {
            return contract("at least two particles are required");
        }
        if log_weights.len() != n {
            return contract(format!(
                "{} log-weights for {n} particles",
                log_weights.len()
            ));
        }
        if log_weights.iter().any(|v| v.is_nan() || *v == T::infinity()) {
            return contract("log-weights must be finite or -inf");
        }
        let lw = log_weights.as_slice().expect("contiguous").to_vec();
        let (lse, w) = linalg::softmax(&lw);
        if lse == T::neg_infinity() {
            return Err(Error::DegenerateWeights(individual));
        }
        Ok(Self {
            individual,
            particles,
            log_weights,
            norm_weights: Array1::from(w),
        })
    }

    pub fn individual(&self) -> usize {
        self.individual
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn particles(&self) -> &Array2<T> {
        &self.particles
    }

    pub fn log_weights(&self) -> &Array1<T> {
        &self.log_weights
    }

    pub fn norm_weights(&self) -> &Array1<T> {
        &self.norm_weights
    }
}

/// `log ρ(v_r) = log p_θ(Y_i, v_r) − log ν(v_r)` for every row of `particles`.
pub fn compute_weights<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    proposal: &GaussianMixtureProposal<T>,
    particles: Array2<T>,
) -> Result<WeightedParticles<T>> {
    let ind = Individual::new(params, data, i)?;
    weights_for(&ind, proposal, particles)
}

pub(crate) fn weights_for<T: Real>(
    ind: &Individual<'_, T>,
    proposal: &GaussianMixtureProposal<T>,
    particles: Array2<T>,
) -> Result<WeightedParticles<T>> {
    if particles.ncols() != ind.q() || proposal.q() != ind.q() {
        return contract("particle dimension must equal q");
    }
    if particles.iter().any(|v| !v.is_finite()) {
        return contract("particles must be finite");
    }
    let log_weights: Vec<T> = particles
        .outer_iter()
        .into_par_iter()
        .with_min_len(256)
        .map(|v| ind.log_density(v) - proposal.log_density(v))
        .collect();
    WeightedParticles::new(ind.index(), particles, Array1::from(log_weights))
}

fn check_owner<T: Real>(ind: &Individual<'_, T>, wp: &WeightedParticles<T>) -> Result<()> {
    if wp.particles.ncols() != ind.q() {
        return contract("particle dimension must equal q");
    }
    Ok(())
}

/// `Σ_r ω_r ∇_θ log p_θ(Y_i, v_r)`.
pub fn snis_score<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    wp: &WeightedParticles<T>,
) -> Result<ParamGradient<T>> {
    let ind = Individual::new(params, data, i)?;
    score_for(&ind, wp)
}

pub(crate) fn score_for<T: Real>(
    ind: &Individual<'_, T>,
    wp: &WeightedParticles<T>,
) -> Result<ParamGradient<T>> {
    check_owner(ind, wp)?;
    let mut g = ParamGradient::zeros(ind.d(), ind.p(), ind.q());
    for (v, &w) in wp.particles.outer_iter().zip(wp.norm_weights.iter()) {
        if w > T::zero() {
            ind.accumulate_score(&mut g, w, v);
        }
    }
    if !g.is_finite() {
        return Err(Error::DegenerateWeights(wp.individual));
    }
    Ok(g)
}

/// Weighted mean and covariance of the particles.
pub fn snis_moments<T: Real>(wp: &WeightedParticles<T>) -> (Array1<T>, Array2<T>) {
    linalg::weighted_moments(
        wp.particles.view(),
        wp.norm_weights.as_slice().expect("contiguous"),
    )
}

/// Effective sample size `(Σ ω²)⁻¹`, in `[1, N]`.
pub fn ess<T: Real>(wp: &WeightedParticles<T>) -> T {
    // (Σ ρ̃)² / Σ ρ̃² with ρ̃ = ρ / max ρ, exact for equal weights
    let max = wp.log_weights.iter().copied().fold(T::neg_infinity(), T::max);
    let (s1, s2) = wp
        .log_weights
        .iter()
        .map(|&l| (l - max).exp())
        .fold((T::zero(), T::zero()), |(a, b), r| (a + r, b + r * r));
    let n = T::lit(wp.len() as f64);
    (s1 * s1 / s2).max(T::one()).min(n)
}

/// Estimate of `KL[ν ‖ p(·|Y)]`: `−log N − (1/N) Σ log ω_r`.
pub fn forward_kl_estimate<T: Real>(wp: &WeightedParticles<T>) -> Result<T> {
    if wp.norm_weights.iter().any(|&w| !(w > T::zero())) {
        return Err(Error::UndefinedEstimate("forward KL needs every weight positive"));
    }
    let n = T::lit(wp.len() as f64);
    // log ω_r = log ρ_r − lse, which avoids underflow in ω
    let lse = linalg::log_sum_exp(wp.log_weights.as_slice().expect("contiguous"));
    let mean_log: T = wp.log_weights.iter().map(|&l| l - lse).sum::<T>() / n;
    Ok(-n.ln() - mean_log)
}

/// Estimate of `KL[p(·|Y) ‖ ν]`: `log N + Σ ω_r log ω_r`.
pub fn reverse_kl_estimate<T: Real>(wp: &WeightedParticles<T>) -> T {
    let n = T::lit(wp.len() as f64);
    let lse = linalg::log_sum_exp(wp.log_weights.as_slice().expect("contiguous"));
    let ent: T = wp
        .log_weights
        .iter()
        .zip(wp.norm_weights.iter())
        .filter(|(_, &w)| w > T::zero())
        .map(|(&l, &w)| w * (l - lse))
        .sum();
    n.ln() + ent
}

/// `log((1/N) Σ ρ_r)`, the log of an unbiased marginal-likelihood estimate.
pub fn marginal_loglik_estimate<T: Real>(wp: &WeightedParticles<T>) -> T {
    let lse = linalg::log_sum_exp(wp.log_weights.as_slice().expect("contiguous"));
    lse - T::lit(wp.len() as f64).ln()
}
