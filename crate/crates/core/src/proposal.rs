//! Defensive two-component Gaussian mixture proposals,
//! `(1−α)·N(μ, S) + α·N(μ, δI)`, and the ways of adapting them.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{Dataset, Individual, ModelParams};
use crate::scalar::Real;

/// Mixture weight used to represent the non-defensive variational proposal.
pub const VEM_ALPHA_FLOOR: f64 = 1e-12;

/// First jitter tried when repairing an estimated covariance.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter, relative to the largest diagonal entry, before falling back
/// to the clamped diagonal.
pub const JITTER_CAP: f64 = 1e-2;
/// Variance floor of the diagonal fallback.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// How the per-individual proposal is built at every step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalKind {
    /// Variational Gaussian, no defensive component.
    Vem,
    /// Variational Gaussian mixed with a wide component.
    VemMix,
    /// Mean and covariance from the previous importance-sampling pass.
    Snis,
    /// Mean from the previous pass, covariance from the latent curvature.
    Hessian,
}

impl ProposalKind {
    pub const ALL: [ProposalKind; 4] = [Self::Vem, Self::VemMix, Self::Snis, Self::Hessian];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Vem => "vem",
            Self::VemMix => "vem-mix",
            Self::Snis => "snis",
            Self::Hessian => "hessian",
        }
    }

    pub fn needs_variational(self) -> bool {
        matches!(self, Self::Vem | Self::VemMix)
    }
}

impl std::str::FromStr for ProposalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vem" => Ok(Self::Vem),
            "vem-mix" | "vemmix" => Ok(Self::VemMix),
            "snis" => Ok(Self::Snis),
            "hessian" => Ok(Self::Hessian),
            other => Err(Error::Config(format!("unknown proposal kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ProposalKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixtureProposal<T> {
    mean: Array1<T>,
    chol: Array2<T>,
    alpha: T,
    delta: T,
    relaxed: bool,
}

impl<T: Real> GaussianMixtureProposal<T> {
    /// Requires `α ∈ (0, 1]`, `δ > 1` and a lower-triangular factor with
    /// positive diagonal.
    pub fn new(mean: Array1<T>, chol: Array2<T>, alpha: T, delta: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha <= T::one()) {
            return Err(Error::Adaptation(format!("mixture weight {alpha} outside (0, 1]")));
        }
        if !(delta > T::one()) || !delta.is_finite() {
            return Err(Error::Adaptation(format!("wide-component scale {delta} must exceed 1")));
        }
        Self::build(mean, chol, alpha, delta, false)
    }

    /// Skips the `α > 0`, `δ > 1` requirements (only `α ∈ [0, 1]`, `δ > 0`
    /// are enforced). Meant for diagnostics and tests where the proposal must
    /// coincide with a known target.
    pub fn relaxed(mean: Array1<T>, chol: Array2<T>, alpha: T, delta: T) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::Adaptation(format!("mixture weight {alpha} outside [0, 1]")));
        }
        if !(delta > T::zero()) || !delta.is_finite() {
            return Err(Error::Adaptation(format!("wide-component scale {delta} must be positive")));
        }
        Self::build(mean, chol, alpha, delta, true)
    }

    fn build(mean: Array1<T>, chol: Array2<T>, alpha: T, delta: T, relaxed: bool) -> Result<Self> {
        let q = mean.len();
        if q == 0 || chol.dim() != (q, q) {
            return contract(format!("factor must be {q}x{q}"));
        }
        if mean.iter().chain(chol.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Adaptation("non-finite proposal moments".into()));
        }
        for i in 0..q {
            if !(chol[(i, i)] > T::zero()) {
                return Err(Error::Adaptation("factor diagonal must be positive".into()));
            }
            for j in (i + 1)..q {
                if chol[(i, j)] != T::zero() {
                    return contract("factor must be lower triangular");
                }
            }
        }
        Ok(Self {
            mean,
            chol,
            alpha,
            delta,
            relaxed,
        })
    }

    /// Builds the proposal from an SPD covariance; fails if it does not factor.
    pub fn from_covariance(mean: Array1<T>, cov: ArrayView2<'_, T>, alpha: T, delta: T) -> Result<Self> {
        let chol = linalg::cholesky(cov)
            .ok_or_else(|| Error::Adaptation("covariance is not positive definite".into()))?;
        Self::new(mean, chol, alpha, delta)
    }

    pub fn q(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<T> {
        &self.mean
    }

    pub fn chol(&self) -> &Array2<T> {
        &self.chol
    }

    /// `S = L Lᵀ`
    pub fn covariance(&self) -> Array2<T> {
        self.chol.dot(&self.chol.t())
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn delta(&self) -> T {
        self.delta
    }

    pub fn is_relaxed(&self) -> bool {
        self.relaxed
    }

    /// `log[(1−α) N(v; μ, S) + α N(v; μ, δI)]`
    pub fn log_density(&self, v: ArrayView1<'_, T>) -> T {
        let q = self.q();
        let half = T::lit(0.5);
        let norm_const = T::lit(0.5 * q as f64) * T::ln_2pi();
        let dev = &v - &self.mean;

        let white = linalg::solve_lower(self.chol.view(), dev.view());
        let log_det: T = (0..q).map(|k| self.chol[(k, k)].ln()).sum();
        let main = -half * white.iter().map(|&x| x * x).sum::<T>() - log_det - norm_const;

        let sq: T = dev.iter().map(|&x| x * x).sum();
        let wide = -half * sq / self.delta - half * T::lit(q as f64) * self.delta.ln() - norm_const;

        linalg::log_sum_exp(&[(T::one() - self.alpha).ln() + main, self.alpha.ln() + wide])
    }

    /// `N` independent rows; each draws the wide component with probability `α`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<T>> {
        if n < 2 {
            return contract("at least two particles are required");
        }
        let q = self.q();
        let wide_scale = self.delta.sqrt();
        let mut out = Array2::<T>::zeros((n, q));
        let mut z = Array1::<T>::zeros(q);
        for mut row in out.rows_mut() {
            let u = T::uniform01(rng);
            z.iter_mut().for_each(|v| *v = T::std_normal(rng));
            if u < self.alpha {
                row.assign(&(&self.mean + &z.mapv(|v| v * wide_scale)));
            } else {
                row.assign(&(&self.mean + &self.chol.dot(&z)));
            }
        }
        Ok(out)
    }
}

/// Mixture around SNIS moment estimates. The covariance is repaired when it
/// is not positive definite: symmetrize, then add `ε·I` with `ε` doubling
/// from [`JITTER_START`] while `ε ≤ JITTER_CAP · max diag`, then fall back to
/// the diagonal clamped below at [`VARIANCE_FLOOR`].
pub fn adapt_snis<T: Real>(
    mean: Array1<T>,
    cov: ArrayView2<'_, T>,
    alpha: T,
    delta: T,
) -> Result<GaussianMixtureProposal<T>> {
    let q = mean.len();
    if cov.dim() != (q, q) {
        return contract(format!("covariance must be {q}x{q}"));
    }
    if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Adaptation("non-finite moment estimates".into()));
    }
    let chol = repair_covariance(cov);
    GaussianMixtureProposal::new(mean, chol, alpha, delta)
}

/// Lower factor of the repaired covariance; see [`adapt_snis`].
pub fn repair_covariance<T: Real>(cov: ArrayView2<'_, T>) -> Array2<T> {
    let q = cov.nrows();
    let mut s = cov.to_owned();
    linalg::symmetrize(&mut s);
    if let Some(l) = linalg::cholesky(s.view()) {
        return l;
    }
    let scale = (0..q).map(|k| s[(k, k)]).fold(T::zero(), T::max);
    let cap = T::lit(JITTER_CAP) * scale;
    let mut eps = T::lit(JITTER_START);
    while eps <= cap {
        let mut jittered = s.clone();
        for k in 0..q {
            jittered[(k, k)] = jittered[(k, k)] + eps;
        }
        if let Some(l) = linalg::cholesky(jittered.view()) {
            return l;
        }
        eps = eps + eps;
    }
    let floor = T::lit(VARIANCE_FLOOR);
    let mut l = Array2::<T>::zeros((q, q));
    for k in 0..q {
        l[(k, k)] = s[(k, k)].max(floor).sqrt();
    }
    l
}

/// Mixture with the curvature covariance at `mean`.
pub fn adapt_hessian<T: Real>(
    params: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    mean: Array1<T>,
    alpha: T,
    delta: T,
) -> Result<GaussianMixtureProposal<T>> {
    let ind = Individual::new(params, data, i)?;
    adapt_hessian_for(&ind, mean, alpha, delta)
}

pub(crate) fn adapt_hessian_for<T: Real>(
    ind: &Individual<'_, T>,
    mean: Array1<T>,
    alpha: T,
    delta: T,
) -> Result<GaussianMixtureProposal<T>> {
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::Adaptation("non-finite mean".into()));
    }
    let cov = ind.hessian_covariance(mean.view())?;
    GaussianMixtureProposal::from_covariance(mean, cov.view(), alpha, delta)
}

/// Mixture around a diagonal variational Gaussian. Without the defensive
/// component the wide weight is floored at [`VEM_ALPHA_FLOOR`].
pub fn adapt_vem<T: Real>(
    mean: Array1<T>,
    variances: ArrayView1<'_, T>,
    alpha: T,
    delta: T,
    defensive: bool,
) -> Result<GaussianMixtureProposal<T>> {
    let q = mean.len();
    if variances.len() != q {
        return contract("variance vector length must equal q");
    }
    if variances.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Err(Error::Adaptation("variational variances must be positive".into()));
    }
    let mut chol = Array2::<T>::zeros((q, q));
    for k in 0..q {
        chol[(k, k)] = variances[k].sqrt();
    }
    let alpha = if defensive { alpha } else { T::lit(VEM_ALPHA_FLOOR) };
    GaussianMixtureProposal::new(mean, chol, alpha, delta)
}
