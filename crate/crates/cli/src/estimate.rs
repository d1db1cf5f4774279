//! Per-individual importance-sampling summaries shared by `fit`, `eval` and `diagnose`.

use ndarray::{Array1, Array2};
use plnpca::optimizer::substream;
use plnpca::proposal::adapt_hessian;
use plnpca::snis::{compute_weights, ess, forward_kl_estimate, marginal_loglik_estimate, reverse_kl_estimate, snis_moments};
use plnpca::{Dataset, Individual, ModelParams, Proposal64};
use serde::Serialize;

pub const TAG_LOGLIK: u64 = 0xe7a1_0001;
pub const TAG_DIAGNOSE: u64 = 0xe7a1_0002;
pub const TAG_PILOT: u64 = 0xe7a1_0003;

#[derive(Debug, Clone)]
pub struct Stats {
    pub mll: f64,
    /// Delta-method standard error of `mll`.
    pub mll_se: f64,
    pub ess: f64,
    pub forward_kl: Option<f64>,
    pub reverse_kl: f64,
    pub moments: (Array1<f64>, Array2<f64>),
}

/// Per-individual diagnostics as written to JSON; `None` marks a missing value.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Row {
    pub mll: Option<f64>,
    pub ess: Option<f64>,
    pub forward_kl: Option<f64>,
    pub reverse_kl: Option<f64>,
}

impl From<&Stats> for Row {
    fn from(s: &Stats) -> Self {
        let f = |v: f64| v.is_finite().then_some(v);
        Self {
            mll: f(s.mll),
            ess: f(s.ess),
            forward_kl: s.forward_kl.and_then(f),
            reverse_kl: f(s.reverse_kl),
        }
    }
}

/// Curvature proposal centered at the conditional mode.
pub fn hessian_at_mode(
    theta: &ModelParams<f64>,
    data: &Dataset<f64>,
    i: usize,
    alpha: f64,
    delta: f64,
) -> plnpca::Result<Proposal64> {
    let mode = Individual::new(theta, data, i)?.mode_or_fallback();
    adapt_hessian(theta, data, i, mode, alpha, delta)
}

/// Draws `n` particles for individual `i` from the stream `(seed, tag, i)`.
pub fn sample_stats(
    theta: &ModelParams<f64>,
    data: &Dataset<f64>,
    i: usize,
    prop: &Proposal64,
    n: usize,
    seed: u64,
    tag: u64,
) -> plnpca::Result<Stats> {
    let mut rng = substream(seed, tag, 0, i as u64);
    let particles = prop.sample(n, &mut rng)?;
    let wp = compute_weights(theta, data, i, prop, particles)?;
    let lw = wp.log_weights();
    let top = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rho: Vec<f64> = lw.iter().map(|l| (l - top).exp()).collect();
    let mean = rho.iter().sum::<f64>() / n as f64;
    let var = rho.iter().map(|r| (r / mean - 1.0).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    Ok(Stats {
        mll: marginal_loglik_estimate(&wp),
        mll_se: (var / n as f64).sqrt(),
        ess: ess(&wp),
        forward_kl: forward_kl_estimate(&wp).ok(),
        reverse_kl: reverse_kl_estimate(&wp),
        moments: snis_moments(&wp),
    })
}

/// Mode-centered estimate for every individual; failures become `None`.
pub fn all_individuals(
    theta: &ModelParams<f64>,
    data: &Dataset<f64>,
    n: usize,
    alpha: f64,
    delta: f64,
    seed: u64,
) -> Vec<Option<Stats>> {
    (0..data.n())
        .map(|i| {
            hessian_at_mode(theta, data, i, alpha, delta)
                .and_then(|prop| sample_stats(theta, data, i, &prop, n, seed, TAG_LOGLIK))
                .map_err(|e| log::warn!("individual {i}: {e}"))
                .ok()
        })
        .collect()
}

/// Sum of per-individual log-likelihood estimates and its standard error,
/// over the individuals with a finite estimate.
pub fn total_loglik(stats: &[Option<Stats>]) -> (f64, f64, usize) {
    let kept: Vec<&Stats> = stats.iter().flatten().filter(|s| s.mll.is_finite()).collect();
    let sum = kept.iter().map(|s| s.mll).sum();
    let se = kept.iter().map(|s| s.mll_se * s.mll_se).sum::<f64>().sqrt();
    (sum, se, stats.len() - kept.len())
}

pub fn rmse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (sq / a.len() as f64).sqrt()
}
