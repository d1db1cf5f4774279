//! Projected stochastic gradient descent driven by SNIS score estimates.

use std::fmt;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::model::{Dataset, Individual, ModelParams, ParamGradient};
use crate::proposal::{self, GaussianMixtureProposal, ProposalKind};
use crate::scalar::Real;
use crate::snis;
use crate::vem::VariationalParams;

pub const DEFAULT_RADIUS: f64 = 12.0;
pub const DEFAULT_DIAG_ETA: f64 = 0.5;

/// Coordinate box `[−R, R]` on the flattened parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintSet<T> {
    radius: T,
}

impl<T: Real> ConstraintSet<T> {
    pub fn new(radius: T) -> Result<Self> {
        if !(radius > T::zero()) || !radius.is_finite() {
            return contract("constraint radius must be positive and finite");
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> T {
        self.radius
    }

    pub fn contains(&self, theta: &ModelParams<T>) -> bool {
        theta.b().iter().chain(theta.c().iter()).all(|v| v.abs() <= self.radius)
    }
}

impl<T: Real> Default for ConstraintSet<T> {
    fn default() -> Self {
        Self {
            radius: T::lit(DEFAULT_RADIUS),
        }
    }
}

/// Orthogonal projection onto the box.
pub fn project<T: Real>(theta: &ModelParams<T>, cset: &ConstraintSet<T>) -> ModelParams<T> {
    project_flagged(theta, cset).0
}

fn project_flagged<T: Real>(theta: &ModelParams<T>, cset: &ConstraintSet<T>) -> (ModelParams<T>, bool) {
    let r = cset.radius;
    let mut active = false;
    let mut clamp = |v: T| {
        let c = v.max(-r).min(r);
        active |= c != v;
        c
    };
    let b = theta.b().mapv(&mut clamp);
    let c = theta.c().mapv(&mut clamp);
    let out = ModelParams::new(b, c).expect("clamping keeps shapes and finiteness");
    (out, active)
}

/// `iterations` steps with batches of `batch_size` individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPhase {
    pub batch_size: usize,
    pub iterations: usize,
}

impl BatchPhase {
    /// Phase covering `epochs` passes over `n` individuals.
    pub fn epochs(n: usize, epochs: usize, batch_size: usize) -> Self {
        let per_epoch = n.div_ceil(batch_size.max(1));
        Self {
            batch_size,
            iterations: epochs * per_epoch,
        }
    }
}

/// Full-batch burn-in followed by single-sample epochs.
pub fn paper_schedule(n: usize, epochs: usize, final_epochs: usize) -> Vec<BatchPhase> {
    let burn = epochs.saturating_sub(final_epochs);
    let mut phases = Vec::new();
    if burn > 0 {
        phases.push(BatchPhase::epochs(n, burn, n));
    }
    if final_epochs > 0 {
        phases.push(BatchPhase::epochs(n, final_epochs, 1));
    }
    phases
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub gamma0: f64,
    pub n_particles: usize,
    /// Phases run in order; the last one is the analyzed phase whose length
    /// sets the step size `γ0/√T`.
    pub batch_schedule: Vec<BatchPhase>,
    pub alpha: f64,
    pub delta: f64,
    pub proposal_kind: ProposalKind,
    pub diag_eta: f64,
    /// Particles per individual for the gradient-mapping diagnostic; `4·N` when unset.
    pub diag_particles: Option<usize>,
    /// Diagnostic cadence; `max(1, T/20)` when unset, `0` disables it.
    pub diag_every: Option<usize>,
    pub seed: u64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            gamma0: 0.01,
            n_particles: 500,
            batch_schedule: Vec::new(),
            alpha: 0.001,
            delta: 1.1,
            proposal_kind: ProposalKind::Hessian,
            diag_eta: DEFAULT_DIAG_ETA,
            diag_particles: None,
            diag_every: None,
            seed: 0,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.gamma0 > 0.0) || !self.gamma0.is_finite() {
            return bad("gamma0 must be positive");
        }
        if self.n_particles < 2 {
            return bad("at least two particles are required");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must lie in (0, 1]");
        }
        if !(self.delta > 1.0) || !self.delta.is_finite() {
            return bad("delta must exceed 1");
        }
        if !(self.diag_eta > 0.0) || !self.diag_eta.is_finite() {
            return bad("diag_eta must be positive");
        }
        if self.diag_particles.is_some_and(|m| m < 2) {
            return bad("diagnostic particle count must be at least 2");
        }
        if self.batch_schedule.iter().any(|ph| ph.batch_size == 0) {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }

    /// Length of the analyzed (final) phase.
    pub fn horizon(&self) -> usize {
        self.batch_schedule.last().map_or(0, |ph| ph.iterations)
    }

    pub fn total_iterations(&self) -> usize {
        self.batch_schedule.iter().map(|ph| ph.iterations).sum()
    }

    pub fn gamma(&self) -> f64 {
        let t = self.horizon().max(1);
        self.gamma0 / (t as f64).sqrt()
    }

    pub fn diag_particles(&self) -> usize {
        self.diag_particles.unwrap_or(4 * self.n_particles)
    }

    pub fn diag_every(&self) -> usize {
        self.diag_every.unwrap_or((self.horizon() / 20).max(1))
    }
}

/// One optimizer iteration. Reals are `None` when no finite value exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub phase: usize,
    pub batch: Vec<usize>,
    /// Mean negative marginal log-likelihood estimate over the batch.
    pub loss: Option<f64>,
    pub mean_ess: Option<f64>,
    pub forward_kl: Option<f64>,
    pub reverse_kl: Option<f64>,
    pub step_norm: f64,
    pub projected: bool,
    pub grad_mapping: Option<f64>,
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub records: Vec<TraceRecord>,
}

impl FitTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(iteration, value)` pairs of the gradient-mapping checkpoints.
    pub fn grad_mapping_series(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.grad_mapping.map(|g| (r.iteration, g)))
            .collect()
    }
}

/// Per-individual proposal memory plus the optional variational fit.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    moments: Vec<Option<(Array1<T>, Array2<T>)>>,
    recenter: Vec<bool>,
    variational: Option<VariationalParams<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            moments: vec![None; n],
            recenter: vec![false; n],
            variational: None,
        }
    }

    pub fn with_variational(vp: VariationalParams<T>) -> Self {
        Self {
            moments: vec![None; vp.n()],
            recenter: vec![false; vp.n()],
            variational: Some(vp),
        }
    }

    pub fn variational(&self) -> Option<&VariationalParams<T>> {
        self.variational.as_ref()
    }

    /// Last SNIS estimate of `(E[W | Y_i], V[W | Y_i])`.
    pub fn moments(&self, i: usize) -> Option<&(Array1<T>, Array2<T>)> {
        self.moments.get(i).and_then(Option::as_ref)
    }

    /// True when the last estimate for `i` was too degenerate to reuse, so the
    /// next proposal is centered at the conditional mode.
    pub fn needs_recenter(&self, i: usize) -> bool {
        self.recenter.get(i).copied().unwrap_or(false)
    }
}

/// Cached moments are only reused when the ESS was at least this fraction of N.
const MIN_REUSE_ESS: f64 = 0.01;

const TAG_PARTICLES: u64 = 0x5eed_0001;
const TAG_BATCH: u64 = 0x5eed_0002;
const TAG_DIAG: u64 = 0x5eed_0003;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, tag, a, b)`.
pub fn substream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed ^ splitmix(tag)) ^ a) ^ b);
    ChaCha8Rng::seed_from_u64(key)
}

struct Outcome<T> {
    score: ParamGradient<T>,
    mll: T,
    ess: T,
    forward_kl: Option<T>,
    reverse_kl: T,
    moments: (Array1<T>, Array2<T>),
}

fn build_proposal<T: Real>(
    ind: &Individual<'_, T>,
    kind: ProposalKind,
    alpha: T,
    delta: T,
    state: &OptState<T>,
) -> Result<GaussianMixtureProposal<T>> {
    let i = ind.index();
    let variational = |defensive: bool| -> Result<GaussianMixtureProposal<T>> {
        let vp = state
            .variational
            .as_ref()
            .ok_or_else(|| Error::Config(format!("proposal {kind} needs variational parameters")))?;
        let var = vp.variances(i);
        proposal::adapt_vem(vp.means().row(i).to_owned(), var.view(), alpha, delta, defensive)
    };
    match kind {
        ProposalKind::Vem => variational(false),
        ProposalKind::VemMix => variational(true),
        ProposalKind::Hessian => {
            let mean = match state.moments(i) {
                Some((m, _)) => m.clone(),
                None => match &state.variational {
                    Some(vp) if !state.needs_recenter(i) => vp.means().row(i).to_owned(),
                    _ => ind.mode_or_fallback(),
                },
            };
            proposal::adapt_hessian_for(ind, mean, alpha, delta)
        }
        ProposalKind::Snis => match state.moments(i) {
            Some((m, s)) => proposal::adapt_snis(m.clone(), s.view(), alpha, delta),
            None => match &state.variational {
                Some(_) if !state.needs_recenter(i) => variational(true),
                _ => proposal::adapt_hessian_for(ind, ind.mode_or_fallback(), alpha, delta),
            },
        },
    }
}

fn estimate_individual<T: Real>(
    theta: &ModelParams<T>,
    data: &Dataset<T>,
    i: usize,
    config: &OptConfig,
    state: &OptState<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Outcome<T>> {
    let ind = Individual::new(theta, data, i)?;
    let prop = build_proposal(&ind, config.proposal_kind, T::lit(config.alpha), T::lit(config.delta), state)?;
    let particles = prop.sample(config.n_particles, rng)?;
    let wp = snis::weights_for(&ind, &prop, particles)?;
    let score = snis::score_for(&ind, &wp)?;
    let mll = snis::marginal_loglik_estimate(&wp);
    if !mll.is_finite() {
        return Err(Error::DegenerateWeights(i));
    }
    Ok(Outcome {
        score,
        mll,
        ess: snis::ess(&wp),
        forward_kl: snis::forward_kl_estimate(&wp).ok(),
        reverse_kl: snis::reverse_kl_estimate(&wp),
        moments: snis::snis_moments(&wp),
    })
}

fn finite<T: Real>(v: T) -> Option<f64> {
    let x = v.as_f64();
    x.is_finite().then_some(x)
}

fn mean_of<T: Real>(vals: impl Iterator<Item = T>) -> Option<f64> {
    let (mut s, mut k) = (0.0, 0usize);
    for v in vals {
        let x = v.as_f64();
        if x.is_finite() {
            s += x;
            k += 1;
        }
    }
    (k > 0).then(|| s / k as f64)
}

/// Where in the schedule a step happens; only used for bookkeeping and
/// particle streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepIndex {
    pub iteration: usize,
    pub epoch: usize,
    pub phase: usize,
}

/// One projected step `θ ← P(θ + γ · mean_i snis_score_i)` over `batch`.
#[allow(clippy::too_many_arguments)]
pub fn sgd_step<T: Real>(
    theta: &ModelParams<T>,
    data: &Dataset<T>,
    batch: &[usize],
    gamma: T,
    cset: &ConstraintSet<T>,
    config: &OptConfig,
    state: &mut OptState<T>,
    at: StepIndex,
) -> Result<(ModelParams<T>, TraceRecord)> {
    if batch.is_empty() {
        return contract("batch must be nonempty");
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.n()) {
        return contract(format!("batch index {i} out of range"));
    }
    if state.moments.len() != data.n() {
        return contract("optimizer state was built for a different dataset");
    }
    if config.proposal_kind.needs_variational() && state.variational.is_none() {
        return Err(Error::Config(format!(
            "proposal {} needs variational parameters",
            config.proposal_kind
        )));
    }

    let shared: &OptState<T> = state;
    let outcomes: Vec<Result<Outcome<T>>> = batch
        .par_iter()
        .map(|&i| {
            let mut rng = substream(config.seed, TAG_PARTICLES, at.iteration as u64, i as u64);
            estimate_individual(theta, data, i, config, shared, &mut rng)
        })
        .collect();

    let mut grad = ParamGradient::zeros_like(theta);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (&i, out) in batch.iter().zip(outcomes) {
        match out {
            Ok(o) => {
                grad.add_scaled(T::one(), &o.score);
                kept.push(o);
                if matches!(config.proposal_kind, ProposalKind::Hessian | ProposalKind::Snis) {
                    let last = kept.last().expect("just pushed");
                    let (m, s) = &last.moments;
                    let healthy = last.ess.as_f64() >= (MIN_REUSE_ESS * config.n_particles as f64).max(2.0);
                    if healthy && m.iter().chain(s.iter()).all(|v| v.is_finite()) {
                        state.moments[i] = Some((m.clone(), s.clone()));
                        state.recenter[i] = false;
                    } else {
                        state.moments[i] = None;
                        state.recenter[i] = true;
                    }
                }
            }
            Err(e @ (Error::Config(_) | Error::Contract(_))) => return Err(e),
            Err(e) => {
                log::warn!("iteration {}: dropping individual {i}: {e}", at.iteration);
                if let Some(slot) = state.moments.get_mut(i) {
                    *slot = None;
                    state.recenter[i] = true;
                }
                dropped.push(i);
            }
        }
    }
    if kept.is_empty() {
        return Err(Error::StepFailed {
            iteration: at.iteration,
        });
    }
    grad.scale(gamma / T::lit(kept.len() as f64));

    let mut flat = theta.to_flat();
    for (x, g) in flat.iter_mut().zip(grad.to_flat()) {
        *x = *x + g;
    }
    let moved = ModelParams::from_flat(theta.d(), theta.p(), theta.q(), &flat)
        .map_err(|_| Error::StepFailed { iteration: at.iteration })?;
    let (next, projected) = project_flagged(&moved, cset);
    let step_norm = theta
        .to_flat()
        .iter()
        .zip(next.to_flat())
        .map(|(&a, b)| (a - b) * (a - b))
        .sum::<T>()
        .sqrt();

    let record = TraceRecord {
        iteration: at.iteration,
        epoch: at.epoch,
        phase: at.phase,
        batch: batch.to_vec(),
        loss: mean_of(kept.iter().map(|o| -o.mll)),
        mean_ess: mean_of(kept.iter().map(|o| o.ess)),
        forward_kl: mean_of(kept.iter().filter_map(|o| o.forward_kl)),
        reverse_kl: mean_of(kept.iter().map(|o| o.reverse_kl)),
        step_norm: step_norm.as_f64(),
        projected,
        grad_mapping: None,
        dropped,
    };
    Ok((next, record))
}

/// Settings for [`gradient_mapping_norm`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingConfig {
    pub eta: f64,
    pub n_particles: usize,
    pub alpha: f64,
    pub delta: f64,
}

/// `‖θ − P(θ − η ĝ)‖ / η`, where `ĝ` is the full-data mean of negated SNIS
/// scores under mode-centered curvature proposals.
pub fn gradient_mapping_norm<T: Real, R: Rng + ?Sized>(
    theta: &ModelParams<T>,
    data: &Dataset<T>,
    cset: &ConstraintSet<T>,
    diag: &MappingConfig,
    rng: &mut R,
) -> Result<T> {
    if !(diag.eta > 0.0) || !diag.eta.is_finite() {
        return contract("eta must be positive");
    }
    let seed: u64 = rng.random();
    let grad = full_data_score(theta, data, diag, seed)?;
    Ok(mapping_from_score(theta, cset, &grad, T::lit(diag.eta)))
}

/// Mean SNIS score over all individuals.
pub fn full_data_score<T: Real>(
    theta: &ModelParams<T>,
    data: &Dataset<T>,
    diag: &MappingConfig,
    seed: u64,
) -> Result<ParamGradient<T>> {
    let (alpha, delta) = (T::lit(diag.alpha), T::lit(diag.delta));
    let scores: Vec<Result<ParamGradient<T>>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let ind = Individual::new(theta, data, i)?;
            let prop = proposal::adapt_hessian_for(&ind, ind.mode_or_fallback(), alpha, delta)?;
            let mut rng = substream(seed, TAG_DIAG, 0, i as u64);
            let particles = prop.sample(diag.n_particles, &mut rng)?;
            let wp = snis::weights_for(&ind, &prop, particles)?;
            snis::score_for(&ind, &wp)
        })
        .collect();
    let mut total = ParamGradient::zeros_like(theta);
    let mut kept = 0usize;
    for (i, s) in scores.into_iter().enumerate() {
        match s {
            Ok(g) => {
                total.add_scaled(T::one(), &g);
                kept += 1;
            }
            Err(e @ Error::Contract(_)) => return Err(e),
            Err(e) => log::warn!("gradient mapping: dropping individual {i}: {e}"),
        }
    }
    if kept == 0 {
        return Err(Error::StepFailed { iteration: 0 });
    }
    total.scale(T::one() / T::lit(kept as f64));
    Ok(total)
}

/// Gradient mapping for a given ascent direction `score = −ĝ`.
pub fn mapping_from_score<T: Real>(
    theta: &ModelParams<T>,
    cset: &ConstraintSet<T>,
    score: &ParamGradient<T>,
    eta: T,
) -> T {
    let r = cset.radius;
    theta
        .to_flat()
        .iter()
        .zip(score.to_flat())
        .map(|(&x, g)| {
            let moved = (x + eta * g).max(-r).min(r);
            let diff = (x - moved) / eta;
            diff * diff
        })
        .sum::<T>()
        .sqrt()
}

/// Failed fit: the error plus everything computed before it.
#[derive(Debug, Clone)]
pub struct FitAborted<T> {
    pub error: Error,
    pub params: ModelParams<T>,
    pub trace: FitTrace,
}

impl<T: fmt::Debug> fmt::Display for FitAborted<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "fit aborted after {} iterations: {}", self.trace.records.len(), self.error)
    }
}

impl<T: fmt::Debug> std::error::Error for FitAborted<T> {}

/// Runs the batch schedule from `theta_init` (projected on entry).
pub fn fit<T: Real>(
    data: &Dataset<T>,
    theta_init: &ModelParams<T>,
    cset: &ConstraintSet<T>,
    config: &OptConfig,
    variational: Option<VariationalParams<T>>,
) -> std::result::Result<(ModelParams<T>, FitTrace), Box<FitAborted<T>>> {
    fit_with_observer(data, theta_init, cset, config, variational, |_, _| {})
}

/// [`fit`], calling `observe` with every record and the iterate it produced.
pub fn fit_with_observer<T: Real>(
    data: &Dataset<T>,
    theta_init: &ModelParams<T>,
    cset: &ConstraintSet<T>,
    config: &OptConfig,
    variational: Option<VariationalParams<T>>,
    mut observe: impl FnMut(&TraceRecord, &ModelParams<T>),
) -> std::result::Result<(ModelParams<T>, FitTrace), Box<FitAborted<T>>> {
    let mut theta = project(theta_init, cset);
    let mut trace = FitTrace::default();
    let abort = |error, params: &ModelParams<T>, trace: &FitTrace| {
        Box::new(FitAborted {
            error,
            params: params.clone(),
            trace: trace.clone(),
        })
    };
    if let Err(e) = config.validate() {
        return Err(abort(e, &theta, &trace));
    }
    if theta.d() != data.d() || theta.p() != data.p() {
        return Err(abort(
            Error::Contract("parameters and data disagree on d or p".into()),
            &theta,
            &trace,
        ));
    }
    let mut state = match variational {
        Some(vp) if vp.n() == data.n() && vp.q() == theta.q() => OptState::with_variational(vp),
        Some(_) => {
            return Err(abort(
                Error::Contract("variational parameters must be n x q".into()),
                &theta,
                &trace,
            ))
        }
        None => OptState::new(data.n()),
    };
    if config.proposal_kind.needs_variational() && state.variational.is_none() {
        return Err(abort(
            Error::Config(format!("proposal {} needs variational parameters", config.proposal_kind)),
            &theta,
            &trace,
        ));
    }

    let n = data.n();
    let gamma = T::lit(config.gamma());
    let every = config.diag_every();
    let diag = MappingConfig {
        eta: config.diag_eta,
        n_particles: config.diag_particles(),
        alpha: config.alpha,
        delta: config.delta,
    };
    let mut iteration = 0usize;
    let mut epoch_base = 0usize;
    for (phase, ph) in config.batch_schedule.iter().enumerate() {
        let b = ph.batch_size.min(n);
        let per_epoch = n.div_ceil(b);
        let mut rng = substream(config.seed, TAG_BATCH, phase as u64, 0);
        let mut perm: Vec<usize> = (0..n).collect();
        for t in 0..ph.iterations {
            let epoch = epoch_base + if b == 1 { t / n } else { t / per_epoch };
            let batch: Vec<usize> = if b == 1 {
                vec![rng.random_range(0..n)]
            } else if b == n {
                (0..n).collect()
            } else {
                let slot = t % per_epoch;
                if slot == 0 {
                    perm.shuffle(&mut rng);
                }
                perm[slot * b..((slot + 1) * b).min(n)].to_vec()
            };
            let at = StepIndex {
                iteration,
                epoch,
                phase,
            };
            let (next, mut record) = match sgd_step(&theta, data, &batch, gamma, cset, config, &mut state, at) {
                Ok(v) => v,
                Err(e) => return Err(abort(e, &theta, &trace)),
            };
            theta = next;
            if every > 0 && (iteration + 1).is_multiple_of(every) {
                let seed = splitmix(config.seed ^ splitmix(iteration as u64));
                record.grad_mapping = full_data_score(&theta, data, &diag, seed)
                    .ok()
                    .and_then(|g| finite(mapping_from_score(&theta, cset, &g, T::lit(diag.eta))));
            }
            observe(&record, &theta);
            trace.records.push(record);
            iteration += 1;
        }
        epoch_base += if b == 1 {
            ph.iterations.div_ceil(n)
        } else {
            ph.iterations.div_ceil(per_epoch)
        };
    }
    Ok((theta, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::simulate;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy(seed: u64) -> (Dataset<f64>, ModelParams<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = ModelParams::new(array![[0.5, 1.0, -0.2]], array![[0.6], [-0.4], [0.3]]).unwrap();
        let x = Array2::ones((30, 1));
        let data = simulate(&truth, x, Array2::zeros((30, 3)), &mut rng).unwrap();
        (data, truth)
    }

    fn config(iters: usize) -> OptConfig {
        OptConfig {
            gamma0: 0.1,
            n_particles: 64,
            batch_schedule: vec![BatchPhase {
                batch_size: 1,
                iterations: iters,
            }],
            diag_particles: Some(32),
            seed: 7,
            ..OptConfig::default()
        }
    }

    #[test]
    fn projection_clamps_only_outside() {
        let cset = ConstraintSet::new(1.0).unwrap();
        let inside = ModelParams::new(array![[0.5]], array![[-0.3]]).unwrap();
        assert_eq!(project(&inside, &cset), inside);
        let outside = ModelParams::new(array![[2.0]], array![[-0.3]]).unwrap();
        assert_eq!(project(&outside, &cset).b()[(0, 0)], 1.0);
        assert!(ConstraintSet::new(0.0f64).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn projection_is_idempotent_and_non_expansive(
            a in prop::collection::vec(-30.0f64..30.0, 6),
            b in prop::collection::vec(-30.0f64..30.0, 6),
            r in 0.1f64..20.0,
        ) {
            let cset = ConstraintSet::new(r).unwrap();
            let ta = ModelParams::from_flat(1, 3, 1, &a).unwrap();
            let tb = ModelParams::from_flat(1, 3, 1, &b).unwrap();
            let pa = project(&ta, &cset);
            let pb = project(&tb, &cset);
            prop_assert_eq!(project(&pa, &cset), pa.clone());
            prop_assert!(cset.contains(&pa));
            let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(&pa.to_flat(), &pb.to_flat()) <= dist(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn schedule_arithmetic() {
        let mut c = config(100);
        c.gamma0 = 0.1;
        assert!((c.gamma() - 0.01).abs() < 1e-15);
        let paper = paper_schedule(250, 200, 20);
        assert_eq!(paper[1], BatchPhase { batch_size: 1, iterations: 5000 });
        assert_eq!(paper[0], BatchPhase { batch_size: 250, iterations: 180 });
        c.batch_schedule = paper;
        assert_eq!(c.horizon(), 5000);
        assert_eq!(c.diag_every(), 250);
    }

    #[test]
    fn zero_iterations_returns_projected_init() {
        let (data, _) = toy(1);
        let cset = ConstraintSet::new(0.5).unwrap();
        let init = ModelParams::new(array![[0.9, -2.0, 0.1]], array![[0.2], [0.0], [0.7]]).unwrap();
        let (theta, trace) = fit(&data, &init, &cset, &config(0), None).unwrap();
        assert_eq!(theta, project(&init, &cset));
        assert!(trace.is_empty());
    }

    #[test]
    fn zero_step_size_keeps_theta() {
        let (data, truth) = toy(2);
        let cset = ConstraintSet::default();
        let mut state = OptState::new(data.n());
        let (next, rec) = sgd_step(&truth, &data, &[0, 1, 2], 0.0, &cset, &config(1), &mut state, StepIndex::default()).unwrap();
        assert_eq!(next, truth);
        assert_eq!(rec.step_norm, 0.0);
        assert!(state.moments(1).is_some());
        assert!(!state.needs_recenter(1));
    }

    #[test]
    fn degenerate_estimates_are_not_reused() {
        let (data, truth) = toy(2);
        let mut c = config(1);
        // Two particles with unequal weights always have ESS below 2.
        c.n_particles = 2;
        let mut state = OptState::new(data.n());
        sgd_step(&truth, &data, &[0], 0.0, &ConstraintSet::default(), &c, &mut state, StepIndex::default()).unwrap();
        assert!(state.moments(0).is_none());
        assert!(state.needs_recenter(0));
    }

    #[test]
    fn fit_is_deterministic_and_stays_in_box() {
        let (data, truth) = toy(3);
        let cset = ConstraintSet::new(1.0).unwrap();
        let init = ModelParams::zeros(1, 3, 1).unwrap();
        let mut c = config(40);
        c.batch_schedule.insert(0, BatchPhase { batch_size: 7, iterations: 9 });
        c.diag_every = Some(10);
        let (a, ta) = fit(&data, &init, &cset, &c, None).unwrap();
        let (b, tb) = fit(&data, &init, &cset, &c, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.len(), 49);
        assert!(cset.contains(&a));
        assert!(ta.records.windows(2).all(|w| w[0].iteration < w[1].iteration));
        assert_eq!(ta.grad_mapping_series().len(), 4);
        // epoch of 30 individuals in batches of 7 has 5 batches, covering everyone once
        let mut seen: Vec<usize> = ta.records[..5].iter().flat_map(|r| r.batch.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
        assert_ne!(a, init);
        let _ = truth;
    }

    #[test]
    fn variational_kinds_require_variational_params() {
        let (data, truth) = toy(4);
        let mut c = config(3);
        c.proposal_kind = ProposalKind::Vem;
        let err = fit(&data, &truth, &ConstraintSet::default(), &c, None).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
        let vp = VariationalParams::standard(data.n(), 1);
        assert!(fit(&data, &truth, &ConstraintSet::default(), &c, Some(vp)).is_ok());
    }

    #[test]
    fn mapping_without_projection_is_score_norm() {
        let theta = ModelParams::<f64>::new(array![[0.1]], array![[0.2]]).unwrap();
        let g = ParamGradient { b: array![[0.3]], c: array![[-0.4]] };
        let v = mapping_from_score(&theta, &ConstraintSet::default(), &g, 0.5);
        assert!((v - 0.5).abs() < 1e-15);
        let zero = ParamGradient::zeros_like(&theta);
        assert_eq!(mapping_from_score(&theta, &ConstraintSet::default(), &zero, 0.5), 0.0);
    }
}
