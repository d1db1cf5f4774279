use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{concatenate, Array2, Axis};
use plnpca::optimizer::{fit_with_observer, OptConfig};
use plnpca::proposal::{adapt_snis, adapt_vem};
use plnpca::vem::{init_heuristic, vem_fit, VemFit};
use plnpca::{
    BatchPhase, ConstraintSet, Dataset, GaussianMixtureProposal, ModelParams, ProposalKind, Real, VariationalParams,
    VemConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{Command, Common, DataArgs, DiagnoseArgs, EvalArgs, FitArgs, SimulateArgs, VemArgs, VemSettings};
use crate::config::KeyValues;
use crate::estimate::{self, Row, Stats, TAG_DIAGNOSE, TAG_PILOT};
use crate::io;

/// Runs one subcommand; `Ok(false)` means the run finished but recorded errors.
pub fn run(command: Command) -> Result<bool> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Vem(a) => vem(a),
        Command::Fit(a) => fit(a),
        Command::Eval(a) => eval(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn out_dir(kv: &KeyValues, common: &Common) -> Result<PathBuf> {
    let out: PathBuf = kv.pick_or(common.out.clone(), "out", PathBuf::from("."))?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok(out)
}

struct DataPaths {
    y: PathBuf,
    x: Option<PathBuf>,
    o: Option<PathBuf>,
}

impl DataPaths {
    fn resolve(kv: &KeyValues, a: &DataArgs) -> Result<Self> {
        Ok(Self {
            y: kv.require(a.y.clone(), "y")?,
            x: kv.pick(a.x.clone(), "x")?,
            o: kv.pick(a.o.clone(), "o")?,
        })
    }

    fn load(&self) -> Result<Dataset<f64>> {
        io::load_dataset(&self.y, self.x.as_deref(), self.o.as_deref())
    }

    fn hashes(&self) -> Result<Vec<InputFile>> {
        let mut files = vec![("y", &self.y)];
        files.extend(self.x.iter().map(|p| ("x", p)));
        files.extend(self.o.iter().map(|p| ("o", p)));
        files
            .into_iter()
            .map(|(role, p)| {
                Ok(InputFile {
                    role: role.to_string(),
                    path: p.display().to_string(),
                    sha256: io::content_hash(p)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
struct InputFile {
    role: String,
    path: String,
    /// Git-style blob hash: SHA-256 of `blob <len>\0` followed by the bytes.
    sha256: String,
}

fn vem_config(kv: &KeyValues, a: &VemSettings) -> Result<VemConfig> {
    let defaults = VemConfig::default();
    Ok(VemConfig {
        max_iter: kv.pick_or(a.vem_max_iter, "vem-max-iter", defaults.max_iter)?,
        tol: kv.pick_or(a.vem_tol, "vem-tol", defaults.tol)?,
        ..defaults
    })
}

fn check_dims(theta: &ModelParams<f64>, data: &Dataset<f64>, what: &str) -> Result<()> {
    if theta.d() != data.d() || theta.p() != data.p() {
        bail!(
            "{what} is for d={}, p={} but the data have d={}, p={}",
            theta.d(),
            theta.p(),
            data.d(),
            data.p()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Serialize)]
struct SimulateMeta {
    seed: u64,
    n: usize,
    p: usize,
    q: usize,
    d: usize,
    sigma_diag: Option<f64>,
    theta_source: String,
}

/// Intercept row near 1, other covariate effects near 0, loadings scaled so
/// that the mean latent variance is `sigma_diag`.
pub fn random_truth(rng: &mut ChaCha8Rng, d: usize, p: usize, q: usize, sigma_diag: f64) -> Result<ModelParams<f64>> {
    let mut b = Array2::<f64>::zeros((d, p));
    for ((k, _), v) in b.indexed_iter_mut() {
        *v = if k == 0 { 1.0 + 0.5 * f64::std_normal(rng) } else { 0.3 * f64::std_normal(rng) };
    }
    let mut c = Array2::from_shape_simple_fn((p, q), || f64::std_normal(rng));
    let mean_diag = c.iter().map(|v| v * v).sum::<f64>() / p as f64;
    if mean_diag > 0.0 {
        c *= (sigma_diag / mean_diag).sqrt();
    }
    Ok(ModelParams::new(b, c)?)
}

fn simulate(a: SimulateArgs) -> Result<bool> {
    let kv = KeyValues::load(a.common.config.as_deref())?;
    let out = out_dir(&kv, &a.common)?;
    let seed = kv.pick_or(a.seed, "seed", 0)?;
    let n = kv.pick_or(a.n, "n", 250)?;
    let theta_path: Option<PathBuf> = kv.pick(a.theta.clone(), "theta")?;
    let p = kv.pick(a.p, "p")?;
    let q = kv.pick(a.q, "q")?;
    let d = kv.pick(a.d, "d")?;
    let sigma_diag = kv.pick(a.sigma_diag, "sigma-diag")?;
    kv.finish("simulate")?;
    if n == 0 {
        bail!("n must be positive");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (theta, source, sigma_diag) = match theta_path {
        Some(path) => {
            let theta = io::read_theta(&path)?;
            for (name, given, actual) in [("p", p, theta.p()), ("q", q, theta.q()), ("d", d, theta.d())] {
                if given.is_some_and(|g| g != actual) {
                    bail!("--{name} disagrees with {}", path.display());
                }
            }
            (theta, path.display().to_string(), None)
        }
        None => {
            let (p, q, d) = (p.unwrap_or(30), q.unwrap_or(3), d.unwrap_or(1));
            if p == 0 || q == 0 || d == 0 {
                bail!("p, q and d must be positive");
            }
            let s = sigma_diag.unwrap_or(0.5);
            if !(s > 0.0) || !s.is_finite() {
                bail!("sigma-diag must be positive");
            }
            (random_truth(&mut rng, d, p, q, s)?, "random".to_string(), Some(s))
        }
    };
    let (p, d) = (theta.p(), theta.d());
    let mut x = Array2::<f64>::ones((n, d));
    for k in 1..d {
        x.column_mut(k).iter_mut().for_each(|v| *v = f64::std_normal(&mut rng));
    }
    let data = plnpca::model::simulate(&theta, x, Array2::zeros((n, p)), &mut rng)?;

    io::write_counts(&out.join("Y.csv"), data.counts())?;
    io::write_real(&out.join("X.csv"), "x", data.covariates())?;
    io::write_real(&out.join("O.csv"), "o", data.offsets())?;
    io::write_theta(&out.join("theta_true.csv"), &theta)?;
    let meta = SimulateMeta {
        seed,
        n,
        p,
        q: theta.q(),
        d,
        sigma_diag,
        theta_source: source,
    };
    io::write_json(&out.join("meta.json"), &meta)?;
    log::info!("simulated n={n}, p={p}, q={}, d={d} into {}", theta.q(), out.display());
    Ok(true)
}

// ---------------------------------------------------------------- vem

#[derive(Debug, Serialize)]
struct VemReport {
    elbo: f64,
    iterations: usize,
    converged: bool,
    elbo_trace: Vec<f64>,
}

impl From<&VemFit<f64>> for VemReport {
    fn from(f: &VemFit<f64>) -> Self {
        Self {
            elbo: f.elbo_trace.last().copied().unwrap_or(f64::NAN),
            iterations: f.iterations,
            converged: f.converged,
            elbo_trace: f.elbo_trace.clone(),
        }
    }
}

fn write_variational(path: &Path, vp: &VariationalParams<f64>) -> Result<()> {
    let q = vp.q();
    let mut header: Vec<String> = (1..=q).map(|k| format!("m{k}")).collect();
    header.extend((1..=q).map(|k| format!("log_sd{k}")));
    let table = concatenate(Axis(1), &[vp.means().view(), vp.log_sds().view()])?;
    io::write_table(path, &header, &table)
}

fn vem(a: VemArgs) -> Result<bool> {
    let kv = KeyValues::load(a.common.config.as_deref())?;
    let out = out_dir(&kv, &a.common)?;
    let paths = DataPaths::resolve(&kv, &a.data)?;
    let theta_init: Option<PathBuf> = kv.pick(a.theta_init.clone(), "theta-init")?;
    let q = kv.pick(a.q, "q")?;
    let config = vem_config(&kv, &a.vem)?;
    kv.finish("vem")?;

    let data = paths.load()?;
    let init = match theta_init {
        Some(path) => {
            let theta = io::read_theta(&path)?;
            check_dims(&theta, &data, "the initial parameter file")?;
            theta
        }
        None => init_heuristic(&data, q.ok_or_else(|| anyhow!("missing required setting --q"))?)?,
    };
    let fit = vem_fit(&data, &init, None, &config)?;
    io::write_theta(&out.join("theta_vem.csv"), &fit.params)?;
    write_variational(&out.join("variational.csv"), &fit.variational)?;
    io::write_json(&out.join("vem.json"), &VemReport::from(&fit))?;
    if !fit.converged {
        log::warn!("variational fit stopped after {} iterations without converging", fit.iterations);
    }
    Ok(true)
}

// ---------------------------------------------------------------- fit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Init {
    Vem,
    Heuristic,
    File,
}

impl FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vem" => Ok(Self::Vem),
            "heuristic" => Ok(Self::Heuristic),
            "file" => Ok(Self::File),
            other => Err(format!("unknown init `{other}` (expected vem, heuristic or file)")),
        }
    }
}

#[derive(Debug, Serialize)]
struct FitEcho {
    init: Init,
    theta_init: Option<String>,
    q: usize,
    radius: f64,
    vem_max_iter: usize,
    vem_tol: f64,
    #[serde(flatten)]
    optimizer: OptConfig,
}

#[derive(Debug, Serialize)]
struct Dims {
    n: usize,
    p: usize,
    q: usize,
    d: usize,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    status: &'static str,
    errors: Vec<String>,
    iterations: usize,
    /// Sum of per-individual marginal log-likelihood estimates at the final parameters.
    final_loglik: Option<f64>,
    final_loglik_se: Option<f64>,
    /// `-final_loglik / n`, on the scale of the per-iteration trace loss.
    final_loss: Option<f64>,
    final_loglik_dropped: Option<usize>,
    runtime_seconds: f64,
    inputs: Vec<InputFile>,
    dims: Dims,
    config: FitEcho,
    vem: Option<VemReport>,
}

fn schedule(kv: &KeyValues, a: &FitArgs, n: usize) -> Result<Vec<BatchPhase>> {
    let burn_epochs = kv.pick_or(a.burn_in_epochs, "burn-in-epochs", 0)?;
    let burn_batch = kv.pick_or(a.burn_in_batch, "burn-in-batch", n)?;
    let batch = kv.pick_or(a.batch_size, "batch-size", 1)?;
    let iterations = kv.pick(a.iterations, "iterations")?;
    let epochs = kv.pick_or(a.epochs, "epochs", 20)?;
    if batch == 0 || burn_batch == 0 {
        bail!("batch sizes must be positive");
    }
    let mut phases = Vec::new();
    if burn_epochs > 0 {
        phases.push(BatchPhase::epochs(n, burn_epochs, burn_batch));
    }
    phases.push(match iterations {
        Some(t) => BatchPhase {
            batch_size: batch,
            iterations: t,
        },
        None => BatchPhase::epochs(n, epochs, batch),
    });
    Ok(phases)
}

fn fit(a: FitArgs) -> Result<bool> {
    let started = Instant::now();
    let kv = KeyValues::load(a.common.config.as_deref())?;
    let out = out_dir(&kv, &a.common)?;
    let paths = DataPaths::resolve(&kv, &a.data)?;
    let theta_init: Option<PathBuf> = kv.pick(a.theta_init.clone(), "theta-init")?;
    let init: Init = kv.pick_or(
        a.init.as_deref().map(Init::from_str).transpose().map_err(|e| anyhow!(e))?,
        "init",
        if theta_init.is_some() { Init::File } else { Init::Vem },
    )?;
    let q_setting: Option<usize> = kv.pick(a.q, "q")?;
    let radius = kv.pick_or(a.radius, "radius", plnpca::optimizer::DEFAULT_RADIUS)?;
    let vem_settings = vem_config(&kv, &a.vem)?;
    let data = paths.load()?;
    let defaults = OptConfig::default();
    let config = OptConfig {
        gamma0: kv.pick_or(a.gamma0, "gamma0", defaults.gamma0)?,
        n_particles: kv.pick_or(a.n_particles, "n-particles", defaults.n_particles)?,
        batch_schedule: schedule(&kv, &a, data.n())?,
        alpha: kv.pick_or(a.alpha, "alpha", defaults.alpha)?,
        delta: kv.pick_or(a.delta, "delta", defaults.delta)?,
        proposal_kind: kv.pick_or(a.proposal_kind, "proposal-kind", defaults.proposal_kind)?,
        diag_eta: kv.pick_or(a.diag_eta, "diag-eta", defaults.diag_eta)?,
        diag_particles: kv.pick(a.diag_particles, "diag-particles")?,
        diag_every: kv.pick(a.diag_every, "diag-every")?,
        seed: kv.pick_or(a.seed, "seed", defaults.seed)?,
    };
    kv.finish("fit")?;
    config.validate()?;
    let cset = ConstraintSet::new(radius)?;

    let file_theta = match (init, &theta_init) {
        (Init::File, None) => bail!("--init file needs --theta-init"),
        (Init::File, Some(path)) => {
            let theta = io::read_theta(path)?;
            check_dims(&theta, &data, "the initial parameter file")?;
            Some(theta)
        }
        (_, Some(_)) => bail!("--theta-init is only used with --init file"),
        (_, None) => None,
    };
    let q = match (&file_theta, q_setting) {
        (Some(t), Some(q)) if t.q() != q => bail!("--q disagrees with the initial parameter file"),
        (Some(t), _) => t.q(),
        (None, Some(q)) if q > 0 => q,
        (None, Some(_)) => bail!("q must be positive"),
        (None, None) => bail!("missing required setting --q"),
    };

    let mut summary = FitSummary {
        status: "ok",
        errors: Vec::new(),
        iterations: 0,
        final_loglik: None,
        final_loglik_se: None,
        final_loss: None,
        final_loglik_dropped: None,
        runtime_seconds: 0.0,
        inputs: paths.hashes()?,
        dims: Dims {
            n: data.n(),
            p: data.p(),
            q,
            d: data.d(),
        },
        config: FitEcho {
            init,
            theta_init: theta_init.as_ref().map(|p| p.display().to_string()),
            q,
            radius,
            vem_max_iter: vem_settings.max_iter,
            vem_tol: vem_settings.tol,
            optimizer: config.clone(),
        },
        vem: None,
    };
    if let Err(e) = fit_pipeline(&data, file_theta, &cset, &config, &vem_settings, &out, &mut summary) {
        summary.errors.push(format!("{e:#}"));
    }
    if !summary.errors.is_empty() {
        summary.status = "error";
    }
    summary.runtime_seconds = started.elapsed().as_secs_f64();
    io::write_json(&out.join("summary.json"), &summary)?;
    for e in &summary.errors {
        log::error!("{e}");
    }
    Ok(summary.errors.is_empty())
}

fn fit_pipeline(
    data: &Dataset<f64>,
    file_theta: Option<ModelParams<f64>>,
    cset: &ConstraintSet<f64>,
    config: &OptConfig,
    vem_settings: &VemConfig,
    out: &Path,
    summary: &mut FitSummary,
) -> Result<()> {
    let q = summary.dims.q;
    let (theta0, mut variational) = match (summary.config.init, file_theta) {
        (_, Some(theta)) => (theta, None),
        (Init::Heuristic, None) => (init_heuristic(data, q)?, None),
        (_, None) => {
            let start = init_heuristic(data, q)?;
            let vf = vem_fit(data, &start, None, vem_settings).context("variational initialization")?;
            summary.vem = Some(VemReport::from(&vf));
            (vf.params, Some(vf.variational))
        }
    };
    if config.proposal_kind.needs_variational() && variational.is_none() {
        let frozen = VemConfig {
            fix_model: true,
            ..vem_settings.clone()
        };
        let vf = vem_fit(data, &theta0, None, &frozen).context("variational parameters for the proposal")?;
        variational = Some(vf.variational);
    }
    io::write_theta(&out.join("theta_init.csv"), &theta0)?;

    let trace_path = out.join("trace.jsonl");
    let mut trace_out = BufWriter::new(
        File::create(&trace_path).with_context(|| format!("cannot create {}", trace_path.display()))?,
    );
    let mut write_error: Option<std::io::Error> = None;
    let result = fit_with_observer(data, &theta0, cset, config, variational, |rec, _| {
        if write_error.is_none() {
            let line = serde_json::to_string(rec).expect("trace records serialize");
            if let Err(e) = writeln!(trace_out, "{line}") {
                write_error = Some(e);
            }
        }
    });
    trace_out
        .flush()
        .with_context(|| format!("cannot write {}", trace_path.display()))?;
    if let Some(e) = write_error {
        return Err(e).with_context(|| format!("cannot write {}", trace_path.display()));
    }
    let theta = match result {
        Ok((theta, trace)) => {
            summary.iterations = trace.len();
            theta
        }
        Err(aborted) => {
            summary.iterations = aborted.trace.len();
            io::write_theta(&out.join("theta_hat.csv"), &aborted.params)?;
            return Err(anyhow!("{aborted}"));
        }
    };
    io::write_theta(&out.join("theta_hat.csv"), &theta)?;

    let stats = estimate::all_individuals(
        &theta,
        data,
        config.diag_particles(),
        config.alpha,
        config.delta,
        config.seed,
    );
    let (total, se, dropped) = estimate::total_loglik(&stats);
    if dropped < data.n() {
        summary.final_loglik = Some(total);
        summary.final_loglik_se = Some(se);
        summary.final_loss = Some(-total / (data.n() - dropped) as f64);
    }
    summary.final_loglik_dropped = Some(dropped);
    Ok(())
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
struct Rmse {
    sigma_a: f64,
    sigma_b: f64,
    b_a: f64,
    b_b: f64,
}

#[derive(Debug, Serialize)]
struct IndividualPair {
    individual: usize,
    a: Row,
    b: Row,
}

#[derive(Debug, Serialize)]
struct EvalReport {
    theta_a: String,
    theta_b: String,
    theta_true: Option<String>,
    n_particles: usize,
    alpha: f64,
    delta: f64,
    seed: u64,
    /// Both parameter values reuse the same per-individual random streams.
    shared_particle_seeds: bool,
    /// `Σ_i [log p̂_b(Y_i) − log p̂_a(Y_i)]` over individuals estimated at both values.
    log_ratio: Option<f64>,
    /// Treats the two estimates as independent, which overstates the error under shared seeds.
    log_ratio_se: Option<f64>,
    individuals_used: usize,
    rmse: Option<Rmse>,
    individuals: Vec<IndividualPair>,
}

fn eval(a: EvalArgs) -> Result<bool> {
    let kv = KeyValues::load(a.common.config.as_deref())?;
    let out = out_dir(&kv, &a.common)?;
    let paths = DataPaths::resolve(&kv, &a.data)?;
    let path_a: PathBuf = kv.require(a.theta_a.clone(), "theta-a")?;
    let path_b: PathBuf = kv.require(a.theta_b.clone(), "theta-b")?;
    let path_true: Option<PathBuf> = kv.pick(a.theta_true.clone(), "theta-true")?;
    let defaults = OptConfig::default();
    let n_particles = kv.pick_or(a.n_particles, "n-particles", defaults.n_particles)?;
    let alpha = kv.pick_or(a.alpha, "alpha", defaults.alpha)?;
    let delta = kv.pick_or(a.delta, "delta", defaults.delta)?;
    let seed = kv.pick_or(a.seed, "seed", 0)?;
    kv.finish("eval")?;
    if n_particles < 2 {
        bail!("at least two particles are required");
    }

    let data = paths.load()?;
    let theta_a = io::read_theta(&path_a)?;
    let theta_b = io::read_theta(&path_b)?;
    check_dims(&theta_a, &data, "theta-a")?;
    check_dims(&theta_b, &data, "theta-b")?;
    let stats_a = estimate::all_individuals(&theta_a, &data, n_particles, alpha, delta, seed);
    let stats_b = estimate::all_individuals(&theta_b, &data, n_particles, alpha, delta, seed);

    let mut log_ratio = 0.0;
    let mut var = 0.0;
    let mut used = 0;
    let mut individuals = Vec::with_capacity(data.n());
    for (i, (sa, sb)) in stats_a.iter().zip(&stats_b).enumerate() {
        if let (Some(x), Some(y)) = (sa, sb) {
            if x.mll.is_finite() && y.mll.is_finite() {
                log_ratio += y.mll - x.mll;
                var += x.mll_se.powi(2) + y.mll_se.powi(2);
                used += 1;
            }
        }
        individuals.push(IndividualPair {
            individual: i,
            a: sa.as_ref().map(Row::from).unwrap_or_default(),
            b: sb.as_ref().map(Row::from).unwrap_or_default(),
        });
    }
    let rmse = match &path_true {
        Some(path) => {
            let truth = io::read_theta(path)?;
            check_dims(&truth, &data, "theta-true")?;
            let sigma = truth.sigma();
            Some(Rmse {
                sigma_a: estimate::rmse(&theta_a.sigma(), &sigma),
                sigma_b: estimate::rmse(&theta_b.sigma(), &sigma),
                b_a: estimate::rmse(theta_a.b(), truth.b()),
                b_b: estimate::rmse(theta_b.b(), truth.b()),
            })
        }
        None => None,
    };
    let report = EvalReport {
        theta_a: path_a.display().to_string(),
        theta_b: path_b.display().to_string(),
        theta_true: path_true.map(|p| p.display().to_string()),
        n_particles,
        alpha,
        delta,
        seed,
        shared_particle_seeds: true,
        log_ratio: (used > 0).then_some(log_ratio),
        log_ratio_se: (used > 0).then_some(var.sqrt()),
        individuals_used: used,
        rmse,
        individuals,
    };
    io::write_json(&out.join("eval.json"), &report)?;
    Ok(true)
}

// ---------------------------------------------------------------- diagnose

fn parse_kinds(s: Option<String>) -> Result<Vec<ProposalKind>> {
    match s {
        None => Ok(ProposalKind::ALL.to_vec()),
        Some(list) => list
            .split(',')
            .map(|k| k.trim().parse::<ProposalKind>().map_err(|e| anyhow!(e)))
            .collect(),
    }
}

fn diagnose(a: DiagnoseArgs) -> Result<bool> {
    let kv = KeyValues::load(a.common.config.as_deref())?;
    let out = out_dir(&kv, &a.common)?;
    let paths = DataPaths::resolve(&kv, &a.data)?;
    let theta_path: PathBuf = kv.require(a.theta.clone(), "theta")?;
    let kinds = parse_kinds(kv.pick(a.kinds.clone(), "kinds")?)?;
    let defaults = OptConfig::default();
    let n_particles = kv.pick_or(a.n_particles, "n-particles", defaults.n_particles)?;
    let alpha = kv.pick_or(a.alpha, "alpha", defaults.alpha)?;
    let delta = kv.pick_or(a.delta, "delta", defaults.delta)?;
    let seed = kv.pick_or(a.seed, "seed", 0)?;
    let relaxed = a.relaxed || kv.pick::<bool>(None, "relaxed")?.unwrap_or(false);
    let vem_settings = VemConfig {
        fix_model: true,
        ..vem_config(&kv, &a.vem)?
    };
    kv.finish("diagnose")?;
    if n_particles < 2 {
        bail!("at least two particles are required");
    }
    if relaxed {
        if !(alpha > 0.0 && alpha <= 1.0) || !(delta >= 1.0) {
            bail!("relaxed proposals still need alpha in (0, 1] and delta >= 1");
        }
    } else {
        OptConfig {
            alpha,
            delta,
            ..defaults
        }
        .validate()?;
    }

    let data = paths.load()?;
    let theta = io::read_theta(&theta_path)?;
    check_dims(&theta, &data, "the parameter file")?;

    // Adapters validate the defensive settings, so relaxed runs build with
    // valid placeholders and swap the mixture settings afterwards.
    let (build_alpha, build_delta) = if relaxed { (0.5, 2.0) } else { (alpha, delta) };
    let finish = |kind: ProposalKind, prop: GaussianMixtureProposal<f64>| -> plnpca::Result<GaussianMixtureProposal<f64>> {
        if !relaxed {
            return Ok(prop);
        }
        let a = if kind == ProposalKind::Vem { prop.alpha() } else { alpha };
        GaussianMixtureProposal::relaxed(prop.mean().clone(), prop.chol().clone(), a, delta)
    };
    let variational = if kinds.iter().any(|k| k.needs_variational()) {
        Some(vem_fit(&data, &theta, None, &vem_settings).context("variational fit at the given parameters")?)
    } else {
        None
    };
    let pilot: Vec<Option<Stats>> = if kinds.contains(&ProposalKind::Snis) {
        (0..data.n())
            .map(|i| {
                estimate::hessian_at_mode(&theta, &data, i, build_alpha, build_delta)
                    .and_then(|p| finish(ProposalKind::Hessian, p))
                    .and_then(|p| estimate::sample_stats(&theta, &data, i, &p, n_particles, seed, TAG_PILOT))
                    .map_err(|e| log::warn!("pilot run, individual {i}: {e}"))
                    .ok()
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut rows: Vec<[String; 5]> = Vec::new();
    for &kind in &kinds {
        for i in 0..data.n() {
            let prop = match kind {
                ProposalKind::Hessian => estimate::hessian_at_mode(&theta, &data, i, build_alpha, build_delta),
                ProposalKind::Snis => match pilot.get(i).and_then(Option::as_ref) {
                    Some(s) => adapt_snis(s.moments.0.clone(), s.moments.1.view(), build_alpha, build_delta),
                    None => Err(plnpca::Error::Adaptation("pilot run failed".into())),
                },
                ProposalKind::Vem | ProposalKind::VemMix => {
                    let vp = &variational.as_ref().expect("fitted above").variational;
                    adapt_vem(
                        vp.means().row(i).to_owned(),
                        vp.variances(i).view(),
                        build_alpha,
                        build_delta,
                        kind == ProposalKind::VemMix,
                    )
                }
            };
            let stats = prop
                .and_then(|p| finish(kind, p))
                .and_then(|p| estimate::sample_stats(&theta, &data, i, &p, n_particles, seed, TAG_DIAGNOSE));
            let row = match &stats {
                Ok(s) => Row::from(s),
                Err(e) => {
                    log::warn!("{kind}, individual {i}: {e}");
                    Row::default()
                }
            };
            let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            rows.push([
                kind.to_string(),
                i.to_string(),
                cell(row.forward_kl),
                cell(row.reverse_kl),
                cell(row.ess),
            ]);
        }
    }
    let path = out.join("diagnostics.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(["kind", "individual", "forward_kl", "reverse_kl", "ess"])?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(true)
}
