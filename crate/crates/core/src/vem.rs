//! Diagonal-Gaussian variational EM.
//!
//! Each individual gets a surrogate `N(m_i, Diag(s_i²))` for `W_i | Y_i`,
//! parameterized by log standard deviations. The evidence lower bound has a
//! closed form thanks to `E[exp Z] = exp(mean + var/2)` for Gaussian `Z`:
//!
//! ```text
//! ELBO = Σ_ij [Y_ij A_ij − exp(A_ij + ½ Σ_k C_jk² s_ik²) − log Y_ij!]
//!        − ½ Σ_i (‖m_i‖² + Σ_k s_ik²) + Σ_ik log s_ik + nq/2
//! A_ij = (C m_i)_j + (Bᵀ x_i)_j + o_ij
//! ```

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{contract, Error, Result};
use crate::linalg;
use crate::model::{Dataset, ModelParams};
use crate::scalar::Real;

/// Means and log standard deviations of the variational Gaussians, `n×q` each.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams<T> {
    means: Array2<T>,
    log_sds: Array2<T>,
}

impl<T: Real> VariationalParams<T> {
    pub fn new(means: Array2<T>, log_sds: Array2<T>) -> Result<Self> {
        if means.dim() != log_sds.dim() {
            return contract("means and log standard deviations must have equal shapes");
        }
        if means.iter().chain(log_sds.iter()).any(|v| !v.is_finite()) {
            return contract("variational parameters must be finite");
        }
        Ok(Self { means, log_sds })
    }

    /// Standard-normal surrogates: `m = 0`, `s = 1`.
    pub fn standard(n: usize, q: usize) -> Self {
        Self {
            means: Array2::zeros((n, q)),
            log_sds: Array2::zeros((n, q)),
        }
    }

    pub fn means(&self) -> &Array2<T> {
        &self.means
    }

    pub fn log_sds(&self) -> &Array2<T> {
        &self.log_sds
    }

    pub fn n(&self) -> usize {
        self.means.nrows()
    }

    pub fn q(&self) -> usize {
        self.means.ncols()
    }

    /// Diagonal of `S_i`, i.e. `exp(2·log s_i)`.
    pub fn variances(&self, i: usize) -> Array1<T> {
        self.log_sds.row(i).mapv(|l| (l + l).exp())
    }
}

/// Gradient of the ELBO with respect to all four blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient<T> {
    pub b: Array2<T>,
    pub c: Array2<T>,
    pub means: Array2<T>,
    pub log_sds: Array2<T>,
}

struct ElboParts<T> {
    value: T,
    grad: ElboGradient<T>,
    curvature: ElboGradient<T>,
}

fn check_shapes<T: Real>(params: &ModelParams<T>, vp: &VariationalParams<T>, data: &Dataset<T>) -> Result<()> {
    if params.d() != data.d() || params.p() != data.p() {
        return contract("parameters and data disagree on d or p");
    }
    if vp.n() != data.n() || vp.q() != params.q() {
        return contract("variational parameters must be n x q");
    }
    Ok(())
}

/// The evidence lower bound summed over individuals.
pub fn elbo<T: Real>(params: &ModelParams<T>, vp: &VariationalParams<T>, data: &Dataset<T>) -> Result<T> {
    check_shapes(params, vp, data)?;
    Ok(elbo_value(params, vp, data))
}

fn elbo_value<T: Real>(params: &ModelParams<T>, vp: &VariationalParams<T>, data: &Dataset<T>) -> T {
    let cutoff = T::lit(T::EXP_CUTOFF);
    let half = T::lit(0.5);
    let c = params.c();
    let c2 = c.mapv(|v| v * v);
    let a = vp.means.dot(&c.t()) + data.covariates().dot(params.b()) + data.offsets();
    let s2 = vp.log_sds.mapv(|l| (l + l).exp());
    let v = s2.dot(&c2.t()) * half;
    let mut total = T::zero();
    for i in 0..data.n() {
        for j in 0..data.p() {
            let e = a[(i, j)] + v[(i, j)];
            if e > cutoff || e.is_nan() {
                return T::neg_infinity();
            }
            let y = T::lit(data.counts()[(i, j)] as f64);
            total = total + y * a[(i, j)] - e.exp();
        }
    }
    let log_fact: T = data.counts().iter().map(|&y| T::ln_factorial(y)).sum();
    let sq: T = vp.means.iter().map(|&m| m * m).sum::<T>() + s2.sum();
    let nq = T::lit((data.n() * params.q()) as f64);
    total - log_fact - half * sq + vp.log_sds.sum() + half * nq
}

fn elbo_parts<T: Real>(params: &ModelParams<T>, vp: &VariationalParams<T>, data: &Dataset<T>) -> ElboParts<T> {
    let value = elbo_value(params, vp, data);
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let c = params.c();
    let c2 = c.mapv(|v| v * v);
    let x = data.covariates();
    let a = vp.means.dot(&c.t()) + x.dot(params.b()) + data.offsets();
    let s2 = vp.log_sds.mapv(|l| (l + l).exp());
    let e = (a + s2.dot(&c2.t()) * half).mapv(|z| {
        let ez = z.exp();
        if ez.is_finite() {
            ez
        } else {
            T::max_value()
        }
    });
    let y = data.counts().mapv(|v| T::lit(v as f64));
    let resid = &y - &e;

    let grad_b = x.t().dot(&resid);
    let curv_b = x.mapv(|v| v * v).t().dot(&e);

    let (n, q) = vp.means.dim();
    let p = data.p();
    let mut grad_c = resid.t().dot(&vp.means);
    let mut curv_c = Array2::<T>::zeros((p, q));
    for j in 0..p {
        for k in 0..q {
            let mut g = T::zero();
            let mut h = T::zero();
            for i in 0..n {
                let eij = e[(i, j)];
                let lin = vp.means[(i, k)] + c[(j, k)] * s2[(i, k)];
                g = g + eij * c[(j, k)] * s2[(i, k)];
                h = h + eij * (lin * lin + s2[(i, k)]);
            }
            grad_c[(j, k)] = grad_c[(j, k)] - g;
            curv_c[(j, k)] = h;
        }
    }

    let grad_m = resid.dot(c) - &vp.means;
    let curv_m = e.dot(&c2).mapv(|v| v + T::one());

    let ec2 = e.dot(&c2);
    let ec4 = e.dot(&c2.mapv(|v| v * v));
    let mut grad_l = Array2::<T>::zeros((n, q));
    let mut curv_l = Array2::<T>::zeros((n, q));
    for i in 0..n {
        for k in 0..q {
            let s = s2[(i, k)];
            grad_l[(i, k)] = T::one() - s - ec2[(i, k)] * s;
            curv_l[(i, k)] = ec4[(i, k)] * s * s + two * ec2[(i, k)] * s + two * s;
        }
    }

    ElboParts {
        value,
        grad: ElboGradient {
            b: grad_b,
            c: grad_c,
            means: grad_m,
            log_sds: grad_l,
        },
        curvature: ElboGradient {
            b: curv_b,
            c: curv_c,
            means: curv_m,
            log_sds: curv_l,
        },
    }
}

/// ELBO and its gradient in `(B, C, M, log S)`.
pub fn elbo_gradient<T: Real>(
    params: &ModelParams<T>,
    vp: &VariationalParams<T>,
    data: &Dataset<T>,
) -> Result<(T, ElboGradient<T>)> {
    check_shapes(params, vp, data)?;
    let parts = elbo_parts(params, vp, data);
    Ok((parts.value, parts.grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VemConfig {
    pub max_iter: usize,
    /// Initial step multiplier on the curvature-scaled gradient.
    pub learning_rate: f64,
    /// Relative ELBO change below which the fit may stop.
    pub tol: f64,
    /// The fit stops only once `‖∇ELBO‖ < grad_tol · (1 + |ELBO|)`.
    pub grad_tol: f64,
    /// Keep `C` at its initial value.
    pub fix_loadings: bool,
    /// Keep `(B, C)` fixed and optimize only the variational parameters.
    pub fix_model: bool,
}

impl Default for VemConfig {
    fn default() -> Self {
        Self {
            max_iter: 20_000,
            learning_rate: 1.0,
            tol: 1e-6,
            grad_tol: 1e-4,
            fix_loadings: false,
            fix_model: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VemFit<T> {
    pub params: ModelParams<T>,
    pub variational: VariationalParams<T>,
    /// ELBO after every accepted step, starting with the initial value.
    pub elbo_trace: Vec<T>,
    pub converged: bool,
    pub iterations: usize,
}

struct Blocks<'a, T> {
    fix_b: bool,
    fix_c: bool,
    grad: &'a ElboGradient<T>,
}

impl<T: Real> Blocks<'_, T> {
    fn norm(&self) -> T {
        let mut s = T::zero();
        if !self.fix_b {
            s = s + self.grad.b.iter().map(|&v| v * v).sum::<T>();
        }
        if !self.fix_c {
            s = s + self.grad.c.iter().map(|&v| v * v).sum::<T>();
        }
        s = s + self.grad.means.iter().map(|&v| v * v).sum::<T>();
        s = s + self.grad.log_sds.iter().map(|&v| v * v).sum::<T>();
        s.sqrt()
    }
}

fn precondition<T: Real>(g: &Array2<T>, h: &Array2<T>, lr: T) -> Array2<T> {
    let floor = T::lit(1e-8);
    let mut out = g.clone();
    out.zip_mut_with(h, |gv, &hv| *gv = lr * *gv / (hv.abs() + floor));
    out
}

/// Joint ascent of the ELBO over `(B, C, M, log S)` with curvature-scaled
/// gradient steps; a step that lowers the ELBO is retried at half the rate.
pub fn vem_fit<T: Real>(
    data: &Dataset<T>,
    theta_init: &ModelParams<T>,
    vp_init: Option<VariationalParams<T>>,
    config: &VemConfig,
) -> Result<VemFit<T>> {
    let mut params = theta_init.clone();
    let mut vp = vp_init.unwrap_or_else(|| VariationalParams::standard(data.n(), theta_init.q()));
    check_shapes(&params, &vp, data)?;
    let fix_b = config.fix_model;
    let fix_c = config.fix_model || config.fix_loadings;

    let mut parts = elbo_parts(&params, &vp, data);
    if !parts.value.is_finite() {
        return Err(Error::NonFiniteElbo { iteration: 0 });
    }
    let mut trace = vec![parts.value];
    let mut lr = T::lit(config.learning_rate);
    let lr_max = T::lit(config.learning_rate.max(1.0));
    let mut converged = false;
    let mut iterations = 0;

    for it in 0..config.max_iter {
        iterations = it + 1;
        let gnorm = Blocks {
            fix_b,
            fix_c,
            grad: &parts.grad,
        }
        .norm();
        let stationary = gnorm < T::lit(config.grad_tol) * (T::one() + parts.value.abs());

        let mut accepted = None;
        while lr > T::lit(1e-20) {
            let b = if fix_b {
                params.b().clone()
            } else {
                params.b() + &precondition(&parts.grad.b, &parts.curvature.b, lr)
            };
            let c = if fix_c {
                params.c().clone()
            } else {
                params.c() + &precondition(&parts.grad.c, &parts.curvature.c, lr)
            };
            let m = &vp.means + &precondition(&parts.grad.means, &parts.curvature.means, lr);
            let l = &vp.log_sds + &precondition(&parts.grad.log_sds, &parts.curvature.log_sds, lr);
            let cand = ModelParams::new(b, c).and_then(|cp| Ok((cp, VariationalParams::new(m, l)?)));
            if let Ok((cp, cv)) = cand {
                let value = elbo_value(&cp, &cv, data);
                if value.is_finite() && value >= parts.value {
                    accepted = Some((cp, cv, value));
                    break;
                }
            }
            lr = lr * T::lit(0.5);
        }
        let Some((cp, cv, value)) = accepted else {
            converged = stationary;
            break;
        };
        let rel = (value - parts.value).abs() / (T::one() + parts.value.abs());
        params = cp;
        vp = cv;
        parts = elbo_parts(&params, &vp, data);
        trace.push(parts.value);
        lr = (lr * T::lit(1.5)).min(lr_max);

        let gnorm = Blocks {
            fix_b,
            fix_c,
            grad: &parts.grad,
        }
        .norm();
        if rel < T::lit(config.tol)
            && gnorm < T::lit(config.grad_tol) * (T::one() + parts.value.abs())
        {
            converged = true;
            break;
        }
    }

    Ok(VemFit {
        params,
        variational: vp,
        elbo_trace: trace,
        converged,
        iterations,
    })
}

/// Starting point without a variational fit: per-column Poisson regression
/// for `B`, and the leading scaled eigenvectors of the covariance of
/// `log(1+Y)` residuals for `C`.
pub fn init_heuristic<T: Real>(data: &Dataset<T>, q: usize) -> Result<ModelParams<T>> {
    let (n, p, d) = (data.n(), data.p(), data.d());
    if n <= q {
        return contract(format!("need more individuals ({n}) than latent dimensions ({q})"));
    }
    if q == 0 || q > p {
        return contract(format!("latent dimension {q} must lie in 1..={p}"));
    }
    let x = data.covariates().mapv(|v| v.as_f64());
    let o = data.offsets().mapv(|v| v.as_f64());
    let y = data.counts().mapv(|v| v as f64);

    let mut b = Array2::<f64>::zeros((d, p));
    for j in 0..p {
        let beta = poisson_glm(&x, y.column(j).to_owned(), o.column(j).to_owned());
        b.column_mut(j).assign(&beta);
    }

    let logy = y.mapv(|v| v.ln_1p()) - &o;
    let xtx = x.t().dot(&x) + Array2::<f64>::eye(d) * 1e-10;
    let l = linalg::cholesky(xtx.view())
        .ok_or_else(|| Error::Factorization("covariate Gram matrix".into()))?;
    let mut resid = logy.clone();
    for j in 0..p {
        let coef = linalg::cholesky_solve(l.view(), x.t().dot(&logy.column(j)).view());
        let fitted = x.dot(&coef);
        resid.column_mut(j).zip_mut_with(&fitted, |r, f| *r -= f);
    }
    let mean = resid.mean_axis(Axis(0)).expect("n > 0");
    let centered = &resid - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);

    let c = leading_factors(&cov, q).unwrap_or_else(|| {
        let mut c = Array2::<f64>::zeros((p, q));
        for k in 0..q {
            c[(k, k)] = 0.1;
        }
        c
    });
    ModelParams::new(b.mapv(T::lit), c.mapv(T::lit))
}

fn leading_factors(cov: &Array2<f64>, q: usize) -> Option<Array2<f64>> {
    let p = cov.nrows();
    if cov.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[(i, j)]));
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let trace: f64 = (0..p).map(|k| cov[(k, k)]).sum();
    let floor = 1e-10 * trace.max(1.0);
    let mut c = Array2::<f64>::zeros((p, q));
    for (k, &idx) in order.iter().take(q).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > floor) {
            return None;
        }
        let v = eig.eigenvectors.column(idx);
        // sign convention: largest-magnitude entry positive
        let pivot = (0..p).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..p {
            c[(j, k)] = sign * v[j] * lambda.sqrt();
        }
    }
    Some(c)
}

/// Newton iterations for a Poisson regression with log link and offsets.
fn poisson_glm(x: &Array2<f64>, y: Array1<f64>, o: Array1<f64>) -> Array1<f64> {
    let d = x.ncols();
    let objective = |beta: &Array1<f64>| -> f64 {
        let eta = x.dot(beta) + &o;
        eta.iter().zip(y.iter()).map(|(&e, &yi)| yi * e - e.exp()).sum()
    };
    let mut beta = Array1::<f64>::zeros(d);
    let mut f = objective(&beta);
    for _ in 0..200 {
        let mu = (x.dot(&beta) + &o).mapv(f64::exp);
        let grad = x.t().dot(&(&y - &mu));
        if grad.iter().all(|g| g.abs() < 1e-10) {
            break;
        }
        let mut h = Array2::<f64>::eye(d) * 1e-10;
        for (row, &m) in x.rows().into_iter().zip(mu.iter()) {
            for a in 0..d {
                for b in 0..d {
                    h[(a, b)] += m * row[a] * row[b];
                }
            }
        }
        let Some(l) = linalg::cholesky(h.view()) else {
            break;
        };
        let step = linalg::cholesky_solve(l.view(), grad.view());
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let cand = &beta + &(&step * t);
            let fc = objective(&cand);
            if fc.is_finite() && fc >= f {
                beta = cand;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    beta
}
