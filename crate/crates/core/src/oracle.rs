//! Exact conjugate Gaussian-linear machinery.
//!
//! For `theta ~ N(mu0, diag(v0))` and `y = X theta + N(0, noise_var I)` the
//! posterior, the marginal likelihood and its gradient with respect to
//! `(mu0, log v0)` are all available in closed form. This module uses them
//! as ground truth for the meta-gradient estimators and runs the theory
//! studies on top of them.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{expected_prior_score, DiagGaussian, PriorGrad};
use crate::nn::Dataset;
use crate::stats::{self, PairedTest};
use crate::tasks::{derive_seed, sample_conjugate_task, ConjugateTaskFamily};
use crate::vi::Likelihood;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A Gaussian with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FullGaussian {
    pub fn from_diag(q: &DiagGaussian) -> Self {
        Self {
            mean: DVector::from_column_slice(&q.mean),
            cov: DMatrix::from_diagonal(&DVector::from_iterator(
                q.dim(),
                q.log_var.iter().map(|l| l.exp()),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Marginal means and variances as a diagonal Gaussian.
    pub fn marginals(&self) -> DiagGaussian {
        DiagGaussian {
            mean: self.mean.iter().copied().collect(),
            log_var: self.cov.diagonal().iter().map(|v| v.ln()).collect(),
        }
    }

    pub fn log_pdf(&self, x: &DVector<f64>) -> Result<f64> {
        mvn_log_pdf(x, &self.mean, &self.cov)
    }

    /// General Gaussian `KL(self || other)`.
    pub fn kl(&self, other: &FullGaussian) -> Result<f64> {
        let k = self.dim();
        let chol_p = other
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("KL: covariance not positive definite"))?;
        let chol_q = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("KL: covariance not positive definite"))?;
        let d = &other.mean - &self.mean;
        let trace = chol_p.solve(&self.cov).trace();
        let maha = d.dot(&chol_p.solve(&d));
        let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(0.5 * (trace + maha - k as f64 + logdet(&chol_p.l()) - logdet(&chol_q.l())))
    }
}

fn mvn_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if n == 0 {
        return Ok(0.0);
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("covariance not positive definite"))?;
    let r = x - mean;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (n as f64 * LN_2PI + logdet + r.dot(&chol.solve(&r))))
}

/// Bayesian linear regression with a diagonal Gaussian prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateModel {
    /// `m x p` design.
    pub x: DMatrix<f64>,
    pub noise_var: f64,
    pub prior: DiagGaussian,
}

impl ConjugateModel {
    pub fn new(x: DMatrix<f64>, noise_var: f64, prior: DiagGaussian) -> Result<Self> {
        if x.ncols() != prior.dim() {
            return Err(Error::invalid(format!(
                "design has {} columns, prior dimension is {}",
                x.ncols(),
                prior.dim()
            )));
        }
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(Error::invalid("noise_var must be positive"));
        }
        Ok(Self {
            x,
            noise_var,
            prior,
        })
    }

    /// Design rows from a single-output dataset; returns the model and `y`.
    pub fn from_dataset(data: &Dataset, noise_var: f64, prior: DiagGaussian) -> Result<(Self, DVector<f64>)> {
        if data.output_dim() != 1 {
            return Err(Error::invalid("conjugate model needs a single output"));
        }
        let x = DMatrix::from_row_slice(data.len(), data.input_dim(), data.inputs());
        let y = DVector::from_column_slice(data.targets());
        Ok((Self::new(x, noise_var, prior)?, y))
    }

    pub fn rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// The same prior and noise over a contiguous block of rows.
    pub fn row_block(&self, start: usize, len: usize) -> ConjugateModel {
        ConjugateModel {
            x: self.x.rows(start, len).into_owned(),
            noise_var: self.noise_var,
            prior: self.prior.clone(),
        }
    }

    pub fn with_prior(&self, prior: DiagGaussian) -> ConjugateModel {
        ConjugateModel {
            x: self.x.clone(),
            noise_var: self.noise_var,
            prior,
        }
    }

    fn check_y(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.rows() {
            return Err(Error::invalid(format!(
                "{} observations for {} design rows",
                y.len(),
                self.rows()
            )));
        }
        Ok(())
    }

    /// Marginal covariance `X diag(v0) X^T + noise_var I`.
    fn marginal_cov(&self) -> DMatrix<f64> {
        let v0 = DVector::from_iterator(self.dim(), self.prior.log_var.iter().map(|l| l.exp()));
        let xv = &self.x * DMatrix::from_diagonal(&v0);
        let mut c = xv * self.x.transpose();
        for i in 0..self.rows() {
            c[(i, i)] += self.noise_var;
        }
        c
    }
}

/// Posterior of a dense Gaussian prior after observing `y = X theta + noise`.
pub fn condition(prior: &FullGaussian, x: &DMatrix<f64>, noise_var: f64, y: &DVector<f64>) -> Result<FullGaussian> {
    if x.nrows() == 0 {
        return Ok(prior.clone());
    }
    let prior_prec = prior
        .cov
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::numeric("prior covariance is singular"))?;
    let prec = &prior_prec + x.transpose() * x / noise_var;
    let chol = prec
        .cholesky()
        .ok_or_else(|| Error::numeric("posterior precision not positive definite"))?;
    let rhs = &prior_prec * &prior.mean + x.transpose() * y / noise_var;
    Ok(FullGaussian {
        mean: chol.solve(&rhs),
        cov: chol.inverse(),
    })
}

/// Distribution of `X theta + noise` for `theta ~ q`.
pub fn predictive(q: &FullGaussian, x: &DMatrix<f64>, noise_var: f64) -> FullGaussian {
    let mut cov = x * &q.cov * x.transpose();
    for i in 0..x.nrows() {
        cov[(i, i)] += noise_var;
    }
    FullGaussian {
        mean: x * &q.mean,
        cov,
    }
}

pub fn exact_posterior(model: &ConjugateModel, y: &DVector<f64>) -> Result<FullGaussian> {
    model.check_y(y)?;
    condition(&FullGaussian::from_diag(&model.prior), &model.x, model.noise_var, y)
}

/// `log N(y; X mu0, X diag(v0) X^T + noise_var I)`.
pub fn exact_log_marginal(model: &ConjugateModel, y: &DVector<f64>) -> Result<f64> {
    model.check_y(y)?;
    let mean = &model.x * DVector::from_column_slice(&model.prior.mean);
    mvn_log_pdf(y, &mean, &model.marginal_cov())
}

/// Analytic gradient of [`exact_log_marginal`] with respect to the prior's
/// `(mean, log_var)`.
pub fn exact_marginal_grad(model: &ConjugateModel, y: &DVector<f64>) -> Result<PriorGrad> {
    model.check_y(y)?;
    let p = model.dim();
    if model.rows() == 0 {
        return Ok(PriorGrad::zeros(p));
    }
    let chol = model
        .marginal_cov()
        .cholesky()
        .ok_or_else(|| Error::numeric("marginal covariance not positive definite"))?;
    let r = y - &model.x * DVector::from_column_slice(&model.prior.mean);
    let alpha = chol.solve(&r);
    let xt_alpha = model.x.transpose() * &alpha;
    let cinv_x = chol.solve(&model.x);
    let d_log_var = (0..p)
        .map(|j| {
            let v0 = model.prior.log_var[j].exp();
            let quad = model.x.column(j).dot(&cinv_x.column(j));
            0.5 * v0 * (xt_alpha[j] * xt_alpha[j] - quad)
        })
        .collect();
    Ok(PriorGrad {
        d_mean: xt_alpha.iter().copied().collect(),
        d_log_var,
    })
}

/// Expected prior score under a dense posterior.
///
/// The score of a diagonal prior is separable, so only marginal means and
/// variances of `posterior` enter.
pub fn full_cov_prior_score(posterior: &FullGaussian, prior: &DiagGaussian) -> Result<PriorGrad> {
    expected_prior_score(&posterior.marginals(), prior)
}

/// `E_q log P(y | theta) - KL(q || prior)` with every expectation analytic.
pub fn analytic_elbo(model: &ConjugateModel, y: &DVector<f64>, q: &FullGaussian) -> Result<f64> {
    model.check_y(y)?;
    let r = y - &model.x * &q.mean;
    let spread = (&model.x * &q.cov * model.x.transpose()).trace();
    let n = model.rows() as f64;
    let ell = -(r.dot(&r) + spread) / (2.0 * model.noise_var) - 0.5 * n * (LN_2PI + model.noise_var.ln());
    Ok(ell - q.kl(&FullGaussian::from_diag(&model.prior))?)
}

/// Linear-Gaussian likelihood usable by the stochastic VI routine.
#[derive(Debug, Clone, Copy)]
pub struct LinearLikelihood<'a> {
    pub model: &'a ConjugateModel,
    pub y: &'a DVector<f64>,
}

impl Likelihood for LinearLikelihood<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn is_empty(&self) -> bool {
        self.model.rows() == 0
    }

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let t = DVector::from_column_slice(theta);
        let r = self.y - &self.model.x * t;
        let s2 = self.model.noise_var;
        let n = self.model.rows() as f64;
        let nll = r.dot(&r) / (2.0 * s2) + 0.5 * n * (LN_2PI + s2.ln());
        let grad = -(self.model.x.transpose() * r) / s2;
        Ok((nll, grad.iter().copied().collect()))
    }
}

/// Both meta-gradient estimators after `T` deterministic mean-field VI steps.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledEstimates {
    pub lambda: DiagGaussian,
    /// Expected prior score at `lambda`.
    pub gem: PriorGrad,
    /// Total derivative of `ELBO(lambda_T(Theta), Theta)`.
    pub elbo: PriorGrad,
}

/// Run `T` steps of gradient ascent on the analytic mean-field ELBO starting
/// at the prior, propagating `d lambda / d Theta` alongside.
///
/// With `z = (m, log s)` and `Theta = (mu0, log v0)`, the step is
/// `z += lr * G(z, Theta)` and the Jacobian follows
/// `J += lr * (dG/dz J + dG/dTheta)` from `J = I`.
pub fn unrolled_vi_estimates(model: &ConjugateModel, y: &DVector<f64>, steps: usize, lr: f64) -> Result<UnrolledEstimates> {
    model.check_y(y)?;
    if !(lr > 0.0) {
        return Err(Error::invalid("learning rate must be positive"));
    }
    let p = model.dim();
    let s2 = model.noise_var;
    let xtx = model.x.transpose() * &model.x;
    let xty = model.x.transpose() * y;
    let mu0 = DVector::from_column_slice(&model.prior.mean);
    let v0: Vec<f64> = model.prior.log_var.iter().map(|l| l.exp()).collect();

    let mut m = mu0.clone();
    let mut ls: Vec<f64> = model.prior.log_var.clone();
    let mut jac = DMatrix::<f64>::identity(2 * p, 2 * p);

    let grad_at = |m: &DVector<f64>, ls: &[f64]| -> DVector<f64> {
        let gm = (&xty - &xtx * m) / s2;
        let mut g = DVector::zeros(2 * p);
        for j in 0..p {
            g[j] = gm[j] - (m[j] - mu0[j]) / v0[j];
            g[p + j] = -0.5 * ls[j].exp() * (xtx[(j, j)] / s2 + 1.0 / v0[j]) + 0.5;
        }
        g
    };

    for step in 0..steps {
        let g = grad_at(&m, &ls);
        // dG/dz
        let mut gz = DMatrix::<f64>::zeros(2 * p, 2 * p);
        for i in 0..p {
            for j in 0..p {
                gz[(i, j)] = -xtx[(i, j)] / s2;
            }
            gz[(i, i)] -= 1.0 / v0[i];
            gz[(p + i, p + i)] = -0.5 * ls[i].exp() * (xtx[(i, i)] / s2 + 1.0 / v0[i]);
        }
        // dG/dTheta (explicit)
        let mut gt = DMatrix::<f64>::zeros(2 * p, 2 * p);
        for j in 0..p {
            gt[(j, j)] = 1.0 / v0[j];
            gt[(j, p + j)] = (m[j] - mu0[j]) / v0[j];
            gt[(p + j, p + j)] = 0.5 * ls[j].exp() / v0[j];
        }
        jac = &jac + (gz * &jac + gt) * lr;
        for j in 0..p {
            m[j] += lr * g[j];
            ls[j] += lr * g[p + j];
        }
        if !m.iter().chain(ls.iter()).all(|v| v.is_finite()) || !jac.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!("unrolled VI diverged at step {step}")));
        }
    }

    let lambda = DiagGaussian {
        mean: m.iter().copied().collect(),
        log_var: ls.clone(),
    };
    let gem = expected_prior_score(&lambda, &model.prior)?;
    let g = grad_at(&m, &ls);
    let through = jac.transpose() * g;
    let elbo = PriorGrad {
        d_mean: (0..p).map(|j| through[j] + gem.d_mean[j]).collect(),
        d_log_var: (0..p).map(|j| through[p + j] + gem.d_log_var[j]).collect(),
    };
    Ok(UnrolledEstimates { lambda, gem, elbo })
}

/// ELBO-gradient meta-gradient estimate after `T` unrolled VI steps.
pub fn elbo_gradient_estimate(model: &ConjugateModel, y: &DVector<f64>, steps: usize, lr: f64) -> Result<PriorGrad> {
    Ok(unrolled_vi_estimates(model, y, steps, lr)?.elbo)
}

/// The analytic mean-field ELBO of a diagonal `q`.
pub fn mean_field_elbo(model: &ConjugateModel, y: &DVector<f64>, q: &DiagGaussian) -> Result<f64> {
    analytic_elbo(model, y, &FullGaussian::from_diag(q))
}

/// One point of the gradient-error bound study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub error: f64,
    pub kl: f64,
    pub m_const: f64,
    pub bound: f64,
}

impl BoundReport {
    fn new(error: f64, kl: f64, m_const: f64) -> Self {
        Self {
            error,
            kl,
            m_const,
            bound: std::f64::consts::SQRT_2 * m_const * kl.max(0.0).sqrt(),
        }
    }

    pub fn holds(&self, slack: f64) -> bool {
        self.error <= self.bound + slack
    }
}

/// `sqrt(E_P ||grad_Theta log p(theta; Theta)||^2)` for a diagonal prior.
pub fn score_second_moment(posterior: &FullGaussian, prior: &DiagGaussian) -> f64 {
    let mut total = 0.0;
    for i in 0..prior.dim() {
        let v = prior.log_var[i].exp();
        let d = posterior.mean[i] - prior.mean[i];
        let s = posterior.cov[(i, i)];
        let d2 = d * d;
        let e2 = d2 + s;
        let e4 = d2 * d2 + 6.0 * d2 * s + 3.0 * s * s;
        total += e2 / (v * v) + 0.25 * (e4 / (v * v) - 2.0 * e2 / v + 1.0);
    }
    total.sqrt()
}

/// Gradient error of the prior score under each approximate posterior `Q`
/// against `sqrt(2) M sqrt(KL(Q || P))`, `P` the exact posterior.
pub fn pinsker_bound_study(model: &ConjugateModel, y: &DVector<f64>, perturbations: &[DiagGaussian]) -> Result<Vec<BoundReport>> {
    let post = exact_posterior(model, y)?;
    let exact = exact_marginal_grad(model, y)?;
    let m_const = score_second_moment(&post, &model.prior);
    perturbations
        .iter()
        .map(|q| {
            if q.dim() != model.dim() {
                return Err(Error::invalid("perturbation dimension mismatch"));
            }
            let est = expected_prior_score(q, &model.prior)?;
            let error = (&est - &exact).norm();
            let kl = FullGaussian::from_diag(q).kl(&post)?;
            Ok(BoundReport::new(error, kl, m_const))
        })
        .collect()
}

/// `P = N(0, 1)`, `Q = N(delta, 1)`, integrand `f(Z) = Z`.
pub fn mean_shift_report(delta: f64) -> Result<BoundReport> {
    let p = DiagGaussian::new(vec![0.0], vec![0.0])?;
    let q = DiagGaussian::new(vec![delta], vec![0.0])?;
    // E_Q Z - E_P Z and (E_P Z^2)^{1/2}
    let error = (q.mean[0] - p.mean[0]).abs();
    let m_const = (p.log_var[0].exp() + p.mean[0] * p.mean[0]).sqrt();
    Ok(BoundReport::new(error, q.kl(&p)?, m_const))
}

/// Diagonal approximations near the marginals of `posterior`: means moved by
/// `scale * sd * z`, log-variances by `scale * z'`.
pub fn local_perturbations(posterior: &FullGaussian, n: usize, scale: f64, seed: u64) -> Vec<DiagGaussian> {
    let base = posterior.marginals();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut q = base.clone();
            for i in 0..q.dim() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let z2: f64 = StandardNormal.sample(&mut rng);
                q.mean[i] += scale * (0.5 * base.log_var[i]).exp() * z;
                q.log_var[i] += scale * z2;
            }
            q
        })
        .collect()
}

/// Settings of the variance-ratio study (`p = 1`, all-ones design).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioConfig {
    pub k: usize,
    pub m: usize,
    pub n_tasks: usize,
    pub n_replicates: usize,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
    pub bootstrap_resamples: usize,
}

impl VarianceRatioConfig {
    pub fn new(k: usize, m: usize, n_tasks: usize, n_replicates: usize) -> Self {
        Self {
            k,
            m,
            n_tasks,
            n_replicates,
            prior_mean: 1.0,
            prior_var: 0.001,
            noise_var: 1.0,
            bootstrap_resamples: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioReport {
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `m / (m - k)`.
    pub predicted: f64,
    /// `m / (m - k) * (1 + k prior_var / noise_var)`, exact for this family.
    pub predicted_exact: f64,
    pub var_l1: f64,
    pub var_l2: f64,
    pub estimates_l1: Vec<f64>,
    pub estimates_l2: Vec<f64>,
}

/// Maximizers of the summed first- and second-type objectives over the
/// prior mean, given per-task means of the first `k` and all `m` points.
pub fn mean_estimators(ybar_k: &[f64], ybar_m: &[f64], k: usize, m: usize, prior_var: f64, noise_var: f64) -> (f64, f64) {
    let n = ybar_m.len() as f64;
    let l1 = stats::mean(ybar_m);
    if k == 0 {
        return (l1, l1);
    }
    let cm = prior_var + noise_var / m as f64;
    let ck = prior_var + noise_var / k as f64;
    let num = ybar_m.iter().sum::<f64>() / cm - ybar_k.iter().sum::<f64>() / ck;
    (l1, num / (n * (1.0 / cm - 1.0 / ck)))
}

pub fn variance_ratio_study(cfg: &VarianceRatioConfig, rng_seed: u64) -> Result<VarianceRatioReport> {
    if cfg.k >= cfg.m {
        return Err(Error::invalid("variance ratio study needs k < m"));
    }
    if cfg.n_tasks < 100 || cfg.n_replicates < 100 {
        return Err(Error::invalid("n_tasks and n_replicates must be >= 100"));
    }
    let family = ConjugateTaskFamily::new(
        crate::tasks::Design::Ones,
        vec![cfg.prior_mean],
        vec![cfg.prior_var],
        cfg.noise_var,
    )?;
    let pairs: Vec<(f64, f64)> = (0..cfg.n_replicates as u64)
        .into_par_iter()
        .map(|r| {
            let mut ybar_k = Vec::with_capacity(cfg.n_tasks);
            let mut ybar_m = Vec::with_capacity(cfg.n_tasks);
            for t in 0..cfg.n_tasks as u64 {
                let (task, _) = sample_conjugate_task(&family, derive_seed(rng_seed, &[r, t]), cfg.m, cfg.k)?;
                let tr = task.train.targets();
                let all = tr.iter().chain(task.val.targets()).sum::<f64>();
                ybar_k.push(if cfg.k > 0 { tr.iter().sum::<f64>() / cfg.k as f64 } else { 0.0 });
                ybar_m.push(all / cfg.m as f64);
            }
            Ok(mean_estimators(&ybar_k, &ybar_m, cfg.k, cfg.m, cfg.prior_var, cfg.noise_var))
        })
        .collect::<Result<_>>()?;
    let (l1, l2): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let var_l1 = stats::variance(&l1);
    let var_l2 = stats::variance(&l2);
    let (ci_low, ci_high) = stats::bootstrap_ci(l1.len(), cfg.bootstrap_resamples, 0.95, derive_seed(rng_seed, &[u64::MAX]), |idx| {
        let a: Vec<f64> = idx.iter().map(|&i| l1[i]).collect();
        let b: Vec<f64> = idx.iter().map(|&i| l2[i]).collect();
        let va = stats::variance(&a);
        if va == 0.0 {
            1.0
        } else {
            stats::variance(&b) / va
        }
    });
    let predicted = cfg.m as f64 / (cfg.m - cfg.k) as f64;
    Ok(VarianceRatioReport {
        ratio: if var_l1 == 0.0 { 1.0 } else { var_l2 / var_l1 },
        ci_low,
        ci_high,
        predicted,
        predicted_exact: predicted * (1.0 + cfg.k as f64 * cfg.prior_var / cfg.noise_var),
        var_l1,
        var_l2,
        estimates_l1: l1,
        estimates_l2: l2,
    })
}

/// Both sides of the predictive decomposition for one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L2Check {
    /// `log p(y_val | y_tr)` from the train posterior's predictive.
    pub direct: f64,
    /// `log p(y_tr, y_val) - log p(y_tr)`.
    pub decomposed: f64,
    pub residual: f64,
}

/// `model` covers the train rows followed by the validation rows.
pub fn l2_decomposition_check(model: &ConjugateModel, y_tr: &DVector<f64>, y_val: &DVector<f64>) -> Result<L2Check> {
    let k = y_tr.len();
    if k + y_val.len() != model.rows() {
        return Err(Error::invalid("observation counts do not match design rows"));
    }
    let train = model.row_block(0, k);
    let val = model.row_block(k, y_val.len());
    let post = exact_posterior(&train, y_tr)?;
    let direct = predictive(&post, &val.x, model.noise_var).log_pdf(y_val)?;
    let y_all = DVector::from_iterator(model.rows(), y_tr.iter().chain(y_val.iter()).copied());
    let decomposed = exact_log_marginal(model, &y_all)? - exact_log_marginal(&train, y_tr)?;
    Ok(L2Check {
        direct,
        decomposed,
        residual: (direct - decomposed).abs(),
    })
}

/// A distortion of the exact posterior used as a decision rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRule {
    pub name: String,
    pub mean_shift: f64,
    pub var_scale: f64,
}

impl DecisionRule {
    pub fn new(name: &str, mean_shift: f64, var_scale: f64) -> Self {
        Self {
            name: name.to_string(),
            mean_shift,
            var_scale,
        }
    }

    fn apply(&self, post: &FullGaussian) -> FullGaussian {
        FullGaussian {
            mean: post.mean.add_scalar(self.mean_shift),
            cov: &post.cov * self.var_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleScore {
    pub rule: String,
    pub mean_score: f64,
    pub std_error: f64,
    /// Mean of `exact - rule` over tasks.
    pub mean_deficit: f64,
    /// One-sided paired test that the exact posterior scores higher.
    pub test: PairedTest,
}

/// Mean predictive log-likelihood on `D^val` of each rule applied to the
/// train posterior, compared pairwise with the exact posterior.
pub fn posterior_predictive_optimality_check(
    family: &ConjugateTaskFamily,
    m: usize,
    k: usize,
    n_tasks: usize,
    rules: &[DecisionRule],
    rng_seed: u64,
) -> Result<Vec<RuleScore>> {
    let prior = DiagGaussian::new(family.prior_mean.clone(), family.prior_var.iter().map(|v| v.ln()).collect())?;
    let exact_rule = DecisionRule::new("exact", 0.0, 1.0);
    let per_task: Vec<Vec<f64>> = (0..n_tasks as u64)
        .into_par_iter()
        .map(|t| {
            let (task, _) = sample_conjugate_task(family, derive_seed(rng_seed, &[t]), m, k)?;
            let (train, y_tr) = ConjugateModel::from_dataset(&task.train, family.noise_var, prior.clone())?;
            let (val, y_val) = ConjugateModel::from_dataset(&task.val, family.noise_var, prior.clone())?;
            let post = exact_posterior(&train, &y_tr)?;
            std::iter::once(&exact_rule)
                .chain(rules)
                .map(|r| predictive(&r.apply(&post), &val.x, family.noise_var).log_pdf(&y_val))
                .collect()
        })
        .collect::<Result<_>>()?;
    let column = |j: usize| -> Vec<f64> { per_task.iter().map(|row| row[j]).collect() };
    let exact = column(0);
    Ok(rules
        .iter()
        .enumerate()
        .map(|(j, r)| {
            let scores = column(j + 1);
            let test = stats::paired_t_greater(&exact, &scores);
            RuleScore {
                rule: r.name.clone(),
                mean_score: stats::mean(&scores),
                std_error: (stats::variance(&scores) / scores.len() as f64).sqrt(),
                mean_deficit: test.mean_diff,
                test,
            }
        })
        .collect())
}
