//! Mean-field variational inference for a single task.
//!
//! The variational family is a [`DiagGaussian`] over the model parameters.
//! Each step draws `mc_samples` reparameterized samples, differentiates the
//! sampled log-likelihood through the sample path and adds the analytic KL
//! gradient, then takes an ascent step on the ELBO.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{DiagGaussian, PriorGrad};
use crate::nn::{self, ArchSpec, Dataset};

/// A negative log-likelihood `-log P(D | theta)` with its gradient.
pub trait Likelihood: Sync {
    fn dim(&self) -> usize;

    /// True when there is no data, in which case the log-likelihood is 0.
    fn is_empty(&self) -> bool;

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// Gaussian-likelihood MLP regression on one dataset.
#[derive(Debug, Clone, Copy)]
pub struct MlpLikelihood<'a> {
    pub arch: &'a ArchSpec,
    pub data: &'a Dataset,
    pub noise_var: f64,
}

impl Likelihood for MlpLikelihood<'_> {
    fn dim(&self) -> usize {
        self.arch.parameter_count()
    }

    fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn nll_and_grad(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        nn::nll_and_grad(self.arch, theta, self.data, self.noise_var)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VIConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub optimizer: Optimizer,
    /// Rescale the ELBO gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    /// When false the variational log-variance stays at its initial value.
    pub learn_log_var: bool,
}

impl Default for VIConfig {
    fn default() -> Self {
        Self {
            steps: 1,
            learning_rate: 0.001,
            mc_samples: 5,
            optimizer: Optimizer::Sgd,
            grad_clip: None,
            learn_log_var: true,
        }
    }
}

impl VIConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("VI steps must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("VI learning_rate must be positive"));
        }
        if self.mc_samples == 0 {
            return Err(Error::config("VI mc_samples must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("invalid Adam parameters"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VIResult {
    pub lambda: DiagGaussian,
    /// ELBO estimate at the start of each step.
    pub elbo_trace: Vec<f64>,
}

/// Monte Carlo ELBO with an analytic KL term, for an MLP likelihood.
pub fn elbo_estimate(
    lambda: &DiagGaussian,
    prior: &DiagGaussian,
    arch: &ArchSpec,
    data: &Dataset,
    noise_var: f64,
    eps_draws: &[Vec<f64>],
) -> Result<f64> {
    let lik = MlpLikelihood {
        arch,
        data,
        noise_var,
    };
    elbo_estimate_with(lambda, prior, &lik, eps_draws)
}

pub fn elbo_estimate_with(
    lambda: &DiagGaussian,
    prior: &DiagGaussian,
    lik: &dyn Likelihood,
    eps_draws: &[Vec<f64>],
) -> Result<f64> {
    if eps_draws.is_empty() {
        return Err(Error::invalid("ELBO needs at least one draw"));
    }
    let kl = lambda.kl(prior)?;
    if lik.is_empty() {
        return Ok(-kl);
    }
    let mut ll = 0.0;
    for eps in eps_draws {
        let theta = lambda.sample(eps)?;
        ll -= lik.nll_and_grad(&theta)?.0;
    }
    Ok(ll / eps_draws.len() as f64 - kl)
}

/// ELBO estimate and its gradient with respect to `lambda`.
pub(crate) fn elbo_and_grad(
    lambda: &DiagGaussian,
    prior: &DiagGaussian,
    lik: &dyn Likelihood,
    eps_draws: &[Vec<f64>],
) -> Result<(f64, PriorGrad)> {
    let d = lambda.dim();
    let kl_grad = lambda.kl_grad_wrt_q(prior)?;
    let mut grad = -&kl_grad;
    let kl = lambda.kl(prior)?;
    if lik.is_empty() {
        return Ok((-kl, grad));
    }
    let sd: Vec<f64> = lambda.log_var.iter().map(|l| (0.5 * l).exp()).collect();
    let inv_s = 1.0 / eps_draws.len() as f64;
    let mut ll = 0.0;
    for eps in eps_draws {
        let theta = lambda.sample(eps)?;
        let (nll, g) = lik.nll_and_grad(&theta)?;
        ll -= nll;
        for i in 0..d {
            grad.d_mean[i] -= inv_s * g[i];
            grad.d_log_var[i] -= inv_s * g[i] * eps[i] * 0.5 * sd[i];
        }
    }
    Ok((ll * inv_s - kl, grad))
}

/// Fit `q(theta) = lambda` to an MLP likelihood starting at `init`.
pub fn vi_fit(
    prior: &DiagGaussian,
    init: &DiagGaussian,
    arch: &ArchSpec,
    data: &Dataset,
    noise_var: f64,
    cfg: &VIConfig,
    rng_seed: u64,
) -> Result<VIResult> {
    let lik = MlpLikelihood {
        arch,
        data,
        noise_var,
    };
    vi_fit_observed(prior, init, &lik, cfg, rng_seed, |_, _| {})
}

/// [`vi_fit`] over any likelihood, calling `observer(step, lambda)` after
/// every update (step counts from 1).
pub fn vi_fit_observed<F>(
    prior: &DiagGaussian,
    init: &DiagGaussian,
    lik: &dyn Likelihood,
    cfg: &VIConfig,
    rng_seed: u64,
    mut observer: F,
) -> Result<VIResult>
where
    F: FnMut(usize, &DiagGaussian),
{
    cfg.validate()?;
    if prior.dim() != init.dim() || prior.dim() != lik.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: prior {}, init {}, model {}",
            prior.dim(),
            init.dim(),
            lik.dim()
        )));
    }
    let d = prior.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut lambda = init.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut adam = match cfg.optimizer {
        Optimizer::Adam { .. } => Some(AdamState::new(d)),
        Optimizer::Sgd => None,
    };
    let mut draws = vec![vec![0.0; d]; cfg.mc_samples];

    for step in 0..cfg.steps {
        if !lik.is_empty() {
            for eps in draws.iter_mut() {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
            }
        }
        let (elbo, mut grad) = elbo_and_grad(&lambda, prior, lik, &draws).map_err(|e| {
            Error::InnerStep {
                step,
                detail: e.to_string(),
            }
        })?;
        if !elbo.is_finite() || !grad.is_finite() {
            return Err(Error::InnerStep {
                step,
                detail: format!("ELBO {elbo}"),
            });
        }
        trace.push(elbo);
        if !cfg.learn_log_var {
            grad.d_log_var.iter_mut().for_each(|g| *g = 0.0);
        }
        if let Some(c) = cfg.grad_clip {
            let n = grad.norm();
            if n > c {
                grad = grad.scale(c / n);
            }
        }
        let update = match (&mut adam, cfg.optimizer) {
            (Some(state), Optimizer::Adam { beta1, beta2, eps }) => {
                state.direction(&grad, beta1, beta2, eps)
            }
            _ => grad,
        };
        lambda = lambda.step(&update, cfg.learning_rate)?;
        if !lambda.is_finite() {
            return Err(Error::InnerStep {
                step,
                detail: "variational parameters became non-finite".into(),
            });
        }
        observer(step + 1, &lambda);
    }
    Ok(VIResult {
        lambda,
        elbo_trace: trace,
    })
}

pub(crate) struct AdamState {
    m: PriorGrad,
    v: PriorGrad,
    t: i32,
}

impl AdamState {
    pub(crate) fn new(d: usize) -> Self {
        Self {
            m: PriorGrad::zeros(d),
            v: PriorGrad::zeros(d),
            t: 0,
        }
    }

    pub(crate) fn direction(&mut self, g: &PriorGrad, b1: f64, b2: f64, eps: f64) -> PriorGrad {
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let mut out = PriorGrad::zeros(g.dim());
        let blocks = [
            (&mut self.m.d_mean, &mut self.v.d_mean, &g.d_mean, &mut out.d_mean),
            (
                &mut self.m.d_log_var,
                &mut self.v.d_log_var,
                &g.d_log_var,
                &mut out.d_log_var,
            ),
        ];
        for (m, v, g, o) in blocks {
            for i in 0..g.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                o[i] = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        out
    }
}
