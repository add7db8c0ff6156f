//! Diagonal Gaussians over flat parameter vectors.
//!
//! Variance is stored as log-variance so unconstrained updates keep it
//! positive. Gradients with respect to a Gaussian are expressed in the same
//! `(mean, log_var)` coordinates via [`PriorGrad`].

use std::f64::consts::PI;
use std::ops::{Add, AddAssign, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{what}: dimension {a} vs {b}")));
    }
    Ok(())
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        check_len(mean.len(), log_var.len(), "mean/log_var")?;
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::invalid("Gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_var })
    }

    /// Every coordinate shares the same log-variance.
    pub fn isotropic(mean: Vec<f64>, log_var: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, vec![log_var; n])
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|l| l.exp()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.log_var).all(|v| v.is_finite())
    }

    pub fn log_pdf(&self, theta: &[f64]) -> Result<f64> {
        check_len(self.dim(), theta.len(), "log_pdf")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(theta)
            .map(|((m, l), t)| -HALF_LN_2PI - 0.5 * l - (t - m) * (t - m) * 0.5 * (-l).exp())
            .sum())
    }

    /// Reparameterized draw `mean + exp(log_var / 2) * eps`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), eps.len(), "sample")?;
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect())
    }

    /// `KL(self || p)`.
    pub fn kl(&self, p: &DiagGaussian) -> Result<f64> {
        check_len(self.dim(), p.dim(), "kl")?;
        let mut total = 0.0;
        for i in 0..self.dim() {
            let (mq, lq, mp, lp) = (self.mean[i], self.log_var[i], p.mean[i], p.log_var[i]);
            let d = mp - mq;
            total += 0.5 * ((lq - lp).exp() + d * d * (-lp).exp() - 1.0 + lp - lq);
        }
        Ok(total.max(0.0))
    }

    /// Gradient of `KL(self || p)` with respect to `self`'s `(mean, log_var)`.
    pub fn kl_grad_wrt_q(&self, p: &DiagGaussian) -> Result<PriorGrad> {
        check_len(self.dim(), p.dim(), "kl_grad_wrt_q")?;
        let d_mean = (0..self.dim())
            .map(|i| (self.mean[i] - p.mean[i]) * (-p.log_var[i]).exp())
            .collect();
        let d_log_var = (0..self.dim())
            .map(|i| 0.5 * ((self.log_var[i] - p.log_var[i]).exp() - 1.0))
            .collect();
        Ok(PriorGrad { d_mean, d_log_var })
    }

    /// `E_{theta ~ self} grad_prior log prior(theta)`, exact.
    ///
    /// This is the posterior expectation of the prior score in
    /// `(mean, log_var)` coordinates and equals `-grad_prior KL(self || prior)`.
    pub fn expected_prior_score(&self, prior: &DiagGaussian) -> Result<PriorGrad> {
        expected_prior_score(self, prior)
    }

    /// `self + step * g`, coordinate-wise in `(mean, log_var)`.
    pub fn step(&self, g: &PriorGrad, step: f64) -> Result<DiagGaussian> {
        check_len(self.dim(), g.dim(), "step")?;
        Ok(DiagGaussian {
            mean: self.mean.iter().zip(&g.d_mean).map(|(m, d)| m + step * d).collect(),
            log_var: self
                .log_var
                .iter()
                .zip(&g.d_log_var)
                .map(|(l, d)| l + step * d)
                .collect(),
        })
    }

    /// Largest absolute coordinate difference in either block.
    pub fn max_abs_diff(&self, other: &DiagGaussian) -> f64 {
        self.mean
            .iter()
            .zip(&other.mean)
            .chain(self.log_var.iter().zip(&other.log_var))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Gradient with respect to a [`DiagGaussian`]'s `(mean, log_var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorGrad {
    pub d_mean: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

impl PriorGrad {
    pub fn zeros(dim: usize) -> Self {
        Self {
            d_mean: vec![0.0; dim],
            d_log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.d_mean.len()
    }

    pub fn scale(&self, s: f64) -> PriorGrad {
        PriorGrad {
            d_mean: self.d_mean.iter().map(|v| v * s).collect(),
            d_log_var: self.d_log_var.iter().map(|v| v * s).collect(),
        }
    }

    pub fn norm_mean(&self) -> f64 {
        self.d_mean.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_log_var(&self) -> f64 {
        self.d_log_var.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.norm_mean().hypot(self.norm_log_var())
    }

    pub fn max_abs(&self) -> f64 {
        self.d_mean
            .iter()
            .chain(&self.d_log_var)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.d_mean.iter().chain(&self.d_log_var).all(|v| v.is_finite())
    }
}

impl Add<&PriorGrad> for &PriorGrad {
    type Output = PriorGrad;

    fn add(self, rhs: &PriorGrad) -> PriorGrad {
        PriorGrad {
            d_mean: self.d_mean.iter().zip(&rhs.d_mean).map(|(a, b)| a + b).collect(),
            d_log_var: self
                .d_log_var
                .iter()
                .zip(&rhs.d_log_var)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }
}

impl Sub<&PriorGrad> for &PriorGrad {
    type Output = PriorGrad;

    fn sub(self, rhs: &PriorGrad) -> PriorGrad {
        self + &(-rhs)
    }
}

impl Neg for &PriorGrad {
    type Output = PriorGrad;

    fn neg(self) -> PriorGrad {
        self.scale(-1.0)
    }
}

impl AddAssign<&PriorGrad> for PriorGrad {
    fn add_assign(&mut self, rhs: &PriorGrad) {
        for (a, b) in self.d_mean.iter_mut().zip(&rhs.d_mean) {
            *a += b;
        }
        for (a, b) in self.d_log_var.iter_mut().zip(&rhs.d_log_var) {
            *a += b;
        }
    }
}

/// Closed-form `E_{theta ~ posterior} grad_{(mu, log_var)} log N(theta; prior)`.
///
/// `d_mean_i = (mq_i - mp_i) / vp_i` and
/// `d_log_var_i = ((vq_i + (mq_i - mp_i)^2) / vp_i - 1) / 2`.
pub fn expected_prior_score(posterior: &DiagGaussian, prior: &DiagGaussian) -> Result<PriorGrad> {
    check_len(posterior.dim(), prior.dim(), "expected_prior_score")?;
    let n = prior.dim();
    let mut d_mean = Vec::with_capacity(n);
    let mut d_log_var = Vec::with_capacity(n);
    for i in 0..n {
        let prec = (-prior.log_var[i]).exp();
        let d = posterior.mean[i] - prior.mean[i];
        d_mean.push(d * prec);
        d_log_var.push(0.5 * ((posterior.log_var[i] - prior.log_var[i]).exp() + d * d * prec - 1.0));
    }
    Ok(PriorGrad { d_mean, d_log_var })
}

/// Prior score in the collapsed-posterior limit with a fixed prior variance:
/// `d_mean = (posterior_mean - prior.mean) / var`, `d_log_var = 0`.
pub fn delta_limit_score(posterior_mean: &[f64], prior: &DiagGaussian) -> Result<PriorGrad> {
    check_len(posterior_mean.len(), prior.dim(), "delta_limit_score")?;
    let d_mean = posterior_mean
        .iter()
        .zip(&prior.mean)
        .zip(&prior.log_var)
        .map(|((q, p), l)| (q - p) * (-l).exp())
        .collect();
    Ok(PriorGrad {
        d_mean,
        d_log_var: vec![0.0; prior.dim()],
    })
}

/// `ln(2 pi)` for callers assembling Gaussian log densities by hand.
pub fn ln_2pi() -> f64 {
    (2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn g1(m: f64, v: f64) -> DiagGaussian {
        DiagGaussian::new(vec![m], vec![v.ln()]).unwrap()
    }

    #[test]
    fn log_pdf_values() {
        assert!((g1(0.0, 1.0).log_pdf(&[0.0]).unwrap() + HALF_LN_2PI).abs() < 1e-15);
        assert!((g1(1.0, 1.0).log_pdf(&[1.0]).unwrap() + HALF_LN_2PI).abs() < 1e-15);
        let q = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let want = -HALF_LN_2PI - 0.5 - 0.5 / std::f64::consts::E;
        assert!((q.log_pdf(&[1.0]).unwrap() - want).abs() < 1e-14);
        assert!((want + 1.6029).abs() < 1e-4);
        assert!(q.log_pdf(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn log_pdf_normalizes() {
        // Trapezoid integration of exp(log_pdf) over +-12 sd.
        let q = DiagGaussian::new(vec![0.3], vec![1.0]).unwrap();
        let sd = 0.5f64.exp();
        let n = 20_000;
        let (a, b) = (0.3 - 12.0 * sd, 0.3 + 12.0 * sd);
        let h = (b - a) / n as f64;
        let mut s = 0.0;
        for i in 0..=n {
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            s += w * q.log_pdf(&[a + i as f64 * h]).unwrap().exp();
        }
        assert!((s * h - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sample_values() {
        let q = DiagGaussian::new(vec![2.0, -1.0], vec![4f64.ln(), 0.0]).unwrap();
        assert_eq!(q.sample(&[0.0, 0.0]).unwrap(), q.mean);
        assert!((q.sample(&[1.0, 0.0]).unwrap()[0] - 4.0).abs() < 1e-12);
        assert!(q.sample(&[1.0]).is_err());
    }

    #[test]
    fn sample_moments_converge() {
        let q = DiagGaussian::new(vec![1.5, -0.5], vec![0.7, -1.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let s = q.sample(&eps).unwrap();
            for i in 0..2 {
                sum[i] += s[i];
                sq[i] += s[i] * s[i];
            }
        }
        for i in 0..2 {
            let var = q.log_var[i].exp();
            let mean = sum[i] / n as f64;
            assert!((mean - q.mean[i]).abs() < 3.0 * (var / n as f64).sqrt());
            let emp_var = sq[i] / n as f64 - mean * mean;
            // var of the sample variance is ~ 2 var^2 / n
            assert!((emp_var - var).abs() < 4.0 * var * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn kl_values() {
        let q = g1(0.2, 0.7);
        assert_eq!(q.kl(&q).unwrap(), 0.0);
        assert!((g1(1.0, 1.0).kl(&g1(0.0, 1.0)).unwrap() - 0.5).abs() < 1e-15);
        let want = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((g1(0.0, 4.0).kl(&g1(0.0, 1.0)).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![1.0, 0.0], vec![0.0, 4f64.ln()]).unwrap();
        let p = DiagGaussian::standard(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let t = q.sample(&eps).unwrap();
            let v = q.log_pdf(&t).unwrap() - p.log_pdf(&t).unwrap();
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = q.kl(&p).unwrap();
        assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn prior_score_conjugate_example() {
        // Exact posterior of y = theta + noise, y = 2, prior N(0, 1).
        let g = expected_prior_score(&g1(1.0, 0.5), &g1(0.0, 1.0)).unwrap();
        assert!((g.d_mean[0] - 1.0).abs() < 1e-15);
        assert!((g.d_log_var[0] - 0.25).abs() < 1e-15);
        // Hand derivative of log N(2; mu0, exp(l0) + 1) at mu0 = 0, l0 = 0.
        let lm = |mu0: f64, l0: f64| {
            let s = l0.exp() + 1.0;
            -0.5 * (2.0 * PI * s).ln() - (2.0 - mu0).powi(2) / (2.0 * s)
        };
        let fd = finite_diff_grad(|p| lm(p[0], p[1]), &[0.0, 0.0], 1e-6).unwrap();
        assert!((fd[0] - 1.0).abs() < 1e-8 && (fd[1] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn prior_score_matches_monte_carlo() {
        let q = DiagGaussian::new(vec![0.4, -1.0], vec![-0.5, 0.3]).unwrap();
        let p = DiagGaussian::new(vec![0.0, -0.6], vec![0.2, -0.4]).unwrap();
        let exact = expected_prior_score(&q, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sums = vec![0.0; 4];
        let mut sq = vec![0.0; 4];
        for _ in 0..n {
            let eps: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let t = q.sample(&eps).unwrap();
            for i in 0..2 {
                let vp = p.log_var[i].exp();
                let d = t[i] - p.mean[i];
                let s = [d / vp, 0.5 * (d * d / vp - 1.0)];
                for (j, sv) in s.iter().enumerate() {
                    sums[2 * i + j] += sv;
                    sq[2 * i + j] += sv * sv;
                }
            }
        }
        for i in 0..2 {
            for (j, want) in [exact.d_mean[i], exact.d_log_var[i]].into_iter().enumerate() {
                let k = 2 * i + j;
                let mean = sums[k] / n as f64;
                let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
                assert!((mean - want).abs() < 3.0 * se, "coord {k}: {mean} vs {want}");
            }
        }
    }

    #[test]
    fn delta_limit_values() {
        let p = g1(0.0, 1.0);
        assert_eq!(delta_limit_score(&[0.0], &p).unwrap().d_mean, vec![0.0]);
        assert_eq!(delta_limit_score(&[1.0], &p).unwrap().d_mean, vec![1.0]);
        let p = DiagGaussian::new(vec![0.3, -0.2], vec![0.5f64.ln(); 2]).unwrap();
        let collapsed = DiagGaussian::new(vec![1.1, 0.4], vec![-20.0; 2]).unwrap();
        let full = expected_prior_score(&collapsed, &p).unwrap();
        let delta = delta_limit_score(&collapsed.mean, &p).unwrap();
        for i in 0..2 {
            assert!((full.d_mean[i] - delta.d_mean[i]).abs() < 1e-6);
        }
        assert_eq!(delta.d_log_var, vec![0.0; 2]);
    }

    fn gaussian_strategy(dim: usize) -> impl Strategy<Value = DiagGaussian> {
        (
            prop::collection::vec(-3.0f64..3.0, dim),
            prop::collection::vec(-2.0f64..2.0, dim),
        )
            .prop_map(|(m, l)| DiagGaussian::new(m, l).unwrap())
    }

    proptest! {
        #[test]
        fn kl_nonnegative(q in gaussian_strategy(4), p in gaussian_strategy(4)) {
            prop_assert!(q.kl(&p).unwrap() >= 0.0);
            prop_assert_eq!(q.kl(&q).unwrap(), 0.0);
        }

        #[test]
        fn prior_score_of_self_is_zero(p in gaussian_strategy(5)) {
            let g = expected_prior_score(&p, &p).unwrap();
            prop_assert_eq!(g.max_abs(), 0.0);
        }

        #[test]
        fn prior_score_is_negative_kl_gradient(q in gaussian_strategy(3), p in gaussian_strategy(3)) {
            let d = p.dim();
            let f = |x: &[f64]| {
                let pp = DiagGaussian { mean: x[..d].to_vec(), log_var: x[d..].to_vec() };
                -q.kl(&pp).unwrap()
            };
            let mut x = p.mean.clone();
            x.extend_from_slice(&p.log_var);
            let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
            let g = expected_prior_score(&q, &p).unwrap();
            let mut a = g.d_mean.clone();
            a.extend_from_slice(&g.d_log_var);
            prop_assert!(max_relative_error(&a, &fd, 1e-6) < 1e-5);
        }

        #[test]
        fn kl_grad_matches_finite_differences(q in gaussian_strategy(3), p in gaussian_strategy(3)) {
            let d = q.dim();
            let f = |x: &[f64]| {
                let qq = DiagGaussian { mean: x[..d].to_vec(), log_var: x[d..].to_vec() };
                qq.kl(&p).unwrap()
            };
            let mut x = q.mean.clone();
            x.extend_from_slice(&q.log_var);
            let fd = finite_diff_grad(f, &x, 1e-6).unwrap();
            let g = q.kl_grad_wrt_q(&p).unwrap();
            let mut a = g.d_mean.clone();
            a.extend_from_slice(&g.d_log_var);
            prop_assert!(max_relative_error(&a, &fd, 1e-6) < 1e-5);
        }
    }

    #[test]
    fn serializes_with_named_fields() {
        let q = DiagGaussian::new(vec![1.0], vec![-2.0]).unwrap();
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, r#"{"mean":[1.0],"log_var":[-2.0]}"#);
        let back: DiagGaussian = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
    }
}
