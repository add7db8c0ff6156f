//! Small summary statistics used by the studies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (0 for fewer than two values).
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linear-interpolated quantile of sorted data.
fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Mean with a t-based 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

pub fn mean_ci95(xs: &[f64]) -> MeanCi {
    let n = xs.len();
    let m = mean(xs);
    let half_width = if n < 2 {
        f64::NAN
    } else {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map(|d| d.inverse_cdf(0.975))
            .unwrap_or(1.96);
        t * (variance(xs) / n as f64).sqrt()
    };
    MeanCi {
        mean: m,
        half_width,
        n,
    }
}

/// Paired one-sided t-test of `H1: mean(a - b) > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTest {
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn paired_t_greater(a: &[f64], b: &[f64]) -> PairedTest {
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let m = mean(&diffs);
    let sd = variance(&diffs).sqrt();
    if n < 2 || sd == 0.0 {
        let p_value = if n >= 2 && m > 0.0 { 0.0 } else { 1.0 };
        return PairedTest {
            mean_diff: m,
            t: if m > 0.0 { f64::INFINITY } else { 0.0 },
            p_value,
            n,
        };
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("degrees of freedom >= 1");
    PairedTest {
        mean_diff: m,
        t,
        p_value: 1.0 - dist.cdf(t),
        n,
    }
}

/// Percentile bootstrap interval for `stat` over resampled row indices.
pub fn bootstrap_ci<F>(n: usize, resamples: usize, level: f64, seed: u64, stat: F) -> (f64, f64)
where
    F: Fn(&[usize]) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut values: Vec<f64> = (0..resamples)
        .map(|_| {
            for i in idx.iter_mut() {
                *i = rng.random_range(0..n);
            }
            stat(&idx)
        })
        .collect();
    values.sort_by(f64::total_cmp);
    let a = (1.0 - level) / 2.0;
    (quantile_sorted(&values, a), quantile_sorted(&values, 1.0 - a))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }

    #[test]
    fn t_test_matches_reference() {
        // diffs 1, 2, 3: mean 2, sd 1, t = 2 * sqrt(3); one-sided p with 2 df.
        let t_test = paired_t_greater(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]);
        let t = 2.0 * 3f64.sqrt();
        assert!((t_test.t - t).abs() < 1e-12);
        // For 2 df, P(T > t) = (1 - t / sqrt(t^2 + 2)) / 2.
        let p = 0.5 * (1.0 - t / (t * t + 2.0).sqrt());
        assert!((t_test.p_value - p).abs() < 1e-10);
    }

    #[test]
    fn t_test_degenerate() {
        assert_eq!(paired_t_greater(&[1.0, 1.0], &[1.0, 1.0]).p_value, 1.0);
        assert_eq!(paired_t_greater(&[2.0, 2.0], &[1.0, 1.0]).p_value, 0.0);
    }

    #[test]
    fn bootstrap_of_constant_is_point() {
        let (lo, hi) = bootstrap_ci(10, 200, 0.95, 1, |_| 3.0);
        assert_eq!((lo, hi), (3.0, 3.0));
    }

    #[test]
    fn bootstrap_mean_covers_truth() {
        let xs: Vec<f64> = (0..400).map(|i| (i % 7) as f64).collect();
        let m = mean(&xs);
        let (lo, hi) = bootstrap_ci(xs.len(), 500, 0.95, 3, |idx| {
            idx.iter().map(|&i| xs[i]).sum::<f64>() / idx.len() as f64
        });
        assert!(lo < m && m < hi);
        let ci = mean_ci95(&xs);
        assert!((hi - lo - 2.0 * ci.half_width).abs() < 0.1);
    }
}
