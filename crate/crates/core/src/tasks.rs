//! Seeded task generators.
//!
//! Every generator is a pure function of its configuration and a seed.
//! Points are generated one after another and the train split is the index
//! prefix, so tasks drawn with the same seed but different `k_split` share
//! their first points.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dataset;

/// Mix a base seed with a path of stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    stream.iter().fold(mix(base), |acc, &s| mix(acc ^ mix(s)))
}

/// Where a task came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTask {
    pub train: Dataset,
    pub val: Dataset,
    pub provenance: Provenance,
}

impl SplitTask {
    pub fn pooled(&self) -> Result<Dataset> {
        self.train.concat(&self.val)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SinusoidSetting {
    Default,
    Challenging,
    Easy,
}

impl FromStr for SinusoidSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Self::Default),
            "challenging" => Ok(Self::Challenging),
            "easy" => Ok(Self::Easy),
            other => Err(Error::invalid(format!("unknown sinusoid setting '{other}'"))),
        }
    }
}

impl fmt::Display for SinusoidSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Default => "default",
            Self::Challenging => "challenging",
            Self::Easy => "easy",
        })
    }
}

/// Sampling ranges of one sinusoid setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidRanges {
    pub amplitude: (f64, f64),
    pub phase: (f64, f64),
    pub frequency: (f64, f64),
    /// Noise standard deviation is `noise_scale * A`.
    pub noise_scale: f64,
    pub x: (f64, f64),
}

impl SinusoidSetting {
    pub fn ranges(self) -> SinusoidRanges {
        match self {
            Self::Default => SinusoidRanges {
                amplitude: (0.1, 5.0),
                phase: (0.0, PI),
                frequency: (1.0, 1.0),
                noise_scale: 0.0,
                x: (-5.0, 5.0),
            },
            Self::Challenging => SinusoidRanges {
                amplitude: (0.1, 5.0),
                phase: (0.0, 2.0 * PI),
                frequency: (0.5, 2.0),
                noise_scale: 0.01,
                x: (-5.0, 5.0),
            },
            Self::Easy => SinusoidRanges {
                amplitude: (0.1, 5.0),
                phase: (0.0, 2.0 * PI),
                frequency: (0.5, 1.0),
                noise_scale: 0.0,
                x: (-5.0, 5.0),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinusoidParams {
    pub amplitude: f64,
    pub phase: f64,
    pub frequency: f64,
    pub noise_std: f64,
}

impl SinusoidParams {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * (self.frequency * x + self.phase).sin()
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn check_split(k: usize, k_split: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("a task needs at least one point"));
    }
    if k_split > k {
        return Err(Error::invalid(format!("k_split {k_split} exceeds K {k}")));
    }
    Ok(())
}

fn split_rows(
    n_in: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    k_split: usize,
) -> Result<(Dataset, Dataset)> {
    let (x_tr, x_val) = xs.split_at(k_split * n_in);
    let (y_tr, y_val) = ys.split_at(k_split);
    Ok((
        Dataset::new(n_in, 1, x_tr.to_vec(), y_tr.to_vec())?,
        Dataset::new(n_in, 1, x_val.to_vec(), y_val.to_vec())?,
    ))
}

/// Draw task parameters, then `K` points `y = A sin(w x + b) + eps`.
pub fn sample_sinusoid(
    setting: SinusoidSetting,
    rng_seed: u64,
    k: usize,
    k_split: usize,
) -> Result<(SplitTask, SinusoidParams)> {
    check_split(k, k_split)?;
    let r = setting.ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let amplitude = uniform(&mut rng, r.amplitude);
    let phase = uniform(&mut rng, r.phase);
    let frequency = uniform(&mut rng, r.frequency);
    let params = SinusoidParams {
        amplitude,
        phase,
        frequency,
        noise_std: r.noise_scale * amplitude,
    };
    let mut xs = Vec::with_capacity(k);
    let mut ys = Vec::with_capacity(k);
    for _ in 0..k {
        let x = uniform(&mut rng, r.x);
        let eps = if params.noise_std > 0.0 {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.noise_std * z
        } else {
            0.0
        };
        xs.push(x);
        ys.push(params.eval(x) + eps);
    }
    let (train, val) = split_rows(1, xs, ys, k_split)?;
    let provenance = Provenance {
        generator: format!("sinusoid/{setting}"),
        seed: rng_seed,
        params: BTreeMap::from([
            ("amplitude".to_string(), amplitude),
            ("phase".to_string(), phase),
            ("frequency".to_string(), frequency),
            ("noise_std".to_string(), params.noise_std),
        ]),
    };
    Ok((
        SplitTask {
            train,
            val,
            provenance,
        },
        params,
    ))
}

/// How design rows of a conjugate task are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    /// Every row is the all-ones vector.
    Ones,
    /// Rows are i.i.d. standard normal.
    Gaussian,
}

/// `theta ~ N(prior_mean, diag(prior_var))`, `y_i = x_i^T theta + N(0, noise_var)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateTaskFamily {
    pub design: Design,
    pub prior_mean: Vec<f64>,
    pub prior_var: Vec<f64>,
    pub noise_var: f64,
}

impl ConjugateTaskFamily {
    pub fn new(design: Design, prior_mean: Vec<f64>, prior_var: Vec<f64>, noise_var: f64) -> Result<Self> {
        if prior_mean.is_empty() || prior_mean.len() != prior_var.len() {
            return Err(Error::invalid("prior mean/variance must be nonempty and equal length"));
        }
        if prior_var.iter().any(|v| !(*v > 0.0)) || !(noise_var >= 0.0) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(Self {
            design,
            prior_mean,
            prior_var,
            noise_var,
        })
    }

    pub fn dim(&self) -> usize {
        self.prior_mean.len()
    }
}

/// Draw `theta` from the family's prior, then `m` observations.
///
/// The returned `theta` is for diagnostics only.
pub fn sample_conjugate_task(
    family: &ConjugateTaskFamily,
    rng_seed: u64,
    m: usize,
    k_split: usize,
) -> Result<(SplitTask, Vec<f64>)> {
    check_split(m, k_split)?;
    let p = family.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let theta: Vec<f64> = family
        .prior_mean
        .iter()
        .zip(&family.prior_var)
        .map(|(mu, v)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu + v.sqrt() * z
        })
        .collect();
    let noise = Normal::new(0.0, family.noise_var.sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut xs = Vec::with_capacity(m * p);
    let mut ys = Vec::with_capacity(m);
    for _ in 0..m {
        let row: Vec<f64> = match family.design {
            Design::Ones => vec![1.0; p],
            Design::Gaussian => (0..p).map(|_| StandardNormal.sample(&mut rng)).collect(),
        };
        let mean: f64 = row.iter().zip(&theta).map(|(x, t)| x * t).sum();
        ys.push(mean + noise.sample(&mut rng));
        xs.extend(row);
    }
    let (train, val) = split_rows(p, xs, ys, k_split)?;
    let params = theta
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("theta_{i}"), *t))
        .collect();
    Ok((
        SplitTask {
            train,
            val,
            provenance: Provenance {
                generator: "conjugate".into(),
                seed: rng_seed,
                params,
            },
        },
        theta,
    ))
}

/// A deterministic source of tasks indexed by seed.
pub trait TaskSampler: Sync {
    fn sample(&self, seed: u64) -> Result<SplitTask>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinusoidSampler {
    pub setting: SinusoidSetting,
    pub k: usize,
    pub k_split: usize,
}

impl TaskSampler for SinusoidSampler {
    fn sample(&self, seed: u64) -> Result<SplitTask> {
        Ok(sample_sinusoid(self.setting, seed, self.k, self.k_split)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConjugateSampler {
    pub family: ConjugateTaskFamily,
    pub m: usize,
    pub k_split: usize,
}

impl TaskSampler for ConjugateSampler {
    fn sample(&self, seed: u64) -> Result<SplitTask> {
        Ok(sample_conjugate_task(&self.family, seed, self.m, self.k_split)?.0)
    }
}

/// Write tasks as CSV rows `task,split,x0..,y0..`.
pub fn write_tasks_csv<W: Write>(out: W, tasks: &[SplitTask]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let (n_in, n_out) = tasks
        .first()
        .map(|t| (t.train.input_dim(), t.train.output_dim()))
        .unwrap_or((1, 1));
    let mut header = vec!["task".to_string(), "split".to_string()];
    header.extend((0..n_in).map(|i| format!("x{i}")));
    header.extend((0..n_out).map(|i| format!("y{i}")));
    w.write_record(&header)?;
    for (ti, task) in tasks.iter().enumerate() {
        for (tag, data) in [("train", &task.train), ("val", &task.val)] {
            for r in 0..data.len() {
                let mut rec = vec![ti.to_string(), tag.to_string()];
                rec.extend(data.input(r).iter().map(|v| v.to_string()));
                rec.extend(data.target(r).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
