//! Run configuration.
//!
//! A config file is TOML restricted to `key = value` lines, with sections
//! given by dotted prefixes (`meta.inner.steps = 1` or a `[meta.inner]`
//! header). Command-line overrides use the same dotted keys. Every key has a
//! default, unknown keys are rejected.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::{MetaConfig, Method};
use crate::nn::{Activation, ArchSpec};
use crate::tasks::SinusoidSetting;
use crate::vi::{Optimizer, VIConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchSection {
    fn default() -> Self {
        Self {
            layer_sizes: vec![1, 40, 40, 1],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub mc_samples: usize,
    pub optimizer: OptimizerName,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub learn_log_var: bool,
}

impl ViSection {
    fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            learning_rate: 0.001,
            mc_samples: 5,
            optimizer: OptimizerName::Sgd,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            learn_log_var: true,
        }
    }

    pub fn to_vi_config(&self) -> VIConfig {
        VIConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            mc_samples: self.mc_samples,
            optimizer: match self.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::Adam {
                    beta1: self.adam_beta1,
                    beta2: self.adam_beta2,
                    eps: self.adam_eps,
                },
            },
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            learn_log_var: self.learn_log_var,
        }
    }
}

impl Default for ViSection {
    fn default() -> Self {
        Self::with_steps(1)
    }
}

fn default_inner_test() -> ViSection {
    ViSection::with_steps(10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub method: Method,
    pub meta_lr: f64,
    /// Update rule for the prior; Adam uses the default moment settings.
    pub optimizer: OptimizerName,
    pub meta_batch_size: usize,
    pub iterations: usize,
    pub pooled_vi: bool,
    /// Posterior start log-variance for the collapsed regime; unset by default.
    pub collapsed_log_var: Option<f64>,
    /// Freeze the prior variance at this value; required by delta methods.
    pub fixed_variance: Option<f64>,
    pub init_log_var: f64,
    pub skip_failed_tasks: bool,
    pub inner: ViSection,
    #[serde(default = "default_inner_test")]
    pub inner_test: ViSection,
}

impl Default for MetaSection {
    fn default() -> Self {
        Self {
            method: Method::GemBmlPlus,
            meta_lr: 0.001,
            optimizer: OptimizerName::Sgd,
            meta_batch_size: 5,
            iterations: 20_000,
            pooled_vi: false,
            collapsed_log_var: None,
            fixed_variance: None,
            init_log_var: -6.0,
            skip_failed_tasks: false,
            inner: ViSection::default(),
            inner_test: default_inner_test(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineSection {
    pub setting: SinusoidSetting,
    pub k: usize,
    pub k_split: usize,
    pub test_tasks: usize,
    /// Also meta-test the untrained initial prior.
    pub control: bool,
}

impl Default for SineSection {
    fn default() -> Self {
        Self {
            setting: SinusoidSetting::Default,
            k: 10,
            k_split: 5,
            test_tasks: 600,
            control: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub eps: f64,
    pub tolerance: f64,
    /// Below this magnitude errors are measured absolutely.
    pub abs_floor: f64,
    /// Name of a check whose analytic gradient gets its sign flipped.
    pub inject_sign_flip: String,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            inject_sign_flip: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradErrorSection {
    pub problems: usize,
    pub t_grid: Vec<usize>,
    pub learning_rate: f64,
    pub dim: usize,
    pub rows: usize,
    pub noise_var: f64,
}

impl Default for GradErrorSection {
    fn default() -> Self {
        Self {
            problems: 100,
            t_grid: vec![1, 2, 5, 10, 50, 200],
            learning_rate: 0.1,
            dim: 1,
            rows: 8,
            noise_var: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceRatioSection {
    pub k_values: Vec<usize>,
    pub m: usize,
    pub n_tasks: usize,
    pub n_replicates: usize,
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
    pub bootstrap_resamples: usize,
    /// Allowed relative deviation of the ratio from `m / (m - k)`.
    pub tolerance: f64,
}

impl Default for VarianceRatioSection {
    fn default() -> Self {
        Self {
            k_values: vec![0, 5],
            m: 10,
            n_tasks: 500,
            n_replicates: 500,
            prior_mean: 1.0,
            prior_var: 0.001,
            noise_var: 1.0,
            bootstrap_resamples: 2000,
            tolerance: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PinskerSection {
    pub models: usize,
    pub perturbations_per_model: usize,
    pub scale: f64,
    /// Larger scales that are reported but not checked.
    pub report_scales: Vec<f64>,
    pub mean_shift: f64,
}

impl Default for PinskerSection {
    fn default() -> Self {
        Self {
            models: 100,
            perturbations_per_model: 100,
            scale: 0.1,
            report_scales: vec![0.3, 1.0],
            mean_shift: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2CheckSection {
    pub cases: usize,
    pub tolerance: f64,
}

impl Default for L2CheckSection {
    fn default() -> Self {
        Self {
            cases: 1000,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictiveSection {
    pub n_tasks: usize,
    pub dim: usize,
    pub m: usize,
    pub k: usize,
    pub mean_shift: f64,
    pub var_scale: f64,
    pub alpha: f64,
}

impl Default for PredictiveSection {
    fn default() -> Self {
        Self {
            n_tasks: 10_000,
            dim: 2,
            m: 10,
            k: 5,
            mean_shift: 0.5,
            var_scale: 4.0,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TheorySection {
    pub variance_ratio: VarianceRatioSection,
    pub pinsker: PinskerSection,
    pub l2_check: L2CheckSection,
    pub predictive_optimality: PredictiveSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborhoodSection {
    /// Path of a prior checkpoint written by `sine`.
    pub checkpoint: String,
    /// Tasks whose adapted means span the combinations.
    pub anchors: usize,
    pub combinations: usize,
    pub test_tasks: usize,
    pub factor: f64,
}

impl Default for NeighborhoodSection {
    fn default() -> Self {
        Self {
            checkpoint: String::new(),
            anchors: 10,
            combinations: 100,
            test_tasks: 100,
            factor: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub seed: u64,
    pub out: String,
    pub jobs: usize,
    /// Write a prior checkpoint every this many iterations (0: final only).
    pub checkpoint_every: usize,
    pub noise_var: f64,
    pub arch: ArchSection,
    pub meta: MetaSection,
    pub sine: SineSection,
    pub gradcheck: GradcheckSection,
    pub grad_error: GradErrorSection,
    pub theory: TheorySection,
    pub neighborhood: NeighborhoodSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: "run".into(),
            seed: 0,
            out: "out".into(),
            jobs: 1,
            checkpoint_every: 1000,
            noise_var: 1.0,
            arch: ArchSection::default(),
            meta: MetaSection::default(),
            sine: SineSection::default(),
            gradcheck: GradcheckSection::default(),
            grad_error: GradErrorSection::default(),
            theory: TheorySection::default(),
            neighborhood: NeighborhoodSection::default(),
        }
    }
}

/// Parse `text`, then apply `key=value` overrides.
pub fn load(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
    for ov in overrides {
        apply_override(&mut table, ov)?;
    }
    RunConfig::deserialize(toml::Value::Table(table))
        .map_err(|e| Error::config(e.to_string()))
        .and_then(|c| {
            c.validate()?;
            Ok(c)
        })
}

pub fn load_file(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    load(&text, overrides)
}

fn apply_override(table: &mut toml::Table, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{ov}' is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = parse_value(raw);
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad key '{key}'")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("'{part}' in '{key}' is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    doc.parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::config("jobs must be >= 1"));
        }
        self.arch()?;
        self.meta_config()?.validate()?;
        if self.meta.method.is_delta() && self.meta.fixed_variance.is_none() {
            return Err(Error::config(format!(
                "method {} needs meta.fixed_variance",
                self.meta.method
            )));
        }
        if self.sine.k_split > self.sine.k || self.sine.k == 0 {
            return Err(Error::config("sine.k_split must be within 0..=sine.k"));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<ArchSpec> {
        ArchSpec::new(self.arch.layer_sizes.clone(), self.arch.activation)
            .map_err(|e| Error::config(e.to_string()))
    }

    pub fn meta_config(&self) -> Result<MetaConfig> {
        Ok(MetaConfig {
            method: self.meta.method,
            meta_lr: self.meta.meta_lr,
            meta_optimizer: match self.meta.optimizer {
                OptimizerName::Sgd => Optimizer::Sgd,
                OptimizerName::Adam => Optimizer::adam(),
            },
            meta_batch_size: self.meta.meta_batch_size,
            iterations: self.meta.iterations,
            inner: self.meta.inner.to_vi_config(),
            inner_test: self.meta.inner_test.to_vi_config(),
            seed: self.seed,
            pooled_vi: self.meta.pooled_vi,
            collapsed_log_var: self.meta.collapsed_log_var,
            noise_var: self.noise_var,
            skip_failed_tasks: self.meta.skip_failed_tasks,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering, ignoring `jobs` and `out`
    /// since neither changes results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.jobs = 1;
        c.out.clear();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out)
    }
}

/// Write `bytes` to `path` via a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
