//! Experiment commands behind the `gembml` binary.
//!
//! Each command reads a [`RunConfig`], writes CSV/JSON artifacts under the
//! configured output directory and finishes with `manifest.json`. Parallel
//! work runs on the ambient rayon pool; only this module writes files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{write_atomic, RunConfig};
use crate::error::{Error, Result};
use crate::gaussian::{expected_prior_score, DiagGaussian};
use crate::meta::{adapt_mean, meta_test, meta_train, MetaParams, MetaTestReport, MlpSolver};
use crate::nn::{self, finite_diff_grad, max_relative_error, ArchSpec, Activation, Dataset};
use crate::oracle::{
    exact_log_marginal, exact_marginal_grad, l2_decomposition_check, local_perturbations, mean_field_elbo,
    mean_shift_report, pinsker_bound_study, posterior_predictive_optimality_check, unrolled_vi_estimates,
    variance_ratio_study, ConjugateModel, DecisionRule, VarianceRatioConfig,
};
use crate::stats;
use crate::tasks::{derive_seed, ConjugateTaskFamily, Design, SinusoidSampler, SplitTask, TaskSampler};
use crate::vi::{elbo_and_grad, elbo_estimate_with, MlpLikelihood};

const STREAM_TEST_TASKS: u64 = 4;
const STREAM_ANCHORS: u64 = 5;
const STREAM_INIT: u64 = 6;
const STREAM_STUDY: u64 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    VarianceRatio,
    Pinsker,
    L2Check,
    PredictiveOptimality,
}

impl Study {
    pub fn name(self) -> &'static str {
        match self {
            Study::VarianceRatio => "variance_ratio",
            Study::Pinsker => "pinsker",
            Study::L2Check => "l2_check",
            Study::PredictiveOptimality => "predictive_optimality",
        }
    }
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Study::VarianceRatio, Study::Pinsker, Study::L2Check, Study::PredictiveOptimality]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown study '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Gradcheck,
    GradErrorStudy,
    Sine,
    Theory(Study),
    Neighborhood,
}

impl Command {
    pub fn name(self) -> String {
        match self {
            Command::Gradcheck => "gradcheck".into(),
            Command::GradErrorStudy => "grad-error-study".into(),
            Command::Sine => "sine".into(),
            Command::Theory(s) => format!("theory {}", s.name()),
            Command::Neighborhood => "neighborhood".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub outputs: Vec<String>,
    /// `None` on success, otherwise the failed check or error.
    pub failure: Option<String>,
}

/// Saved prior, written by `sine`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub theta: MetaParams,
    pub config_hash: String,
    pub seed: u64,
}

/// Tracks the files a command writes.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(p)
    }

    fn csv(&mut self, name: &str, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
        let file = File::create(self.path(name)?)?;
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(file));
        w.write_record(header)?;
        Ok(w)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        write_atomic(&self.path(name)?, text.as_bytes())
    }
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn f(v: f64) -> String {
    v.to_string()
}

/// Run `cmd` and write the manifest; a failed check surfaces as
/// [`Error::CheckFailed`] after all artifacts are on disk.
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<RunManifest> {
    let started = now();
    let mut out = Outputs::new(&cfg.out_dir())?;
    let result = match cmd {
        Command::Gradcheck => cmd_gradcheck(cfg, &mut out),
        Command::GradErrorStudy => cmd_grad_error_study(cfg, &mut out),
        Command::Sine => cmd_sine(cfg, &mut out),
        Command::Theory(study) => cmd_theory(study, cfg, &mut out),
        Command::Neighborhood => cmd_neighborhood(cfg, &mut out),
    };
    let failure = match &result {
        Ok(None) => None,
        Ok(Some(msg)) => Some(msg.clone()),
        Err(e) => Some(e.to_string()),
    };
    let mut files = out.files.clone();
    files.sort();
    let manifest = RunManifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash(),
        config: cfg.to_toml(),
        seed: cfg.seed,
        started_unix: started,
        finished_unix: now(),
        outputs: files,
        failure,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&cfg.out_dir().join("manifest.json"), text.as_bytes())?;
    match result {
        Ok(None) => Ok(manifest),
        Ok(Some(msg)) => Err(Error::CheckFailed(msg)),
        Err(e) => Err(e),
    }
}

/// `Ok(Some(msg))` reports a failed check.
type Outcome = Result<Option<String>>;

// ---------------------------------------------------------------- gradcheck

struct GradCheck {
    name: &'static str,
    group: &'static str,
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn sine_data(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, rows: usize) -> Result<Dataset> {
    let inputs: Vec<f64> = (0..rows * n_in).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets: Vec<f64> = (0..rows * n_out)
        .map(|i| (inputs[(i / n_out) * n_in]).sin() + 0.1 * (i % n_out) as f64)
        .collect();
    Dataset::new(n_in, n_out, inputs, targets)
}

fn split(v: &[f64]) -> DiagGaussian {
    let d = v.len() / 2;
    DiagGaussian {
        mean: v[..d].to_vec(),
        log_var: v[d..].to_vec(),
    }
}

fn random_conjugate(rng: &mut ChaCha8Rng, p: usize, m: usize, noise_var: f64) -> Result<(ConjugateModel, DVector<f64>)> {
    let x = DMatrix::from_fn(m, p, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let prior = DiagGaussian::new(
        (0..p).map(|_| rng.random_range(-2.0..2.0)).collect(),
        (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let theta = DVector::from_iterator(
        p,
        prior.mean.iter().zip(&prior.log_var).map(|(mu, lv)| {
            let z: f64 = StandardNormal.sample(rng);
            mu + (0.5 * lv).exp() * z
        }),
    );
    let mean = &x * theta;
    let y = DVector::from_iterator(
        m,
        mean.iter().map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            v + noise_var.sqrt() * z
        }),
    );
    Ok((ConjugateModel::new(x, noise_var, prior)?, y))
}

fn registered_checks(eps: f64, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_STUDY]));
    let mut checks = Vec::new();

    let nets: [(&'static str, Vec<usize>, Activation); 3] = [
        ("mlp_relu_1_40_40_1", vec![1, 40, 40, 1], Activation::Relu),
        ("mlp_tanh_3_8_2", vec![3, 8, 2], Activation::Tanh),
        ("mlp_identity_2_5_4_3", vec![2, 5, 4, 3], Activation::Identity),
    ];
    for (name, sizes, act) in nets {
        let arch = ArchSpec::new(sizes, act)?;
        let data = sine_data(&mut rng, arch.input_dim(), arch.output_dim(), 12)?;
        let params = normal_vec(&mut rng, arch.parameter_count(), 0.4);
        let (_, analytic) = nn::nll_and_grad(&arch, &params, &data, 0.5)?;
        let numeric = finite_diff_grad(|p| nn::nll(&arch, p, &data, 0.5).unwrap_or(f64::NAN), &params, eps)?;
        checks.push(GradCheck {
            name,
            group: "nn",
            analytic,
            numeric,
        });
    }

    let d = 6;
    let q = DiagGaussian::new(normal_vec(&mut rng, d, 1.0), normal_vec(&mut rng, d, 0.7))?;
    let p = DiagGaussian::new(normal_vec(&mut rng, d, 1.0), normal_vec(&mut rng, d, 0.7))?;
    let qv: Vec<f64> = q.mean.iter().chain(&q.log_var).copied().collect();
    let pv: Vec<f64> = p.mean.iter().chain(&p.log_var).copied().collect();

    let g = q.kl_grad_wrt_q(&p)?;
    checks.push(GradCheck {
        name: "kl_wrt_posterior",
        group: "gaussian",
        analytic: g.d_mean.iter().chain(&g.d_log_var).copied().collect(),
        numeric: finite_diff_grad(|v| split(v).kl(&p).unwrap_or(f64::NAN), &qv, eps)?,
    });

    let g = expected_prior_score(&q, &p)?;
    checks.push(GradCheck {
        name: "expected_prior_score",
        group: "gaussian",
        analytic: g.d_mean.iter().chain(&g.d_log_var).copied().collect(),
        numeric: finite_diff_grad(|v| -q.kl(&split(v)).unwrap_or(f64::NAN), &pv, eps)?,
    });

    let arch = ArchSpec::new(vec![1, 6, 1], Activation::Tanh)?;
    let data = sine_data(&mut rng, 1, 1, 8)?;
    let dim = arch.parameter_count();
    let lam = DiagGaussian::new(normal_vec(&mut rng, dim, 0.5), normal_vec(&mut rng, dim, 0.3).iter().map(|v| v - 2.0).collect())?;
    let prior = DiagGaussian::isotropic(vec![0.0; dim], 0.0)?;
    let draws: Vec<Vec<f64>> = (0..3).map(|_| normal_vec(&mut rng, dim, 1.0)).collect();
    let lik = MlpLikelihood {
        arch: &arch,
        data: &data,
        noise_var: 0.5,
    };
    let (_, g) = elbo_and_grad(&lam, &prior, &lik, &draws)?;
    let lv: Vec<f64> = lam.mean.iter().chain(&lam.log_var).copied().collect();
    checks.push(GradCheck {
        name: "elbo_wrt_variational_params",
        group: "gaussian",
        analytic: g.d_mean.iter().chain(&g.d_log_var).copied().collect(),
        numeric: finite_diff_grad(|v| elbo_estimate_with(&split(v), &prior, &lik, &draws).unwrap_or(f64::NAN), &lv, eps)?,
    });

    let (model, y) = random_conjugate(&mut rng, 3, 7, 0.8)?;
    let pv: Vec<f64> = model.prior.mean.iter().chain(&model.prior.log_var).copied().collect();
    let g = exact_marginal_grad(&model, &y)?;
    checks.push(GradCheck {
        name: "log_marginal_wrt_prior",
        group: "gaussian",
        analytic: g.d_mean.iter().chain(&g.d_log_var).copied().collect(),
        numeric: finite_diff_grad(|v| exact_log_marginal(&model.with_prior(split(v)), &y).unwrap_or(f64::NAN), &pv, eps)?,
    });

    let (steps, lr) = (5, 0.05);
    let g = unrolled_vi_estimates(&model, &y, steps, lr)?.elbo;
    let unrolled_elbo = |v: &[f64]| -> f64 {
        let m = model.with_prior(split(v));
        unrolled_vi_estimates(&m, &y, steps, lr)
            .and_then(|u| mean_field_elbo(&m, &y, &u.lambda))
            .unwrap_or(f64::NAN)
    };
    checks.push(GradCheck {
        name: "unrolled_elbo_wrt_prior",
        group: "gaussian",
        analytic: g.d_mean.iter().chain(&g.d_log_var).copied().collect(),
        numeric: finite_diff_grad(unrolled_elbo, &pv, eps)?,
    });
    Ok(checks)
}

fn cmd_gradcheck(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let gc = &cfg.gradcheck;
    let mut checks = registered_checks(gc.eps, cfg.seed)?;
    if !gc.inject_sign_flip.is_empty() {
        let target = checks
            .iter_mut()
            .find(|c| c.name == gc.inject_sign_flip)
            .ok_or_else(|| Error::config(format!("no check named '{}'", gc.inject_sign_flip)))?;
        target.analytic.iter_mut().for_each(|v| *v = -*v);
    }
    let mut w = out.csv("gradcheck.csv", &["check", "group", "n_params", "max_rel_error", "tolerance", "passed"])?;
    let mut first_failure = None;
    for c in &checks {
        let err = max_relative_error(&c.analytic, &c.numeric, gc.abs_floor);
        let passed = err <= gc.tolerance;
        if !passed && first_failure.is_none() {
            first_failure = Some(format!(
                "gradient check '{}' failed: max relative error {err:e} > {:e}",
                c.name, gc.tolerance
            ));
        }
        w.write_record([
            c.name.to_string(),
            c.group.to_string(),
            c.analytic.len().to_string(),
            f(err),
            f(gc.tolerance),
            passed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(first_failure)
}

// --------------------------------------------------------- grad-error-study

fn cmd_grad_error_study(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let ge = &cfg.grad_error;
    if ge.problems == 0 || ge.t_grid.is_empty() || ge.dim == 0 || ge.rows == 0 {
        return Err(Error::config("grad_error needs problems, t_grid, dim and rows >= 1"));
    }
    // errors[problem][t] = (gem, elbo)
    let errors: Vec<Vec<(f64, f64)>> = (0..ge.problems as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_STUDY, i]));
            let (model, y) = random_conjugate(&mut rng, ge.dim, ge.rows, ge.noise_var)?;
            let exact = exact_marginal_grad(&model, &y)?;
            ge.t_grid
                .iter()
                .map(|&t| {
                    let est = unrolled_vi_estimates(&model, &y, t, ge.learning_rate)?;
                    Ok(((&est.gem - &exact).norm(), (&est.elbo - &exact).norm()))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut w = out.csv("grad_error.csv", &["problem", "T", "gem_error", "elbo_error"])?;
    for (i, row) in errors.iter().enumerate() {
        for (&t, &(g, e)) in ge.t_grid.iter().zip(row) {
            w.write_record([i.to_string(), t.to_string(), f(g), f(e)])?;
        }
    }
    w.flush()?;

    let mut s = out.csv("grad_error_summary.csv", &["T", "median_gem_error", "median_elbo_error"])?;
    let mut medians = Vec::new();
    for (j, &t) in ge.t_grid.iter().enumerate() {
        let g = stats::median(&errors.iter().map(|r| r[j].0).collect::<Vec<_>>());
        let e = stats::median(&errors.iter().map(|r| r[j].1).collect::<Vec<_>>());
        s.write_record([t.to_string(), f(g), f(e)])?;
        medians.push((t, g, e));
    }
    s.flush()?;

    let ordering = medians.iter().all(|&(_, g, e)| g <= e);
    let (_, g_last, e_last) = *medians.last().expect("t_grid non-empty");
    let (_, g_first, e_first) = medians[0];
    let summary = json!({
        "problems": ge.problems,
        "learning_rate": ge.learning_rate,
        "medians": medians.iter().map(|&(t, g, e)| json!({"T": t, "gem_error": g, "elbo_error": e})).collect::<Vec<_>>(),
        "gem_not_worse_at_every_T": ordering,
        "both_decrease": g_last < g_first && e_last < e_first,
        "largest_T_gem_error": g_last,
        "largest_T_elbo_error": e_last,
        "largest_T_within_1e-4": g_last <= 1e-4 && e_last <= 1e-4,
    });
    out.json("grad_error_summary.json", &summary)?;
    Ok(None)
}

// --------------------------------------------------------------------- sine

fn test_tasks(sampler: &dyn TaskSampler, seed: u64, n: usize) -> Result<Vec<SplitTask>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| sampler.sample(derive_seed(seed, &[STREAM_TEST_TASKS, i])))
        .collect()
}

fn sine_parts(cfg: &RunConfig) -> Result<(SinusoidSampler, MlpSolver)> {
    let arch = cfg.arch()?;
    if arch.input_dim() != 1 || arch.output_dim() != 1 {
        return Err(Error::config("sinusoid tasks need a 1-input, 1-output network"));
    }
    Ok((
        SinusoidSampler {
            setting: cfg.sine.setting,
            k: cfg.sine.k,
            k_split: cfg.sine.k_split,
        },
        MlpSolver {
            arch,
            noise_var: cfg.noise_var,
        },
    ))
}

pub fn initial_prior(cfg: &RunConfig) -> Result<MetaParams> {
    let dim = cfg.arch()?.parameter_count();
    MetaParams::init(dim, cfg.meta.init_log_var, cfg.meta.fixed_variance, derive_seed(cfg.seed, &[STREAM_INIT]))
}

fn write_metatest(
    w: &mut csv::Writer<BufWriter<File>>,
    per_task: &mut csv::Writer<BufWriter<File>>,
    label: &str,
    report: &MetaTestReport,
) -> Result<()> {
    for (s, ci) in report.per_step.iter().enumerate() {
        w.write_record([label.to_string(), s.to_string(), f(ci.mean), f(ci.half_width), ci.n.to_string()])?;
    }
    for (t, row) in report.per_task.iter().enumerate() {
        for (s, v) in row.iter().enumerate() {
            per_task.write_record([label.to_string(), t.to_string(), s.to_string(), f(*v)])?;
        }
    }
    Ok(())
}

fn cmd_sine(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let (sampler, solver) = sine_parts(cfg)?;
    let mcfg = cfg.meta_config()?;
    let hash = cfg.hash();
    let init = initial_prior(cfg)?;

    let mut trained = None;
    if mcfg.iterations > 0 {
        let mut diag = out.csv(
            "diagnostics.csv",
            &["iteration", "task_index", "method", "elbo_tr", "elbo_trval", "grad_norm_mean", "grad_norm_logvar"],
        )?;
        let every = cfg.checkpoint_every;
        let params = meta_train(&sampler, &mcfg, &solver, init.clone(), |rep| {
            for d in rep.tasks {
                diag.write_record([
                    d.iteration.to_string(),
                    d.task_index.to_string(),
                    d.method.to_string(),
                    f(d.elbo_tr),
                    f(d.elbo_trval),
                    f(d.grad_norm_mean),
                    f(d.grad_norm_logvar),
                ])?;
            }
            let done = rep.iteration + 1;
            if every > 0 && done % every == 0 {
                diag.flush()?;
                let ck = Checkpoint {
                    iteration: done,
                    theta: rep.params.clone(),
                    config_hash: hash.clone(),
                    seed: cfg.seed,
                };
                out.json(&format!("checkpoints/iter_{done:06}.json"), &ck)?;
            }
            Ok(())
        })?;
        diag.flush()?;
        trained = Some(params);
    }

    let final_ck = Checkpoint {
        iteration: mcfg.iterations,
        theta: trained.clone().unwrap_or_else(|| init.clone()),
        config_hash: hash,
        seed: cfg.seed,
    };
    out.json("prior.json", &final_ck)?;

    let tasks = test_tasks(&sampler, cfg.seed, cfg.sine.test_tasks)?;
    let mut w = out.csv("metatest.csv", &["model", "step", "mean_mse", "ci95_half_width", "n_tasks"])?;
    let mut pt = out.csv("metatest_tasks.csv", &["model", "task", "step", "mse"])?;
    let mut summary = serde_json::Map::new();
    let steps = mcfg.inner_test.steps;

    let control = if trained.is_none() || cfg.sine.control {
        Some(meta_test(&init, &tasks, &mcfg, &solver)?)
    } else {
        None
    };
    if let Some(params) = &trained {
        let report = meta_test(params, &tasks, &mcfg, &solver)?;
        write_metatest(&mut w, &mut pt, "trained", &report)?;
        let improvement = stats::paired_t_greater(&report.step_column(0), &report.step_column(steps));
        summary.insert("trained_mse_step0".into(), json!(report.per_step[0].mean));
        summary.insert("trained_mse_final".into(), json!(report.per_step[steps].mean));
        summary.insert("improvement_p_value".into(), json!(improvement.p_value));
        if let Some(c) = &control {
            summary.insert("control_mse_final".into(), json!(c.per_step[steps].mean));
            summary.insert(
                "trained_beats_control".into(),
                json!(report.per_step[steps].mean < c.per_step[steps].mean),
            );
        }
    }
    if let Some(c) = &control {
        write_metatest(&mut w, &mut pt, "untrained", c)?;
        summary.insert("untrained_mse_step0".into(), json!(c.per_step[0].mean));
        summary.insert("untrained_mse_final".into(), json!(c.per_step[steps].mean));
    }
    w.flush()?;
    pt.flush()?;
    summary.insert("steps".into(), json!(steps));
    summary.insert("test_tasks".into(), json!(tasks.len()));
    out.json("summary.json", &summary)?;
    Ok(None)
}

// ------------------------------------------------------------------- theory

fn cmd_theory(study: Study, cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    match study {
        Study::VarianceRatio => study_variance_ratio(cfg, out),
        Study::Pinsker => study_pinsker(cfg, out),
        Study::L2Check => study_l2(cfg, out),
        Study::PredictiveOptimality => study_predictive(cfg, out),
    }
}

fn study_variance_ratio(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let vr = &cfg.theory.variance_ratio;
    let mut est = out.csv("variance_ratio.csv", &["k", "replicate", "estimate_l1", "estimate_l2"])?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for &k in &vr.k_values {
        let vc = VarianceRatioConfig {
            k,
            m: vr.m,
            n_tasks: vr.n_tasks,
            n_replicates: vr.n_replicates,
            prior_mean: vr.prior_mean,
            prior_var: vr.prior_var,
            noise_var: vr.noise_var,
            bootstrap_resamples: vr.bootstrap_resamples,
        };
        let rep = variance_ratio_study(&vc, derive_seed(cfg.seed, &[STREAM_STUDY, k as u64]))?;
        for (r, (a, b)) in rep.estimates_l1.iter().zip(&rep.estimates_l2).enumerate() {
            est.write_record([k.to_string(), r.to_string(), f(*a), f(*b)])?;
        }
        let ok = if k == 0 {
            rep.ci_low <= 1.0 && 1.0 <= rep.ci_high
        } else {
            (rep.ratio - rep.predicted).abs() <= vr.tolerance * rep.predicted
        };
        if !ok {
            failures.push(format!("k={k}: ratio {} (predicted {})", rep.ratio, rep.predicted));
        }
        rows.push((k, rep, ok));
    }
    est.flush()?;
    let mut s = out.csv(
        "variance_ratio_summary.csv",
        &["k", "m", "ratio", "ci_low", "ci_high", "predicted", "predicted_exact", "var_l1", "var_l2", "passed"],
    )?;
    for (k, r, ok) in &rows {
        s.write_record([
            k.to_string(),
            vr.m.to_string(),
            f(r.ratio),
            f(r.ci_low),
            f(r.ci_high),
            f(r.predicted),
            f(r.predicted_exact),
            f(r.var_l1),
            f(r.var_l2),
            ok.to_string(),
        ])?;
    }
    s.flush()?;
    Ok((!failures.is_empty()).then(|| format!("variance ratio outside band: {}", failures.join("; "))))
}

fn study_pinsker(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let ps = &cfg.theory.pinsker;
    let mut scales = vec![(ps.scale, true)];
    scales.extend(ps.report_scales.iter().map(|&s| (s, false)));
    let per_model: Vec<Vec<(usize, f64, bool, crate::oracle::BoundReport)>> = (0..ps.models as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_STUDY, i]));
            let p = rng.random_range(1..=3usize);
            let m = rng.random_range(1..=8usize);
            let (model, y) = random_conjugate(&mut rng, p, m, 1.0)?;
            let post = crate::oracle::exact_posterior(&model, &y)?;
            let mut rows = Vec::new();
            for (si, &(scale, checked)) in scales.iter().enumerate() {
                let perts = local_perturbations(&post, ps.perturbations_per_model, scale, derive_seed(cfg.seed, &[STREAM_STUDY, i, si as u64]));
                for (j, r) in pinsker_bound_study(&model, &y, &perts)?.into_iter().enumerate() {
                    rows.push((j, scale, checked, r));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;

    let mut w = out.csv(
        "pinsker.csv",
        &["model", "perturbation", "scale", "checked", "error", "kl", "m_const", "bound", "holds"],
    )?;
    let (mut checked_n, mut violations, mut reported_violations) = (0usize, 0usize, 0usize);
    for (i, rows) in per_model.iter().enumerate() {
        for (j, scale, checked, r) in rows {
            let holds = r.holds(1e-12);
            if *checked {
                checked_n += 1;
                violations += usize::from(!holds);
            } else {
                reported_violations += usize::from(!holds);
            }
            w.write_record([
                i.to_string(),
                j.to_string(),
                f(*scale),
                checked.to_string(),
                f(r.error),
                f(r.kl),
                f(r.m_const),
                f(r.bound),
                holds.to_string(),
            ])?;
        }
    }
    w.flush()?;
    let shift = mean_shift_report(ps.mean_shift)?;
    let shift_ok = (shift.error - ps.mean_shift.abs()).abs() <= 1e-12 && (shift.bound - ps.mean_shift.abs()).abs() <= 1e-12;
    out.json(
        "pinsker_summary.json",
        &json!({
            "checked_perturbations": checked_n,
            "scale": ps.scale,
            "violations": violations,
            "violations_at_report_scales": reported_violations,
            "report_scales": ps.report_scales,
            "mean_shift": {"delta": ps.mean_shift, "error": shift.error, "bound": shift.bound, "kl": shift.kl, "matches": shift_ok},
        }),
    )?;
    Ok(if violations > 0 {
        Some(format!("{violations} bound violations at scale {}", ps.scale))
    } else if !shift_ok {
        Some(format!("mean-shift example: error {} bound {}", shift.error, shift.bound))
    } else {
        None
    })
}

fn study_l2(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let lc = &cfg.theory.l2_check;
    let rows: Vec<(usize, usize, usize, crate::oracle::L2Check)> = (0..lc.cases as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_STUDY, i]));
            let p = [1, 2, 5][i as usize % 3];
            // The first cases pin the empty-train, empty-val and both-empty edges.
            let (k, n_val) = match i {
                0 => (0, 4),
                1 => (4, 0),
                2 => (0, 0),
                _ => (rng.random_range(0..=8usize), rng.random_range(0..=8usize)),
            };
            let (model, y) = {
                let noise = rng.random_range(0.3..2.0);
                random_conjugate(&mut rng, p, k + n_val, noise)?
            };
            let y_tr = y.rows(0, k).into_owned();
            let y_val = y.rows(k, n_val).into_owned();
            Ok((p, k, n_val, l2_decomposition_check(&model, &y_tr, &y_val)?))
        })
        .collect::<Result<_>>()?;
    let mut w = out.csv("l2_check.csv", &["case", "p", "k", "n_val", "direct", "decomposed", "residual"])?;
    let mut max_res: f64 = 0.0;
    for (i, (p, k, n, c)) in rows.iter().enumerate() {
        max_res = max_res.max(c.residual);
        w.write_record([i.to_string(), p.to_string(), k.to_string(), n.to_string(), f(c.direct), f(c.decomposed), f(c.residual)])?;
    }
    w.flush()?;
    out.json(
        "l2_check_summary.json",
        &json!({"cases": rows.len(), "max_residual": max_res, "tolerance": lc.tolerance}),
    )?;
    Ok((!(max_res <= lc.tolerance)).then(|| format!("max residual {max_res:e} > {:e}", lc.tolerance)))
}

fn study_predictive(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let pc = &cfg.theory.predictive_optimality;
    let family = ConjugateTaskFamily::new(Design::Gaussian, vec![0.0; pc.dim], vec![1.0; pc.dim], 1.0)?;
    let rules = [
        DecisionRule::new("shifted_mean", pc.mean_shift, 1.0),
        DecisionRule::new("inflated_variance", 0.0, pc.var_scale),
    ];
    let scores = posterior_predictive_optimality_check(&family, pc.m, pc.k, pc.n_tasks, &rules, derive_seed(cfg.seed, &[STREAM_STUDY]))?;
    let mut w = out.csv(
        "predictive_optimality.csv",
        &["rule", "mean_score", "std_error", "mean_deficit", "t", "p_value", "n_tasks"],
    )?;
    let mut failures = Vec::new();
    for s in &scores {
        w.write_record([
            s.rule.clone(),
            f(s.mean_score),
            f(s.std_error),
            f(s.mean_deficit),
            f(s.test.t),
            f(s.test.p_value),
            s.test.n.to_string(),
        ])?;
        if !(s.mean_deficit > 0.0 && s.test.p_value < pc.alpha) {
            failures.push(s.rule.clone());
        }
    }
    w.flush()?;
    Ok((!failures.is_empty()).then(|| format!("exact posterior not significantly better than: {}", failures.join(", "))))
}

// ------------------------------------------------------------- neighborhood

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(format!("checkpoint {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::config(format!("checkpoint {}: {e}", path.display())))
}

fn cmd_neighborhood(cfg: &RunConfig, out: &mut Outputs) -> Outcome {
    let nb = &cfg.neighborhood;
    if nb.checkpoint.is_empty() {
        return Err(Error::config("neighborhood.checkpoint is not set"));
    }
    if nb.anchors == 0 || nb.test_tasks == 0 {
        return Err(Error::config("neighborhood needs anchors and test_tasks >= 1"));
    }
    let ck = load_checkpoint(Path::new(&nb.checkpoint))?;
    let (sampler, solver) = sine_parts(cfg)?;
    let mcfg = cfg.meta_config()?;
    let trained = ck.theta;

    let anchors: Vec<Vec<f64>> = (0..nb.anchors as u64)
        .into_par_iter()
        .map(|i| {
            let task = sampler.sample(derive_seed(cfg.seed, &[STREAM_ANCHORS, i]))?;
            adapt_mean(&trained, &task.train, &mcfg, &solver, derive_seed(cfg.seed, &[STREAM_ANCHORS, i, 1]))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[STREAM_ANCHORS, u64::MAX]));
    let mut inits = vec![("trained".to_string(), trained.clone())];
    for j in 0..nb.combinations {
        // Flat Dirichlet weights from normalized exponentials.
        let raw: Vec<f64> = (0..nb.anchors).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let total: f64 = raw.iter().sum();
        let mut mean = vec![0.0; trained.dim()];
        for (w, a) in raw.iter().zip(&anchors) {
            for (m, v) in mean.iter_mut().zip(a) {
                *m += w / total * v;
            }
        }
        let mut p = trained.clone();
        p.theta.mean = mean;
        inits.push((format!("combination_{j}"), p));
    }

    let tasks = test_tasks(&sampler, cfg.seed, nb.test_tasks)?;
    let steps = mcfg.inner_test.steps;
    let mut w = out.csv("neighborhood.csv", &["initializer", "step", "mean_mse", "ci95_half_width"])?;
    let mut finals = Vec::new();
    for (name, p) in &inits {
        let rep = meta_test(p, &tasks, &mcfg, &solver)?;
        for (s, ci) in rep.per_step.iter().enumerate() {
            w.write_record([name.clone(), s.to_string(), f(ci.mean), f(ci.half_width)])?;
        }
        finals.push((rep.per_step[0].mean, rep.per_step[steps].mean));
    }
    w.flush()?;
    let trained_final = finals[0].1;
    let combo_finals: Vec<f64> = finals[1..].iter().map(|x| x.1).collect();
    let combo_mean = if combo_finals.is_empty() { f64::NAN } else { stats::mean(&combo_finals) };
    out.json(
        "neighborhood_summary.json",
        &json!({
            "checkpoint_iteration": ck.iteration,
            "trained_mse_step0": finals[0].0,
            "trained_mse_final": trained_final,
            "combinations": nb.combinations,
            "combination_mse_step0_mean": if finals.len() > 1 { stats::mean(&finals[1..].iter().map(|x| x.0).collect::<Vec<_>>()) } else { f64::NAN },
            "combination_mse_final_mean": combo_mean,
            "factor": nb.factor,
            "within_factor": combo_mean <= nb.factor * trained_final,
        }),
    )?;
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load;

    fn cfg(dir: &Path, extra: &[&str]) -> RunConfig {
        let mut ov: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
        ov.push(format!("out=\"{}\"", dir.display()));
        load("", &ov).unwrap()
    }

    #[test]
    fn gradcheck_passes_and_counts_rows() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &[]);
        let m = run(Command::Gradcheck, &c).unwrap();
        assert!(m.failure.is_none());
        let text = fs::read_to_string(dir.path().join("gradcheck.csv")).unwrap();
        let n = registered_checks(c.gradcheck.eps, c.seed).unwrap().len();
        assert_eq!(text.lines().count(), n + 1);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn gradcheck_sign_flip_is_caught() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["gradcheck.inject_sign_flip=kl_wrt_posterior"]);
        match run(Command::Gradcheck, &c) {
            Err(Error::CheckFailed(msg)) => assert!(msg.contains("kl_wrt_posterior")),
            other => panic!("expected a check failure, got {other:?}"),
        }
        let c = cfg(dir.path(), &["gradcheck.inject_sign_flip=nonexistent"]);
        assert!(matches!(run(Command::Gradcheck, &c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn sine_baseline_only() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["meta.iterations=0", "sine.test_tasks=5"]);
        run(Command::Sine, &c).unwrap();
        let text = fs::read_to_string(dir.path().join("metatest.csv")).unwrap();
        assert_eq!(text.lines().count(), 1 + 11);
        assert!(text.lines().skip(1).all(|l| l.starts_with("untrained,")));
        assert!(!dir.path().join("diagnostics.csv").exists());
    }

    #[test]
    fn sine_short_run_writes_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(
            dir.path(),
            &["meta.iterations=4", "checkpoint_every=2", "sine.test_tasks=3", "arch.layer_sizes=[1,8,1]"],
        );
        let m = run(Command::Sine, &c).unwrap();
        assert!(m.outputs.contains(&"checkpoints/iter_000002.json".to_string()));
        assert!(m.outputs.contains(&"checkpoints/iter_000004.json".to_string()));
        let ck = load_checkpoint(&dir.path().join("prior.json")).unwrap();
        assert_eq!(ck.iteration, 4);
        assert_eq!(ck.config_hash, c.hash());
        let diag = fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
        assert_eq!(diag.lines().count(), 1 + 4 * 5);
    }

    #[test]
    fn neighborhood_needs_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["neighborhood.checkpoint=\"/nonexistent/prior.json\""]);
        assert!(matches!(run(Command::Neighborhood, &c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn neighborhood_one_hot_matches_trained_run() {
        // With one anchor every combination is that anchor's adapted mean.
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["meta.iterations=0", "sine.test_tasks=4", "arch.layer_sizes=[1,8,1]"]);
        run(Command::Sine, &c).unwrap();
        let ck = dir.path().join("prior.json");
        let c2 = cfg(
            dir.path(),
            &[
                "arch.layer_sizes=[1,8,1]",
                &format!("neighborhood.checkpoint=\"{}\"", ck.display()),
                "neighborhood.anchors=1",
                "neighborhood.combinations=2",
                "neighborhood.test_tasks=4",
            ],
        );
        run(Command::Neighborhood, &c2).unwrap();
        let text = fs::read_to_string(dir.path().join("neighborhood.csv")).unwrap();
        let c1: Vec<&str> = text.lines().filter(|l| l.starts_with("combination_0,")).collect();
        let c2: Vec<&str> = text.lines().filter(|l| l.starts_with("combination_1,")).collect();
        assert_eq!(c1.len(), 11);
        for (a, b) in c1.iter().zip(&c2) {
            assert_eq!(a.split_once(',').unwrap().1, b.split_once(',').unwrap().1);
        }
    }

    #[test]
    fn unknown_study_is_rejected() {
        assert!("nope".parse::<Study>().is_err());
        assert_eq!("l2_check".parse::<Study>().unwrap(), Study::L2Check);
    }

    #[test]
    fn l2_study_small() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(dir.path(), &["theory.l2_check.cases=30"]);
        run(Command::Theory(Study::L2Check), &c).unwrap();
        let text = fs::read_to_string(dir.path().join("l2_check.csv")).unwrap();
        assert_eq!(text.lines().count(), 31);
    }
}
