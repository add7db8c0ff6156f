//! `gembml` experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use gembml::config;
use gembml::experiments::{self, Command, Study};
use gembml::Error;

#[derive(Parser, Debug)]
#[command(name = "gembml", version, about = "Bayesian meta-learning experiments")]
struct Cli {
    /// Config file (`key = value` lines, dotted sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Override a config key, e.g. `--set meta.iterations=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Finite-difference checks of every analytic gradient.
    Gradcheck,
    /// GEM vs unrolled ELBO-gradient error against the exact marginal gradient.
    GradErrorStudy,
    /// Meta-train on sinusoid tasks, then meta-test on fresh ones.
    Sine,
    /// Conjugate-model studies.
    Theory {
        #[arg(value_enum)]
        study: StudyArg,
    },
    /// Adapt from convex combinations of adapted means around a checkpoint.
    Neighborhood,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
enum StudyArg {
    VarianceRatio,
    Pinsker,
    L2Check,
    PredictiveOptimality,
}

impl From<StudyArg> for Study {
    fn from(s: StudyArg) -> Self {
        match s {
            StudyArg::VarianceRatio => Study::VarianceRatio,
            StudyArg::Pinsker => Study::Pinsker,
            StudyArg::L2Check => Study::L2Check,
            StudyArg::PredictiveOptimality => Study::PredictiveOptimality,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::CheckFailed(_) => 1,
        e if e.is_numeric() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(j) = cli.jobs {
        overrides.push(format!("jobs={j}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={}", toml::Value::String(o.display().to_string())));
    }
    let cfg = match config::load_file(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("gembml: {e}");
            return ExitCode::from(2);
        }
    };
    let cmd = match cli.command {
        Cmd::Gradcheck => Command::Gradcheck,
        Cmd::GradErrorStudy => Command::GradErrorStudy,
        Cmd::Sine => Command::Sine,
        Cmd::Theory { study } => Command::Theory(study.into()),
        Cmd::Neighborhood => Command::Neighborhood,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("gembml: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    match pool.install(|| experiments::run(cmd, &cfg)) {
        Ok(m) => {
            eprintln!("gembml: {} finished, outputs in {}", m.command, cfg.out);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("gembml: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
