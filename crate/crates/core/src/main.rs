use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mnlqr::experiments::{self, ExperimentConfig, Outcome};
use mnlqr::model_based::{StepKind, StepPolicy};
use mnlqr::Result;

/// Policy optimization for LQR with multiplicative noise.
#[derive(Parser, Debug)]
#[command(name = "mnlqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the generalized Riccati equation.
    Solve(Common),
    /// Evaluate a gain: stability, cost and gradient.
    Eval(Common),
    /// Run a descent method or an experiment preset.
    Optimize(Common),
    /// Gradient-estimation error vs sample count, noise off and on.
    Gradexp(Common),
    /// Check the analytical certificates on sampled stabilizing gains.
    Certify(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Problem JSON file.
    #[arg(long)]
    problem: Option<PathBuf>,
    /// Problem or experiment preset.
    #[arg(long)]
    preset: Option<String>,
    /// Gain JSON file (initial gain for `optimize`).
    #[arg(long)]
    gain: Option<PathBuf>,
    /// gd, npg, gn or gd-free.
    #[arg(long)]
    method: Option<String>,
    /// Constant step size, or initial trial step with --line-search.
    #[arg(long)]
    eta: Option<f64>,
    /// Armijo backtracking line search.
    #[arg(long)]
    line_search: bool,
    /// Rollouts per gradient estimate.
    #[arg(long)]
    samples: Option<usize>,
    /// Rollout horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Exploration radius.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extend the gradient-estimation sweep to 10⁸ samples.
    #[arg(long)]
    long_run: bool,
    /// Iteration cap for descent runs.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Number of gains checked by `certify`.
    #[arg(long)]
    n_gains: Option<usize>,
    /// Sequential or parallel rollouts.
    #[arg(long, value_parser = ["sequential", "parallel"])]
    exec: Option<String>,
}

impl Common {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if self.problem.is_some() {
            cfg.problem = self.problem;
        }
        if self.preset.is_some() {
            cfg.preset = self.preset;
        }
        if self.gain.is_some() {
            cfg.gain = self.gain;
        }
        if self.method.is_some() {
            cfg.method = self.method;
        }
        if self.line_search {
            cfg.step = StepPolicy { eta: self.eta.unwrap_or(cfg.step.eta), ..StepPolicy::default() };
            cfg.step.kind = StepKind::Backtracking;
        } else if let Some(eta) = self.eta {
            cfg.step = StepPolicy::constant(eta);
        }
        if let Some(n) = self.samples {
            cfg.model_free.n_sample = n;
        }
        if let Some(ell) = self.horizon {
            cfg.model_free.ell = ell;
            cfg.gradexp.ell = ell;
        }
        if let Some(r) = self.radius {
            cfg.model_free.r = r;
            cfg.gradexp.r = r;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = self.out {
            cfg.out = out;
        }
        cfg.long_run |= self.long_run;
        if let Some(n) = self.max_iter {
            cfg.stop.max_iter = n;
        }
        if let Some(n) = self.n_gains {
            cfg.certify.n_gains = n;
        }
        if let Some(exec) = self.exec {
            cfg.exec = serde_json::from_value(serde_json::Value::String(exec))?;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    let (common, handler): (Common, fn(&ExperimentConfig) -> Result<Outcome>) = match cli.command {
        Command::Solve(c) => (c, experiments::cli_solve),
        Command::Eval(c) => (c, experiments::cli_eval),
        Command::Optimize(c) => (c, experiments::cli_optimize),
        Command::Gradexp(c) => (c, experiments::cli_gradexp),
        Command::Certify(c) => (c, experiments::cli_certify),
    };
    let cfg = common.into_config()?;
    info!("writing results to {}", cfg.out.display());
    handler(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string_pretty(&outcome.report).unwrap_or_default());
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(experiments::exit_code(&e) as u8)
        }
    }
}
