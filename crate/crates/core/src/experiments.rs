//! Experiment configuration, presets and drivers behind the `mnlqr` binary.
//!
//! Every driver writes schema-stable CSV plus a JSON summary into the
//! configured output directory. CSV output depends only on the
//! configuration and seed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::linalg::{self, Mat};
use crate::model::{self, matrix_serde, Gain, InitialStateRule, LqrmProblem, NoiseDistribution, NoiseSpec};
use crate::model_based::{self as mb, DescentTrace, Method, StepPolicy, StopCriteria, Termination, UNSTABLE_MARKER};
use crate::model_free::{self as mf, PerturbationCheck, RolloutSettings};
use crate::msops::{self, PolicyEvaluation, RiccatiOptions, RiccatiSolution};

pub const EXIT_SUCCESS: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_CERTIFICATE: i32 = 4;

/// Experiment presets (as opposed to problem presets in [`model::preset`]).
pub const EXPERIMENT_PRESETS: [&str; 4] =
    ["suspension-noise-aware", "suspension-noise-ignorant", "network-three-methods", "gradient-estimation"];

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Dimension(_) | Error::InvalidArgument(_) | Error::InvalidProblem(_) | Error::Io(_) | Error::Json(_) => {
            EXIT_CONFIG
        }
        Error::Unstable { .. }
        | Error::EigenSolve(_)
        | Error::Singular(_)
        | Error::NotStabilizable(_)
        | Error::NoProductiveStep { .. }
        | Error::BatchRejected { .. } => EXIT_NUMERICAL,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFreeParams {
    pub n_sample: usize,
    pub ell: usize,
    pub r: f64,
    pub noise: NoiseSpec,
    pub check: PerturbationCheck,
}

impl Default for ModelFreeParams {
    fn default() -> Self {
        ModelFreeParams {
            n_sample: 100_000,
            ell: 20,
            r: 0.1,
            noise: NoiseSpec::default(),
            // The finite-horizon rollout cost stays finite for any gain, and
            // the network's open loop sits at ρ = 0.99, where radius-0.1
            // perturbations can leave the stabilizing set.
            check: PerturbationCheck::Allow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientReference {
    /// Exact expectation of the estimator (smoothed, truncated gradient).
    Smoothed,
    /// Infinite-horizon gradient `∇C(K)`.
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradexpParams {
    /// Explicit sweep; when empty a half-decade grid from 10³ up to
    /// `max_samples` is used.
    pub sample_sizes: Vec<usize>,
    pub max_samples: usize,
    pub repeats: usize,
    pub ell: usize,
    pub r: f64,
    pub noise: NoiseSpec,
    pub reference: GradientReference,
    pub target_error: f64,
}

impl Default for GradexpParams {
    fn default() -> Self {
        GradexpParams {
            sample_sizes: Vec::new(),
            max_samples: 1_000_000,
            repeats: 10,
            ell: 40,
            r: 0.2,
            noise: NoiseSpec {
                distribution: NoiseDistribution::Gaussian,
                initial_state: InitialStateRule::Gaussian,
                z: None,
            },
            reference: GradientReference::Smoothed,
            target_error: 0.1,
        }
    }
}

impl GradexpParams {
    pub fn grid(&self) -> Vec<usize> {
        if !self.sample_sizes.is_empty() {
            return self.sample_sizes.clone();
        }
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let n = (1e3 * 10f64.powf(k as f64 / 2.0)).round() as usize;
            if n > self.max_samples {
                break;
            }
            out.push(n);
            k += 1;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyParams {
    pub n_gains: usize,
    /// Sampled gains satisfy `ρ(F_K) < 1 − margin`.
    pub margin: f64,
}

impl Default for CertifyParams {
    fn default() -> Self {
        CertifyParams { n_gains: 100, margin: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Problem preset or experiment preset name.
    pub preset: Option<String>,
    /// Problem JSON file; takes precedence over a problem preset.
    pub problem: Option<PathBuf>,
    pub gain: Option<PathBuf>,
    /// `gd`, `npg`, `gn` or `gd-free`.
    pub method: Option<String>,
    pub step: StepPolicy,
    pub stop: StopCriteria,
    pub model_free: ModelFreeParams,
    pub gradexp: GradexpParams,
    pub certify: CertifyParams,
    pub seed: u64,
    pub out: PathBuf,
    pub long_run: bool,
    pub exec: ExecMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            problem: None,
            gain: None,
            method: None,
            step: StepPolicy::default(),
            stop: StopCriteria::default(),
            model_free: ModelFreeParams::default(),
            gradexp: GradexpParams::default(),
            certify: CertifyParams::default(),
            seed: 0,
            out: PathBuf::from("results"),
            long_run: false,
            exec: ExecMode::default(),
        }
    }
}

/// Descent method requested on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Exact(Method),
    ModelFree,
}

pub fn parse_method(s: &str) -> Result<MethodChoice> {
    match s {
        "gd" => Ok(MethodChoice::Exact(Method::Gradient)),
        "npg" => Ok(MethodChoice::Exact(Method::Natural)),
        "gn" => Ok(MethodChoice::Exact(Method::GaussNewton)),
        "gd-free" => Ok(MethodChoice::ModelFree),
        other => Err(Error::InvalidArgument(format!("unknown method {other:?} (expected gd, npg, gn or gd-free)"))),
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    /// All configuration problems, collected before any computation.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Some(p) = &self.preset {
            if model::preset(p).is_none() && !EXPERIMENT_PRESETS.contains(&p.as_str()) {
                errs.push(format!(
                    "unknown preset {p:?}; known: {}, {}",
                    model::PRESET_NAMES.join(", "),
                    EXPERIMENT_PRESETS.join(", ")
                ));
            }
        }
        if let Some(path) = &self.problem {
            if !path.is_file() {
                errs.push(format!("problem file {} does not exist", path.display()));
            }
        }
        if let Some(path) = &self.gain {
            if !path.is_file() {
                errs.push(format!("gain file {} does not exist", path.display()));
            }
        }
        if let Some(m) = &self.method {
            if let Err(e) = parse_method(m) {
                errs.push(e.to_string());
            }
        }
        if let Err(e) = self.step.validate() {
            errs.push(e.to_string());
        }
        if !(self.stop.grad_tol >= 0.0) {
            errs.push("stop.grad_tol must be nonnegative".into());
        }
        let mf = &self.model_free;
        if mf.n_sample == 0 || mf.ell == 0 || !(mf.r > 0.0) {
            errs.push("model_free: n_sample, ell and r must be positive".into());
        }
        let g = &self.gradexp;
        if g.repeats == 0 || g.ell == 0 || !(g.r > 0.0) || !(g.target_error > 0.0) {
            errs.push("gradexp: repeats, ell, r and target_error must be positive".into());
        }
        if g.grid().len() < 2 {
            errs.push("gradexp: the sample-size sweep needs at least two points".into());
        }
        if !(self.certify.margin >= 0.0 && self.certify.margin < 1.0) {
            errs.push("certify.margin must lie in [0, 1)".into());
        }
        if self.out.exists() && !self.out.is_dir() {
            errs.push(format!("output path {} is not a directory", self.out.display()));
        }
        errs
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(errs.join("; ")))
        }
    }

    fn method_choice(&self) -> Result<Option<MethodChoice>> {
        self.method.as_deref().map(parse_method).transpose()
    }

    fn rollout_settings(&self) -> RolloutSettings {
        let mf = &self.model_free;
        RolloutSettings {
            n_sample: mf.n_sample,
            ell: mf.ell,
            r: mf.r,
            noise: mf.noise,
            check: mf.check,
            exec: self.exec,
        }
    }
}

/// Problem named by the configuration, validated.
pub fn resolve_problem(cfg: &ExperimentConfig) -> Result<(String, LqrmProblem)> {
    if let Some(path) = &cfg.problem {
        let p = LqrmProblem::load(path)?;
        model::ensure_valid(&p)?;
        return Ok((path.display().to_string(), p));
    }
    let name = cfg
        .preset
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("no problem given: pass --problem or --preset".into()))?;
    let base = match name {
        "suspension-noise-aware" | "suspension-noise-ignorant" => "suspension",
        "network-three-methods" => "diffusion",
        other => other,
    };
    let p = model::preset(base).ok_or_else(|| Error::InvalidArgument(format!("unknown preset {name:?}")))?;
    Ok((base.to_string(), p))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn fingerprint(cfg: &ExperimentConfig) -> Value {
    json!({
        "crate_version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
        "exec": cfg.exec,
        "parallel_feature": ExecMode::is_parallel_available(),
        "threads": std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    })
}

/// Outcome of a CLI command: the JSON report and the process exit code.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(report: Value) -> Self {
        Outcome { report, exit_code: EXIT_SUCCESS }
    }
}

pub fn solve_report(sol: &RiccatiSolution) -> Value {
    json!({
        "P_star": matrix_serde::to_rows(&sol.p_star),
        "K_star": matrix_serde::to_rows(&sol.k_star),
        "residual": sol.residual,
        "rho": sol.rho,
        "iterations": sol.iterations,
    })
}

pub fn cli_solve(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.ensure_valid()?;
    let (name, p) = resolve_problem(cfg)?;
    let sol = msops::riccati_value_iteration(&p, RiccatiOptions::default())?;
    let mut report = solve_report(&sol);
    report["problem"] = json!(name);
    report["cost"] = json!(msops::evaluate_stable(&p, &sol.k_star)?.cost);
    prepare_out(cfg)?;
    write_json(&cfg.out.join("solve.json"), &report)?;
    Ok(Outcome::ok(report))
}

pub fn evaluation_report(eval: &PolicyEvaluation) -> Value {
    match eval {
        PolicyEvaluation::Stable(e) => json!({
            "stable": true,
            "rho": e.rho,
            "cost": e.cost,
            "grad_norm": e.grad_norm(),
            "P": matrix_serde::to_rows(&e.p),
            "Sigma": matrix_serde::to_rows(&e.sigma),
            "R_K": matrix_serde::to_rows(&e.rk),
            "E_K": matrix_serde::to_rows(&e.ek),
            "grad": matrix_serde::to_rows(&e.grad),
        }),
        PolicyEvaluation::Unstable { rho } => json!({
            "stable": false,
            "rho": rho,
            "cost": UNSTABLE_MARKER,
            "grad_norm": UNSTABLE_MARKER,
        }),
    }
}

pub fn cli_eval(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.ensure_valid()?;
    let (name, p) = resolve_problem(cfg)?;
    let path = cfg.gain.as_ref().ok_or_else(|| Error::InvalidArgument("eval needs --gain".into()))?;
    let gain = Gain::load(path)?;
    let eval = msops::evaluate(&p, &gain.k)?;
    let mut report = evaluation_report(&eval);
    report["problem"] = json!(name);
    prepare_out(cfg)?;
    write_json(&cfg.out.join("eval.json"), &report)?;
    Ok(Outcome::ok(report))
}

/// Feasible starting gain for the suspension study: `K* + tD` along a
/// seeded random direction `D`, with `t` bisected so that the cost is
/// `factor` times optimal.
pub fn perturbed_initial_gain(problem: &LqrmProblem, k_star: &Mat, factor: f64, seed: u64) -> Result<Mat> {
    let c_star = msops::evaluate_stable(problem, k_star)?.cost;
    let target = factor * c_star;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Mat::from_fn(k_star.nrows(), k_star.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let d = d.normalize();
    let too_far = |t: f64| -> Result<bool> {
        Ok(match msops::evaluate(problem, &(k_star + t * &d))? {
            PolicyEvaluation::Stable(e) => e.cost >= target,
            PolicyEvaluation::Unstable { .. } => true,
        })
    };
    let mut hi = 1e-3 * (1.0 + k_star.norm());
    while !too_far(hi)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidArgument("cost never reaches the target along the perturbation".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if too_far(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Ok(k_star + lo * &d)
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub label: String,
    pub method: String,
    pub csv: String,
    #[serde(serialize_with = "ser_marker")]
    pub final_cost: Option<f64>,
    #[serde(serialize_with = "ser_marker")]
    pub relative_suboptimality: Option<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub any_unstable: bool,
    pub max_rho: f64,
    pub wall_time_s: f64,
}

fn ser_marker<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    mb::marker_serde::serialize(v, s)
}

fn summarize(label: &str, trace: &DescentTrace, c_star: f64, csv: &Path, secs: f64) -> RunSummary {
    let last = trace.last();
    RunSummary {
        label: label.to_string(),
        method: trace.method.clone(),
        csv: csv.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        final_cost: last.cost,
        relative_suboptimality: last.cost.map(|c| (c - c_star) / c_star),
        iterations: trace.iterations(),
        termination: trace.termination,
        any_unstable: trace.records.iter().any(|r| !r.is_stable()),
        max_rho: trace.records.iter().map(|r| r.rho).fold(0.0, f64::max),
        wall_time_s: secs,
    }
}

fn run_exact(
    problem: &LqrmProblem,
    k0: &Mat,
    method: Method,
    step: StepPolicy,
    stop: StopCriteria,
    c_star: f64,
) -> Result<DescentTrace> {
    let mut cfg = mb::OptimizeConfig::new(method, step, stop);
    cfg.c_star = Some(c_star);
    mb::optimize(problem, k0, &cfg)
}

/// Whether the user overrode the step policy away from the defaults.
fn step_or(cfg: &ExperimentConfig, preset_step: StepPolicy) -> StepPolicy {
    if cfg.step == StepPolicy::default() {
        preset_step
    } else {
        cfg.step
    }
}

pub fn cli_optimize(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.ensure_valid()?;
    let (name, problem) = resolve_problem(cfg)?;
    prepare_out(cfg)?;
    let sol = msops::riccati_value_iteration(&problem, RiccatiOptions::default())?;
    let c_star = msops::evaluate_stable(&problem, &sol.k_star)?.cost;
    let mut runs = Vec::new();
    let mut exit = EXIT_SUCCESS;
    let preset = cfg.preset.as_deref().unwrap_or("");
    let mut record = |label: &str, trace: &DescentTrace, c_ref: f64, secs: f64| -> Result<()> {
        let csv = cfg.out.join(format!("trace_{label}.csv"));
        trace.write(&csv)?;
        runs.push(summarize(label, trace, c_ref, &csv, secs));
        Ok(())
    };
    match preset {
        "suspension-noise-aware" | "suspension-noise-ignorant" => {
            let k0 = perturbed_initial_gain(&problem, &sol.k_star, 10.0, cfg.seed)?;
            let step = step_or(cfg, StepPolicy::default());
            let t = Instant::now();
            if preset == "suspension-noise-aware" {
                let trace = run_exact(&problem, &k0, Method::Gradient, step, cfg.stop, c_star)?;
                record("noise_aware", &trace, c_star, t.elapsed().as_secs_f64())?;
            } else {
                let nominal = problem.noiseless();
                let nominal_star = msops::riccati_value_iteration(&nominal, RiccatiOptions::default())?;
                let c_nominal = msops::evaluate_stable(&nominal, &nominal_star.k_star)?.cost;
                let trained = run_exact(&nominal, &k0, Method::Gradient, step, cfg.stop, c_nominal)?;
                let tested = trained.reevaluate_on(&problem)?;
                let secs = t.elapsed().as_secs_f64();
                record("noise_ignorant_train", &trained, c_nominal, secs)?;
                record("noise_ignorant", &tested, c_star, secs)?;
            }
        }
        "network-three-methods" => {
            let k0 = problem.zero_gain();
            let stop = StopCriteria { grad_tol: cfg.stop.grad_tol.min(1e-12), max_iter: 20 };
            for method in Method::ALL {
                let step = match method {
                    Method::GaussNewton => StepPolicy::constant(0.5),
                    _ => step_or(cfg, StepPolicy::default()),
                };
                let t = Instant::now();
                let trace = run_exact(&problem, &k0, method, step, stop, c_star)?;
                record(method.tag(), &trace, c_star, t.elapsed().as_secs_f64())?;
            }
        }
        _ => {
            let k0 = match &cfg.gain {
                Some(path) => Gain::load(path)?.k,
                None => problem.zero_gain(),
            };
            let choice = cfg.method_choice()?.unwrap_or(MethodChoice::Exact(Method::Gradient));
            let t = Instant::now();
            let trace = match choice {
                MethodChoice::Exact(m) => run_exact(&problem, &k0, m, cfg.step, cfg.stop, c_star)?,
                MethodChoice::ModelFree => {
                    mf::optimize_model_free(&problem, &k0, &cfg.step, &cfg.rollout_settings(), &cfg.stop, cfg.seed)?
                }
            };
            let label = trace.method.replace('-', "_");
            record(&label, &trace, c_star, t.elapsed().as_secs_f64())?;
            if trace.termination == Termination::LostStability {
                exit = EXIT_NUMERICAL;
            }
        }
    }
    let report = json!({
        "problem": name,
        "preset": cfg.preset,
        "config": cfg,
        "c_star": c_star,
        "runs": runs,
        "environment": fingerprint(cfg),
    });
    write_json(&cfg.out.join("summary.json"), &report)?;
    Ok(Outcome { report, exit_code: exit })
}

/// Least-squares fit of `log₁₀ y = a + b log₁₀ x`; returns `(a, b)`.
pub fn loglog_fit(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.log10()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradexpCurve {
    pub noise: bool,
    pub points: Vec<(usize, f64)>,
    pub slope: f64,
    pub intercept: f64,
    /// Sample count at which the fitted line crosses the target error.
    pub n_at_target: f64,
    /// Sample count at which the exact root-mean-square error equals the
    /// target (smoothed reference only).
    pub exact_n_at_target: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradexpResult {
    pub off: GradexpCurve,
    pub on: GradexpCurve,
    pub ratio: f64,
    pub exact_ratio: Option<f64>,
    pub csv: String,
}

pub const GRADEXP_CSV_HEADER: &str = "n_sample,rel_err,noise_flag";

/// Relative gradient-estimation error vs sample count, noise off and on.
pub fn gradient_experiment(cfg: &ExperimentConfig) -> Result<GradexpResult> {
    let (_, noisy) = resolve_problem(&ExperimentConfig {
        preset: Some(
            cfg.preset.clone().filter(|p| p != "gradient-estimation").unwrap_or_else(|| "gradient-estimation".into()),
        ),
        ..cfg.clone()
    })?;
    let g = &cfg.gradexp;
    let mut grid = g.grid();
    if cfg.long_run {
        let mut n = *grid.last().unwrap_or(&1000) as f64;
        while n < 1e8 {
            n *= 10f64.sqrt();
            grid.push(n.round().min(1e8) as usize);
        }
    }
    let mut csv = String::from(GRADEXP_CSV_HEADER);
    csv.push('\n');
    let mut curves = Vec::new();
    for (flag, problem) in [(false, noisy.noiseless()), (true, noisy.clone())] {
        let k = problem.zero_gain();
        let reference = match g.reference {
            GradientReference::Smoothed => mf::smoothed_gradient(&problem, &k, g.r, g.ell, 4096)?,
            GradientReference::True => msops::evaluate_stable(&problem, &k)?.grad,
        };
        let settings = RolloutSettings {
            n_sample: 1,
            ell: g.ell,
            r: g.r,
            noise: g.noise,
            check: PerturbationCheck::Allow,
            exec: cfg.exec,
        };
        let mut points = Vec::new();
        for (gi, &n) in grid.iter().enumerate() {
            let mut total = 0.0;
            for rep in 0..g.repeats {
                let seed = mf::derive_seed(cfg.seed, 16 + u32::from(flag), (gi * 1000 + rep) as u32);
                let est = mf::estimate_gradient(&problem, &k, &RolloutSettings { n_sample: n, ..settings }, seed)?;
                total += (&est.grad_hat - &reference).norm() / reference.norm();
            }
            let err = total / g.repeats as f64;
            csv.push_str(&format!("{n},{err:e},{}\n", if flag { "on" } else { "off" }));
            points.push((n, err));
        }
        let exact = match g.reference {
            GradientReference::Smoothed if problem.n() <= mf::MOMENT_STATE_LIMIT => Some(
                mf::estimator_moments(&problem, &k, g.r, g.ell, &g.noise, 4096)?
                    .samples_for_relative_error(g.target_error),
            ),
            _ => None,
        };
        let fit: Vec<(f64, f64)> = points.iter().map(|&(n, e)| (n as f64, e)).collect();
        let (a, b) = loglog_fit(&fit);
        curves.push(GradexpCurve {
            noise: flag,
            points,
            slope: b,
            intercept: a,
            n_at_target: 10f64.powf((g.target_error.log10() - a) / b),
            exact_n_at_target: exact,
        });
    }
    let on = curves.pop().expect("two curves");
    let off = curves.pop().expect("two curves");
    Ok(GradexpResult {
        ratio: on.n_at_target / off.n_at_target,
        exact_ratio: on.exact_n_at_target.zip(off.exact_n_at_target).map(|(a, b)| a / b),
        off,
        on,
        csv,
    })
}

pub fn cli_gradexp(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.ensure_valid()?;
    prepare_out(cfg)?;
    let t = Instant::now();
    let res = gradient_experiment(cfg)?;
    fs::write(cfg.out.join("gradexp.csv"), &res.csv)?;
    let report = json!({
        "config": cfg,
        "noise_off": res.off,
        "noise_on": res.on,
        "ratio": res.ratio,
        "exact_ratio": res.exact_ratio,
        "wall_time_s": t.elapsed().as_secs_f64(),
        "environment": fingerprint(cfg),
    });
    write_json(&cfg.out.join("gradexp.json"), &report)?;
    Ok(Outcome::ok(report))
}

/// Smallest slack of each certificate over the sampled gains; a certificate
/// fails when its slack is negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateReport {
    pub n_gains: usize,
    pub gradient_domination: f64,
    pub almost_smoothness: f64,
    pub cost_bound_value: f64,
    pub cost_bound_covariance: f64,
    pub trace_bound: f64,
    pub step_bounds_positive: f64,
    pub natural_one_step: f64,
    pub gauss_newton_one_step: f64,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
}

impl CertificateReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Evaluation routine used by the certificate driver; replaceable so that
/// fault injection can check that violations are caught.
pub type Evaluator = fn(&LqrmProblem, &Mat) -> Result<PolicyEvaluation>;

const CERT_TOL: f64 = 1e-9;
const SMOOTHNESS_TOL: f64 = 1e-7;
const RATE_TOL: f64 = 1e-8;

/// Seeded stabilizing gains around `K*` and `0` (rejection sampling).
pub fn sample_stabilizing_gains(
    problem: &LqrmProblem,
    k_star: &Mat,
    count: usize,
    margin: f64,
    seed: u64,
) -> Result<Vec<Mat>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, n) = k_star.shape();
    let scale = 1.0 + k_star.norm();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count.max(1) {
            return Err(Error::NotStabilizable(format!("found only {} stabilizing gains", out.len())));
        }
        let center = if attempts.is_multiple_of(2) { problem.zero_gain() } else { k_star.clone() };
        let dir = Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
        let radius = rng.random_range(0.0..1.0) * scale;
        let k = center + radius * dir;
        if msops::is_ms_stabilizing_with_margin(problem, &k, margin)? {
            out.push(k);
        }
    }
    Ok(out)
}

pub fn certify(
    problem: &LqrmProblem,
    params: &CertifyParams,
    seed: u64,
    evaluator: Evaluator,
) -> Result<CertificateReport> {
    let sol = msops::riccati_value_iteration(problem, RiccatiOptions::default())?;
    let star = evaluator(problem, &sol.k_star)?.into_stable()?;
    let gains = sample_stabilizing_gains(problem, &sol.k_star, params.n_gains, params.margin, seed)?;
    let mut rep = CertificateReport {
        n_gains: gains.len(),
        gradient_domination: f64::INFINITY,
        almost_smoothness: f64::INFINITY,
        cost_bound_value: f64::INFINITY,
        cost_bound_covariance: f64::INFINITY,
        trace_bound: f64::INFINITY,
        step_bounds_positive: f64::INFINITY,
        natural_one_step: f64::INFINITY,
        gauss_newton_one_step: f64::INFINITY,
        violations: Vec::new(),
        warnings: Vec::new(),
    };
    if gains.is_empty() {
        rep.warnings.push("no gains sampled; certificates hold vacuously".into());
    }
    let sr = linalg::sigma_min(&problem.r);
    let s0 = linalg::sigma_min(&problem.sigma0);
    let ss = linalg::spectral_norm(&star.sigma);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc3a5_c85c_97cb_3127);
    for (i, k) in gains.iter().enumerate() {
        let e = evaluator(problem, k)?.into_stable()?;
        let gap = e.cost - star.cost;
        let floor = CERT_TOL * e.cost;

        let gd = msops::gradient_domination_margin(problem, &e, &star) + floor;
        rep.gradient_domination = rep.gradient_domination.min(gd / e.cost);

        // almost-smoothness against a nearby stabilizing gain
        let (m, n) = k.shape();
        let mut kp = None;
        let mut radius = 0.1 * (1.0 + k.norm());
        for _ in 0..60 {
            let dir = Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            let cand = k + radius * dir;
            if let PolicyEvaluation::Stable(ep) = evaluator(problem, &cand)? {
                kp = Some(*ep);
                break;
            }
            radius *= 0.5;
        }
        if let Some(ep) = kp {
            let resid = msops::almost_smoothness_residual(&e, &ep) / e.cost.max(ep.cost);
            rep.almost_smoothness = rep.almost_smoothness.min(SMOOTHNESS_TOL - resid);
        }

        let (sv, sc) = msops::cost_bound_slacks(problem, &e);
        rep.cost_bound_value = rep.cost_bound_value.min((sv + floor) / e.cost);
        rep.cost_bound_covariance = rep.cost_bound_covariance.min((sc + floor) / e.cost);
        let tb = msops::trace_bound_slack(problem, &e) + CERT_TOL * e.sigma.trace();
        rep.trace_bound = rep.trace_bound.min(tb / e.sigma.trace());

        let bounds = mb::bounds_at(problem, &e, star.cost);
        let smallest =
            [bounds.h_b, bounds.h_delta, bounds.c_npg, bounds.c_pg].into_iter().fold(f64::INFINITY, f64::min);
        let positive = if bounds.c_pg.is_finite() && smallest > 0.0 { 1.0 } else { -1.0 };
        rep.step_bounds_positive = rep.step_bounds_positive.min(positive);

        // one-step progress guarantees
        let abs_floor = 1e-10 * star.cost;
        let eta_npg = 1.0 / (2.0 * linalg::spectral_norm(&e.rk));
        for (method, eta, rate) in
            [(Method::Natural, eta_npg, 1.0 - 2.0 * eta_npg * sr * s0 / ss), (Method::GaussNewton, 0.5, 1.0 - s0 / ss)]
        {
            let next = &e.k - eta * mb::direction(method, &e)?;
            let slack = match evaluator(problem, &next)? {
                PolicyEvaluation::Stable(en) => (rate + RATE_TOL) * gap.max(0.0) + abs_floor - (en.cost - star.cost),
                PolicyEvaluation::Unstable { .. } => -1.0,
            };
            let scaled = slack / star.cost;
            match method {
                Method::Natural => rep.natural_one_step = rep.natural_one_step.min(scaled),
                _ => rep.gauss_newton_one_step = rep.gauss_newton_one_step.min(scaled),
            }
        }
        if rep.violations.len() < 20 {
            for (label, v) in [("gradient domination", gd), ("cost bounds", sv.min(sc) + floor), ("trace bound", tb)] {
                if v < 0.0 {
                    rep.violations.push(format!("gain {i}: {label} violated (slack {v:e})"));
                }
            }
        }
    }
    for (label, v) in [
        ("almost-smoothness", rep.almost_smoothness),
        ("step-size bounds", rep.step_bounds_positive),
        ("natural-gradient one-step progress", rep.natural_one_step),
        ("Gauss-Newton one-step progress", rep.gauss_newton_one_step),
    ] {
        if v < 0.0 {
            rep.violations.push(format!("{label} violated (min slack {v:e})"));
        }
    }
    if rep.violations.is_empty() {
        for v in [rep.gradient_domination, rep.cost_bound_value, rep.cost_bound_covariance, rep.trace_bound] {
            if v < 0.0 {
                rep.violations.push(format!("certificate slack {v:e} below zero"));
            }
        }
    }
    Ok(rep)
}

pub fn cli_certify(cfg: &ExperimentConfig) -> Result<Outcome> {
    cfg.ensure_valid()?;
    let (name, problem) = resolve_problem(cfg)?;
    let rep = certify(&problem, &cfg.certify, cfg.seed, msops::evaluate)?;
    prepare_out(cfg)?;
    let mut report = serde_json::to_value(&rep)?;
    // slacks stay infinite when no gains were sampled
    if let Value::Object(map) = &mut report {
        for v in map.values_mut() {
            if v.is_null() {
                *v = json!("vacuous");
            }
        }
        map.insert("problem".into(), json!(name));
        map.insert("passed".into(), json!(rep.passed()));
    }
    write_json(&cfg.out.join("certify.json"), &report)?;
    Ok(Outcome { exit_code: if rep.passed() { EXIT_SUCCESS } else { EXIT_CERTIFICATE }, report })
}
