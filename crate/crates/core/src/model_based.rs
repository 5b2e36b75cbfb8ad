//! Exact-gradient policy optimization: gradient descent, natural gradient
//! and Gauss–Newton, with the step-size bounds that certify linear
//! convergence and an Armijo backtracking alternative.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::{matrix_serde, LqrmProblem};
use crate::msops::{self, Evaluation, PolicyEvaluation};

/// Marker written in place of cost-like quantities of unstable gains.
pub const UNSTABLE_MARKER: &str = "MS_UNSTABLE";

/// Largest number of step contractions tried by [`backtracking_eta`].
pub const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "gd")]
    Gradient,
    #[serde(rename = "npg")]
    Natural,
    #[serde(rename = "gn")]
    GaussNewton,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gradient, Method::Natural, Method::GaussNewton];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Gradient => "gd",
            Method::Natural => "npg",
            Method::GaussNewton => "gn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepKind {
    Constant,
    TheoreticalBound,
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepPolicy {
    pub kind: StepKind,
    /// Step for `Constant`; initial trial step for `Backtracking`.
    pub eta: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Multiplier in (0, 1] applied to theoretical bounds.
    pub safety: f64,
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::backtracking(0.01, 0.5)
    }
}

impl StepPolicy {
    pub fn constant(eta: f64) -> Self {
        StepPolicy { kind: StepKind::Constant, eta, ..StepPolicy::backtracking(0.01, 0.5) }
    }

    pub fn theoretical(safety: f64) -> Self {
        StepPolicy { kind: StepKind::TheoreticalBound, safety, ..StepPolicy::backtracking(0.01, 0.5) }
    }

    pub fn backtracking(alpha: f64, beta: f64) -> Self {
        StepPolicy { kind: StepKind::Backtracking, eta: 1.0, alpha, beta, safety: 1.0 }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return bad(format!("alpha must lie in (0, 0.5), got {}", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta must lie in (0, 1), got {}", self.beta));
        }
        if !(self.safety > 0.0 && self.safety <= 1.0) {
            return bad(format!("safety must lie in (0, 1], got {}", self.safety));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCriteria {
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for StopCriteria {
    fn default() -> Self {
        StopCriteria { grad_tol: 1e-8, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradTol,
    MaxIter,
    LostStability,
    Stationary,
    NoProgress,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::GradTol => "grad_tol",
            Termination::MaxIter => "max_iter",
            Termination::LostStability => "lost_stability",
            Termination::Stationary => "stationary",
            Termination::NoProgress => "no_progress",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: Mat,
    /// `None` when the gain is not mean-square stabilizing.
    #[serde(with = "marker_serde")]
    pub cost: Option<f64>,
    #[serde(with = "marker_serde")]
    pub grad_norm: Option<f64>,
    /// Step used to reach this iterate (0 for the initial gain).
    pub eta: f64,
    pub rho: f64,
}

impl TraceRecord {
    pub fn from_evaluation(iteration: usize, k: &Mat, eval: &PolicyEvaluation, eta: f64) -> Self {
        TraceRecord {
            iteration,
            k: k.clone(),
            cost: eval.cost(),
            grad_norm: eval.stable().map(Evaluation::grad_norm),
            eta,
            rho: eval.rho(),
        }
    }

    pub fn is_stable(&self) -> bool {
        self.cost.is_some()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentTrace {
    pub method: String,
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
}

/// `Option<f64>` as a number, or [`UNSTABLE_MARKER`] for `None`.
pub mod marker_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::UNSTABLE_MARKER;

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            _ => s.serialize_str(UNSTABLE_MARKER),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(x) => Ok(Some(x)),
            Raw::Text(t) if t == UNSTABLE_MARKER => Ok(None),
            Raw::Text(t) => Err(D::Error::custom(format!("expected a number or {UNSTABLE_MARKER}, got {t:?}"))),
        }
    }
}

pub const TRACE_CSV_HEADER: &str = "iteration,cost,grad_norm,eta,rho";

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:e}"),
        _ => UNSTABLE_MARKER.to_string(),
    }
}

impl DescentTrace {
    pub fn last(&self) -> &TraceRecord {
        self.records.last().expect("trace holds at least the initial gain")
    }

    pub fn final_gain(&self) -> &Mat {
        &self.last().k
    }

    pub fn costs(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.cost).collect()
    }

    /// Number of steps taken.
    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// Every consecutive pair of stable costs decreases by more than `slack`
    /// relative to the earlier cost (a negative slack permits tiny increases).
    pub fn is_monotone(&self, slack: f64) -> bool {
        self.records.windows(2).all(|w| match (w[0].cost, w[1].cost) {
            (Some(a), Some(b)) => b <= a * (1.0 - slack),
            _ => false,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{:e},{:e}\n",
                r.iteration,
                fmt_opt(r.cost),
                fmt_opt(r.grad_norm),
                r.eta,
                r.rho
            ));
        }
        out
    }

    /// CSV trace plus a JSON sidecar (`<stem>.json`) holding the gains.
    pub fn write(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        fs::write(csv_path, self.to_csv())?;
        fs::write(csv_path.with_extension("json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Re-evaluate every iterate on another problem, e.g. to score gains
    /// trained without noise against the noisy system.
    pub fn reevaluate_on(&self, problem: &LqrmProblem) -> Result<DescentTrace> {
        let records = self
            .records
            .iter()
            .map(|r| Ok(TraceRecord::from_evaluation(r.iteration, &r.k, &msops::evaluate(problem, &r.k)?, r.eta)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DescentTrace { method: self.method.clone(), records, termination: self.termination })
    }
}

/// Descent direction `D` such that the step is `K − ηD`.
///
/// GD: `∇C`; natural: `∇C Σ_K⁻¹ = 2E_K`; Gauss–Newton: `2R_K⁻¹E_K`.
pub fn direction(method: Method, eval: &Evaluation) -> Result<Mat> {
    match method {
        Method::Gradient => Ok(eval.grad.clone()),
        Method::Natural => Ok(2.0 * &eval.ek),
        Method::GaussNewton => {
            let chol =
                eval.rk.clone().cholesky().ok_or_else(|| Error::Singular("R_K is not positive definite".into()))?;
            Ok(2.0 * chol.solve(&eval.ek))
        }
    }
}

/// Natural direction through the explicit inverse `∇C Σ_K⁻¹`.
pub fn natural_direction_explicit(eval: &Evaluation) -> Result<Mat> {
    Ok(&eval.grad * linalg::inverse(&eval.sigma)?)
}

/// Policy-iteration gain `−R_K⁻¹ BᵀP_K A`.
pub fn policy_iteration_gain(problem: &LqrmProblem, eval: &Evaluation) -> Result<Mat> {
    msops::greedy_gain(problem, &eval.p)
}

#[derive(Debug, Clone)]
pub struct Step {
    pub k: Mat,
    pub eval: PolicyEvaluation,
}

impl Step {
    pub fn lost_stability(&self) -> bool {
        !self.eval.is_stable()
    }
}

fn take_step(problem: &LqrmProblem, k: &Mat, eta: f64, method: Method) -> Result<Step> {
    if !(eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be nonnegative, got {eta}")));
    }
    let eval = msops::evaluate_stable(problem, k)?;
    let dir = direction(method, &eval)?;
    if method == Method::Natural {
        let explicit = natural_direction_explicit(&eval)?;
        let scale = explicit.norm().max(dir.norm()).max(f64::MIN_POSITIVE);
        debug_assert!(
            (&explicit - &dir).norm() <= 1e-8 * scale.max(1.0),
            "natural gradient shortcut disagrees with explicit inverse"
        );
    }
    let k_next = k - eta * dir;
    let eval = msops::evaluate(problem, &k_next)?;
    Ok(Step { k: k_next, eval })
}

pub fn step_gradient(problem: &LqrmProblem, k: &Mat, eta: f64) -> Result<Step> {
    take_step(problem, k, eta, Method::Gradient)
}

pub fn step_natural(problem: &LqrmProblem, k: &Mat, eta: f64) -> Result<Step> {
    take_step(problem, k, eta, Method::Natural)
}

pub fn step_gauss_newton(problem: &LqrmProblem, k: &Mat, eta: f64) -> Result<Step> {
    take_step(problem, k, eta, Method::GaussNewton)
}

/// `‖B‖⁻¹(‖B‖² + Σⱼ βⱼ‖Bⱼ‖²)`.
pub fn h_b(problem: &LqrmProblem) -> f64 {
    problem.input_gain_energy() / linalg::spectral_norm(&problem.b)
}

/// Perturbation radius within which `Σ_K` stays controlled.
pub fn h_delta(problem: &LqrmProblem, eval: &Evaluation) -> f64 {
    let ak = msops::closed_loop_nominal(problem, &eval.k);
    linalg::sigma_min(&problem.q) * linalg::sigma_min(&problem.sigma0)
        / (4.0 * h_b(problem) * eval.cost * (linalg::spectral_norm(&ak) + 1.0))
}

/// `√(‖R_K‖(C(K) − C*)/σ_min(Σ₀))`; `C* = 0` when unknown.
pub fn h0(problem: &LqrmProblem, eval: &Evaluation, c_star: f64) -> f64 {
    (linalg::spectral_norm(&eval.rk) * (eval.cost - c_star).max(0.0) / linalg::sigma_min(&problem.sigma0)).sqrt()
}

pub fn h1(problem: &LqrmProblem, eval: &Evaluation, c_star: f64) -> f64 {
    2.0 * eval.cost * h0(problem, eval, c_star) / linalg::sigma_min(&problem.q)
}

pub fn h2(problem: &LqrmProblem, eval: &Evaluation, c_star: f64) -> f64 {
    let bpa = problem.b.transpose() * &eval.p * &problem.a;
    (h0(problem, eval, c_star) + linalg::spectral_norm(&bpa)) / linalg::sigma_min(&problem.r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundBundle {
    pub h_b: f64,
    pub h_delta: f64,
    pub h0: f64,
    pub h1: f64,
    pub h2: f64,
    pub c_pg: f64,
    pub c_npg: f64,
    /// Optimal cost used inside `h₀` (0 when the optimum was not supplied).
    pub c_star: f64,
}

impl BoundBundle {
    pub fn all_positive(&self) -> bool {
        [self.h_b, self.h_delta, self.h0, self.h1, self.h2, self.c_pg, self.c_npg]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Theorem-certified step for a method (`½` for Gauss–Newton).
    pub fn step_for(&self, method: Method) -> f64 {
        match method {
            Method::Gradient => self.c_pg,
            Method::Natural => self.c_npg,
            Method::GaussNewton => 0.5,
        }
    }
}

/// Step-size bounds evaluated at the reference gain `k0`.
pub fn compute_bounds(problem: &LqrmProblem, k0: &Mat, kstar: Option<&Evaluation>) -> Result<BoundBundle> {
    let e0 = msops::evaluate_stable(problem, k0)?;
    Ok(bounds_at(problem, &e0, kstar.map_or(0.0, |e| e.cost)))
}

pub fn bounds_at(problem: &LqrmProblem, e0: &Evaluation, c_star: f64) -> BoundBundle {
    let nb = linalg::spectral_norm(&problem.b);
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sq = linalg::sigma_min(&problem.q);
    let c0 = e0.cost;
    let hb = h_b(problem);
    let (v0, v1, v2) = (h0(problem, e0, c_star), h1(problem, e0, c_star), h2(problem, e0, c_star));
    let c_npg = 0.5 / (linalg::spectral_norm(&problem.r) + problem.input_gain_energy() * c0 / s0);
    let ratio = sq * s0 / c0;
    let first = ratio * ratio / (hb * v1 * (linalg::spectral_norm(&problem.a) + nb * v2 + 1.0));
    let second = sq / (c0 * linalg::spectral_norm(&e0.rk));
    BoundBundle {
        h_b: hb,
        h_delta: h_delta(problem, e0),
        h0: v0,
        h1: v1,
        h2: v2,
        c_pg: first.min(second) / 16.0,
        c_npg,
        c_star,
    }
}

/// Guaranteed per-step contraction of `C(K) − C*` at step `eta`.
pub fn theorem_rate(problem: &LqrmProblem, method: Method, eta: f64, kstar: &Evaluation) -> f64 {
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sr = linalg::sigma_min(&problem.r);
    let ss = linalg::spectral_norm(&kstar.sigma);
    match method {
        Method::GaussNewton => 1.0 - 2.0 * eta * s0 / ss,
        Method::Natural => 1.0 - 2.0 * eta * sr * s0 / ss,
        Method::Gradient => 1.0 - 2.0 * eta * sr * s0 * s0 / ss,
    }
}

#[derive(Debug, Clone)]
pub struct Backtrack {
    pub eta: f64,
    pub k: Mat,
    pub eval: Evaluation,
}

/// Armijo backtracking along `−direction` from the stabilizing gain of `eval`.
///
/// Accepts the first `η = βᵏη_init` whose gain is stabilizing and satisfies
/// `C(K − ηD) ≤ C(K) − αη⟨∇C, D⟩` (up to a few ulps of `C(K)`).
pub fn backtracking_eta(
    problem: &LqrmProblem,
    eval: &Evaluation,
    direction: &Mat,
    alpha: f64,
    beta: f64,
    eta_init: f64,
) -> Result<Backtrack> {
    let slope = linalg::frob_inner(&eval.grad, direction);
    let slack = 8.0 * f64::EPSILON * eval.cost.abs();
    let mut eta = eta_init;
    for _ in 0..=MAX_HALVINGS {
        let k = &eval.k - eta * direction;
        if let PolicyEvaluation::Stable(next) = msops::evaluate(problem, &k)? {
            if next.cost <= eval.cost - alpha * eta * slope + slack {
                return Ok(Backtrack { eta, k, eval: *next });
            }
        }
        eta *= beta;
    }
    Err(Error::NoProductiveStep { halvings: MAX_HALVINGS })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub method: Method,
    pub step: StepPolicy,
    pub stop: StopCriteria,
    /// Optimal cost fed to the theoretical bounds; 0 is used when absent.
    pub c_star: Option<f64>,
}

impl OptimizeConfig {
    pub fn new(method: Method, step: StepPolicy, stop: StopCriteria) -> Self {
        OptimizeConfig { method, step, stop, c_star: None }
    }
}

/// Run exact-gradient descent from `k0`.
pub fn optimize(problem: &LqrmProblem, k0: &Mat, cfg: &OptimizeConfig) -> Result<DescentTrace> {
    cfg.step.validate()?;
    let mut eval = msops::evaluate_stable(problem, k0)?;
    let fixed_eta = match cfg.step.kind {
        StepKind::Constant => Some(cfg.step.eta),
        StepKind::TheoreticalBound => {
            Some(cfg.step.safety * bounds_at(problem, &eval, cfg.c_star.unwrap_or(0.0)).step_for(cfg.method))
        }
        StepKind::Backtracking => None,
    };
    let mut records = vec![TraceRecord::from_evaluation(0, k0, &PolicyEvaluation::Stable(Box::new(eval.clone())), 0.0)];
    let mut termination = Termination::MaxIter;
    for it in 1..=cfg.stop.max_iter + 1 {
        let g = eval.grad_norm();
        if g == 0.0 {
            termination = Termination::Stationary;
            break;
        }
        if g < cfg.stop.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        if it > cfg.stop.max_iter {
            break;
        }
        let dir = direction(cfg.method, &eval)?;
        match fixed_eta {
            Some(eta) => {
                let k = &eval.k - eta * &dir;
                let next = msops::evaluate(problem, &k)?;
                records.push(TraceRecord::from_evaluation(it, &k, &next, eta));
                match next {
                    PolicyEvaluation::Stable(e) => eval = *e,
                    PolicyEvaluation::Unstable { .. } => {
                        termination = Termination::LostStability;
                        break;
                    }
                }
            }
            None => match backtracking_eta(problem, &eval, &dir, cfg.step.alpha, cfg.step.beta, cfg.step.eta) {
                Ok(bt) => {
                    let next = PolicyEvaluation::Stable(Box::new(bt.eval));
                    records.push(TraceRecord::from_evaluation(it, &bt.k, &next, bt.eta));
                    if let PolicyEvaluation::Stable(e) = next {
                        eval = *e;
                    }
                }
                Err(Error::NoProductiveStep { .. }) => {
                    termination = Termination::NoProgress;
                    break;
                }
                Err(e) => return Err(e),
            },
        }
    }
    Ok(DescentTrace { method: cfg.method.tag().to_string(), records, termination })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_diffusion_network, InputNoise, StateNoise};
    use crate::msops::RiccatiOptions;
    use approx::assert_relative_eq;

    fn scalar() -> LqrmProblem {
        let one = Mat::identity(1, 1);
        LqrmProblem {
            a: Mat::from_element(1, 1, 0.5),
            b: one.clone(),
            state_noise: vec![StateNoise { alpha: 0.2, dir: one.clone() }],
            input_noise: vec![],
            q: one.clone(),
            r: one.clone(),
            sigma0: one,
        }
    }

    #[test]
    fn zero_step_is_identity() {
        let p = make_diffusion_network();
        let k = p.zero_gain();
        for m in Method::ALL {
            let s = take_step(&p, &k, 0.0, m).unwrap();
            assert_eq!(s.k, k);
        }
    }

    #[test]
    fn scalar_gradient_step() {
        let s = step_gradient(&scalar(), &Mat::zeros(1, 1), 0.01).unwrap();
        assert!((s.k[(0, 0)] + 0.033058).abs() < 1e-5);
    }

    #[test]
    fn scalar_natural_step_closed_form() {
        let p = scalar();
        let k = Mat::from_element(1, 1, -0.1);
        let e = msops::evaluate_stable(&p, &k).unwrap();
        let (pk, kk) = (e.p[(0, 0)], -0.1);
        let rk = 1.0 + pk;
        let want = kk - 2.0 * 0.05 * (rk * kk + pk * 0.5);
        assert_relative_eq!(step_natural(&p, &k, 0.05).unwrap().k[(0, 0)], want, max_relative = 1e-13);
    }

    #[test]
    fn natural_shortcut_matches_inverse() {
        let p = make_diffusion_network();
        let e = msops::evaluate_stable(&p, &p.zero_gain()).unwrap();
        let d = direction(Method::Natural, &e).unwrap();
        assert_relative_eq!(d, natural_direction_explicit(&e).unwrap(), max_relative = 1e-10);
    }

    #[test]
    fn gauss_newton_half_is_policy_iteration() {
        let p = make_diffusion_network();
        let k = Mat::from_fn(4, 4, |i, j| -0.05 * (1 + i + 2 * j) as f64 / 10.0);
        let e = msops::evaluate_stable(&p, &k).unwrap();
        let s = step_gauss_newton(&p, &k, 0.5).unwrap();
        assert_relative_eq!(s.k, policy_iteration_gain(&p, &e).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn gauss_newton_fixed_at_optimum() {
        let p = make_diffusion_network();
        let sol = msops::riccati_value_iteration(&p, RiccatiOptions::default()).unwrap();
        let s = step_gauss_newton(&p, &sol.k_star, 0.5).unwrap();
        assert_relative_eq!(s.k, sol.k_star, epsilon = 1e-9);
    }

    #[test]
    fn bounds_positive_and_monotone_in_input_noise() {
        let p = make_diffusion_network();
        let b = compute_bounds(&p, &p.zero_gain(), None).unwrap();
        assert!(b.all_positive(), "{b:?}");
        let mut prev = f64::INFINITY;
        for beta in [0.0, 0.05, 0.1, 0.2] {
            let mut q = p.clone();
            q.input_noise = vec![InputNoise { beta, dir: Mat::identity(4, 4) }];
            let c = compute_bounds(&q, &q.zero_gain(), None).unwrap().c_npg;
            assert!(c < prev);
            prev = c;
        }
    }

    #[test]
    fn bounds_need_stable_reference() {
        let mut p = scalar();
        p.a[(0, 0)] = 1.0;
        assert!(matches!(compute_bounds(&p, &Mat::zeros(1, 1), None), Err(Error::Unstable { .. })));
    }

    #[test]
    fn certified_gradient_step_decreases_cost() {
        let p = make_diffusion_network();
        let k = p.zero_gain();
        let b = compute_bounds(&p, &k, None).unwrap();
        let c0 = msops::evaluate_stable(&p, &k).unwrap().cost;
        let s = step_gradient(&p, &k, b.c_pg).unwrap();
        assert!(s.eval.cost().unwrap() < c0);
    }

    #[test]
    fn backtracking_decreases_and_scales() {
        let p = make_diffusion_network();
        let e = msops::evaluate_stable(&p, &p.zero_gain()).unwrap();
        let g = e.grad.clone();
        let bt = backtracking_eta(&p, &e, &g, 0.01, 0.5, 1.0).unwrap();
        assert!(bt.eta > 0.0 && bt.eval.cost < e.cost);
        let bt10 = backtracking_eta(&p, &e, &(10.0 * &g), 0.01, 0.5, 1.0).unwrap();
        let ratio = bt.eta / bt10.eta;
        assert!((5.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn backtracking_at_optimum_takes_full_step() {
        let p = make_diffusion_network();
        let sol = msops::riccati_value_iteration(&p, RiccatiOptions::default()).unwrap();
        let e = msops::evaluate_stable(&p, &sol.k_star).unwrap();
        let bt = backtracking_eta(&p, &e, &e.grad, 0.01, 0.5, 1.0).unwrap();
        assert_eq!(bt.eta, 1.0);
    }

    #[test]
    fn gauss_newton_converges_fast_on_network() {
        let p = make_diffusion_network();
        let cfg = OptimizeConfig::new(
            Method::GaussNewton,
            StepPolicy::constant(0.5),
            StopCriteria { grad_tol: 1e-8, max_iter: 25 },
        );
        let t = optimize(&p, &p.zero_gain(), &cfg).unwrap();
        assert_eq!(t.termination, Termination::GradTol);
        assert!(t.is_monotone(-1e-14));
    }

    #[test]
    fn oversized_step_loses_stability() {
        let p = make_diffusion_network();
        let cfg = OptimizeConfig::new(Method::Gradient, StepPolicy::constant(1e3), StopCriteria::default());
        let t = optimize(&p, &p.zero_gain(), &cfg).unwrap();
        assert_eq!(t.termination, Termination::LostStability);
        assert!(!t.last().is_stable());
        assert!(t.to_csv().contains(UNSTABLE_MARKER));
    }

    #[test]
    fn stationary_at_exact_optimum_of_scalar() {
        // a = 0, no noise: K* = 0 exactly and ∇C(0) = 0
        let mut p = scalar();
        p.a[(0, 0)] = 0.0;
        p.state_noise.clear();
        let cfg = OptimizeConfig::new(Method::Gradient, StepPolicy::constant(0.1), StopCriteria::default());
        let t = optimize(&p, &Mat::zeros(1, 1), &cfg).unwrap();
        assert_eq!(t.termination, Termination::Stationary);
        assert_eq!(t.iterations(), 0);
    }

    #[test]
    fn policy_validation() {
        assert!(StepPolicy::default().validate().is_ok());
        assert!(StepPolicy::constant(0.0).validate().is_err());
        assert!(StepPolicy::backtracking(0.5, 0.5).validate().is_err());
        assert!(StepPolicy::backtracking(0.01, 1.0).validate().is_err());
        assert!(StepPolicy::theoretical(1.5).validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let p = make_diffusion_network();
        let cfg =
            OptimizeConfig::new(Method::Natural, StepPolicy::default(), StopCriteria { grad_tol: 0.0, max_iter: 3 });
        let t = optimize(&p, &p.zero_gain(), &cfg).unwrap();
        let csv = t.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,"));
        assert_eq!(t.termination, Termination::MaxIter);
    }
}
