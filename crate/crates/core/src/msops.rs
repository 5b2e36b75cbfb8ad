//! Mean-square stability operators and exact solvers.
//!
//! `F_K` maps the state second moment forward one step,
//! `vec(Σ_{t+1}) = F_K vec(Σ_t)`, with
//!
//! ```text
//! F_K = A_K ⊗ A_K + Σᵢ αᵢ Aᵢ ⊗ Aᵢ + Σⱼ βⱼ (BⱼK) ⊗ (BⱼK)
//! ```
//!
//! A gain is mean-square stabilizing iff `ρ(F_K) < 1`. The value matrix
//! `P_K` and the aggregate covariance `Σ_K` solve the two generalized
//! Lyapunov equations built from `F_Kᵀ` and `F_K` respectively.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::LqrmProblem;

/// Largest state dimension handled by the dense `n² × n²` routes.
pub const DENSE_STATE_LIMIT: usize = 30;

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITER: usize = 10_000;
/// Deflation tolerances tried in order; the tightest rarely fails to converge.
const SCHUR_EPS: [f64; 3] = [1e-15, 1e-13, 1e-11];
const SCHUR_MAX_ITER: usize = 10_000;

/// `A + BK`.
pub fn closed_loop_nominal(problem: &LqrmProblem, k: &Mat) -> Mat {
    &problem.a + &problem.b * k
}

/// `Q + KᵀRK`.
pub fn closed_loop_cost(problem: &LqrmProblem, k: &Mat) -> Mat {
    &problem.q + k.transpose() * &problem.r * k
}

/// Matrix representation of `F_K` acting on column-major `vec(X)`.
pub fn closed_loop_operator(problem: &LqrmProblem, k: &Mat) -> Result<Mat> {
    problem.check_gain(k)?;
    let ak = closed_loop_nominal(problem, k);
    let mut f = ak.kronecker(&ak);
    for nz in &problem.state_noise {
        if nz.alpha != 0.0 {
            f += nz.alpha * nz.dir.kronecker(&nz.dir);
        }
    }
    for nz in &problem.input_noise {
        if nz.beta != 0.0 {
            let bk = &nz.dir * k;
            f += nz.beta * bk.kronecker(&bk);
        }
    }
    Ok(f)
}

/// `F_K(X) = A_K X A_Kᵀ + Σᵢ αᵢ Aᵢ X Aᵢᵀ + Σⱼ βⱼ BⱼK X (BⱼK)ᵀ`.
pub fn apply_closed_loop(problem: &LqrmProblem, k: &Mat, x: &Mat) -> Mat {
    let ak = closed_loop_nominal(problem, k);
    let mut out = &ak * x * ak.transpose();
    for nz in &problem.state_noise {
        if nz.alpha != 0.0 {
            out += nz.alpha * &nz.dir * x * nz.dir.transpose();
        }
    }
    for nz in &problem.input_noise {
        if nz.beta != 0.0 {
            let bk = &nz.dir * k;
            out += nz.beta * &bk * x * bk.transpose();
        }
    }
    out
}

/// Adjoint `F_K*(P) = A_Kᵀ P A_K + Σᵢ αᵢ AᵢᵀPAᵢ + Σⱼ βⱼ KᵀBⱼᵀPBⱼK`.
pub fn apply_closed_loop_adjoint(problem: &LqrmProblem, k: &Mat, p: &Mat) -> Mat {
    let ak = closed_loop_nominal(problem, k);
    let mut out = ak.transpose() * p * &ak;
    for nz in &problem.state_noise {
        if nz.alpha != 0.0 {
            out += nz.alpha * nz.dir.transpose() * p * &nz.dir;
        }
    }
    for nz in &problem.input_noise {
        if nz.beta != 0.0 {
            let bk = &nz.dir * k;
            out += nz.beta * bk.transpose() * p * &bk;
        }
    }
    out
}

/// Spectral radius of a square matrix by dense nonsymmetric eigensolve.
pub fn spectral_radius(f: &Mat) -> Result<f64> {
    if f.nrows() != f.ncols() {
        return Err(Error::Dimension(format!("spectral radius of {}x{} matrix", f.nrows(), f.ncols())));
    }
    if f.is_empty() {
        return Ok(0.0);
    }
    if !linalg::all_finite(f) {
        return Err(Error::EigenSolve("matrix has non-finite entries".into()));
    }
    if f.nrows() == 1 {
        return Ok(f[(0, 0)].abs());
    }
    let schur = SCHUR_EPS
        .iter()
        .find_map(|&eps| f.clone().try_schur(eps, SCHUR_MAX_ITER))
        .ok_or_else(|| Error::EigenSolve(format!("Schur iteration on {}x{} matrix", f.nrows(), f.ncols())))?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Power iteration on the PSD cone, seeded with the identity.
///
/// `F_K` maps PSD matrices to PSD matrices, so its spectral radius is
/// attained by a PSD eigenvector and the iteration converges to it.
pub fn spectral_radius_power(problem: &LqrmProblem, k: &Mat) -> Result<f64> {
    let n = problem.n();
    let mut x = Mat::identity(n, n) / (n as f64).sqrt();
    let mut prev = f64::NAN;
    for _ in 0..POWER_MAX_ITER {
        let y = apply_closed_loop(problem, k, &x);
        let lambda = y.norm();
        if !lambda.is_finite() {
            return Err(Error::EigenSolve("power iteration overflow".into()));
        }
        if lambda == 0.0 {
            return Ok(0.0);
        }
        if (lambda - prev).abs() <= POWER_TOL * lambda {
            return Ok(lambda);
        }
        prev = lambda;
        x = y / lambda;
    }
    Err(Error::EigenSolve(format!("power iteration did not settle in {POWER_MAX_ITER} steps")))
}

/// `ρ(F_K)`, dense for `n ≤ 30` and power iteration beyond.
pub fn closed_loop_spectral_radius(problem: &LqrmProblem, k: &Mat) -> Result<f64> {
    problem.check_gain(k)?;
    if problem.n() <= DENSE_STATE_LIMIT {
        spectral_radius(&closed_loop_operator(problem, k)?)
    } else {
        spectral_radius_power(problem, k)
    }
}

pub fn is_ms_stabilizing(problem: &LqrmProblem, k: &Mat) -> Result<bool> {
    is_ms_stabilizing_with_margin(problem, k, 0.0)
}

/// `ρ(F_K) < 1 − margin`.
pub fn is_ms_stabilizing_with_margin(problem: &LqrmProblem, k: &Mat, margin: f64) -> Result<bool> {
    Ok(closed_loop_spectral_radius(problem, k)? < 1.0 - margin)
}

fn require_stable(problem: &LqrmProblem, k: &Mat) -> Result<f64> {
    let rho = closed_loop_spectral_radius(problem, k)?;
    if rho < 1.0 {
        Ok(rho)
    } else {
        Err(Error::Unstable { rho })
    }
}

fn dense_solve(f: &Mat, transpose: bool, rhs: &Mat) -> Result<Mat> {
    let dim = f.nrows();
    let lhs = if transpose { Mat::identity(dim, dim) - f.transpose() } else { Mat::identity(dim, dim) - f };
    let v = linalg::solve(&lhs, &linalg::vectorize(rhs))?;
    Ok(linalg::symmetrize(&linalg::unvectorize(&v, rhs.nrows(), rhs.ncols())))
}

fn fixed_point<F>(rhs: &Mat, step: F) -> Result<Mat>
where
    F: Fn(&Mat) -> Mat,
{
    let mut x = rhs.clone();
    for _ in 0..1_000_000 {
        let next = rhs + step(&x);
        let change = (&next - &x).norm();
        x = next;
        if change <= 1e-15 * x.norm() {
            return Ok(linalg::symmetrize(&x));
        }
        if !linalg::all_finite(&x) {
            break;
        }
    }
    Err(Error::NotStabilizable("Lyapunov fixed-point iteration did not converge".into()))
}

/// `P_K` from `P = Q_K + F_K*(P)`.
pub fn solve_value_lyapunov(problem: &LqrmProblem, k: &Mat) -> Result<Mat> {
    require_stable(problem, k)?;
    let qk = closed_loop_cost(problem, k);
    if problem.n() <= DENSE_STATE_LIMIT {
        dense_solve(&closed_loop_operator(problem, k)?, true, &qk)
    } else {
        fixed_point(&qk, |p| apply_closed_loop_adjoint(problem, k, p))
    }
}

/// `Σ_K` from `Σ = Σ₀ + F_K(Σ)`.
pub fn solve_covariance_lyapunov(problem: &LqrmProblem, k: &Mat) -> Result<Mat> {
    require_stable(problem, k)?;
    if problem.n() <= DENSE_STATE_LIMIT {
        dense_solve(&closed_loop_operator(problem, k)?, false, &problem.sigma0)
    } else {
        fixed_point(&problem.sigma0, |s| apply_closed_loop(problem, k, s))
    }
}

/// `R_K = R + BᵀPB + Σⱼ βⱼ BⱼᵀPBⱼ`.
pub fn input_weight(problem: &LqrmProblem, p: &Mat) -> Mat {
    linalg::symmetrize(&(&problem.r + problem.b.transpose() * p * &problem.b + problem.input_noise_quad(p)))
}

/// Everything known about a mean-square stabilizing gain.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub k: Mat,
    pub rho: f64,
    pub p: Mat,
    pub sigma: Mat,
    pub rk: Mat,
    pub ek: Mat,
    pub cost: f64,
    pub grad: Mat,
}

impl Evaluation {
    pub fn grad_norm(&self) -> f64 {
        self.grad.norm()
    }
}

/// Outcome of evaluating a gain: full data, or the instability marker.
#[derive(Debug, Clone)]
pub enum PolicyEvaluation {
    Stable(Box<Evaluation>),
    Unstable { rho: f64 },
}

impl PolicyEvaluation {
    pub fn is_stable(&self) -> bool {
        matches!(self, PolicyEvaluation::Stable(_))
    }

    pub fn rho(&self) -> f64 {
        match self {
            PolicyEvaluation::Stable(e) => e.rho,
            PolicyEvaluation::Unstable { rho } => *rho,
        }
    }

    pub fn cost(&self) -> Option<f64> {
        self.stable().map(|e| e.cost)
    }

    pub fn stable(&self) -> Option<&Evaluation> {
        match self {
            PolicyEvaluation::Stable(e) => Some(e),
            PolicyEvaluation::Unstable { .. } => None,
        }
    }

    pub fn into_stable(self) -> Result<Evaluation> {
        match self {
            PolicyEvaluation::Stable(e) => Ok(*e),
            PolicyEvaluation::Unstable { rho } => Err(Error::Unstable { rho }),
        }
    }
}

/// Cost, value, covariance and policy gradient `∇C(K) = 2 E_K Σ_K`.
pub fn evaluate(problem: &LqrmProblem, k: &Mat) -> Result<PolicyEvaluation> {
    problem.check_gain(k)?;
    let n = problem.n();
    let (rho, p, sigma) = if n <= DENSE_STATE_LIMIT {
        let f = closed_loop_operator(problem, k)?;
        let rho = spectral_radius(&f)?;
        if rho >= 1.0 {
            return Ok(PolicyEvaluation::Unstable { rho });
        }
        let p = dense_solve(&f, true, &closed_loop_cost(problem, k))?;
        let sigma = dense_solve(&f, false, &problem.sigma0)?;
        (rho, p, sigma)
    } else {
        let rho = spectral_radius_power(problem, k)?;
        if rho >= 1.0 {
            return Ok(PolicyEvaluation::Unstable { rho });
        }
        (rho, solve_value_lyapunov(problem, k)?, solve_covariance_lyapunov(problem, k)?)
    };
    let rk = input_weight(problem, &p);
    let ek = &rk * k + problem.b.transpose() * &p * &problem.a;
    let cost = linalg::trace_product(&p, &problem.sigma0);
    let grad = 2.0 * &ek * &sigma;
    Ok(PolicyEvaluation::Stable(Box::new(Evaluation { k: k.clone(), rho, p, sigma, rk, ek, cost, grad })))
}

/// Evaluate and demand stability.
pub fn evaluate_stable(problem: &LqrmProblem, k: &Mat) -> Result<Evaluation> {
    evaluate(problem, k)?.into_stable()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiccatiOptions {
    /// Relative change `‖P_{k+1} − P_k‖_F ≤ tol ‖P_k‖_F` at exit.
    pub tol: f64,
    pub max_iter: usize,
    /// Divergence is declared when `‖P_k‖_F` exceeds this multiple of `‖Q‖_F`.
    pub divergence_factor: f64,
    /// Policy-iteration (Newton) refinements applied after value iteration
    /// settles; the iterate with the smallest residual is kept.
    pub refine_steps: usize,
}

impl Default for RiccatiOptions {
    fn default() -> Self {
        RiccatiOptions { tol: 1e-12, max_iter: 100_000, divergence_factor: 1e12, refine_steps: 3 }
    }
}

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub p_star: Mat,
    pub k_star: Mat,
    pub iterations: usize,
    /// Frobenius norm of the generalized Riccati residual at `p_star`.
    pub residual: f64,
    pub rho: f64,
}

/// `K = −(R + BᵀPB + Σⱼ βⱼBⱼᵀPBⱼ)⁻¹ BᵀPA`.
pub fn greedy_gain(problem: &LqrmProblem, p: &Mat) -> Result<Mat> {
    let rk = input_weight(problem, p);
    let bpa = problem.b.transpose() * p * &problem.a;
    let sol = rk
        .clone()
        .cholesky()
        .map(|c| c.solve(&bpa))
        .or_else(|| rk.clone().lu().solve(&bpa))
        .ok_or_else(|| Error::Singular("R + BᵀPB + Σ βⱼBⱼᵀPBⱼ".into()))?;
    Ok(-sol)
}

fn riccati_map(problem: &LqrmProblem, p: &Mat) -> Result<Mat> {
    let mut next = &problem.q + problem.a.transpose() * p * &problem.a;
    for nz in &problem.state_noise {
        if nz.alpha != 0.0 {
            next += nz.alpha * nz.dir.transpose() * p * &nz.dir;
        }
    }
    let k = greedy_gain(problem, p)?;
    // AᵀPB (R_P)⁻¹ BᵀPA = −AᵀPB K
    next += problem.a.transpose() * p * &problem.b * k;
    Ok(linalg::symmetrize(&next))
}

/// Frobenius norm of `P − Riccati(P)`.
pub fn gare_residual(problem: &LqrmProblem, p: &Mat) -> Result<f64> {
    Ok((p - riccati_map(problem, p)?).norm())
}

/// Value iteration on the generalized Riccati equation from `P₀ = Q`.
pub fn riccati_value_iteration(problem: &LqrmProblem, opts: RiccatiOptions) -> Result<RiccatiSolution> {
    let q_norm = problem.q.norm();
    let mut p = problem.q.clone();
    for it in 1..=opts.max_iter {
        let next = riccati_map(problem, &p)?;
        let change = (&next - &p).norm();
        let scale = p.norm();
        p = next;
        if !linalg::all_finite(&p) || p.norm() > opts.divergence_factor * q_norm {
            return Err(Error::NotStabilizable(format!(
                "value iteration diverged after {it} iterations (‖P‖_F = {:.3e})",
                p.norm()
            )));
        }
        if change <= opts.tol * scale {
            let mut k_star = greedy_gain(problem, &p)?;
            let rho = closed_loop_spectral_radius(problem, &k_star)?;
            if rho >= 1.0 {
                return Err(Error::NotStabilizable(format!("value iteration settled on a gain with rho = {rho}")));
            }
            let mut residual = gare_residual(problem, &p)?;
            // Value iteration contracts slowly when ρ(F_{K*}) is near one;
            // a few Newton steps clear the remaining error.
            for _ in 0..opts.refine_steps {
                let Ok(candidate) = solve_value_lyapunov(problem, &k_star) else { break };
                let r = gare_residual(problem, &candidate)?;
                if r >= residual {
                    break;
                }
                p = candidate;
                residual = r;
                k_star = greedy_gain(problem, &p)?;
            }
            let rho = closed_loop_spectral_radius(problem, &k_star)?;
            return Ok(RiccatiSolution { p_star: p, k_star, iterations: it, residual, rho });
        }
    }
    Err(Error::NotStabilizable(format!(
        "value iteration did not converge in {} iterations (‖P‖_F = {:.3e})",
        opts.max_iter,
        p.norm()
    )))
}

/// `(‖Σ_{K*}‖ / (4σ_min(R)σ_min(Σ₀)²))‖∇C(K)‖_F² − (C(K) − C(K*))`.
pub fn certify_gradient_domination(problem: &LqrmProblem, k: &Mat, kstar: &Evaluation) -> Result<f64> {
    let eval = evaluate_stable(problem, k)?;
    Ok(gradient_domination_margin(problem, &eval, kstar))
}

pub fn gradient_domination_margin(problem: &LqrmProblem, eval: &Evaluation, kstar: &Evaluation) -> f64 {
    let s0 = linalg::sigma_min(&problem.sigma0);
    let coef = linalg::spectral_norm(&kstar.sigma) / (4.0 * linalg::sigma_min(&problem.r) * s0 * s0);
    let g = eval.grad_norm();
    coef * g * g - (eval.cost - kstar.cost)
}

/// Residual of the exact expansion
/// `C(K′) − C(K) = 2Tr(Σ_{K′}ΔᵀE_K) + Tr(Σ_{K′}ΔᵀR_KΔ)`, `Δ = K′ − K`.
pub fn certify_almost_smoothness(problem: &LqrmProblem, k: &Mat, kprime: &Mat) -> Result<f64> {
    let e = evaluate_stable(problem, k)?;
    let ep = evaluate_stable(problem, kprime)?;
    Ok(almost_smoothness_residual(&e, &ep))
}

pub fn almost_smoothness_residual(e: &Evaluation, ep: &Evaluation) -> f64 {
    let delta = &ep.k - &e.k;
    let first = 2.0 * linalg::trace_product(&ep.sigma, &(delta.transpose() * &e.ek));
    let second = linalg::trace_product(&ep.sigma, &(delta.transpose() * &e.rk * &delta));
    (ep.cost - e.cost - first - second).abs()
}

/// Slacks of `‖P_K‖ ≤ C(K)/σ_min(Σ₀)` and `‖Σ_K‖ ≤ C(K)/σ_min(Q)`.
pub fn certify_cost_bounds(problem: &LqrmProblem, k: &Mat) -> Result<(f64, f64)> {
    Ok(cost_bound_slacks(problem, &evaluate_stable(problem, k)?))
}

pub fn cost_bound_slacks(problem: &LqrmProblem, e: &Evaluation) -> (f64, f64) {
    let s1 = e.cost / linalg::sigma_min(&problem.sigma0) - linalg::spectral_norm(&e.p);
    let s2 = e.cost / linalg::sigma_min(&problem.q) - linalg::spectral_norm(&e.sigma);
    (s1, s2)
}

/// Slack of `Tr(Σ_K) ≥ σ_min(Σ₀)/(1 − ρ(F_K))`.
pub fn certify_trace_bound(problem: &LqrmProblem, k: &Mat) -> Result<f64> {
    Ok(trace_bound_slack(problem, &evaluate_stable(problem, k)?))
}

pub fn trace_bound_slack(problem: &LqrmProblem, e: &Evaluation) -> f64 {
    e.sigma.trace() - linalg::sigma_min(&problem.sigma0) / (1.0 - e.rho)
}

/// Largest `φ` such that `x_{t+1} = (a + φ)x_t` is stable for all `|φ| ≤ φ_max`,
/// given mean-square stability of `x_{t+1} = (a + δ_t)x_t` with `E[δ²] = α`.
pub fn robust_margin_scalar(a: f64, alpha: f64) -> Result<f64> {
    if alpha < 0.0 {
        return Err(Error::InvalidArgument("alpha must be nonnegative".into()));
    }
    let rho = a * a + alpha;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    Ok(rho.sqrt() - a.abs())
}

/// Column-major `vec` solution helper, exposed for oracles that want the
/// raw linear system.
pub fn lyapunov_system(problem: &LqrmProblem, k: &Mat) -> Result<(Mat, DVector<f64>)> {
    let f = closed_loop_operator(problem, k)?;
    let dim = f.nrows();
    Ok((Mat::identity(dim, dim) - f, linalg::vectorize(&problem.sigma0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_diffusion_network, make_suspension, StateNoise};
    use approx::assert_relative_eq;

    pub(crate) fn scalar(a: f64, b: f64, alpha: f64) -> LqrmProblem {
        let one = Mat::identity(1, 1);
        LqrmProblem {
            a: Mat::from_element(1, 1, a),
            b: Mat::from_element(1, 1, b),
            state_noise: vec![StateNoise { alpha, dir: one.clone() }],
            input_noise: vec![],
            q: one.clone(),
            r: one.clone(),
            sigma0: one,
        }
    }

    #[test]
    fn scalar_operator_and_radius() {
        let p = scalar(0.5, 1.0, 0.2);
        let f = closed_loop_operator(&p, &Mat::zeros(1, 1)).unwrap();
        assert_relative_eq!(f[(0, 0)], 0.45, epsilon = 1e-15);
        assert_relative_eq!(spectral_radius(&f).unwrap(), 0.45, epsilon = 1e-15);
    }

    #[test]
    fn identity_radius() {
        assert_relative_eq!(spectral_radius(&Mat::identity(4, 4)).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn nonsquare_radius_is_error() {
        assert!(matches!(spectral_radius(&Mat::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn deterministic_operator_is_kron() {
        let mut p = make_diffusion_network().noiseless();
        p.a[(0, 3)] = 0.3;
        let f = closed_loop_operator(&p, &p.zero_gain()).unwrap();
        assert_relative_eq!(f, p.a.kronecker(&p.a), epsilon = 1e-15);
    }

    #[test]
    fn scalar_stability_decisions() {
        assert!(is_ms_stabilizing(&scalar(0.9, 1.0, 0.1), &Mat::zeros(1, 1)).unwrap());
        assert!(!is_ms_stabilizing(&scalar(1.0, 1.0, 0.1), &Mat::zeros(1, 1)).unwrap());
        assert!(!is_ms_stabilizing_with_margin(&scalar(0.9, 1.0, 0.1), &Mat::zeros(1, 1), 0.1).unwrap());
    }

    #[test]
    fn open_loop_stability_of_presets() {
        let d = make_diffusion_network();
        assert!(is_ms_stabilizing(&d, &d.zero_gain()).unwrap());
        let s = make_suspension();
        assert!(closed_loop_spectral_radius(&s, &s.zero_gain()).unwrap() > 1.0);
    }

    #[test]
    fn power_iteration_agrees_with_dense() {
        let d = make_diffusion_network();
        let k = Mat::from_fn(4, 4, |i, j| if i == j { -0.2 } else { 0.01 * (i + j) as f64 });
        let dense = closed_loop_spectral_radius(&d, &k).unwrap();
        let power = spectral_radius_power(&d, &k).unwrap();
        assert_relative_eq!(dense, power, max_relative = 1e-8);
    }

    #[test]
    fn scalar_lyapunov_closed_forms() {
        let p = scalar(0.5, 1.0, 0.2);
        let k = Mat::zeros(1, 1);
        let pk = solve_value_lyapunov(&p, &k).unwrap();
        assert_relative_eq!(pk[(0, 0)], 1.0 / 0.55, max_relative = 1e-14);
        let sk = solve_covariance_lyapunov(&p, &k).unwrap();
        assert_relative_eq!(sk[(0, 0)], 1.0 / 0.55, max_relative = 1e-14);
    }

    #[test]
    fn scalar_gradient_closed_form() {
        let p = scalar(0.5, 1.0, 0.2);
        let e = evaluate_stable(&p, &Mat::zeros(1, 1)).unwrap();
        let pk = 1.0 / 0.55;
        assert_relative_eq!(e.grad[(0, 0)], 2.0 * pk * 0.5 * pk, max_relative = 1e-13);
        assert!((e.grad[(0, 0)] - 3.3058).abs() < 1e-3);
    }

    #[test]
    fn unstable_gain_is_refused() {
        let p = scalar(1.0, 1.0, 0.1);
        let k = Mat::zeros(1, 1);
        assert!(matches!(solve_value_lyapunov(&p, &k), Err(Error::Unstable { .. })));
        assert!(matches!(solve_covariance_lyapunov(&p, &k), Err(Error::Unstable { .. })));
        let e = evaluate(&p, &k).unwrap();
        assert!(!e.is_stable());
        assert!(e.cost().is_none());
        assert_relative_eq!(e.rho(), 1.1, epsilon = 1e-14);
    }

    #[test]
    fn scalar_dare_root() {
        // zero noise, a = 0.5, b = q = r = 1: p² − 0.25p − 1 = 0
        let p = scalar(0.5, 1.0, 0.0);
        let sol = riccati_value_iteration(&p, RiccatiOptions::default()).unwrap();
        let root = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert_relative_eq!(sol.p_star[(0, 0)], root, max_relative = 1e-12);
        assert_relative_eq!(sol.k_star[(0, 0)], -0.5 * root / (1.0 + root), max_relative = 1e-12);
    }

    #[test]
    fn value_matches_riccati_at_optimum() {
        let d = make_diffusion_network();
        let sol = riccati_value_iteration(&d, RiccatiOptions::default()).unwrap();
        let pk = solve_value_lyapunov(&d, &sol.k_star).unwrap();
        assert_relative_eq!(pk, sol.p_star, max_relative = 1e-8);
    }

    #[test]
    fn heavy_noise_is_not_stabilizable() {
        let s = make_suspension().with_noise_scaled(100.0);
        let err = riccati_value_iteration(&s, RiccatiOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotStabilizable(_)), "{err}");
    }

    #[test]
    fn robust_margin_values() {
        assert!((robust_margin_scalar(0.9, 0.1).unwrap() - (0.91f64.sqrt() - 0.9)).abs() < 1e-12);
        assert!((robust_margin_scalar(0.9, 0.1).unwrap() - 0.05394).abs() < 1e-5);
        assert_eq!(robust_margin_scalar(0.5, 0.0).unwrap(), 0.0);
        assert!((robust_margin_scalar(0.0, 0.25).unwrap() - 0.5).abs() < 1e-15);
        assert!(robust_margin_scalar(1.0, 0.1).is_err());
    }

    #[test]
    fn scalar_certificates() {
        let p = scalar(0.5, 1.0, 0.2);
        let k = Mat::zeros(1, 1);
        // Σ = Σ₀/(1 − ρ) exactly in one dimension
        assert!(certify_trace_bound(&p, &k).unwrap().abs() < 1e-12);
        let (s1, s2) = certify_cost_bounds(&p, &k).unwrap();
        assert!(s1.abs() < 1e-12 && s2 >= -1e-12);
        let r = certify_almost_smoothness(&p, &k, &Mat::from_element(1, 1, 0.1)).unwrap();
        assert!(r <= 1e-12, "residual {r}");
        assert_eq!(certify_almost_smoothness(&p, &k, &k).unwrap(), 0.0);
        let opt = riccati_value_iteration(&p, RiccatiOptions::default()).unwrap();
        let star = evaluate_stable(&p, &opt.k_star).unwrap();
        assert!(certify_gradient_domination(&p, &k, &star).unwrap() >= 0.0);
        assert!(certify_gradient_domination(&p, &opt.k_star, &star).unwrap().abs() < 1e-10);
    }
}
