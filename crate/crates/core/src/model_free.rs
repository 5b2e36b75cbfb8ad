//! Rollout simulation, zeroth-order gradient estimation and model-free
//! policy gradient descent.
//!
//! Every random quantity of sample `i` in a batch comes from its own
//! ChaCha stream (`seed`, stream `i`), drawn in a fixed order: the
//! perturbation `Uᵢ`, the initial state, then the multiplicative noise of
//! each step. Batches are reduced in sample order, so results do not depend
//! on the execution mode.

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::linalg::{self, Mat};
use crate::model::{
    matrix_serde, truncated_normal_variance, InitialStateRule, LqrmProblem, NoiseDistribution, NoiseSpec,
};
use crate::model_based::{self as mb, DescentTrace, StepKind, StepPolicy, StopCriteria, Termination, TraceRecord};
use crate::msops::{self, Evaluation, PolicyEvaluation};

/// Squared state norm beyond which a rollout is declared diverged.
const DIVERGED_SQ_NORM: f64 = 1e300;

/// Random generator for sample `index` of the batch seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Seed of sub-batch `index` in family `tag`, derived from `master`.
pub fn derive_seed(master: u64, tag: u32, index: u32) -> u64 {
    sample_rng(master, (u64::from(tag) << 32) | u64::from(index)).next_u64()
}

/// Uniform draw from the Frobenius sphere of radius `r` in `ℝ^{m×n}`.
pub fn sample_sphere<R: Rng + ?Sized>(m: usize, n: usize, r: f64, rng: &mut R) -> Mat {
    let g = Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = g.norm();
    g * (r / norm)
}

#[derive(Debug, Clone, Copy)]
enum Sampler {
    Uniform,
    Truncated { clip: f64, scale: f64 },
    Gaussian,
}

impl Sampler {
    fn new(d: NoiseDistribution) -> Self {
        match d {
            NoiseDistribution::BoundedUniform => Sampler::Uniform,
            NoiseDistribution::TruncatedGaussian { clip } => {
                Sampler::Truncated { clip, scale: 1.0 / truncated_normal_variance(clip).sqrt() }
            }
            NoiseDistribution::Gaussian => Sampler::Gaussian,
        }
    }

    /// Zero-mean, unit-variance draw.
    #[inline]
    fn standard<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            Sampler::Uniform => rng.random_range(-1.0..1.0) * 3f64.sqrt(),
            Sampler::Truncated { clip, scale } => loop {
                let g: f64 = rng.sample(StandardNormal);
                if g.abs() <= clip {
                    break g * scale;
                }
            },
            Sampler::Gaussian => rng.sample(StandardNormal),
        }
    }
}

/// Row-major copy of a matrix for allocation-free inner loops.
fn flat(m: &Mat) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

#[inline]
fn matvec_add(out: &mut [f64], a: &[f64], x: &[f64], scale: f64) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &a[i * n..(i + 1) * n];
        let mut s = 0.0;
        for (r, xv) in row.iter().zip(x) {
            s += r * xv;
        }
        *o += scale * s;
    }
}

#[inline]
fn quad(q: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let row = &q[i * n..(i + 1) * n];
        let mut t = 0.0;
        for (r, xv) in row.iter().zip(x) {
            t += r * xv;
        }
        s += x[i] * t;
    }
    s
}

/// Closed-loop data for one gain, flattened.
struct ClosedLoop {
    ak: Vec<f64>,
    /// `(√αᵢ, Aᵢ)` then `(√βⱼ, BⱼK)`.
    dirs: Vec<(f64, Vec<f64>)>,
    qk: Vec<f64>,
}

/// Rollout engine for one problem and noise law.
pub struct Simulator<'a> {
    problem: &'a LqrmProblem,
    noise: NoiseSpec,
    sampler: Sampler,
    sigma0_root: Mat,
    state_dirs: Vec<(f64, Vec<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutCost {
    pub cost: f64,
    pub diverged: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(problem: &'a LqrmProblem, noise: NoiseSpec) -> Self {
        let state_dirs =
            problem.state_noise.iter().filter(|nz| nz.alpha > 0.0).map(|nz| (nz.alpha.sqrt(), flat(&nz.dir))).collect();
        Simulator {
            problem,
            noise,
            sampler: Sampler::new(noise.distribution),
            sigma0_root: linalg::sqrt_psd(&problem.sigma0),
            state_dirs,
        }
    }

    fn closed_loop(&self, k: &Mat) -> ClosedLoop {
        let p = self.problem;
        let mut dirs = self.state_dirs.clone();
        for nz in p.input_noise.iter().filter(|nz| nz.beta > 0.0) {
            dirs.push((nz.beta.sqrt(), flat(&(&nz.dir * k))));
        }
        ClosedLoop { ak: flat(&msops::closed_loop_nominal(p, k)), dirs, qk: flat(&msops::closed_loop_cost(p, k)) }
    }

    /// Draw an initial state with covariance `Σ₀`.
    pub fn draw_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.problem.n();
        let g = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        match self.noise.initial_state {
            InitialStateRule::ScaledSphere => &self.sigma0_root * (g.normalize() * (n as f64).sqrt()),
            InitialStateRule::Gaussian => &self.sigma0_root * g,
        }
    }

    fn run<R: Rng + ?Sized>(
        &self,
        cl: &ClosedLoop,
        x0: &DVector<f64>,
        ell: usize,
        rng: &mut R,
        mut record: Option<&mut Vec<DVector<f64>>>,
    ) -> RolloutCost {
        let n = x0.len();
        let mut x = x0.as_slice().to_vec();
        let mut y = vec![0.0; n];
        let mut cost = quad(&cl.qk, &x);
        if let Some(tr) = record.as_deref_mut() {
            tr.push(x0.clone());
        }
        for _ in 0..ell {
            y.iter_mut().for_each(|v| *v = 0.0);
            matvec_add(&mut y, &cl.ak, &x, 1.0);
            for (sd, dir) in &cl.dirs {
                let d = sd * self.sampler.standard(rng);
                matvec_add(&mut y, dir, &x, d);
            }
            std::mem::swap(&mut x, &mut y);
            if let Some(tr) = record.as_deref_mut() {
                tr.push(DVector::from_column_slice(&x));
            }
            let sq: f64 = x.iter().map(|v| v * v).sum();
            if !(sq <= DIVERGED_SQ_NORM) {
                return RolloutCost { cost, diverged: true };
            }
            cost += quad(&cl.qk, &x);
        }
        RolloutCost { cost, diverged: false }
    }

    /// Finite-horizon cost `Σ_{t=0}^{ℓ} x_tᵀ(Q + KᵀRK)x_t` of one rollout.
    pub fn rollout_cost<R: Rng + ?Sized>(&self, k: &Mat, x0: &DVector<f64>, ell: usize, rng: &mut R) -> RolloutCost {
        self.run(&self.closed_loop(k), x0, ell, rng, None)
    }
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub trajectory: Vec<DVector<f64>>,
    pub cost: f64,
    pub diverged: bool,
}

/// Simulate `x_{t+1} = (A + Σδᵢ Aᵢ + (B + Σγⱼ Bⱼ)K) x_t` for `ell` steps.
pub fn simulate_rollout<R: Rng + ?Sized>(
    problem: &LqrmProblem,
    k: &Mat,
    noise: &NoiseSpec,
    x0: &DVector<f64>,
    ell: usize,
    rng: &mut R,
) -> Result<Rollout> {
    problem.check_gain(k)?;
    if x0.len() != problem.n() {
        return Err(Error::Dimension(format!("x0 has length {}, expected {}", x0.len(), problem.n())));
    }
    if ell == 0 {
        return Err(Error::InvalidArgument("rollout length must be at least 1".into()));
    }
    let sim = Simulator::new(problem, *noise);
    let mut trajectory = Vec::with_capacity(ell + 1);
    let out = sim.run(&sim.closed_loop(k), x0, ell, rng, Some(&mut trajectory));
    Ok(Rollout { trajectory, cost: out.cost, diverged: out.diverged })
}

/// What to do when a perturbed gain `K + Uᵢ` is not mean-square stabilizing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationCheck {
    /// Reject the whole batch.
    #[default]
    Reject,
    /// Keep the sample; its finite-horizon cost is still finite.
    Allow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutSettings {
    pub n_sample: usize,
    pub ell: usize,
    pub r: f64,
    pub noise: NoiseSpec,
    pub check: PerturbationCheck,
    pub exec: ExecMode,
}

impl RolloutSettings {
    pub fn new(n_sample: usize, ell: usize, r: f64) -> Self {
        RolloutSettings {
            n_sample,
            ell,
            r,
            noise: NoiseSpec::default(),
            check: PerturbationCheck::Reject,
            exec: ExecMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sample == 0 {
            return Err(Error::InvalidArgument("n_sample must be at least 1".into()));
        }
        if self.ell == 0 {
            return Err(Error::InvalidArgument("rollout length must be at least 1".into()));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::InvalidArgument(format!("exploration radius must be positive, got {}", self.r)));
        }
        Ok(())
    }
}

/// Cheap stability test for gains near a stabilizing `K`.
///
/// With `X = P_K ≻ 0`, `X − F*_{K′}(X) ≻ 0` certifies `ρ(F_{K′}) < 1`; only
/// when that fails is the spectral radius computed.
struct StabilityGuard<'a> {
    problem: &'a LqrmProblem,
    x: Mat,
    /// `X − Σᵢ αᵢ AᵢᵀXAᵢ`.
    base: Mat,
    /// `Σⱼ βⱼ BⱼᵀXBⱼ`.
    input: Mat,
}

impl<'a> StabilityGuard<'a> {
    fn new(problem: &'a LqrmProblem, p: &Mat) -> Self {
        let mut base = p.clone();
        for nz in &problem.state_noise {
            base -= nz.alpha * nz.dir.transpose() * p * &nz.dir;
        }
        StabilityGuard { problem, x: p.clone(), base, input: problem.input_noise_quad(p) }
    }

    /// `None` if stabilizing, else `Some(ρ)`.
    fn violation(&self, k: &Mat) -> Result<Option<f64>> {
        let ak = msops::closed_loop_nominal(self.problem, k);
        let d = &self.base - ak.transpose() * &self.x * &ak - k.transpose() * &self.input * k;
        if linalg::symmetrize(&d).cholesky().is_some() {
            return Ok(None);
        }
        let rho = msops::closed_loop_spectral_radius(self.problem, k)?;
        Ok((rho >= 1.0).then_some(rho))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    #[serde(rename = "U", with = "matrix_serde")]
    pub u: Mat,
    pub x0: Vec<f64>,
    pub cost: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub r: f64,
    pub ell: usize,
    pub n_sample: usize,
    pub master_seed: u64,
    pub samples: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientEstimate {
    #[serde(with = "matrix_serde")]
    pub grad_hat: Mat,
    pub n_sample: usize,
    pub ell: usize,
    pub r: f64,
    pub diverged: usize,
    pub relative_error_vs_truth: Option<f64>,
}

impl GradientEstimate {
    pub fn with_truth(mut self, truth: &Mat) -> Self {
        self.relative_error_vs_truth = Some((&self.grad_hat - truth).norm() / truth.norm());
        self
    }
}

struct Draw {
    u: Mat,
    x0: DVector<f64>,
    out: RolloutCost,
}

struct Accumulator {
    sum: Mat,
    diverged: usize,
    rejected: Option<(usize, f64)>,
    error: Option<Error>,
}

fn draw_sample(
    sim: &Simulator<'_>,
    guard: Option<&StabilityGuard<'_>>,
    k: &Mat,
    settings: &RolloutSettings,
    seed: u64,
    i: usize,
) -> Result<std::result::Result<Draw, f64>> {
    let mut rng = sample_rng(seed, i as u64);
    let (m, n) = (k.nrows(), k.ncols());
    let u = sample_sphere(m, n, settings.r, &mut rng);
    let kh = k + &u;
    if let Some(g) = guard {
        if let Some(rho) = g.violation(&kh)? {
            return Ok(Err(rho));
        }
    }
    let x0 = sim.draw_initial_state(&mut rng);
    let out = sim.run(&sim.closed_loop(&kh), &x0, settings.ell, &mut rng, None);
    Ok(Ok(Draw { u, x0, out }))
}

fn prepare<'a>(
    problem: &'a LqrmProblem,
    k: &Mat,
    settings: &RolloutSettings,
) -> Result<(Simulator<'a>, Option<StabilityGuard<'a>>)> {
    settings.validate()?;
    problem.check_gain(k)?;
    let guard = match settings.check {
        PerturbationCheck::Reject => Some(StabilityGuard::new(problem, &msops::solve_value_lyapunov(problem, k)?)),
        PerturbationCheck::Allow => None,
    };
    Ok((Simulator::new(problem, settings.noise), guard))
}

/// Every sample of a gradient-estimation batch, for inspection.
pub fn rollout_batch(
    problem: &LqrmProblem,
    k: &Mat,
    settings: &RolloutSettings,
    master_seed: u64,
) -> Result<RolloutBatch> {
    let (sim, guard) = prepare(problem, k, settings)?;
    let draws = exec::map_indexed(settings.exec, settings.n_sample, |i| {
        draw_sample(&sim, guard.as_ref(), k, settings, master_seed, i)
    });
    let mut samples = Vec::with_capacity(draws.len());
    for (index, d) in draws.into_iter().enumerate() {
        match d? {
            Ok(d) => samples.push(SampleRecord {
                u: d.u,
                x0: d.x0.as_slice().to_vec(),
                cost: d.out.cost,
                diverged: d.out.diverged,
            }),
            Err(rho) => return Err(Error::BatchRejected { index, rho }),
        }
    }
    Ok(RolloutBatch { r: settings.r, ell: settings.ell, n_sample: settings.n_sample, master_seed, samples })
}

impl RolloutBatch {
    /// `(1/N) Σᵢ (mn/r²) Ĉᵢ Uᵢ`, summed in the same order as
    /// [`estimate_gradient`].
    pub fn estimate(&self) -> GradientEstimate {
        let (m, n) = self.samples.first().map_or((0, 0), |s| s.u.shape());
        let mut total = Mat::zeros(m, n);
        for chunk in self.samples.chunks(exec::CHUNK) {
            let mut part = Mat::zeros(m, n);
            for s in chunk {
                part += s.cost * &s.u;
            }
            total += part;
        }
        let scale = (m * n) as f64 / (self.r * self.r) / self.n_sample as f64;
        GradientEstimate {
            grad_hat: total * scale,
            n_sample: self.n_sample,
            ell: self.ell,
            r: self.r,
            diverged: self.samples.iter().filter(|s| s.diverged).count(),
            relative_error_vs_truth: None,
        }
    }
}

/// Zeroth-order estimate of `∇C(K)` from `n_sample` perturbed rollouts.
pub fn estimate_gradient(
    problem: &LqrmProblem,
    k: &Mat,
    settings: &RolloutSettings,
    master_seed: u64,
) -> Result<GradientEstimate> {
    let (sim, guard) = prepare(problem, k, settings)?;
    let (m, n) = k.shape();
    let acc = exec::chunked_reduce(
        settings.exec,
        settings.n_sample,
        || Accumulator { sum: Mat::zeros(m, n), diverged: 0, rejected: None, error: None },
        |acc, i| {
            if acc.rejected.is_some() || acc.error.is_some() {
                return;
            }
            match draw_sample(&sim, guard.as_ref(), k, settings, master_seed, i) {
                Ok(Ok(d)) => {
                    acc.sum += d.out.cost * &d.u;
                    acc.diverged += usize::from(d.out.diverged);
                }
                Ok(Err(rho)) => acc.rejected = Some((i, rho)),
                Err(e) => acc.error = Some(e),
            }
        },
        |mut a, b| {
            if a.error.is_none() && a.rejected.is_none() {
                a.sum += b.sum;
                a.diverged += b.diverged;
                a.rejected = b.rejected;
                a.error = b.error;
            }
            a
        },
    );
    if let Some(e) = acc.error {
        return Err(e);
    }
    if let Some((index, rho)) = acc.rejected {
        return Err(Error::BatchRejected { index, rho });
    }
    let scale = (m * n) as f64 / (settings.r * settings.r) / settings.n_sample as f64;
    Ok(GradientEstimate {
        grad_hat: acc.sum * scale,
        n_sample: settings.n_sample,
        ell: settings.ell,
        r: settings.r,
        diverged: acc.diverged,
        relative_error_vs_truth: None,
    })
}

/// Mean rollout cost at `K` (no perturbation), with the same per-sample
/// streams for every gain so that costs at nearby gains share noise.
pub fn estimate_cost(
    problem: &LqrmProblem,
    k: &Mat,
    n_sample: usize,
    ell: usize,
    noise: &NoiseSpec,
    seed: u64,
    mode: ExecMode,
) -> Result<f64> {
    problem.check_gain(k)?;
    if n_sample == 0 || ell == 0 {
        return Err(Error::InvalidArgument("n_sample and ell must be at least 1".into()));
    }
    let sim = Simulator::new(problem, *noise);
    let cl = sim.closed_loop(k);
    let total = exec::chunked_reduce(
        mode,
        n_sample,
        || 0.0,
        |acc, i| {
            let mut rng = sample_rng(seed, i as u64);
            let x0 = sim.draw_initial_state(&mut rng);
            *acc += sim.run(&cl, &x0, ell, &mut rng, None).cost;
        },
        |a, b| a + b,
    );
    Ok(total / n_sample as f64)
}

/// Exact `C^{(ℓ)}(K) = Σ_{t<ℓ} Tr(Q_K F_K^t(Σ₀))`.
pub fn finite_horizon_cost(problem: &LqrmProblem, k: &Mat, ell: usize) -> Result<f64> {
    problem.check_gain(k)?;
    let qk = msops::closed_loop_cost(problem, k);
    let mut s = problem.sigma0.clone();
    let mut total = 0.0;
    for _ in 0..ell {
        total += linalg::trace_product(&qk, &s);
        s = msops::apply_closed_loop(problem, k, &s);
    }
    Ok(total)
}

/// Exact expectation of the rollout estimator,
/// `(mn/r²) E[C^{(ℓ+1)}(K + U) U]` over the radius-`r` Frobenius sphere.
///
/// One- and two-dimensional gains use exact (trapezoidal, spectrally
/// accurate) quadrature; larger ones use `points` antithetic Monte Carlo
/// pairs from a fixed stream.
pub fn smoothed_gradient(problem: &LqrmProblem, k: &Mat, r: f64, ell: usize, points: usize) -> Result<Mat> {
    problem.check_gain(k)?;
    let (m, n) = k.shape();
    let d = m * n;
    let cost = |u: &Mat| finite_horizon_cost(problem, &(k + u), ell + 1);
    let mut acc = Mat::zeros(m, n);
    let count = match d {
        1 => {
            for s in [r, -r] {
                let u = Mat::from_element(m, n, s);
                acc += cost(&u)? * &u;
            }
            2
        }
        2 => {
            for i in 0..points {
                let th = std::f64::consts::TAU * i as f64 / points as f64;
                let u = Mat::from_column_slice(m, n, &[r * th.cos(), r * th.sin()]);
                acc += cost(&u)? * &u;
            }
            points
        }
        _ => {
            let mut rng = sample_rng(0x5eed, 0);
            for _ in 0..points {
                let u = sample_sphere(m, n, r, &mut rng);
                acc += (cost(&u)? - cost(&-&u)?) * &u;
            }
            2 * points
        }
    };
    Ok(acc * (d as f64 / (r * r) / count as f64))
}

/// Exact first and second moments of one summand `Z = (mn/r²) Ĉ U` of the
/// rollout gradient estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorMoments {
    /// `E[Z]`, the smoothed gradient.
    pub mean: Mat,
    /// `E‖Z‖²_F`.
    pub second_moment: f64,
}

impl EstimatorMoments {
    /// `E‖Z − E[Z]‖²_F`.
    pub fn variance(&self) -> f64 {
        self.second_moment - self.mean.norm_squared()
    }

    /// Sample count at which the root-mean-square error of the batch mean,
    /// relative to `E[Z]`, equals `rel`.
    pub fn samples_for_relative_error(&self, rel: f64) -> f64 {
        self.variance() / (rel * rel * self.mean.norm_squared())
    }
}

/// Largest state dimension accepted by [`estimator_moments`]; the
/// fourth-moment operator is `n⁴ × n⁴`.
pub const MOMENT_STATE_LIMIT: usize = 5;

/// `E[x₀^{⊗4}]` for the configured initial-state law.
fn initial_fourth_moment(sigma0: &Mat, rule: InitialStateRule) -> DVector<f64> {
    let n = sigma0.nrows();
    // the scaled sphere has the Gaussian fourth moment times n/(n+2)
    let scale = match rule {
        InitialStateRule::Gaussian => 1.0,
        InitialStateRule::ScaledSphere => n as f64 / (n as f64 + 2.0),
    };
    let s = |a: usize, b: usize| sigma0[(a, b)];
    DVector::from_fn(n * n * n * n, |idx, _| {
        let (i, j, k, l) = (idx / (n * n * n), (idx / (n * n)) % n, (idx / n) % n, idx % n);
        scale * (s(i, j) * s(k, l) + s(i, k) * s(j, l) + s(i, l) * s(j, k))
    })
}

/// `(E[M_t ⊗ M_t], E[M_t^{⊗4}])` for `M_t = A_K + Σ noise·direction`.
fn closed_loop_moment_operators(problem: &LqrmProblem, k: &Mat, kurtosis: f64) -> (Mat, Mat) {
    let m = msops::closed_loop_nominal(problem, k);
    let mut dirs: Vec<(f64, Mat)> = problem.state_noise.iter().map(|nz| (nz.alpha, nz.dir.clone())).collect();
    dirs.extend(problem.input_noise.iter().map(|nz| (nz.beta, &nz.dir * k)));
    dirs.retain(|(v, _)| *v > 0.0);
    let mut f2 = m.kronecker(&m);
    for (v, d) in &dirs {
        f2 += *v * d.kronecker(d);
    }
    let n = m.nrows();
    let mut g = Mat::zeros(n.pow(4), n.pow(4));
    let terms = dirs.len() + 1;
    // each of the four factors takes M or one noise direction; independent
    // symmetric noises contribute only when used an even number of times
    for code in 0..terms.pow(4) {
        let pick = [code % terms, (code / terms) % terms, (code / terms.pow(2)) % terms, code / terms.pow(3)];
        let mut weight = 1.0;
        for (i, (v, _)) in dirs.iter().enumerate() {
            weight *= match pick.iter().filter(|&&p| p == i + 1).count() {
                0 => 1.0,
                2 => *v,
                4 => kurtosis * v * v,
                _ => 0.0,
            };
        }
        if weight == 0.0 {
            continue;
        }
        let f = |p: usize| if p == 0 { &m } else { &dirs[p - 1].1 };
        g += weight * f(pick[0]).kronecker(f(pick[1])).kronecker(&f(pick[2]).kronecker(f(pick[3])));
    }
    (f2, g)
}

/// `(E[Ĉ], E[Ĉ²])` of the rollout cost `Ĉ = Σ_{t=0}^{ℓ} x_tᵀ Q_K x_t`.
fn rollout_cost_moments(problem: &LqrmProblem, k: &Mat, ell: usize, noise: &NoiseSpec) -> (f64, f64) {
    let (f2, g) = closed_loop_moment_operators(problem, k, noise.distribution.kurtosis());
    let qk = msops::closed_loop_cost(problem, k);
    let vq = DVector::from_column_slice(qk.as_slice());
    // w_s = Σ_{t=s}^{ℓ} (F₂ᵀ)^{t−s} vec Q_K, so E[c_s Σ_{t≥s} c_t] = (vec Q_K ⊗ w_s)ᵀ E[x_s^{⊗4}]
    let mut w = vec![vq.clone(); ell + 1];
    for s in (0..ell).rev() {
        w[s] = &vq + f2.tr_mul(&w[s + 1]);
    }
    let mut m2 = DVector::from_column_slice(problem.sigma0.as_slice());
    let mut m4 = initial_fourth_moment(&problem.sigma0, noise.initial_state);
    let (mut first, mut second) = (0.0, 0.0);
    for ws in &w {
        first += vq.dot(&m2);
        second += vq.kronecker(&(2.0 * ws - &vq)).dot(&m4);
        m2 = &f2 * m2;
        m4 = &g * m4;
    }
    (first, second)
}

/// Exact per-sample moments of the rollout gradient estimator at `K`.
///
/// Gains with one or two entries use trapezoidal quadrature on the
/// exploration sphere; larger gains use `points` Monte Carlo directions
/// from a fixed stream.
pub fn estimator_moments(
    problem: &LqrmProblem,
    k: &Mat,
    r: f64,
    ell: usize,
    noise: &NoiseSpec,
    points: usize,
) -> Result<EstimatorMoments> {
    problem.check_gain(k)?;
    if problem.n() > MOMENT_STATE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "estimator moments need n ≤ {MOMENT_STATE_LIMIT}, got {}",
            problem.n()
        )));
    }
    let (m, n) = k.shape();
    let d = m * n;
    let dirs: Vec<Mat> = match d {
        1 => vec![Mat::from_element(m, n, r), Mat::from_element(m, n, -r)],
        2 => (0..points)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / points as f64;
                Mat::from_column_slice(m, n, &[r * th.cos(), r * th.sin()])
            })
            .collect(),
        _ => {
            let mut rng = sample_rng(0x5eed, 1);
            (0..points).map(|_| sample_sphere(m, n, r, &mut rng)).collect()
        }
    };
    let scale = d as f64 / (r * r);
    let mut mean = Mat::zeros(m, n);
    let mut second = 0.0;
    for u in &dirs {
        let (c1, c2) = rollout_cost_moments(problem, &(k + u), ell, noise);
        mean += c1 * u;
        second += c2 * r * r;
    }
    let count = dirs.len() as f64;
    Ok(EstimatorMoments { mean: mean * (scale / count), second_moment: second * scale * scale / count })
}

/// Cost concentration constant: the largest ratio of a rollout cost to its
/// conditional expectation `x₀ᵀ P^{(ℓ)} x₀` over a calibration batch.
pub fn estimate_z(
    problem: &LqrmProblem,
    k: &Mat,
    noise: &NoiseSpec,
    ell: usize,
    n_calibration: usize,
    seed: u64,
) -> Result<f64> {
    problem.check_gain(k)?;
    let qk = msops::closed_loop_cost(problem, k);
    // P^{(ℓ)} = Σ_{t=0}^{ℓ} (F*)^t(Q_K), matching the rollout sum.
    let mut term = qk.clone();
    let mut p_ell = qk.clone();
    for _ in 0..ell {
        term = msops::apply_closed_loop_adjoint(problem, k, &term);
        p_ell += &term;
    }
    let sim = Simulator::new(problem, *noise);
    let cl = sim.closed_loop(k);
    let mut z: f64 = 1.0;
    for i in 0..n_calibration {
        let mut rng = sample_rng(seed, i as u64);
        let x0 = sim.draw_initial_state(&mut rng);
        let expected = (x0.transpose() * &p_ell * &x0)[(0, 0)];
        if expected > 0.0 {
            z = z.max(sim.run(&cl, &x0, ell, &mut rng, None).cost / expected);
        }
    }
    Ok(z)
}

/// Reference parameter sizes that certify a gradient estimate within `ε`
/// with probability at least `1 − μ`. Extremely conservative by design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSizes {
    pub h_cost: f64,
    pub h_grad: f64,
    /// Exploration radius `min{h_Δ, 1/h_cost, ε/(4h_grad)}`.
    pub h_r: f64,
    /// Rollout length for the finite-horizon estimator at radius `h_r`.
    pub h_ell: f64,
    /// Finite-horizon sample count.
    pub h_sample: f64,
    /// Infinite-horizon sample count at radius `min{h_Δ, 1/h_cost, ε/(2h_grad)}`.
    pub h_sample_infinite: f64,
    pub z: f64,
    pub l0: f64,
}

pub fn h_cost(problem: &LqrmProblem, eval: &Evaluation) -> f64 {
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sq = linalg::sigma_min(&problem.q);
    let nk = linalg::spectral_norm(&eval.k);
    let ak = linalg::spectral_norm(&msops::closed_loop_nominal(problem, &eval.k));
    4.0 * problem.sigma0.trace() * linalg::spectral_norm(&problem.r) / (s0 * sq)
        * (nk
            + mb::h_delta(problem, eval) / 2.0
            + linalg::spectral_norm(&problem.b) * nk * nk * (ak + 1.0) * eval.cost / (s0 * sq))
}

pub fn h_grad(problem: &LqrmProblem, eval: &Evaluation, c_star: f64) -> f64 {
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sq = linalg::sigma_min(&problem.q);
    let c = eval.cost;
    let nb = linalg::spectral_norm(&problem.b);
    let nk = linalg::spectral_norm(&eval.k);
    let ak = linalg::spectral_norm(&msops::closed_loop_nominal(problem, &eval.k));
    let hb = mb::h_b(problem);
    let hd = mb::h_delta(problem, eval);
    let first = 4.0
        * (c / sq)
        * (linalg::spectral_norm(&problem.r)
            + nb * (linalg::spectral_norm(&problem.a) + hb * (nk + hd))
                * (h_cost(problem, eval) * c / problem.sigma0.trace())
            + hb * nb * c / s0);
    let second = 8.0 * (c / sq).powi(2) * (nb * (ak + 1.0) / s0) * mb::h0(problem, eval, c_star);
    first + second
}

/// Rollout length after which the truncation gap is below `ε`:
/// `n C(K)² ‖Q_K‖ / (ε σ_min(Σ₀) σ_min(Q)²)`.
pub fn horizon_bound(problem: &LqrmProblem, eval: &Evaluation, epsilon: f64) -> f64 {
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sq = linalg::sigma_min(&problem.q);
    let qk = msops::closed_loop_cost(problem, &eval.k);
    problem.n() as f64 * eval.cost * eval.cost / (epsilon * s0 * sq * sq) * linalg::spectral_norm(&qk)
}

pub fn reference_sample_sizes(
    problem: &LqrmProblem,
    k: &Mat,
    epsilon: f64,
    mu: f64,
    noise: &NoiseSpec,
    c_star: Option<f64>,
) -> Result<ReferenceSizes> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    if !(mu > 0.0 && mu < 1.0) {
        return Err(Error::InvalidArgument("mu must lie in (0, 1)".into()));
    }
    let eval = msops::evaluate_stable(problem, k)?;
    let c_star = c_star.unwrap_or(0.0);
    let (m, n) = (problem.m() as f64, problem.n() as f64);
    let d = m.min(n);
    let s0 = linalg::sigma_min(&problem.sigma0);
    let sq = linalg::sigma_min(&problem.q);
    let c = eval.cost;
    let hc = h_cost(problem, &eval);
    let hg = h_grad(problem, &eval, c_star);
    let hd = mb::h_delta(problem, &eval);
    let h1 = mb::h1(problem, &eval, c_star);
    let log_term = ((m + n) / mu).ln();

    let r = hd.min(1.0 / hc).min(epsilon / (4.0 * hg));
    let nk = linalg::spectral_norm(k);
    let h_ell =
        4.0 * m * n * n * c * c * (linalg::spectral_norm(&problem.q) + linalg::spectral_norm(&problem.r) * nk * nk)
            / (r * epsilon * s0 * sq * sq);
    let l0 = noise.initial_state_bound(problem).unwrap_or(f64::INFINITY);
    let z = match noise.z {
        Some(z) => z,
        None => estimate_z(problem, k, noise, h_ell.ceil().min(1e4) as usize, 1000, 0)?,
    };
    let big = 2.0 * m * n * z * l0 * l0 * c / (r * s0);
    let tail = epsilon / 2.0 + h1;
    let h_sample = 32.0 * d / (epsilon * epsilon)
        * (big * big + tail * tail + (big + tail) * epsilon / (12.0 * d.sqrt()))
        * log_term;

    let r_inf = hd.min(1.0 / hc).min(epsilon / (2.0 * hg));
    let big_inf = 2.0 * m * n * c / r_inf;
    let h_sample_infinite = 8.0 * d / (epsilon * epsilon)
        * (big_inf * big_inf + tail * tail + (big_inf + tail) * epsilon / (6.0 * d.sqrt()))
        * log_term;

    Ok(ReferenceSizes { h_cost: hc, h_grad: hg, h_r: r, h_ell, h_sample, h_sample_infinite, z, l0 })
}

/// Source of gradients and costs for the model-free descent loop.
pub trait GradientOracle {
    fn gradient(&self, k: &Mat, iteration: usize) -> Result<Mat>;
    /// Cost estimate used by the line search; estimates within one
    /// iteration must share randomness.
    fn cost(&self, k: &Mat, iteration: usize) -> Result<f64>;
}

/// Rollout-based oracle (Algorithm-style zeroth-order estimates).
pub struct RolloutOracle<'a> {
    pub problem: &'a LqrmProblem,
    pub settings: RolloutSettings,
    pub master_seed: u64,
}

const TAG_GRADIENT: u32 = 1;
const TAG_COST: u32 = 2;

impl GradientOracle for RolloutOracle<'_> {
    fn gradient(&self, k: &Mat, iteration: usize) -> Result<Mat> {
        let seed = derive_seed(self.master_seed, TAG_GRADIENT, iteration as u32);
        Ok(estimate_gradient(self.problem, k, &self.settings, seed)?.grad_hat)
    }

    fn cost(&self, k: &Mat, iteration: usize) -> Result<f64> {
        let seed = derive_seed(self.master_seed, TAG_COST, iteration as u32);
        let s = &self.settings;
        estimate_cost(self.problem, k, s.n_sample, s.ell, &s.noise, seed, s.exec)
    }
}

/// Exact model-based oracle; useful to isolate estimation error.
pub struct ExactOracle<'a> {
    pub problem: &'a LqrmProblem,
}

impl GradientOracle for ExactOracle<'_> {
    fn gradient(&self, k: &Mat, _: usize) -> Result<Mat> {
        Ok(msops::evaluate_stable(self.problem, k)?.grad)
    }

    fn cost(&self, k: &Mat, _: usize) -> Result<f64> {
        Ok(msops::evaluate_stable(self.problem, k)?.cost)
    }
}

/// Gradient descent driven by an oracle.
///
/// Constant steps use the estimate directly. Backtracking tests the Armijo
/// condition on oracle costs and only considers gains that the model
/// certifies as mean-square stabilizing. The trace records exact costs.
pub fn optimize_with_oracle<O: GradientOracle>(
    problem: &LqrmProblem,
    k0: &Mat,
    oracle: &O,
    step: &StepPolicy,
    stop: &StopCriteria,
) -> Result<DescentTrace> {
    step.validate()?;
    if step.kind == StepKind::TheoreticalBound {
        return Err(Error::InvalidArgument("model-free descent supports constant or backtracking steps".into()));
    }
    let first = msops::evaluate_stable(problem, k0)?;
    let mut records = vec![TraceRecord::from_evaluation(0, k0, &PolicyEvaluation::Stable(Box::new(first)), 0.0)];
    let mut k = k0.clone();
    let mut termination = Termination::MaxIter;
    for it in 1..=stop.max_iter {
        let g = oracle.gradient(&k, it)?;
        let gn = g.norm();
        if gn == 0.0 {
            termination = Termination::Stationary;
            break;
        }
        if gn < stop.grad_tol {
            termination = Termination::GradTol;
            break;
        }
        let (eta, next) = match step.kind {
            StepKind::Backtracking => {
                let c = oracle.cost(&k, it)?;
                let mut eta = step.eta;
                let mut accepted = None;
                for _ in 0..=mb::MAX_HALVINGS {
                    let trial = &k - eta * &g;
                    if msops::is_ms_stabilizing(problem, &trial)?
                        && oracle.cost(&trial, it)? <= c - step.alpha * eta * gn * gn
                    {
                        accepted = Some((eta, trial));
                        break;
                    }
                    eta *= step.beta;
                }
                match accepted {
                    Some(a) => a,
                    None => {
                        termination = Termination::NoProgress;
                        break;
                    }
                }
            }
            _ => (step.eta, &k - step.eta * &g),
        };
        let eval = msops::evaluate(problem, &next)?;
        records.push(TraceRecord::from_evaluation(it, &next, &eval, eta));
        if !eval.is_stable() {
            termination = Termination::LostStability;
            break;
        }
        k = next;
    }
    Ok(DescentTrace { method: "gd-free".into(), records, termination })
}

/// Model-free gradient descent with rollout estimates.
pub fn optimize_model_free(
    problem: &LqrmProblem,
    k0: &Mat,
    step: &StepPolicy,
    settings: &RolloutSettings,
    stop: &StopCriteria,
    master_seed: u64,
) -> Result<DescentTrace> {
    settings.validate()?;
    let oracle = RolloutOracle { problem, settings: *settings, master_seed };
    optimize_with_oracle(problem, k0, &oracle, step, stop)
}
