//! Problem data for discrete-time LQR with multiplicative noise.
//!
//! The closed loop under `u = Kx` is
//!
//! ```text
//! x_{t+1} = (A + Σᵢ δ_ti Aᵢ + (B + Σⱼ γ_tj Bⱼ) K) x_t
//! ```
//!
//! with zero-mean, mutually independent scalars `δ_ti` (variance `αᵢ`) and
//! `γ_tj` (variance `βⱼ`), drawn i.i.d. across time.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::msops;

const SYMMETRY_TOL: f64 = 1e-12;

/// One state-multiplicative noise direction: variance `alpha` on `Ai`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNoise {
    pub alpha: f64,
    #[serde(rename = "Ai", with = "matrix_serde")]
    pub dir: Mat,
}

/// One input-multiplicative noise direction: variance `beta` on `Bj`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNoise {
    pub beta: f64,
    #[serde(rename = "Bj", with = "matrix_serde")]
    pub dir: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrmProblem {
    #[serde(rename = "A", with = "matrix_serde")]
    pub a: Mat,
    #[serde(rename = "B", with = "matrix_serde")]
    pub b: Mat,
    #[serde(default)]
    pub state_noise: Vec<StateNoise>,
    #[serde(default)]
    pub input_noise: Vec<InputNoise>,
    #[serde(rename = "Q", with = "matrix_serde")]
    pub q: Mat,
    #[serde(rename = "R", with = "matrix_serde")]
    pub r: Mat,
    #[serde(rename = "Sigma0", with = "matrix_serde")]
    pub sigma0: Mat,
}

impl LqrmProblem {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `Σⱼ βⱼ Bⱼᵀ X Bⱼ`, the input-noise correction appearing in `R_K`.
    pub fn input_noise_quad(&self, x: &Mat) -> Mat {
        let m = self.m();
        self.input_noise.iter().fold(Mat::zeros(m, m), |acc, nz| acc + nz.beta * nz.dir.transpose() * x * &nz.dir)
    }

    /// `‖B‖² + Σⱼ βⱼ‖Bⱼ‖²`.
    pub fn input_gain_energy(&self) -> f64 {
        let nb = linalg::spectral_norm(&self.b);
        nb * nb
            + self
                .input_noise
                .iter()
                .map(|nz| {
                    let s = linalg::spectral_norm(&nz.dir);
                    nz.beta * s * s
                })
                .sum::<f64>()
    }

    /// Same dynamics and costs with every noise variance set to zero.
    pub fn noiseless(&self) -> LqrmProblem {
        let mut p = self.clone();
        p.state_noise.iter_mut().for_each(|nz| nz.alpha = 0.0);
        p.input_noise.iter_mut().for_each(|nz| nz.beta = 0.0);
        p
    }

    /// Scale every noise variance by `factor`.
    pub fn with_noise_scaled(&self, factor: f64) -> LqrmProblem {
        let mut p = self.clone();
        p.state_noise.iter_mut().for_each(|nz| nz.alpha *= factor);
        p.input_noise.iter_mut().for_each(|nz| nz.beta *= factor);
        p
    }

    pub fn has_noise(&self) -> bool {
        self.state_noise.iter().any(|nz| nz.alpha != 0.0) || self.input_noise.iter().any(|nz| nz.beta != 0.0)
    }

    pub fn zero_gain(&self) -> Mat {
        Mat::zeros(self.m(), self.n())
    }

    pub fn check_gain(&self, k: &Mat) -> Result<()> {
        if k.nrows() != self.m() || k.ncols() != self.n() {
            return Err(Error::Dimension(format!(
                "gain is {}x{}, problem expects {}x{}",
                k.nrows(),
                k.ncols(),
                self.m(),
                self.n()
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<LqrmProblem> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LqrmProblem> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A feedback gain `K` (m×n) with a free-form provenance label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gain {
    #[serde(rename = "K", with = "matrix_serde")]
    pub k: Mat,
    #[serde(default)]
    pub label: String,
}

impl Gain {
    pub fn new(k: Mat, label: impl Into<String>) -> Self {
        Gain { k, label: label.into() }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Gain> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseDistribution {
    /// Uniform on `[−√(3v), √(3v)]`.
    BoundedUniform,
    /// Standard normal clipped to `[−clip, clip]`, rescaled to unit variance.
    TruncatedGaussian { clip: f64 },
    /// Unbounded Gaussian. Outside the bounded-noise hypothesis of the
    /// model-free convergence guarantee.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialStateRule {
    /// `x₀ = √n Σ₀^{1/2} u` with `u` uniform on the unit sphere.
    ScaledSphere,
    /// `x₀ ~ N(0, Σ₀)`.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub distribution: NoiseDistribution,
    pub initial_state: InitialStateRule,
    /// Cost concentration constant; estimated empirically when absent.
    pub z: Option<f64>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            distribution: NoiseDistribution::BoundedUniform,
            initial_state: InitialStateRule::ScaledSphere,
            z: None,
        }
    }
}

impl NoiseSpec {
    pub fn gaussian() -> Self {
        NoiseSpec { distribution: NoiseDistribution::Gaussian, ..NoiseSpec::default() }
    }

    /// Whether both the noise and initial-state laws have bounded support.
    pub fn is_bounded(&self) -> bool {
        !matches!(self.distribution, NoiseDistribution::Gaussian)
            && matches!(self.initial_state, InitialStateRule::ScaledSphere)
    }

    /// Almost-sure bound `L₀` on `‖x₀‖`, when one exists.
    pub fn initial_state_bound(&self, problem: &LqrmProblem) -> Option<f64> {
        match self.initial_state {
            InitialStateRule::ScaledSphere => {
                let root = linalg::sqrt_psd(&problem.sigma0);
                Some((problem.n() as f64).sqrt() * linalg::spectral_norm(&root))
            }
            InitialStateRule::Gaussian => None,
        }
    }

    /// Draw one zero-mean scalar with the given variance.
    pub fn draw<R: Rng + ?Sized>(&self, variance: f64, rng: &mut R) -> f64 {
        if variance == 0.0 {
            return 0.0;
        }
        let sd = variance.sqrt();
        match self.distribution {
            NoiseDistribution::BoundedUniform => {
                let half = 3f64.sqrt() * sd;
                rng.random_range(-half..half)
            }
            NoiseDistribution::TruncatedGaussian { clip } => {
                let scale = 1.0 / truncated_normal_variance(clip).sqrt();
                loop {
                    let g: f64 = rng.sample(StandardNormal);
                    if g.abs() <= clip {
                        return g * scale * sd;
                    }
                }
            }
            NoiseDistribution::Gaussian => {
                let g: f64 = rng.sample(StandardNormal);
                g * sd
            }
        }
    }
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Central mass `2Φ(c) − 1` (composite Simpson).
fn central_normal_mass(c: f64) -> f64 {
    let steps = 2000;
    let h = c / steps as f64;
    let mut acc = std_normal_pdf(0.0) + std_normal_pdf(c);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * std_normal_pdf(i as f64 * h);
    }
    2.0 * acc * h / 3.0
}

/// Variance of a standard normal restricted to `[−c, c]`:
/// `1 − 2cφ(c) / (2Φ(c) − 1)`.
pub fn truncated_normal_variance(c: f64) -> f64 {
    1.0 - 2.0 * c * std_normal_pdf(c) / central_normal_mass(c)
}

impl NoiseDistribution {
    /// `E[ξ⁴] / E[ξ²]²` of the zero-mean law.
    pub fn kurtosis(&self) -> f64 {
        match *self {
            NoiseDistribution::BoundedUniform => 1.8,
            NoiseDistribution::Gaussian => 3.0,
            NoiseDistribution::TruncatedGaussian { clip: c } => {
                let (mass, pdf) = (central_normal_mass(c), std_normal_pdf(c));
                let m2 = (mass - 2.0 * c * pdf) / mass;
                let m4 = (3.0 * (mass - 2.0 * c * pdf) - 2.0 * c.powi(3) * pdf) / mass;
                m4 / (m2 * m2)
            }
        }
    }
}

/// Every invariant violation of `problem`, as readable strings.
pub fn validate(problem: &LqrmProblem) -> Vec<String> {
    let mut out = Vec::new();
    let n = problem.a.nrows();
    if problem.a.ncols() != n {
        out.push(format!("A is {}x{}, not square", n, problem.a.ncols()));
    }
    if problem.b.nrows() != n {
        out.push(format!("B has {} rows, expected {}", problem.b.nrows(), n));
    }
    let m = problem.b.ncols();

    let check_square = |name: &str, x: &Mat, dim: usize, out: &mut Vec<String>| -> bool {
        if x.nrows() != dim || x.ncols() != dim {
            out.push(format!("{} is {}x{}, expected {}x{}", name, x.nrows(), x.ncols(), dim, dim));
            return false;
        }
        true
    };

    for (name, x, dim) in [("Q", &problem.q, n), ("R", &problem.r, m), ("Sigma0", &problem.sigma0, n)] {
        if !check_square(name, x, dim, &mut out) {
            continue;
        }
        if !linalg::all_finite(x) {
            out.push(format!("{} has non-finite entries", name));
            continue;
        }
        if linalg::asymmetry(x) > SYMMETRY_TOL {
            out.push(format!("{} not symmetric", name));
        }
        if dim > 0 && linalg::min_eig_sym(x) <= 0.0 {
            out.push(format!("{} not positive definite", name));
        }
    }

    for (i, nz) in problem.state_noise.iter().enumerate() {
        if !(nz.alpha >= 0.0) {
            out.push(format!("negative noise variance alpha_{}", i + 1));
        }
        if nz.dir.nrows() != n || nz.dir.ncols() != n {
            out.push(format!("A_{} is {}x{}, expected {}x{}", i + 1, nz.dir.nrows(), nz.dir.ncols(), n, n));
        }
    }
    for (j, nz) in problem.input_noise.iter().enumerate() {
        if !(nz.beta >= 0.0) {
            out.push(format!("negative noise variance beta_{}", j + 1));
        }
        if nz.dir.nrows() != n || nz.dir.ncols() != m {
            out.push(format!("B_{} is {}x{}, expected {}x{}", j + 1, nz.dir.nrows(), nz.dir.ncols(), n, m));
        }
    }
    if !linalg::all_finite(&problem.a) || !linalg::all_finite(&problem.b) {
        out.push("A or B has non-finite entries".to_string());
    }
    out
}

/// Validate and convert violations into an error.
pub fn ensure_valid(problem: &LqrmProblem) -> Result<()> {
    let v = validate(problem);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidProblem(v))
    }
}

fn rows(data: &[&[f64]]) -> Mat {
    let r = data.len();
    let c = data.first().map_or(0, |row| row.len());
    DMatrix::from_fn(r, c, |i, j| data[i][j])
}

/// Active two-mass suspension: 4 states, 1 input, open-loop mean-square unstable.
pub fn make_suspension() -> LqrmProblem {
    let a = rows(&[
        &[0.261, 0.315, 0.093, -0.008],
        &[-2.955, 0.261, 0.373, -0.033],
        &[1.019, 0.255, -0.853, 0.011],
        &[-3.170, -0.793, -4.902, -0.146],
    ]);
    let b = Mat::from_column_slice(4, 1, &[0.133, 0.532, 0.161, 2.165]);
    let state_noise = (0..4)
        .map(|i| StateNoise { alpha: 0.017, dir: Mat::from_fn(4, 4, |_, z| if z == i { 1.0 } else { 0.0 }) })
        .collect();
    let input_noise = vec![InputNoise { beta: 0.035, dir: Mat::from_element(4, 1, 1.0) }];
    LqrmProblem {
        a,
        b,
        state_noise,
        input_noise,
        q: Mat::identity(4, 4),
        r: Mat::identity(1, 1),
        sigma0: Mat::identity(4, 4),
    }
}

/// Node pairs of the diffusion-network edges, zero-based.
pub const DIFFUSION_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Lossy diffusion network: 4 nodes, one actuator per node, stochastic edge weights.
pub fn make_diffusion_network() -> LqrmProblem {
    let a = rows(&[
        &[0.795, 0.050, 0.100, 0.050],
        &[0.050, 0.845, 0.050, 0.050],
        &[0.100, 0.050, 0.695, 0.150],
        &[0.050, 0.050, 0.150, 0.745],
    ]);
    let alphas = [0.005, 0.015, 0.010, 0.015, 0.005, 0.020];
    let betas = [0.050, 0.150, 0.050, 0.100];
    let state_noise = DIFFUSION_EDGES
        .iter()
        .zip(alphas)
        .map(|(&(c, d), alpha)| {
            let dir = Mat::from_fn(4, 4, |y, z| {
                if (y == c && z == c) || (y == d && z == d) {
                    1.0
                } else if (y == c && z == d) || (y == d && z == c) {
                    -1.0
                } else {
                    0.0
                }
            });
            StateNoise { alpha, dir }
        })
        .collect();
    let input_noise = betas
        .iter()
        .enumerate()
        .map(|(j, &beta)| InputNoise { beta, dir: Mat::from_fn(4, 4, |y, z| if y == j && z == j { 1.0 } else { 0.0 }) })
        .collect();
    LqrmProblem {
        a,
        b: Mat::identity(4, 4),
        state_noise,
        input_noise,
        q: Mat::identity(4, 4),
        r: Mat::identity(4, 4),
        sigma0: Mat::identity(4, 4),
    }
}

/// Two-state, one-input system used for the gradient-estimation study.
pub fn make_gradient_estimation_example() -> LqrmProblem {
    LqrmProblem {
        a: rows(&[&[0.8, 0.1], &[0.1, 0.8]]),
        b: Mat::from_column_slice(2, 1, &[1.0, 0.0]),
        state_noise: vec![StateNoise { alpha: 0.1, dir: rows(&[&[0.0, 1.0], &[1.0, 0.0]]) }],
        input_noise: Vec::new(),
        q: Mat::identity(2, 2),
        r: Mat::identity(1, 1),
        sigma0: Mat::identity(2, 2),
    }
}

/// Seeded random instance whose open-loop `ρ(F₀)` equals `spectral_target`.
///
/// `A` is scaled by `s` and every `αᵢ` by `s²`, which scales `F₀` by `s²`
/// exactly and leaves the ratios `αᵢ/α₁` untouched.
pub fn make_random(n: usize, m: usize, p: usize, q: usize, seed: u64, spectral_target: f64) -> Result<LqrmProblem> {
    if n == 0 || m == 0 || p == 0 || q == 0 {
        return Err(Error::InvalidArgument("n, m, p, q must all be at least 1".into()));
    }
    if !(spectral_target > 0.0) {
        return Err(Error::InvalidArgument("spectral_target must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = gauss(n, n);
    let b = gauss(n, m);
    let a_dirs: Vec<Mat> = (0..p).map(|_| gauss(n, n) / (n as f64).sqrt()).collect();
    let b_dirs: Vec<Mat> = (0..q).map(|_| gauss(n, m) / (n as f64).sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let alphas: Vec<f64> = (0..p).map(|_| rng.random_range(0.05..0.2)).collect();
    let betas: Vec<f64> = (0..q).map(|_| rng.random_range(0.05..0.2)).collect();

    let mut problem = LqrmProblem {
        a,
        b,
        state_noise: a_dirs.into_iter().zip(alphas).map(|(dir, alpha)| StateNoise { alpha, dir }).collect(),
        input_noise: b_dirs.into_iter().zip(betas).map(|(dir, beta)| InputNoise { beta, dir }).collect(),
        q: Mat::identity(n, n),
        r: Mat::identity(m, m),
        sigma0: Mat::identity(n, n),
    };
    let rho0 = msops::spectral_radius(&msops::closed_loop_operator(&problem, &problem.zero_gain())?)?;
    let s2 = spectral_target / rho0;
    problem.a *= s2.sqrt();
    problem.state_noise.iter_mut().for_each(|nz| nz.alpha *= s2);
    Ok(problem)
}

/// Named problem presets.
pub fn preset(name: &str) -> Option<LqrmProblem> {
    match name {
        "suspension" => Some(make_suspension()),
        "diffusion" | "diffusion-network" | "network" => Some(make_diffusion_network()),
        "gradient-estimation" | "gradexp" => Some(make_gradient_estimation_example()),
        _ => None,
    }
}

pub const PRESET_NAMES: [&str; 3] = ["suspension", "diffusion", "gradient-estimation"];

/// Dense matrices as JSON arrays of rows.
pub mod matrix_serde {
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::Mat;

    pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat, String> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
            return Err(format!("ragged matrix: row {} has {} entries, expected {}", i, row.len(), c));
        }
        Ok(Mat::from_fn(r, c, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }
}
