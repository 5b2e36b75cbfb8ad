//! Reference computations that share no solver code with the library:
//! structure-preserving doubling for the deterministic Riccati equation,
//! Smith doubling for Lyapunov sums, and explicit operator sums.

#![allow(dead_code)]

use mnlqr::{LqrmProblem, Mat};

pub fn inv(m: &Mat) -> Mat {
    m.clone().try_inverse().expect("invertible")
}

pub fn spec_norm(m: &Mat) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

pub fn min_sv(m: &Mat) -> f64 {
    m.clone().svd(false, false).singular_values.min()
}

/// Stabilizing solution of `P = Q + AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA`.
pub fn dare_doubling(a: &Mat, b: &Mat, q: &Mat, r: &Mat) -> Mat {
    let n = a.nrows();
    let mut ak = a.clone();
    let mut gk = b * inv(r) * b.transpose();
    let mut hk = q.clone();
    for _ in 0..200 {
        let w = inv(&(Mat::identity(n, n) + &gk * &hk));
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let delta = (&h_next - &hk).norm();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if delta <= 1e-15 * hk.norm() {
            break;
        }
    }
    (&hk + hk.transpose()) * 0.5
}

pub fn dare_gain(a: &Mat, b: &Mat, r: &Mat, p: &Mat) -> Mat {
    -inv(&(r + b.transpose() * p * b)) * b.transpose() * p * a
}

/// `Σ_{k≥0} Mᵏ X (Mᵀ)ᵏ` by repeated squaring.
pub fn smith(m: &Mat, x: &Mat) -> Mat {
    let mut s = x.clone();
    let mut mk = m.clone();
    for _ in 0..80 {
        let next = &s + &mk * &s * mk.transpose();
        mk = &mk * &mk;
        let delta = (&next - &s).norm();
        s = next;
        if delta <= 1e-16 * s.norm() {
            break;
        }
    }
    s
}

/// Deterministic-LQR quantities at a gain, by Smith sums.
pub struct DeterministicEval {
    pub p: Mat,
    pub sigma: Mat,
    pub cost: f64,
    pub grad: Mat,
    pub rk: Mat,
}

pub fn deterministic_eval(a: &Mat, b: &Mat, q: &Mat, r: &Mat, sigma0: &Mat, k: &Mat) -> DeterministicEval {
    let ak = a + b * k;
    let qk = q + k.transpose() * r * k;
    let p = smith(&ak.transpose(), &qk);
    let sigma = smith(&ak, sigma0);
    let rk = r + b.transpose() * &p * b;
    let ek = &rk * k + b.transpose() * &p * a;
    DeterministicEval { cost: (&p * sigma0).trace(), grad: 2.0 * ek * &sigma, p, sigma, rk }
}

/// Deterministic step-size constants at `k0`.
pub fn deterministic_step_bounds(
    a: &Mat,
    b: &Mat,
    q: &Mat,
    r: &Mat,
    sigma0: &Mat,
    k0: &Mat,
    c_star: f64,
) -> (f64, f64) {
    let e = deterministic_eval(a, b, q, r, sigma0, k0);
    let (nb, s0, sq, sr) = (spec_norm(b), min_sv(sigma0), min_sv(q), min_sv(r));
    let c0 = e.cost;
    let c_npg = 1.0 / (2.0 * (spec_norm(r) + nb * nb * c0 / s0));
    let h0 = (spec_norm(&e.rk) * (c0 - c_star) / s0).sqrt();
    let h1 = 2.0 * c0 * h0 / sq;
    let h2 = (h0 + spec_norm(&(b.transpose() * &e.p * a))) / sr;
    let first = (sq * s0 / c0).powi(2) / (nb * h1 * (spec_norm(a) + nb * h2 + 1.0));
    let second = sq / (c0 * spec_norm(&e.rk));
    (first.min(second) / 16.0, c_npg)
}

/// `F_K(X)` written out term by term.
pub fn apply_f(p: &LqrmProblem, k: &Mat, x: &Mat) -> Mat {
    let ak = &p.a + &p.b * k;
    let mut out = &ak * x * ak.transpose();
    for nz in &p.state_noise {
        out += nz.alpha * &nz.dir * x * nz.dir.transpose();
    }
    for nz in &p.input_noise {
        let bk = &nz.dir * k;
        out += nz.beta * &bk * x * bk.transpose();
    }
    out
}

/// Adjoint `F_K*(X)`.
pub fn apply_f_adj(p: &LqrmProblem, k: &Mat, x: &Mat) -> Mat {
    let ak = &p.a + &p.b * k;
    let mut out = ak.transpose() * x * &ak;
    for nz in &p.state_noise {
        out += nz.alpha * nz.dir.transpose() * x * &nz.dir;
    }
    for nz in &p.input_noise {
        let bk = &nz.dir * k;
        out += nz.beta * bk.transpose() * x * &bk;
    }
    out
}

pub fn q_k(p: &LqrmProblem, k: &Mat) -> Mat {
    &p.q + k.transpose() * &p.r * k
}

/// Relative residual of `P = Q_K + F_K*(P)`.
pub fn value_residual(p: &LqrmProblem, k: &Mat, pk: &Mat) -> f64 {
    (pk - q_k(p, k) - apply_f_adj(p, k, pk)).norm() / pk.norm()
}

/// Relative residual of `Σ = Σ₀ + F_K(Σ)`.
pub fn covariance_residual(p: &LqrmProblem, k: &Mat, s: &Mat) -> f64 {
    (s - &p.sigma0 - apply_f(p, k, s)).norm() / s.norm()
}

/// Central differences of `cost` at `k` with step `h` (entrywise).
pub fn central_difference(k: &Mat, h: f64, mut cost: impl FnMut(&Mat) -> f64) -> Mat {
    Mat::from_fn(k.nrows(), k.ncols(), |i, j| {
        let mut kp = k.clone();
        let mut km = k.clone();
        kp[(i, j)] += h;
        km[(i, j)] -= h;
        (cost(&kp) - cost(&km)) / (2.0 * h)
    })
}

/// Difference step matched to the length over which the cost changes (C/‖∇C‖).
pub fn fd_step(k: &Mat, cost: f64, grad: &Mat) -> f64 {
    1e-3 * (1.0 + k.norm()).min(cost / grad.norm().max(f64::MIN_POSITIVE))
}

/// Richardson-extrapolated central differences (fourth-order accurate).
pub fn richardson_difference(k: &Mat, h: f64, mut cost: impl FnMut(&Mat) -> f64) -> Mat {
    let coarse = central_difference(k, 2.0 * h, &mut cost);
    let fine = central_difference(k, h, &mut cost);
    (4.0 * fine - coarse) / 3.0
}

pub fn rel(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
