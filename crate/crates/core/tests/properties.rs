mod common;

use common::*;
use mnlqr::exec::ExecMode;
use mnlqr::model::make_random;
use mnlqr::model_based::{self as mb, Method, StepPolicy, StopCriteria};
use mnlqr::model_free::{self as mf, PerturbationCheck, RolloutSettings};
use mnlqr::msops::{self, PolicyEvaluation};
use mnlqr::{linalg, LqrmProblem, Mat};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn instance() -> impl Strategy<Value = (LqrmProblem, Mat)> {
    (1usize..=5, 1usize..=3, 1usize..=2, 1usize..=2, any::<u64>(), 0.2f64..0.9, 0.0f64..0.3).prop_map(
        |(n, m, p, q, seed, target, scale)| {
            let problem = make_random(n, m, p, q, seed, target).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 17);
            let mut k = Mat::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal)) * scale;
            // keep the gain stabilizing by shrinking it
            while !msops::is_ms_stabilizing(&problem, &k).unwrap() {
                k *= 0.5;
            }
            (problem, k)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn lyapunov_solutions_satisfy_their_equations((p, k) in instance()) {
        let e = msops::evaluate_stable(&p, &k).unwrap();
        prop_assert!(value_residual(&p, &k, &e.p) <= 1e-9);
        prop_assert!(covariance_residual(&p, &k, &e.sigma) <= 1e-9);
        prop_assert!(linalg::asymmetry(&e.p) == 0.0 && linalg::asymmetry(&e.sigma) == 0.0);
        let dual = linalg::trace_product(&q_k(&p, &k), &e.sigma);
        prop_assert!((dual - e.cost).abs() <= 1e-8 * e.cost);
    }

    #[test]
    fn gradient_matches_finite_differences((p, k) in instance()) {
        let e = msops::evaluate_stable(&p, &k).unwrap();
        let h = fd_step(&k, e.cost, &e.grad);
        let fd = richardson_difference(&k, h, |kk| msops::evaluate_stable(&p, kk).unwrap().cost);
        prop_assert!(rel(&e.grad, &fd) <= 1e-5 || (&e.grad - &fd).norm() <= 1e-7 * e.cost,
            "grad {} fd {}", e.grad, fd);
    }

    #[test]
    fn operator_matrix_acts_like_the_operator((p, k) in instance(), seed in any::<u64>()) {
        let n = p.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = msops::closed_loop_operator(&p, &k).unwrap();
        let vx = linalg::vectorize(&x);
        let direct = apply_f(&p, &k, &x);
        prop_assert!(rel(&linalg::unvectorize(&(&f * vx), n, n), &direct) <= 1e-12);
        // adjointness: ⟨F(X), Y⟩ = ⟨X, F*(Y)⟩
        let y = Mat::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lhs = linalg::frob_inner(&msops::apply_closed_loop(&p, &k, &x), &y);
        let rhs = linalg::frob_inner(&x, &msops::apply_closed_loop_adjoint(&p, &k, &y));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn gauss_newton_half_step_is_policy_iteration((p, k) in instance()) {
        let e = msops::evaluate_stable(&p, &k).unwrap();
        let stepped = &k - 0.5 * mb::direction(Method::GaussNewton, &e).unwrap();
        let rk = msops::input_weight(&p, &e.p);
        let pi = -inv(&rk) * p.b.transpose() * &e.p * &p.a;
        prop_assert!((&stepped - &pi).norm() <= 1e-10 * (1.0 + pi.norm()));
    }

    #[test]
    fn finite_horizon_cost_increases_to_the_cost((p, k) in instance()) {
        let c = msops::evaluate_stable(&p, &k).unwrap().cost;
        let mut prev = 0.0;
        for ell in [1, 5, 20, 80] {
            let ch = mf::finite_horizon_cost(&p, &k, ell).unwrap();
            prop_assert!(ch >= prev && ch <= c * (1.0 + 1e-12));
            prev = ch;
        }
    }

    #[test]
    fn random_instances_hit_their_spectral_target(n in 1usize..=5, seed in any::<u64>(), target in 0.1f64..1.5) {
        let p = make_random(n, 2, 2, 1, seed, target).unwrap();
        let rho = msops::closed_loop_spectral_radius(&p, &p.zero_gain()).unwrap();
        prop_assert!((rho - target).abs() <= 1e-8 * target);
        let base = make_random(n, 2, 2, 1, seed, 0.5).unwrap();
        let ratio = |q: &LqrmProblem| q.state_noise[1].alpha / q.state_noise[0].alpha;
        prop_assert!((ratio(&p) - ratio(&base)).abs() <= 1e-12 * ratio(&base));
    }

    #[test]
    fn sphere_samples_have_the_requested_radius(m in 1usize..4, n in 1usize..6, r in 1e-3f64..10.0, seed in any::<u64>()) {
        let u = mf::sample_sphere(m, n, r, &mut mf::sample_rng(seed, 0));
        prop_assert!((u.norm() - r).abs() <= 1e-12 * r);
    }

    #[test]
    fn gradient_estimates_depend_only_on_the_seed((p, k) in instance(), seed in any::<u64>()) {
        let mut s = RolloutSettings::new(600, 8, 0.05);
        s.check = PerturbationCheck::Allow;
        s.exec = ExecMode::Sequential;
        let a = mf::estimate_gradient(&p, &k, &s, seed).unwrap();
        s.exec = ExecMode::Parallel;
        let b = mf::estimate_gradient(&p, &k, &s, seed).unwrap();
        prop_assert_eq!(a.grad_hat, b.grad_hat);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn traces_never_print_non_finite_values(seed in any::<u64>(), eta in 0.1f64..50.0) {
        let p = make_random(3, 2, 1, 1, seed, 0.8).unwrap();
        let cfg = mb::OptimizeConfig::new(
            Method::Gradient,
            StepPolicy::constant(eta),
            StopCriteria { grad_tol: 0.0, max_iter: 5 },
        );
        let trace = mb::optimize(&p, &p.zero_gain(), &cfg).unwrap();
        let csv = trace.to_csv();
        prop_assert!(!csv.contains("inf") && !csv.contains("NaN"));
        for rec in &trace.records {
            let ev = msops::evaluate(&p, &rec.k).unwrap();
            prop_assert_eq!(matches!(ev, PolicyEvaluation::Stable(_)), rec.cost.is_some());
        }
    }
}
