//! Threshold-parameter properties: the explicit-constraint threshold never
//! exceeds the implicit one, the curvature dichotomy around sigma*, solver
//! exactness above the threshold, and multiplier recovery at solutions.

use fpen_core::diagnostics::{
    dense_kkt_multipliers, dense_lagrangian_hessian, projected_phi_hessian_min_eig, threshold_sigma,
    verify_kkt, ThresholdMode,
};
use fpen_core::model::{make_problem, ProblemParams};
use fpen_core::solver::{minimize, SolverConfig, SolverStatus};
use nalgebra::{DMatrix, DVector};

/// Dense KKT solve of an equality-constrained QP instance; returns an exact
/// primal-dual pair.
fn randqp_kkt_point(params: &ProblemParams) -> (Box<dyn fpen_core::model::NlpProblem>, DVector<f64>, DVector<f64>) {
    let p = make_problem("randqp", params).unwrap();
    let n = p.num_vars();
    let m = p.num_constraints();
    let x_any = DVector::zeros(n);
    let a = p.jacobian(&x_any); // constant for a QP
    let g0 = p.gradient(&DVector::zeros(n));
    let h = dense_lagrangian_hessian(p.as_ref(), &x_any, &DVector::zeros(m));
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    kkt.view_mut((0, n), (n, m)).copy_from(&(-&a));
    kkt.view_mut((n, 0), (m, n)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&g0));
    rhs.rows_mut(n, m).copy_from(&(-p.constraints(&DVector::zeros(n))));
    let sol = kkt.lu().solve(&rhs).expect("QP KKT system solvable");
    let x = sol.rows(0, n).into_owned();
    let y = sol.rows(n, m).into_owned();
    (p, x, y)
}

#[test]
fn explicit_threshold_never_exceeds_implicit() {
    for seed in 0..100u64 {
        let mut params = ProblemParams::new();
        params
            .set("n", "10")
            .set("m", "4")
            .set("mlin", "2")
            .set("seed", &seed.to_string());
        let (p, x, y) = randqp_kkt_point(&params);
        let ri = threshold_sigma(p.as_ref(), &x, &y, ThresholdMode::Implicit).unwrap();
        let re = threshold_sigma(p.as_ref(), &x, &y, ThresholdMode::Explicit).unwrap();
        assert!(
            re.sigma_star <= ri.sigma_star + 1e-10,
            "seed {}: explicit {} > implicit {}",
            seed,
            re.sigma_star,
            ri.sigma_star
        );
        assert_eq!(ri.sigma_star, ri.sigma_bar.max(0.0));
    }
}

#[test]
fn curvature_dichotomy_toy_and_randqp() {
    // toy: sigma* = 1/2 and the projected Hessian is 2 sigma - 1
    let toy = make_problem("toy1d", &ProblemParams::new()).unwrap();
    let x = DVector::from_vec(vec![1.0]);
    let z = DVector::from_vec(vec![0.0]);
    let y = DVector::from_vec(vec![1.0]);
    let sigma_star = threshold_sigma(toy.as_ref(), &x, &y, ThresholdMode::Implicit)
        .unwrap()
        .sigma_star;
    let above = projected_phi_hessian_min_eig(toy.as_ref(), &x, &z, 1.1 * sigma_star + 0.01).unwrap();
    assert!(above >= -1e-8, "toy above-threshold curvature {}", above);
    let below = projected_phi_hessian_min_eig(toy.as_ref(), &x, &z, 0.5 * sigma_star).unwrap();
    assert!(below <= -1e-6, "toy below-threshold curvature {}", below);

    for seed in [0u64, 1, 2, 3, 4] {
        let mut params = ProblemParams::new();
        params.set("seed", &seed.to_string());
        let (p, x, y) = randqp_kkt_point(&params);
        let report = threshold_sigma(p.as_ref(), &x, &y, ThresholdMode::Implicit).unwrap();
        let z = DVector::zeros(p.num_vars());
        let above = projected_phi_hessian_min_eig(p.as_ref(), &x, &z, 1.1 * report.sigma_star + 0.01).unwrap();
        assert!(above >= -1e-8, "seed {}: above {}", seed, above);
        if report.sigma_star > 0.01 {
            let below = projected_phi_hessian_min_eig(p.as_ref(), &x, &z, 0.5 * report.sigma_star).unwrap();
            assert!(below <= -1e-6, "seed {}: below {}", seed, below);
        }
    }
}

#[test]
fn solver_fixed_points_feasible_above_threshold() {
    // tight-epsilon solves approximate exact fixed points; feasibility must
    // then sit below the reporting-scale eps_p
    let cases = [
        ("toy1d", None, 1.0),
        ("toy1d-bounded", None, 1.0),
        ("randqp", None, 5.0),
        ("hs113", None, 7.0),
        ("invpoisson-fd", Some("8"), 0.3),
        ("poisson-boltzmann-fd", Some("8"), 1.0),
    ];
    for (name, grid, sigma) in cases {
        let mut params = ProblemParams::new();
        if let Some(g) = grid {
            params.set("grid", g);
        }
        let p = make_problem(name, &params).unwrap();
        let config = SolverConfig {
            sigma,
            epsilon: 1e-11,
            max_iterations: 2000,
            ..Default::default()
        };
        let report = minimize(p.as_ref(), &config);
        assert_eq!(report.status, SolverStatus::Converged, "{name}");
        let x = DVector::from_vec(report.x.clone());
        let y = DVector::from_vec(report.y.clone());
        // sigma really is above this instance's threshold
        let thr = threshold_sigma(p.as_ref(), &x, &y, ThresholdMode::Implicit).unwrap();
        assert!(sigma > thr.sigma_star, "{name}: sigma {} <= sigma* {}", sigma, thr.sigma_star);
        let eps_p = 1e-8 * (1.0 + x.amax() + p.constraints(&p.initial_point()).amax());
        assert!(
            report.primal_residual <= eps_p,
            "{name}: ||c|| = {:.2e} > eps_p = {:.2e}",
            report.primal_residual,
            eps_p
        );
    }
}

#[test]
fn multiplier_recovery_at_solutions() {
    for (name, sigma) in [("toy1d", 1.0), ("hs113", 7.0)] {
        let p = make_problem(name, &ProblemParams::new()).unwrap();
        let config = SolverConfig {
            sigma,
            ..Default::default()
        };
        let report = minimize(p.as_ref(), &config);
        assert_eq!(report.status, SolverStatus::Converged, "{name}");
        let x = DVector::from_vec(report.x.clone());
        let y = DVector::from_vec(report.y.clone());
        let kkt = dense_kkt_multipliers(p.as_ref(), &x, 1e-5);
        assert!(
            (&y - &kkt.y).amax() <= 1e-6 * (1.0 + kkt.y.amax()),
            "{name}: y mismatch {:.2e}",
            (&y - &kkt.y).amax()
        );
    }
}

#[test]
fn explicit_multipliers_match_dense_kkt_oracle() {
    // y_sigma and w_sigma at the explicit-mode solution agree with the
    // least-squares KKT multipliers (same constraint ordering)
    let p = make_problem("hs113", &ProblemParams::new()).unwrap();
    let config = SolverConfig {
        sigma: 7.0,
        explicit_linear: true,
        ..Default::default()
    };
    let report = minimize(p.as_ref(), &config);
    assert_eq!(report.status, SolverStatus::Converged);
    let x = DVector::from_vec(report.x.clone());
    let y_full = DVector::from_vec(report.y.clone());
    let kkt = dense_kkt_multipliers(p.as_ref(), &x, 1e-5);
    assert!(
        (&y_full - &kkt.y).amax() <= 1e-6 * (1.0 + kkt.y.amax()),
        "multiplier mismatch {:.2e}",
        (&y_full - &kkt.y).amax()
    );
}

#[test]
fn capped_scaling_restores_distant_basin() {
    // with the plain one-sided scaling the bounded toy penalty is unbounded
    // far from the bound; the capped variant flattens Q there and the solve
    // from x0 = 5 reaches x* = 1
    let p = make_problem("toy1d-bounded", &ProblemParams::new()).unwrap();
    let x0 = DVector::from_vec(vec![5.0]);
    let plain = fpen_core::solver::minimize_from(
        p.as_ref(),
        &x0,
        &SolverConfig {
            sigma: 1.0,
            ..Default::default()
        },
    );
    assert_eq!(plain.status, SolverStatus::Unbounded);
    let capped = fpen_core::solver::minimize_from(
        p.as_ref(),
        &x0,
        &SolverConfig {
            sigma: 1.0,
            capped_scaling: true,
            ..Default::default()
        },
    );
    assert_eq!(capped.status, SolverStatus::Converged);
    assert!((capped.x[0] - 1.0).abs() <= 1e-7);
}

#[test]
fn solver_solution_passes_kkt_verifier() {
    let p = make_problem("hs113", &ProblemParams::new()).unwrap();
    let config = SolverConfig {
        sigma: 7.0,
        ..Default::default()
    };
    let report = minimize(p.as_ref(), &config);
    assert_eq!(report.status, SolverStatus::Converged);
    let x = DVector::from_vec(report.x.clone());
    let y = DVector::from_vec(report.y.clone());
    let z = DVector::from_vec(report.z.clone());
    let kkt = verify_kkt(p.as_ref(), &x, &y, &z, 1e-6, false).unwrap();
    assert!(
        kkt.is_first_order,
        "primal {:.2e} dual {:.2e} comp {:.2e} sign {:.2e}",
        kkt.primal_feas, kkt.dual_feas, kkt.complementarity, kkt.sign_conditions
    );
    // active slacks carry nonnegative multipliers
    for j in 10..18 {
        if x[j] <= 1e-5 {
            assert!(z[j] >= -1e-6, "active slack {} has z = {}", j, z[j]);
        }
    }
}

#[test]
fn explicit_solve_preserves_linear_feasibility() {
    let p = make_problem("hs113", &ProblemParams::new()).unwrap();
    let config = SolverConfig {
        sigma: 7.0,
        explicit_linear: true,
        ..Default::default()
    };
    let report = minimize(p.as_ref(), &config);
    assert_eq!(report.status, SolverStatus::Converged);
    for (k, h) in report.history.iter().enumerate() {
        let lin = h.linear_inf.expect("explicit mode records the linear residual");
        assert!(lin <= 1e-10, "iteration {}: ||B'x - d|| = {:.2e}", k, lin);
    }
}

#[test]
fn explicit_gradient_matches_kkt_structure_at_solution() {
    // at a KKT point of the explicit formulation, grad phi = B w + z with
    // z vanishing off the active bounds
    let p = make_problem("hs113", &ProblemParams::new()).unwrap();
    let config = SolverConfig {
        sigma: 7.0,
        explicit_linear: true,
        ..Default::default()
    };
    let report = minimize(p.as_ref(), &config);
    assert_eq!(report.status, SolverStatus::Converged);
    let x = DVector::from_vec(report.x.clone());
    let z = DVector::from_vec(report.z.clone());
    // z is the dual estimate grad phi - B w; off the active set it must be 0
    let bounds = p.bounds();
    for j in 0..x.len() {
        let dist = (x[j] - bounds.lower[j]).min(bounds.upper[j] - x[j]);
        if dist > 1e-4 {
            assert!(
                z[j].abs() <= 1e-5 * (1.0 + z.amax()),
                "inactive component {} has z = {:.2e}",
                j,
                z[j]
            );
        }
    }
}
