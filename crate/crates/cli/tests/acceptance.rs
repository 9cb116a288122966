//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured quantities (run with `--nocapture` to see them).
//!
//! Criteria (tolerances pinned in the assertions):
//!  1. analytic threshold of the scalar problem through the CLI;
//!  2. hs113 thresholds: implicit ~6.61, explicit ~3.39 (10%), explicit <=
//!     implicit;
//!  3. exactness/threshold dichotomy (converges above, fails below);
//!  4. derivative consistency across the library at random interior points;
//!  5. curvature dichotomy of the projected penalty Hessian around sigma*;
//!  6. desk-scale PDE runs over the eta sweep in both termination modes;
//!  7. backend equivalence (direct / iterative / unsymmetric);
//!  8. scaling-function branch and derivative identities.

use fpen_core::augsys::{Backend, Criterion, SolveSettings, SystemMode};
use fpen_core::diagnostics::{
    dense_oracles, projected_phi_hessian_min_eig, threshold_sigma, ThresholdMode,
};
use fpen_core::model::{make_problem, NlpProblem, ProblemParams};
use fpen_core::penalty::{EvaluatorConfig, HessianMode, PenaltyEvaluator};
use fpen_core::scaling::{q_derivative, q_value};
use fpen_core::solver::{minimize, SolverConfig, SolverStatus};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::process::Command;
use std::time::Instant;

fn fpen(args: &[&str]) -> (serde_json::Value, bool) {
    let output = Command::new(env!("CARGO_BIN_EXE_fpen"))
        .args(args)
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&output.stdout);
    let value = serde_json::from_str(&stdout).unwrap_or(serde_json::Value::Null);
    (value, output.status.success())
}

/// Library instances used by the per-point consistency criteria. PDE grids
/// are kept at N = 8 so the dense oracles (n <= 200) apply.
fn library() -> Vec<(Box<dyn NlpProblem>, f64)> {
    let none = ProblemParams::new();
    let mut grid = ProblemParams::new();
    grid.set("grid", "8");
    vec![
        (make_problem("toy1d", &none).unwrap(), 1.0),
        (make_problem("toy1d-bounded", &none).unwrap(), 1.0),
        (make_problem("randqp", &none).unwrap(), 5.0),
        (make_problem("hs113", &none).unwrap(), 7.0),
        (make_problem("invpoisson-fd", &grid).unwrap(), 0.3),
        (make_problem("poisson-boltzmann-fd", &grid).unwrap(), 1.0),
    ]
}

fn random_interior(problem: &dyn NlpProblem, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let x0 = problem.initial_point();
    let b = problem.bounds();
    DVector::from_fn(x0.len(), |i, _| {
        let step: f64 = rng.random_range(-0.3..0.3);
        let mut xi = x0[i] + step;
        if xi <= b.lower[i] {
            xi = b.lower[i] + 0.25 * (x0[i] - b.lower[i]).min(1.0);
        }
        if xi >= b.upper[i] {
            xi = b.upper[i] - 0.25 * (b.upper[i] - x0[i]).min(1.0);
        }
        xi
    })
}

#[test]
fn criterion_1_analytic_threshold() {
    let start = Instant::now();
    let (json, ok) = fpen(&["threshold", "--problem", "toy1d"]);
    assert!(ok, "threshold command failed");
    let implicit = json["sigma_star_implicit"].as_f64().unwrap();
    let explicit = json["sigma_star_explicit"].as_f64().unwrap();
    assert!((implicit - 0.5).abs() <= 1e-10, "implicit {}", implicit);
    assert!((explicit - 0.5).abs() <= 1e-10, "explicit {}", explicit);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {:?}", elapsed);
    println!(
        "ACCEPTANCE criterion 1 (analytic threshold): PASS  sigma* = {:.12} in {:?}",
        implicit, elapsed
    );
}

#[test]
fn criterion_2_hs113_thresholds() {
    let start = Instant::now();
    let (json, ok) = fpen(&["threshold", "--problem", "hs113"]);
    assert!(ok, "threshold command failed");
    let implicit = json["sigma_star_implicit"].as_f64().unwrap();
    let explicit = json["sigma_star_explicit"].as_f64().unwrap();
    assert!(
        (implicit - 6.61).abs() <= 0.1 * 6.61,
        "implicit {} not within 10% of 6.61",
        implicit
    );
    assert!(
        (explicit - 3.39).abs() <= 0.1 * 3.39,
        "explicit {} not within 10% of 3.39",
        explicit
    );
    assert!(explicit <= implicit + 1e-10);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "took {:?}", elapsed);
    println!(
        "ACCEPTANCE criterion 2 (hs113 thresholds): PASS  implicit {:.4}, explicit {:.4} in {:?}",
        implicit, explicit, elapsed
    );
}

#[test]
fn criterion_3_exactness_dichotomy() {
    // scalar problem: converges above the threshold, unbounded below
    let toy = make_problem("toy1d", &ProblemParams::new()).unwrap();
    let above = minimize(
        toy.as_ref(),
        &SolverConfig {
            sigma: 1.0,
            ..Default::default()
        },
    );
    assert_eq!(above.status, SolverStatus::Converged);
    assert!((above.x[0] - 1.0).abs() <= 1e-8, "x = {}", above.x[0]);
    let below = minimize(
        toy.as_ref(),
        &SolverConfig {
            sigma: 0.25,
            ..Default::default()
        },
    );
    assert_eq!(below.status, SolverStatus::Unbounded);

    // hs113: explicit handling converges at sigma = 7; implicit handling
    // with sigma far below the implicit threshold must fail within 500
    // iterations (unbounded or stalled)
    let hs = make_problem("hs113", &ProblemParams::new()).unwrap();
    let explicit = minimize(
        hs.as_ref(),
        &SolverConfig {
            sigma: 7.0,
            explicit_linear: true,
            ..Default::default()
        },
    );
    assert_eq!(explicit.status, SolverStatus::Converged);
    let implicit_low = minimize(
        hs.as_ref(),
        &SolverConfig {
            sigma: 1.0,
            max_iterations: 500,
            ..Default::default()
        },
    );
    assert_ne!(
        implicit_low.status,
        SolverStatus::Converged,
        "sigma = 1 must not converge with implicit handling"
    );
    println!(
        "ACCEPTANCE criterion 3 (exactness dichotomy): PASS  toy converged/unbounded, hs113 explicit {} its, implicit sigma=1 -> {:?}",
        explicit.iterations, implicit_low.status
    );
}

#[test]
fn criterion_4_derivative_consistency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_fd: f64 = 0.0;
    let mut worst_adj: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut worst_bfd: f64 = 0.0;
    for (problem, sigma) in library() {
        let (n, m) = (problem.num_vars(), problem.num_constraints());
        let mut eval = PenaltyEvaluator::new(
            problem.as_ref(),
            EvaluatorConfig {
                sigma,
                ..Default::default()
            },
        );
        let mut fd_eval = PenaltyEvaluator::new(
            problem.as_ref(),
            EvaluatorConfig {
                sigma,
                ..Default::default()
            },
        );
        for _ in 0..20 {
            let x = random_interior(problem.as_ref(), &mut rng);
            eval.refresh(&x).unwrap();
            let grad = eval.gradient().unwrap();
            // gradient against central FD of phi along a random direction,
            // with the truncation-vs-roundoff optimal step
            let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let h = f64::EPSILON.cbrt() * (1.0 + x.norm()) / v.norm();
            fd_eval.refresh(&(&x + &v * h)).unwrap();
            let fp = fd_eval.phi().unwrap();
            fd_eval.refresh(&(&x - &v * h)).unwrap();
            let fm = fd_eval.phi().unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let dir = grad.dot(&v);
            worst_fd = worst_fd.max((dir - fd).abs() / dir.abs().max(fd.abs()).max(1e-8));

            // adjoint identity and oracle equivalence
            let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
            let yu = eval.y_product(&u).unwrap();
            let ytv = eval.yt_product(&v).unwrap();
            let lhs = yu.dot(&v);
            let rhs = u.dot(&ytv);
            worst_adj = worst_adj.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30));
            let oracle = dense_oracles(problem.as_ref(), &x, sigma).unwrap();
            let dense_yu = &oracle.y_matrix * &u;
            let dense_ytv = oracle.y_matrix.transpose() * &v;
            worst_oracle = worst_oracle
                .max((&yu - &dense_yu).norm() / dense_yu.norm().max(1.0))
                .max((&ytv - &dense_ytv).norm() / dense_ytv.norm().max(1.0))
                .max((&grad - &oracle.grad_phi).norm() / oracle.grad_phi.norm().max(1.0));
        }

        // B1 = B2 = FD Hessian at the converged point, along face directions
        let report = minimize(
            problem.as_ref(),
            &SolverConfig {
                sigma,
                ..Default::default()
            },
        );
        assert_eq!(report.status, SolverStatus::Converged, "{}", problem.name());
        let xstar = DVector::from_vec(report.x.clone());
        let dist = problem.bounds().distance(&xstar);
        let h = 1e-5 * (1.0 + xstar.norm());
        for mode in [HessianMode::B1, HessianMode::B2] {
            let mut heval = PenaltyEvaluator::new(
                problem.as_ref(),
                EvaluatorConfig {
                    sigma,
                    hessian_mode: mode,
                    ..Default::default()
                },
            );
            heval.refresh(&xstar).unwrap();
            for _ in 0..3 {
                let d = DVector::from_fn(n, |j, _| {
                    if dist[j] > 4.0 * h {
                        rng.random_range(-1.0_f64..1.0)
                    } else {
                        0.0
                    }
                });
                if d.norm() == 0.0 {
                    continue;
                }
                let bd = heval.hess_product(&d).unwrap();
                let step = h / d.norm();
                let gp = dense_oracles(problem.as_ref(), &(&xstar + &d * step), sigma)
                    .unwrap()
                    .grad_phi;
                let gm = dense_oracles(problem.as_ref(), &(&xstar - &d * step), sigma)
                    .unwrap()
                    .grad_phi;
                let fdd = (gp - gm) / (2.0 * step);
                let scale = bd.norm().max(fdd.norm()).max(1e-12);
                worst_bfd = worst_bfd.max((&bd - &fdd).norm() / scale);
            }
        }
    }
    assert!(worst_fd <= 1e-6, "gradient FD residual {:.3e}", worst_fd);
    assert!(worst_adj <= 1e-9, "adjoint residual {:.3e}", worst_adj);
    assert!(worst_oracle <= 1e-9, "oracle residual {:.3e}", worst_oracle);
    assert!(worst_bfd <= 1e-4, "Hessian-approximation residual {:.3e}", worst_bfd);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "took {:?}", elapsed);
    println!(
        "ACCEPTANCE criterion 4 (derivative consistency): PASS  fd {:.2e}, adjoint {:.2e}, oracle {:.2e}, B-vs-FD {:.2e} in {:?}",
        worst_fd, worst_adj, worst_oracle, worst_bfd, elapsed
    );
}

/// Dense KKT point of an equality-constrained QP instance.
fn randqp_kkt_point(seed: u64) -> (Box<dyn NlpProblem>, DVector<f64>, DVector<f64>) {
    let mut params = ProblemParams::new();
    params.set("seed", &seed.to_string());
    let p = make_problem("randqp", &params).unwrap();
    let n = p.num_vars();
    let m = p.num_constraints();
    let x0 = DVector::zeros(n);
    let a = p.jacobian(&x0);
    let g0 = p.gradient(&x0);
    let mut h = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    let y0 = DVector::zeros(m);
    for j in 0..n {
        e[j] = 1.0;
        h.set_column(j, &p.lag_hess_prod(&x0, &y0, &e));
        e[j] = 0.0;
    }
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(&h);
    kkt.view_mut((0, n), (n, m)).copy_from(&(-&a));
    kkt.view_mut((n, 0), (m, n)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-&g0));
    rhs.rows_mut(n, m).copy_from(&(-p.constraints(&x0)));
    let sol = kkt.lu().solve(&rhs).unwrap();
    (p, sol.rows(0, n).into_owned(), sol.rows(n, m).into_owned())
}

#[test]
fn criterion_5_threshold_curvature() {
    let check = |problem: &dyn NlpProblem, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>| {
        let sigma_star = threshold_sigma(problem, x, y, ThresholdMode::Implicit)
            .unwrap()
            .sigma_star;
        let above =
            projected_phi_hessian_min_eig(problem, x, z, 1.1 * sigma_star + 0.01).unwrap();
        assert!(
            above >= -1e-8,
            "{}: min curvature {:.3e} above threshold",
            problem.name(),
            above
        );
        if sigma_star > 0.01 {
            let below = projected_phi_hessian_min_eig(problem, x, z, 0.5 * sigma_star).unwrap();
            assert!(
                below <= -1e-6,
                "{}: min curvature {:.3e} below threshold",
                problem.name(),
                below
            );
        }
        sigma_star
    };

    let toy = make_problem("toy1d", &ProblemParams::new()).unwrap();
    let s_toy = check(
        toy.as_ref(),
        &DVector::from_vec(vec![1.0]),
        &DVector::from_vec(vec![1.0]),
        &DVector::from_vec(vec![0.0]),
    );

    for seed in 0..20u64 {
        let (p, x, y) = randqp_kkt_point(seed);
        let z = DVector::zeros(p.num_vars());
        check(p.as_ref(), &x, &y, &z);
    }

    let hs = make_problem("hs113", &ProblemParams::new()).unwrap();
    let report = minimize(
        hs.as_ref(),
        &SolverConfig {
            sigma: 7.0,
            ..Default::default()
        },
    );
    assert_eq!(report.status, SolverStatus::Converged);
    let s_hs = check(
        hs.as_ref(),
        &DVector::from_vec(report.x.clone()),
        &DVector::from_vec(report.y.clone()),
        &DVector::from_vec(report.z.clone()),
    );
    println!(
        "ACCEPTANCE criterion 5 (threshold curvature): PASS  toy sigma* {:.3}, hs113 sigma* {:.3}, 20 QP seeds",
        s_toy, s_hs
    );
}

#[test]
fn criterion_6_pde_desk_scale() {
    let start = Instant::now();
    let etas = [1e-4, 1e-6, 1e-8, 1e-10];
    for (name, sigma) in [("invpoisson-fd", 1e-2), ("poisson-boltzmann-fd", 1e-1)] {
        let mut params = ProblemParams::new();
        params.set("grid", "16");
        let problem = make_problem(name, &params).unwrap();
        assert!(problem.sigma_min_bound().unwrap() >= 1.0);
        let mut n_av_by_eta = Vec::new();
        for criterion in [Criterion::ResidualBased, Criterion::ErrorBased] {
            for &eta in &etas {
                let config = SolverConfig {
                    sigma,
                    eta,
                    criterion,
                    backend: Backend::Iterative,
                    ..Default::default()
                };
                let report = minimize(problem.as_ref(), &config);
                assert_eq!(
                    report.status,
                    SolverStatus::Converged,
                    "{name} {criterion:?} eta={eta:.0e}"
                );
                if criterion == Criterion::ResidualBased {
                    n_av_by_eta.push((eta, report.counters.n_av));
                }
            }
        }
        let coarse = n_av_by_eta.iter().find(|(e, _)| *e == 1e-4).unwrap().1;
        let tight = n_av_by_eta.iter().find(|(e, _)| *e == 1e-10).unwrap().1;
        assert!(
            tight > coarse,
            "{name}: n_av at eta=1e-10 ({tight}) must exceed eta=1e-4 ({coarse})"
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "took {:?}", elapsed);
    println!(
        "ACCEPTANCE criterion 6 (PDE desk-scale sweep): PASS  both problems, both criteria, 4 etas in {:?}",
        elapsed
    );
}

#[test]
fn criterion_7_backend_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for (problem, sigma) in library() {
        let x = random_interior(problem.as_ref(), &mut rng);
        let mut results = Vec::new();
        for (mode, backend) in [
            (SystemMode::Symmetric, Backend::Direct),
            (SystemMode::Symmetric, Backend::Iterative),
            (SystemMode::Unsymmetric, Backend::Direct),
        ] {
            let config = EvaluatorConfig {
                sigma,
                system_mode: mode,
                backend,
                solve: SolveSettings {
                    eta: 1e-12,
                    ..Default::default()
                },
                ..Default::default()
            };
            let mut eval = PenaltyEvaluator::new(problem.as_ref(), config);
            eval.refresh(&x).unwrap();
            results.push((eval.phi().unwrap(), eval.gradient().unwrap()));
        }
        for k in 1..results.len() {
            let dphi = (results[k].0 - results[0].0).abs() / (1.0 + results[0].0.abs());
            let dgrad = (&results[k].1 - &results[0].1).norm() / (1.0 + results[0].1.norm());
            worst = worst.max(dphi).max(dgrad);
        }
    }
    assert!(worst <= 1e-8, "largest path disagreement {:.3e}", worst);
    println!(
        "ACCEPTANCE criterion 7 (backend equivalence): PASS  worst disagreement {:.2e}",
        worst
    );
}

#[test]
fn criterion_8_scaling_suite() {
    const INF: f64 = f64::INFINITY;
    // branch-seam identities, exact
    for (l, u, w) in [(0.0_f64, 4.0_f64, 1.0_f64), (-3.0, 1.0, 0.5), (2.0, 9.0, 1.0)] {
        for x in [(u + l - w) / 2.0, (u + l + w) / 2.0] {
            let mid = 0.5 * (u - l) - 0.25 * w - (2.0 * x - u - l).powi(2) / (4.0 * w);
            let lin = (x - l).min(u - x);
            assert_eq!(mid, lin, "seam value mismatch at x = {x}");
            assert_eq!(q_value(x, l, u, w), 0.5 * (u - l) - 0.5 * w);
        }
    }
    // derivative against FD across two-sided, one-sided, and free domains
    let mut worst: f64 = 0.0;
    for (l, u, w) in [
        (0.0, 4.0, 1.0),
        (-2.0, 1.5, 0.8),
        (1.0, INF, 1.0),
        (-INF, 2.0, 1.0),
        (-INF, INF, 1.0),
    ] {
        let lo = if l.is_finite() { l + 1e-3 } else { -6.0 };
        let hi = if u.is_finite() { u - 1e-3 } else { 6.0 };
        for k in 0..=800 {
            let x = lo + (hi - lo) * k as f64 / 800.0;
            let h = 1e-6;
            let fd = (q_value(x + h, l, u, w) - q_value(x - h, l, u, w)) / (2.0 * h);
            worst = worst.max((q_derivative(x, l, u, w) - fd).abs());
        }
    }
    assert!(worst <= 1e-8, "derivative FD residual {:.3e}", worst);
    println!(
        "ACCEPTANCE criterion 8 (scaling suite): PASS  worst q' FD residual {:.2e}",
        worst
    );
}
