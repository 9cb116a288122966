//! Derivative, adjoint and oracle consistency suites behind `fpen check`.
//! Each suite prints its worst residual and a PASS/FAIL verdict.

use fpen_core::diagnostics::dense_oracles;
use fpen_core::model::NlpProblem;
use fpen_core::penalty::{EvaluatorConfig, PenaltyEvaluator};
use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

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

struct Suite {
    name: &'static str,
    tol: f64,
    worst: f64,
}

impl Suite {
    fn new(name: &'static str, tol: f64) -> Self {
        Suite {
            name,
            tol,
            worst: 0.0,
        }
    }

    fn record(&mut self, residual: f64) {
        if residual > self.worst {
            self.worst = residual;
        }
    }

    fn verdict(&self) -> bool {
        let pass = self.worst <= self.tol;
        println!(
            "check {:<22} max residual {:>10.3e}  tol {:>8.1e}  {}",
            self.name,
            self.worst,
            self.tol,
            if pass { "PASS" } else { "FAIL" }
        );
        pass
    }
}

/// Run every suite; returns true when all pass.
pub fn run_all(problem: &dyn NlpProblem, sigma: f64, seed: u64, points: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (problem.num_vars(), problem.num_constraints());
    println!(
        "checking {} (n = {}, m = {}) at sigma = {} with {} interior points",
        problem.name(),
        n,
        m,
        sigma,
        points
    );

    let mut fd_objective = Suite::new("objective-gradient-fd", 2e-6);
    let mut fd_constraints = Suite::new("jacobian-fd", 2e-6);
    let mut adjoint = Suite::new("jacobian-adjoint", 1e-12);
    let mut grad_fd = Suite::new("penalty-gradient-fd", 1e-6);
    let mut y_adjoint = Suite::new("multiplier-adjoint", 1e-9);
    let mut oracle = Suite::new("oracle-equivalence", 1e-9);
    let oracle_feasible = n <= 200;

    let mut eval = PenaltyEvaluator::new(
        problem,
        EvaluatorConfig {
            sigma,
            ..Default::default()
        },
    );
    let mut fd_eval = PenaltyEvaluator::new(
        problem,
        EvaluatorConfig {
            sigma,
            ..Default::default()
        },
    );

    for _ in 0..points {
        let x = random_interior(problem, &mut rng);
        let v = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let w = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));

        // objective gradient and Jacobian action against central differences
        let h = 1e-6 * (1.0 + x.norm()) / v.norm();
        let xp = &x + &v * h;
        let xm = &x - &v * h;
        let fd_f = (problem.objective(&xp) - problem.objective(&xm)) / (2.0 * h);
        let df = problem.gradient(&x).dot(&v);
        fd_objective.record((df - fd_f).abs() / df.abs().max(fd_f.abs()).max(1.0));
        let fd_c = (problem.constraints(&xp) - problem.constraints(&xm)) / (2.0 * h);
        let av = problem.jac_adjoint_prod(&x, &v);
        fd_constraints.record((&av - &fd_c).norm() / av.norm().max(1.0));

        // adjoint identity of the Jacobian operators
        let lhs = problem.jac_prod(&x, &w).dot(&v);
        let rhs = w.dot(&av);
        adjoint.record((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-30));

        // penalty gradient against FD of the penalty value
        eval.refresh(&x).expect("interior evaluation");
        let grad = eval.gradient().expect("gradient");
        let hphi = 1e-6 * (1.0 + x.norm()) / v.norm();
        fd_eval.refresh(&(&x + &v * hphi)).expect("interior evaluation");
        let php = fd_eval.phi().unwrap();
        fd_eval.refresh(&(&x - &v * hphi)).expect("interior evaluation");
        let phm = fd_eval.phi().unwrap();
        let fd_dir = (php - phm) / (2.0 * hphi);
        let dir = grad.dot(&v);
        grad_fd.record((dir - fd_dir).abs() / dir.abs().max(fd_dir.abs()).max(1e-8));

        // multiplier-Jacobian adjoint identity
        let yu = eval.y_product(&w).expect("Y u");
        let ytv = eval.yt_product(&v).expect("Y' v");
        let l = yu.dot(&v);
        let r = w.dot(&ytv);
        y_adjoint.record((l - r).abs() / l.abs().max(r.abs()).max(1e-30));

        // matrix-free products against the dense oracles
        if oracle_feasible {
            let oracles = dense_oracles(problem, &x, sigma).expect("dense oracles");
            let dense_yu = &oracles.y_matrix * &w;
            let dense_ytv = oracles.y_matrix.transpose() * &v;
            oracle.record((&yu - &dense_yu).norm() / dense_yu.norm().max(1.0));
            oracle.record((&ytv - &dense_ytv).norm() / dense_ytv.norm().max(1.0));
            oracle.record((&grad - &oracles.grad_phi).norm() / oracles.grad_phi.norm().max(1.0));
        }
    }

    let mut pass = fd_objective.verdict();
    pass &= fd_constraints.verdict();
    pass &= adjoint.verdict();
    pass &= grad_fd.verdict();
    pass &= y_adjoint.verdict();
    if oracle_feasible {
        pass &= oracle.verdict();
    } else {
        println!("check {:<22} skipped (n = {} too large for dense oracles)", "oracle-equivalence", n);
    }
    println!("overall: {}", if pass { "PASS" } else { "FAIL" });
    pass
}
