//! Problem evaluation contract, bounds, operator counters and the built-in
//! test-problem library.
//!
//! A problem exposes `f`, `c` and their derivative actions as operator
//! products only; explicit Jacobians are recovered by probing when a direct
//! factorization asks for them. Constraints are equalities `c(x) = 0` plus
//! bounds `l <= x <= u`. By convention `A(x) = grad c(x)` is `n`-by-`m`
//! (columns are constraint gradients), so `A(x) w` maps multipliers to
//! variable space and `A(x)' v` is the usual Jacobian action.

mod hs113;
mod pde;
mod randqp;
mod toy;

use crate::augsys::SchurPreconditioner;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid parameter `{key}` for problem `{problem}`: {reason}")]
    InvalidParam {
        problem: String,
        key: String,
        reason: String,
    },
    #[error("invalid bounds at component {index}: lower {lower} must be strictly below upper {upper}")]
    InvalidBounds {
        index: usize,
        lower: f64,
        upper: f64,
    },
}

/// Variable bounds, possibly infinite. Fixed variables (`l_j = u_j`) are
/// rejected; they are assumed eliminated from the problem.
#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl Bounds {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, ModelError> {
        assert_eq!(lower.len(), upper.len());
        for i in 0..lower.len() {
            // negated form also rejects NaN bounds
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(lower[i] < upper[i]) {
                return Err(ModelError::InvalidBounds {
                    index: i,
                    lower: lower[i],
                    upper: upper[i],
                });
            }
        }
        Ok(Bounds { lower, upper })
    }

    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    /// True if `l < x < u` strictly in every component.
    pub fn is_interior(&self, x: &DVector<f64>) -> bool {
        (0..x.len()).all(|i| self.lower[i] < x[i] && x[i] < self.upper[i])
    }

    /// `min(x - l, u - x)` componentwise; infinite entries drop out.
    pub fn distance(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| (x[i] - self.lower[i]).min(self.upper[i] - x[i]))
    }

    /// Diagonal of `N(x) = diag(min(x - l, u - x, 1))` used in stopping tests.
    pub fn n_diag(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| {
            (x[i] - self.lower[i]).min(self.upper[i] - x[i]).min(1.0)
        })
    }
}

/// Explicitly declared linear constraints `B' x = d`.
///
/// The convention is that the *last* `m2` rows of `c(x)` are exactly
/// `B' x - d`, so implicit and explicit treatments see the same problem.
#[derive(Debug, Clone)]
pub struct LinearBlock {
    /// `n` by `m2`; column `k` is the gradient of linear constraint `k`.
    pub b: DMatrix<f64>,
    pub d: DVector<f64>,
}

impl LinearBlock {
    pub fn m2(&self) -> usize {
        self.b.ncols()
    }
}

/// A primal-dual point together with the bound activities it implies.
#[derive(Debug, Clone)]
pub struct KktPoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub active_set: Vec<usize>,
}

impl KktPoint {
    pub fn new(x: DVector<f64>, y: DVector<f64>, z: DVector<f64>, bounds: &Bounds, tol: f64) -> Self {
        let active_set = (0..x.len())
            .filter(|&j| (x[j] - bounds.lower[j]).min(bounds.upper[j] - x[j]) <= tol)
            .collect();
        KktPoint { x, y, z, active_set }
    }
}

/// Evaluation contract for the nonlinear program.
///
/// Evaluations are pure in `x`; problems in the library never fail strictly
/// inside the bounds. All products are exact (to rounding), with the single
/// exception of [`NlpProblem::second_jac_prod`], which falls back to central
/// differences of the adjoint Jacobian product unless a problem overrides it.
pub trait NlpProblem {
    fn name(&self) -> &str;
    /// Number of variables `n`.
    fn num_vars(&self) -> usize;
    /// Number of equality constraints `m`.
    fn num_constraints(&self) -> usize;
    fn bounds(&self) -> &Bounds;
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `A(x) w` for an `m`-vector `w`; returns an `n`-vector.
    fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64>;
    /// `A(x)' v` for an `n`-vector `v`; returns an `m`-vector.
    fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;
    /// Lagrangian Hessian product `(grad^2 f - sum_i y_i grad^2 c_i) v`.
    fn lag_hess_prod(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64>;

    /// Explicit `A(x)` (`n` by `m`), recovered by probing unless overridden.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = (self.num_vars(), self.num_constraints());
        let mut a = DMatrix::zeros(n, m);
        let mut e = DVector::zeros(m);
        for k in 0..m {
            e[k] = 1.0;
            a.set_column(k, &self.jac_prod(x, &e));
            e[k] = 0.0;
        }
        a
    }

    /// `S(x, a) v`, the `m`-vector with entries `v' grad^2 c_i(x) a`.
    ///
    /// The default is a central difference of `t -> A(x + t v)' a` with step
    /// `eps^(1/3) (1 + ||x||)`.
    fn second_jac_prod(&self, x: &DVector<f64>, a: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let t = f64::EPSILON.cbrt() * (1.0 + x.norm());
        let vnorm = v.norm();
        if vnorm == 0.0 {
            return DVector::zeros(self.num_constraints());
        }
        let xp = x + v * t;
        let xm = x - v * t;
        (self.jac_adjoint_prod(&xp, a) - self.jac_adjoint_prod(&xm, a)) / (2.0 * t)
    }

    /// True when `second_jac_prod` is exact rather than the FD fallback.
    fn has_exact_second_jac(&self) -> bool {
        false
    }

    /// Declared linear constraints, if any (see [`LinearBlock`]).
    fn linear_block(&self) -> Option<&LinearBlock> {
        None
    }

    /// Standard starting point for this problem.
    fn initial_point(&self) -> DVector<f64>;

    /// Preconditioner for `A' Q A` used by the iterative backend.
    fn build_preconditioner(&self, _x: &DVector<f64>) -> Option<Box<dyn SchurPreconditioner>> {
        None
    }

    /// Known lower bound on the smallest singular value of the
    /// preconditioned Jacobian, enabling error-based solve termination.
    fn sigma_min_bound(&self) -> Option<f64> {
        None
    }
}

/// Operator evaluation counters. Updates are atomic so read-only evaluations
/// of distinct points may run concurrently against one wrapped instance.
#[derive(Debug, Default)]
pub struct EvalCounters {
    n_fg: AtomicU64,
    n_hv: AtomicU64,
    n_av: AtomicU64,
    n_atv: AtomicU64,
}

/// Plain snapshot of [`EvalCounters`] for reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CounterSnapshot {
    pub n_fg: u64,
    pub n_hv: u64,
    pub n_av: u64,
    pub n_atv: u64,
}

impl EvalCounters {
    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            n_fg: self.n_fg.load(Ordering::Relaxed),
            n_hv: self.n_hv.load(Ordering::Relaxed),
            n_av: self.n_av.load(Ordering::Relaxed),
            n_atv: self.n_atv.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.n_fg.store(0, Ordering::Relaxed);
        self.n_hv.store(0, Ordering::Relaxed);
        self.n_av.store(0, Ordering::Relaxed);
        self.n_atv.store(0, Ordering::Relaxed);
    }
}

/// Wraps a problem so that every operator evaluation is counted. Results are
/// bit-identical to the wrapped problem's.
pub struct CountedProblem<'a> {
    inner: &'a dyn NlpProblem,
    counters: Arc<EvalCounters>,
}

/// Instrument a problem with evaluation counters.
pub fn wrap_with_counters(problem: &dyn NlpProblem) -> CountedProblem<'_> {
    CountedProblem {
        inner: problem,
        counters: Arc::new(EvalCounters::default()),
    }
}

impl<'a> CountedProblem<'a> {
    pub fn counters(&self) -> Arc<EvalCounters> {
        Arc::clone(&self.counters)
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        self.counters.snapshot()
    }
}

impl<'a> NlpProblem for CountedProblem<'a> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn num_vars(&self) -> usize {
        self.inner.num_vars()
    }
    fn num_constraints(&self) -> usize {
        self.inner.num_constraints()
    }
    fn bounds(&self) -> &Bounds {
        self.inner.bounds()
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.counters.n_fg.fetch_add(1, Ordering::Relaxed);
        self.inner.objective(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.counters.n_fg.fetch_add(1, Ordering::Relaxed);
        self.inner.gradient(x)
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.constraints(x)
    }
    fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.counters.n_av.fetch_add(1, Ordering::Relaxed);
        self.inner.jac_prod(x, w)
    }
    fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.counters.n_atv.fetch_add(1, Ordering::Relaxed);
        self.inner.jac_adjoint_prod(x, v)
    }
    fn lag_hess_prod(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        self.counters.n_hv.fetch_add(1, Ordering::Relaxed);
        self.inner.lag_hess_prod(x, y, v)
    }
    // Explicit rows are problem data, not operator products: not counted.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.jacobian(x)
    }
    fn second_jac_prod(&self, x: &DVector<f64>, a: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        if self.inner.has_exact_second_jac() {
            self.inner.second_jac_prod(x, a, v)
        } else {
            // FD fallback in terms of `self` so the two adjoint products count.
            let t = f64::EPSILON.cbrt() * (1.0 + x.norm());
            if v.norm() == 0.0 {
                return DVector::zeros(self.num_constraints());
            }
            let xp = x + v * t;
            let xm = x - v * t;
            (self.jac_adjoint_prod(&xp, a) - self.jac_adjoint_prod(&xm, a)) / (2.0 * t)
        }
    }
    fn has_exact_second_jac(&self) -> bool {
        self.inner.has_exact_second_jac()
    }
    fn linear_block(&self) -> Option<&LinearBlock> {
        self.inner.linear_block()
    }
    fn initial_point(&self) -> DVector<f64> {
        self.inner.initial_point()
    }
    fn build_preconditioner(&self, x: &DVector<f64>) -> Option<Box<dyn SchurPreconditioner>> {
        self.inner.build_preconditioner(x)
    }
    fn sigma_min_bound(&self) -> Option<f64> {
        self.inner.sigma_min_bound()
    }
}

/// Key-value parameters for problem construction, as accepted on the command
/// line (`grid=16 alpha=1e-4 seed=7`).
#[derive(Debug, Clone, Default)]
pub struct ProblemParams {
    map: BTreeMap<String, String>,
}

impl ProblemParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> &mut Self {
        self.map.insert(key.to_string(), value.to_string());
        self
    }

    pub fn parse(pairs: &[String]) -> Result<Self, String> {
        let mut p = Self::new();
        for pair in pairs {
            match pair.split_once('=') {
                Some((k, v)) if !k.is_empty() => {
                    p.set(k.trim(), v.trim());
                }
                _ => return Err(format!("expected key=value, got `{pair}`")),
            }
        }
        Ok(p)
    }

    fn get_parsed<T: std::str::FromStr>(&self, problem: &str, key: &str, default: T) -> Result<T, ModelError> {
        match self.map.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| ModelError::InvalidParam {
                problem: problem.to_string(),
                key: key.to_string(),
                reason: format!("cannot parse `{raw}`"),
            }),
        }
    }

    fn ensure_known(&self, problem: &str, known: &[&str]) -> Result<(), ModelError> {
        for key in self.map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(ModelError::InvalidParam {
                    problem: problem.to_string(),
                    key: key.clone(),
                    reason: format!("unknown key (accepted: {})", known.join(", ")),
                });
            }
        }
        Ok(())
    }
}

/// Names of the built-in problems, in registry order.
pub const PROBLEM_NAMES: [&str; 6] = [
    "toy1d",
    "toy1d-bounded",
    "randqp",
    "hs113",
    "invpoisson-fd",
    "poisson-boltzmann-fd",
];

/// Construct a library problem by name.
pub fn make_problem(name: &str, params: &ProblemParams) -> Result<Box<dyn NlpProblem>, ModelError> {
    match name {
        "toy1d" => {
            params.ensure_known(name, &[])?;
            Ok(Box::new(toy::Toy1d::new(false)))
        }
        "toy1d-bounded" => {
            params.ensure_known(name, &[])?;
            Ok(Box::new(toy::Toy1d::new(true)))
        }
        "randqp" => {
            params.ensure_known(name, &["n", "m", "seed", "bounded", "degenerate", "mlin"])?;
            let n: usize = params.get_parsed(name, "n", 12)?;
            let m: usize = params.get_parsed(name, "m", 5)?;
            let seed: u64 = params.get_parsed(name, "seed", 0)?;
            let bounded: bool = params.get_parsed(name, "bounded", false)?;
            let degenerate: bool = params.get_parsed(name, "degenerate", false)?;
            let mlin: usize = params.get_parsed(name, "mlin", m)?;
            if m == 0 || m >= n {
                return Err(ModelError::InvalidParam {
                    problem: name.to_string(),
                    key: "m".to_string(),
                    reason: format!("need 0 < m < n, got m={m}, n={n}"),
                });
            }
            if mlin > m {
                return Err(ModelError::InvalidParam {
                    problem: name.to_string(),
                    key: "mlin".to_string(),
                    reason: format!("need mlin <= m, got mlin={mlin}, m={m}"),
                });
            }
            Ok(Box::new(randqp::RandQp::new(n, m, seed, bounded, degenerate, mlin)))
        }
        "hs113" => {
            params.ensure_known(name, &[])?;
            Ok(Box::new(hs113::Hs113::new()))
        }
        "invpoisson-fd" | "poisson-boltzmann-fd" => {
            params.ensure_known(name, &["grid", "alpha"])?;
            let grid: usize = params.get_parsed(name, "grid", 16)?;
            let alpha: f64 = params.get_parsed(name, "alpha", 1e-4)?;
            if grid < 3 {
                return Err(ModelError::InvalidParam {
                    problem: name.to_string(),
                    key: "grid".to_string(),
                    reason: format!("grid size must be at least 3, got {grid}"),
                });
            }
            if name == "invpoisson-fd" {
                Ok(Box::new(pde::InversePoisson::new(grid, alpha)))
            } else {
                Ok(Box::new(pde::PoissonBoltzmann::new(grid, alpha)))
            }
        }
        other => Err(ModelError::UnknownProblem(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn problems_for_checks() -> Vec<Box<dyn NlpProblem>> {
        let mut out: Vec<Box<dyn NlpProblem>> = Vec::new();
        let p = ProblemParams::new();
        out.push(make_problem("toy1d", &p).unwrap());
        out.push(make_problem("toy1d-bounded", &p).unwrap());
        out.push(make_problem("randqp", &p).unwrap());
        let mut b = ProblemParams::new();
        b.set("bounded", "true").set("seed", "3");
        out.push(make_problem("randqp", &b).unwrap());
        out.push(make_problem("hs113", &p).unwrap());
        let mut g = ProblemParams::new();
        g.set("grid", "6");
        out.push(make_problem("invpoisson-fd", &g).unwrap());
        out.push(make_problem("poisson-boltzmann-fd", &g).unwrap());
        out
    }

    /// Random strictly interior point near the standard start.
    pub(crate) fn random_interior(problem: &dyn NlpProblem, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let x0 = problem.initial_point();
        let b = problem.bounds();
        DVector::from_fn(x0.len(), |i, _| {
            let step: f64 = rng.random_range(-0.4..0.4);
            let mut xi = x0[i] + step;
            let (l, u) = (b.lower[i], b.upper[i]);
            if xi <= l {
                xi = l + 0.25 * (x0[i] - l).min(1.0);
            }
            if xi >= u {
                xi = u - 0.25 * (u - x0[i]).min(1.0);
            }
            xi
        })
    }

    #[test]
    fn toy1d_definition_values() {
        let p = make_problem("toy1d", &ProblemParams::new()).unwrap();
        assert_eq!(p.num_vars(), 1);
        assert_eq!(p.num_constraints(), 1);
        let x = DVector::from_vec(vec![2.0]);
        assert_eq!(p.constraints(&x)[0], 1.0);
        assert_eq!(p.gradient(&x)[0], 2.0);
    }

    #[test]
    fn hs113_matches_reported_dimensions() {
        let p = make_problem("hs113", &ProblemParams::new()).unwrap();
        assert_eq!(p.num_vars(), 18);
        assert_eq!(p.num_constraints(), 8);
        assert_eq!(p.linear_block().unwrap().m2(), 3);
        // known objective value at the standard start
        let x0 = p.initial_point();
        let xorig = x0.rows(0, 10).into_owned();
        assert_relative_eq!(p.objective(&x0), 753.0, epsilon = 1e-10);
        assert_eq!(xorig[0], 2.0);
        // slacks chosen so the start is an equality-feasible interior point
        assert!(p.constraints(&x0).norm() < 1e-12);
        assert!(p.bounds().is_interior(&x0));
    }

    #[test]
    fn invpoisson_dimensions_and_structure() {
        let mut params = ProblemParams::new();
        params.set("grid", "16");
        let p = make_problem("invpoisson-fd", &params).unwrap();
        assert_eq!(p.num_vars(), 2 * 16 * 16);
        assert_eq!(p.num_constraints(), 16 * 16);
        // state/control split of Q: u free, z lower-bounded by 0
        let b = p.bounds();
        for i in 0..256 {
            assert_eq!(b.lower[i], f64::NEG_INFINITY);
            assert_eq!(b.lower[256 + i], 0.0);
        }
    }

    #[test]
    fn adjoint_identity_all_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for p in problems_for_checks() {
            let x = random_interior(p.as_ref(), &mut rng);
            for _ in 0..3 {
                let w = DVector::from_fn(p.num_constraints(), |_, _| rng.random_range(-1.0..1.0));
                let v = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
                let lhs = p.jac_prod(&x, &w).dot(&v);
                let rhs = w.dot(&p.jac_adjoint_prod(&x, &v));
                let scale = lhs.abs().max(rhs.abs()).max(1e-30);
                assert!(
                    (lhs - rhs).abs() / scale <= 1e-12,
                    "adjoint identity failed for {}: {} vs {}",
                    p.name(),
                    lhs,
                    rhs
                );
            }
        }
    }

    #[test]
    fn gradient_and_jacobian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in problems_for_checks() {
            let x = random_interior(p.as_ref(), &mut rng);
            let g = p.gradient(&x);
            let v = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
            let h = 1e-6 * (1.0 + x.norm());
            let xp = &x + &v * h;
            let xm = &x - &v * h;
            let fd = (p.objective(&xp) - p.objective(&xm)) / (2.0 * h);
            assert_relative_eq!(g.dot(&v), fd, max_relative = 2e-6, epsilon = 1e-8);

            let av = p.jac_adjoint_prod(&x, &v);
            let fdc = (p.constraints(&xp) - p.constraints(&xm)) / (2.0 * h);
            let scale = av.norm().max(1.0);
            assert!(
                (&av - &fdc).norm() / scale <= 2e-6,
                "Jacobian FD mismatch for {}: {}",
                p.name(),
                (&av - &fdc).norm() / scale
            );
        }
    }

    #[test]
    fn lagrangian_hessian_is_symmetric_operator() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for p in problems_for_checks() {
            let x = random_interior(p.as_ref(), &mut rng);
            let y = DVector::from_fn(p.num_constraints(), |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
            let u = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
            let lhs = p.lag_hess_prod(&x, &y, &v).dot(&u);
            let rhs = v.dot(&p.lag_hess_prod(&x, &y, &u));
            let scale = lhs.abs().max(rhs.abs()).max(1e-30);
            assert!((lhs - rhs).abs() / scale <= 1e-11, "H_L not symmetric for {}", p.name());
        }
    }

    #[test]
    fn second_jac_products_match_fd_fallback() {
        // Problems with exact S implementations must agree with the generic FD.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in problems_for_checks() {
            if !p.has_exact_second_jac() {
                continue;
            }
            let x = random_interior(p.as_ref(), &mut rng);
            let a = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
            let v = DVector::from_fn(p.num_vars(), |_, _| rng.random_range(-1.0..1.0));
            let exact = p.second_jac_prod(&x, &a, &v);
            let t = f64::EPSILON.cbrt() * (1.0 + x.norm());
            let fd = (p.jac_adjoint_prod(&(&x + &v * t), &a) - p.jac_adjoint_prod(&(&x - &v * t), &a)) / (2.0 * t);
            let scale = exact.norm().max(1.0);
            assert!((&exact - &fd).norm() / scale < 1e-6, "S mismatch for {}", p.name());
        }
    }

    #[test]
    fn invpoisson_state_jacobian_nonsingular() {
        let mut params = ProblemParams::new();
        params.set("grid", "8");
        let p = make_problem("invpoisson-fd", &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_interior(p.as_ref(), &mut rng);
        let m = p.num_constraints();
        // state block of the Jacobian: rows of A' for the u variables
        let a = p.jacobian(&x);
        let au = a.rows(0, m).into_owned().transpose();
        let lu = au.clone().lu();
        let rhs = DVector::from_element(m, 1.0);
        let sol = lu.solve(&rhs).expect("state Jacobian must be nonsingular");
        assert!((au * sol - rhs).norm() < 1e-8);
    }

    #[test]
    fn counters_count_and_reset() {
        let p = make_problem("toy1d", &ProblemParams::new()).unwrap();
        let counted = wrap_with_counters(p.as_ref());
        let x = DVector::from_vec(vec![2.0]);
        counted.gradient(&x);
        assert_eq!(counted.snapshot().n_fg, 1);
        counted.objective(&x);
        let w = DVector::from_vec(vec![1.0]);
        counted.jac_prod(&x, &w);
        counted.jac_adjoint_prod(&x, &x);
        counted.lag_hess_prod(&x, &w, &x);
        let snap = counted.snapshot();
        assert_eq!(snap.n_fg, 2);
        assert_eq!(snap.n_av, 1);
        assert_eq!(snap.n_atv, 1);
        assert_eq!(snap.n_hv, 1);
        counted.counters().reset();
        assert_eq!(counted.snapshot(), CounterSnapshot::default());
    }

    #[test]
    fn counted_results_are_bit_identical() {
        let p = make_problem("hs113", &ProblemParams::new()).unwrap();
        let counted = wrap_with_counters(p.as_ref());
        let x = p.initial_point();
        let v = DVector::from_fn(18, |i, _| (i as f64 + 1.0).sin());
        assert_eq!(p.objective(&x), counted.objective(&x));
        assert_eq!(p.gradient(&x), counted.gradient(&x));
        assert_eq!(p.jac_adjoint_prod(&x, &v), counted.jac_adjoint_prod(&x, &v));
    }

    #[test]
    fn unknown_problem_and_bad_params_error() {
        assert!(make_problem("nosuch", &ProblemParams::new()).is_err());
        let mut params = ProblemParams::new();
        params.set("grid", "2");
        assert!(make_problem("invpoisson-fd", &params).is_err());
        let mut params = ProblemParams::new();
        params.set("gird", "8");
        assert!(make_problem("invpoisson-fd", &params).is_err());
    }

    #[test]
    fn fixed_variables_are_rejected() {
        let b = Bounds::new(DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![1.0, 2.0]));
        assert!(b.is_err());
    }

    // Minimal problem with a curved constraint and no exact second-Jacobian
    // override, to exercise the FD fallback path.
    struct CurvedToy {
        bounds: Bounds,
    }

    impl NlpProblem for CurvedToy {
        fn name(&self) -> &str {
            "curved-toy"
        }
        fn num_vars(&self) -> usize {
            2
        }
        fn num_constraints(&self) -> usize {
            1
        }
        fn bounds(&self) -> &Bounds {
            &self.bounds
        }
        fn objective(&self, x: &DVector<f64>) -> f64 {
            0.5 * x.norm_squared()
        }
        fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
            x.clone()
        }
        fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![x[0] * x[0] * x[1] - 1.0])
        }
        fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * x[0] * x[1] * w[0], x[0] * x[0] * w[0]])
        }
        fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
            DVector::from_vec(vec![2.0 * x[0] * x[1] * v[0] + x[0] * x[0] * v[1]])
        }
        fn lag_hess_prod(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
            // H_1 = [[2 x1, 2 x0], [2 x0, 0]]
            let h1v = [2.0 * x[1] * v[0] + 2.0 * x[0] * v[1], 2.0 * x[0] * v[0]];
            DVector::from_vec(vec![v[0] - y[0] * h1v[0], v[1] - y[0] * h1v[1]])
        }
        fn initial_point(&self) -> DVector<f64> {
            DVector::from_vec(vec![1.0, 1.0])
        }
    }

    #[test]
    fn second_jac_fd_fallback_matches_analytic_and_counts() {
        let p = CurvedToy {
            bounds: Bounds::unbounded(2),
        };
        assert!(!p.has_exact_second_jac());
        let x = DVector::from_vec(vec![1.3, -0.7]);
        let a = DVector::from_vec(vec![0.4, 1.1]);
        let v = DVector::from_vec(vec![-0.9, 0.5]);
        // v' H_1 a with H_1 as above
        let h1a = [2.0 * x[1] * a[0] + 2.0 * x[0] * a[1], 2.0 * x[0] * a[0]];
        let exact = v[0] * h1a[0] + v[1] * h1a[1];
        let fd = p.second_jac_prod(&x, &a, &v);
        assert_relative_eq!(fd[0], exact, max_relative = 1e-7);
        // through the counting wrapper the fallback tallies two adjoint products
        let counted = wrap_with_counters(&p);
        counted.second_jac_prod(&x, &a, &v);
        assert_eq!(counted.snapshot().n_atv, 2);
        // and the zero direction short-circuits
        let zero = DVector::zeros(2);
        assert_eq!(p.second_jac_prod(&x, &a, &zero)[0], 0.0);
    }
}
