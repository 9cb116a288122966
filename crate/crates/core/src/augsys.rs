//! Assembly and solution of the structured augmented systems
//!
//! ```text
//! K_sym = [ I        Q^(1/2)A ]        K_uns = [ I    A ]
//!         [ A'Q^(1/2)    0    ]                [ A'Q  0 ]
//! ```
//!
//! that underlie every penalty evaluation. One assembly per point serves all
//! solves. The direct backend performs a column-pivoted QR of `Q^(1/2)A`
//! (triangular factor only) and solves through the semi-normal equations
//! with one step of iterative refinement; both the symmetric and unsymmetric
//! forms reuse that single factorization. The iterative backend never forms
//! a matrix: it runs CG on the Schur complement `A'QA` preconditioned by
//! `P ~ A'QA`, tracking the top block implicitly, and terminates on either
//! the preconditioned relative residual or a certified relative error bound
//! (the latter requires a lower bound on the smallest singular value of the
//! preconditioned Jacobian).
//!
//! Right-hand sides are always built so that `Q^(-1/2)` is never applied;
//! small diagonal entries of `Q` near active bounds stay harmless.

use crate::model::NlpProblem;
use crate::scaling::ScalingDiag;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::sync::atomic::{AtomicUsize, Ordering};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SystemMode {
    Symmetric,
    Unsymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Backend {
    Direct,
    Iterative,
}

/// Inner-solve termination rule: certified relative error in the energy
/// norm, or preconditioned relative residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Criterion {
    ErrorBased,
    ResidualBased,
}

#[derive(Debug, Clone)]
pub struct SolveSettings {
    /// Relative tolerance of the inner solve.
    pub eta: f64,
    pub criterion: Criterion,
    /// Lower bound on `sigma_min(A P^(-1/2))`; required for error-based
    /// termination.
    pub sigma_min_bound: Option<f64>,
    pub max_inner_iterations: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            eta: 1e-10,
            criterion: Criterion::ResidualBased,
            sigma_min_bound: None,
            max_inner_iterations: 100_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub inner_iterations: usize,
    /// Achieved residual in the reported norm (preconditioned for the
    /// iterative backend, plain 2-norm for the direct one).
    pub residual: f64,
    /// Certified error bound at exit, when error-based termination ran.
    pub error_bound: Option<f64>,
    /// Residual 2-norm before and after the semi-normal refinement step.
    pub refinement: Option<(f64, f64)>,
}

#[derive(Debug, Error)]
pub enum AugSysError {
    #[error("Q^(1/2)A is rank deficient (pivot {pivot:.3e} at column {index}); LICQ violated")]
    RankDeficient { index: usize, pivot: f64 },
    #[error("inner solver hit the iteration limit ({iterations}) with residual {residual:.3e}")]
    MaxInnerIterations {
        iterations: usize,
        residual: f64,
        /// Best iterate found, top then bottom block.
        best: Box<(DVector<f64>, DVector<f64>)>,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0} is not supported")]
    Unsupported(&'static str),
    #[error("assembly requires a strictly interior point (q[{index}] = {value})")]
    NotInterior { index: usize, value: f64 },
    #[error("iterative solver breakdown: {0}")]
    Breakdown(String),
}

/// Preconditioner for the Schur complement `A'QA`. `solve` applies
/// `P^{-1}`, `apply` applies `P` itself (needed by iterate-norm tests).
pub trait SchurPreconditioner {
    fn solve(&self, r: &DVector<f64>) -> DVector<f64>;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
}

struct IdentityPreconditioner;

impl SchurPreconditioner for IdentityPreconditioner {
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        r.clone()
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
}

/// Constraint-gradient operator the system is built on. Usually the
/// problem's `A(x)`; the explicit-constraint machinery substitutes
/// `C = [A1 B]`.
pub trait JacobianOperator {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn apply(&self, w: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64>;
    fn dense(&self) -> DMatrix<f64>;
}

/// The plain problem Jacobian at a fixed point.
pub struct ProblemJacobian<'a> {
    pub problem: &'a dyn NlpProblem,
    pub x: DVector<f64>,
}

impl<'a> JacobianOperator for ProblemJacobian<'a> {
    fn n(&self) -> usize {
        self.problem.num_vars()
    }
    fn m(&self) -> usize {
        self.problem.num_constraints()
    }
    fn apply(&self, w: &DVector<f64>) -> DVector<f64> {
        self.problem.jac_prod(&self.x, w)
    }
    fn apply_adjoint(&self, v: &DVector<f64>) -> DVector<f64> {
        self.problem.jac_adjoint_prod(&self.x, v)
    }
    fn dense(&self) -> DMatrix<f64> {
        self.problem.jacobian(&self.x)
    }
}

struct DirectData {
    /// Dense constraint gradients, `n` by `m`.
    a: DMatrix<f64>,
    /// `Q^(1/2) A`.
    aq: DMatrix<f64>,
    /// Upper-triangular factor of the pivoted QR of `aq` and its pivot
    /// permutation (as a column index map).
    r: DMatrix<f64>,
    piv: Vec<usize>,
}

impl DirectData {
    /// Solve `(A'QA) s = b` through the semi-normal equations `R'R s = b`
    /// (with the pivot permutation folded in).
    fn sne_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let m = b.len();
        let mut v = DVector::zeros(m);
        for k in 0..m {
            v[k] = b[self.piv[k]];
        }
        let y = self
            .r
            .transpose()
            .solve_lower_triangular(&v)
            .expect("R has positive pivots by construction");
        let s = self.r.solve_upper_triangular(&y).expect("R is nonsingular");
        let mut out = DVector::zeros(m);
        for k in 0..m {
            out[self.piv[k]] = s[k];
        }
        out
    }
}

struct IterativeData<'a> {
    op: Box<dyn JacobianOperator + 'a>,
    precond: Box<dyn SchurPreconditioner>,
}

enum BackendData<'a> {
    Direct(DirectData),
    Iterative(IterativeData<'a>),
}

/// An assembled (and, for the direct backend, factorized) augmented system.
/// Immutable after assembly; concurrent solves against one handle are fine.
pub struct AugSystem<'a> {
    mode: SystemMode,
    n: usize,
    m: usize,
    q: DVector<f64>,
    sqrt_q: DVector<f64>,
    data: BackendData<'a>,
    solves: AtomicUsize,
}

impl<'a> AugSystem<'a> {
    /// Assemble for a problem's own Jacobian at `x`. With the iterative
    /// backend the problem's preconditioner is used when it provides one.
    pub fn assemble(
        scaling: &ScalingDiag,
        problem: &'a dyn NlpProblem,
        x: &DVector<f64>,
        mode: SystemMode,
        backend: Backend,
    ) -> Result<Self, AugSysError> {
        let precond = match backend {
            Backend::Iterative => problem.build_preconditioner(x),
            Backend::Direct => None,
        };
        let op = ProblemJacobian {
            problem,
            x: x.clone(),
        };
        Self::assemble_operator(scaling, Box::new(op), mode, backend, precond)
    }

    /// Assemble over an arbitrary constraint-gradient operator.
    pub fn assemble_operator(
        scaling: &ScalingDiag,
        op: Box<dyn JacobianOperator + 'a>,
        mode: SystemMode,
        backend: Backend,
        precond: Option<Box<dyn SchurPreconditioner>>,
    ) -> Result<Self, AugSysError> {
        let n = op.n();
        let m = op.m();
        for i in 0..n {
            // negated form also rejects NaN scalings
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(scaling.q[i] > 0.0) {
                return Err(AugSysError::NotInterior {
                    index: i,
                    value: scaling.q[i],
                });
            }
        }
        let q = scaling.q.clone();
        let sqrt_q = scaling.q_sqrt();
        let data = match backend {
            Backend::Direct => {
                let a = op.dense();
                let mut aq = a.clone();
                for i in 0..n {
                    let mut row = aq.row_mut(i);
                    row *= sqrt_q[i];
                }
                let qr = aq.clone().col_piv_qr();
                let r = qr.r();
                let piv: Vec<usize> = {
                    // materialize the pivot sequence as a column index map
                    let mut idx = DVector::from_fn(m, |i, _| i as f64);
                    qr.p().permute_rows(&mut idx);
                    idx.iter().map(|&v| v as usize).collect()
                };
                let rmax = (0..m).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
                for i in 0..m {
                    if r[(i, i)].abs() <= 1e-12 * rmax.max(1e-300) {
                        return Err(AugSysError::RankDeficient {
                            index: i,
                            pivot: r[(i, i)],
                        });
                    }
                }
                BackendData::Direct(DirectData { a, aq, r, piv })
            }
            Backend::Iterative => {
                if mode == SystemMode::Unsymmetric {
                    return Err(AugSysError::Unsupported("iterative unsymmetric solve"));
                }
                BackendData::Iterative(IterativeData {
                    op,
                    precond: precond.unwrap_or(Box::new(IdentityPreconditioner)),
                })
            }
        };
        Ok(AugSystem {
            mode,
            n,
            m,
            q,
            sqrt_q,
            data,
            solves: AtomicUsize::new(0),
        })
    }

    pub fn mode(&self) -> SystemMode {
        self.mode
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    /// Number of block solves performed against this assembly (test
    /// instrumentation for the per-point cost contract).
    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    /// Materialized `K` for the direct backend (small problems and tests).
    pub fn dense_matrix(&self) -> Option<DMatrix<f64>> {
        let BackendData::Direct(d) = &self.data else {
            return None;
        };
        let (n, m) = (self.n, self.m);
        let mut k = DMatrix::zeros(n + m, n + m);
        for i in 0..n {
            k[(i, i)] = 1.0;
        }
        match self.mode {
            SystemMode::Symmetric => {
                k.view_mut((0, n), (n, m)).copy_from(&d.aq);
                k.view_mut((n, 0), (m, n)).copy_from(&d.aq.transpose());
            }
            SystemMode::Unsymmetric => {
                k.view_mut((0, n), (n, m)).copy_from(&d.a);
                let mut atq = d.a.transpose();
                for j in 0..n {
                    let mut col = atq.column_mut(j);
                    col *= self.q[j];
                }
                k.view_mut((n, 0), (m, n)).copy_from(&atq);
            }
        }
        Some(k)
    }

    /// Solve `K (p; q) = (w; z)`.
    pub fn solve(
        &self,
        rhs_top: &DVector<f64>,
        rhs_bottom: &DVector<f64>,
        settings: &SolveSettings,
    ) -> Result<(DVector<f64>, DVector<f64>, SolveStats), AugSysError> {
        assert_eq!(rhs_top.len(), self.n);
        assert_eq!(rhs_bottom.len(), self.m);
        self.solves.fetch_add(1, Ordering::Relaxed);
        match &self.data {
            BackendData::Direct(d) => Ok(self.solve_direct(d, rhs_top, rhs_bottom, false)),
            BackendData::Iterative(it) => self.solve_pcg(it, rhs_top, rhs_bottom, settings),
        }
    }

    /// Solve the transposed system `K' (p; q) = (w; z)`; only distinct from
    /// [`AugSystem::solve`] in unsymmetric mode, where `K'` swaps `A` and
    /// `QA` across the blocks.
    pub fn solve_transpose(
        &self,
        rhs_top: &DVector<f64>,
        rhs_bottom: &DVector<f64>,
        settings: &SolveSettings,
    ) -> Result<(DVector<f64>, DVector<f64>, SolveStats), AugSysError> {
        match self.mode {
            SystemMode::Symmetric => self.solve(rhs_top, rhs_bottom, settings),
            SystemMode::Unsymmetric => {
                self.solves.fetch_add(1, Ordering::Relaxed);
                match &self.data {
                    BackendData::Direct(d) => Ok(self.solve_direct(d, rhs_top, rhs_bottom, true)),
                    BackendData::Iterative(_) => {
                        Err(AugSysError::Unsupported("iterative unsymmetric solve"))
                    }
                }
            }
        }
    }

    // Semi-normal equations with one refinement step. `transposed` selects
    // the [I, QA; A', 0] variant.
    fn solve_direct(
        &self,
        d: &DirectData,
        w: &DVector<f64>,
        z: &DVector<f64>,
        transposed: bool,
    ) -> (DVector<f64>, DVector<f64>, SolveStats) {
        let top_mul = |s: &DVector<f64>| -> DVector<f64> {
            // the (1,2) block times s
            match (self.mode, transposed) {
                (SystemMode::Symmetric, _) => &d.aq * s,
                (SystemMode::Unsymmetric, false) => &d.a * s,
                (SystemMode::Unsymmetric, true) => (&d.a * s).component_mul(&self.q),
            }
        };
        let bottom_mul = |p: &DVector<f64>| -> DVector<f64> {
            // the (2,1) block times p
            match (self.mode, transposed) {
                (SystemMode::Symmetric, _) => d.aq.transpose() * p,
                (SystemMode::Unsymmetric, false) => d.a.transpose() * p.component_mul(&self.q),
                (SystemMode::Unsymmetric, true) => d.a.transpose() * p,
            }
        };
        // K (p;q) = (w;z) reduces to (A'QA) q = bottom_mul(w) - z, then the
        // top block recovers p. The Schur complement is A'QA in all variants.
        let solve_once = |w: &DVector<f64>, z: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            let q = d.sne_solve(&(bottom_mul(w) - z));
            let p = w - top_mul(&q);
            (p, q)
        };
        let (mut p, mut q) = solve_once(w, z);
        let res = |p: &DVector<f64>, q: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
            (w - p - top_mul(q), z - bottom_mul(p))
        };
        let (rt, rb) = res(&p, &q);
        let before = (rt.norm_squared() + rb.norm_squared()).sqrt();
        let (dp, dq) = solve_once(&rt, &rb);
        let (p2, q2) = (&p + &dp, &q + &dq);
        let (rt2, rb2) = res(&p2, &q2);
        let after = (rt2.norm_squared() + rb2.norm_squared()).sqrt();
        // keep the refined iterate only if it did not degrade the residual
        let final_res = if after <= before {
            p = p2;
            q = q2;
            after
        } else {
            before
        };
        (
            p,
            q,
            SolveStats {
                inner_iterations: 0,
                residual: final_res,
                error_bound: None,
                refinement: Some((before, after)),
            },
        )
    }

    // Preconditioned CG on the Schur complement, with the top block of the
    // iterate maintained implicitly as p = w - Q^(1/2)A q. The natural CG
    // quantity r'P^{-1}r is exactly the squared P-bar^{-1}-norm of the full
    // augmented residual, since the top-block residual stays zero.
    fn solve_pcg(
        &self,
        it: &IterativeData<'a>,
        w: &DVector<f64>,
        z: &DVector<f64>,
        settings: &SolveSettings,
    ) -> Result<(DVector<f64>, DVector<f64>, SolveStats), AugSysError> {
        let sigma_min = match settings.criterion {
            Criterion::ErrorBased => match settings.sigma_min_bound {
                Some(s) if s > 0.0 => Some(s),
                _ => {
                    return Err(AugSysError::Config(
                        "error-based termination requires a positive sigma_min_bound".into(),
                    ))
                }
            },
            Criterion::ResidualBased => None,
        };
        let aq = |v: &DVector<f64>| it.op.apply(v).component_mul(&self.sqrt_q);
        let aq_t = |v: &DVector<f64>| it.op.apply_adjoint(&v.component_mul(&self.sqrt_q));

        let b = aq_t(w) - z;
        let rhs_norm = {
            let zp = it.precond.solve(z);
            (w.norm_squared() + z.dot(&zp)).max(0.0).sqrt()
        };
        let mut qvec = DVector::zeros(self.m);
        let mut t = DVector::zeros(self.n); // accumulates Q^(1/2)A q
        let mut r = b.clone();
        let mut zt = it.precond.solve(&r);
        let mut rz = r.dot(&zt);
        if rz < 0.0 {
            return Err(AugSysError::Breakdown(
                "preconditioner is not positive definite".into(),
            ));
        }
        let mut dir = zt.clone();
        let mut stats = SolveStats::default();

        let error_factor = sigma_min.map(|s| (1.0 / (s * s) + 1.0 / (s * s * s * s)).sqrt());
        let converged = |rz: f64, qvec: &DVector<f64>, t: &DVector<f64>, stats: &mut SolveStats| {
            let nat_res = rz.max(0.0).sqrt();
            stats.residual = nat_res;
            match settings.criterion {
                Criterion::ResidualBased => nat_res <= settings.eta * rhs_norm,
                Criterion::ErrorBased => {
                    let bound = nat_res * error_factor.unwrap();
                    stats.error_bound = Some(bound);
                    let pq = it.precond.apply(qvec);
                    let p = w - t;
                    let iterate_norm = (p.norm_squared() + qvec.dot(&pq)).max(0.0).sqrt();
                    bound <= settings.eta * iterate_norm
                }
            }
        };

        if converged(rz, &qvec, &t, &mut stats) {
            return Ok((w - &t, qvec, stats));
        }
        for k in 1..=settings.max_inner_iterations {
            let s = aq(&dir);
            let md = aq_t(&s);
            let denom = s.norm_squared();
            if denom <= 0.0 {
                return Err(AugSysError::Breakdown(format!(
                    "zero curvature direction at iteration {k} (rank-deficient A'QA?)"
                )));
            }
            let alpha = rz / denom;
            qvec += &dir * alpha;
            t += &s * alpha;
            r -= &md * alpha;
            zt = it.precond.solve(&r);
            let rz_new = r.dot(&zt);
            if rz_new < 0.0 {
                return Err(AugSysError::Breakdown(
                    "preconditioner lost positive definiteness".into(),
                ));
            }
            stats.inner_iterations = k;
            if converged(rz_new, &qvec, &t, &mut stats) {
                return Ok((w - &t, qvec, stats));
            }
            let beta = rz_new / rz;
            rz = rz_new;
            dir = &zt + &dir * beta;
        }
        Err(AugSysError::MaxInnerIterations {
            iterations: settings.max_inner_iterations,
            residual: stats.residual,
            best: Box::new((w - &t, qvec)),
        })
    }
}
