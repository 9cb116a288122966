//! Smooth exact penalty method for nonlinear programs with equality and
//! bound constraints.
//!
//! The penalty function is
//!
//! ```text
//! phi_sigma(x) = f(x) - c(x)' y_sigma(x),
//! ```
//!
//! where `y_sigma(x)` solves a shifted weighted least-squares problem whose
//! diagonal weight `Q(x)` vanishes smoothly at active bounds. Minimizers of
//! the original problem are minimizers of `phi_sigma` over the bounds alone
//! once `sigma` exceeds a finite threshold, so a single bound-constrained
//! solve replaces the constrained problem.
//!
//! Everything needed to evaluate `phi_sigma` and its derivatives reduces to
//! solves with one structured augmented system per point ([`augsys`]),
//! assembled either from an explicit Jacobian (direct, semi-normal equations)
//! or from operator products alone (iterative, preconditioned CG). The
//! bound-constrained minimizer is an interior trust-region Newton-CG method
//! ([`solver`]). Dense reference oracles and the threshold-parameter
//! machinery live in [`diagnostics`].

pub mod augsys;
pub mod diagnostics;
pub mod explicitlin;
pub mod model;
pub mod penalty;
pub mod scaling;
pub mod solver;

pub use augsys::{AugSystem, Backend, Criterion, SolveSettings, SystemMode};
pub use model::{make_problem, Bounds, CountedProblem, EvalCounters, KktPoint, NlpProblem};
pub use penalty::{HessianMode, PenaltyEvaluator};
pub use scaling::{ScalingDiag, ScalingParams};
pub use solver::{minimize, SolveReport, SolverConfig, SolverStatus};
