//! The penalty function `phi_sigma(x) = f(x) - c(x)' y_sigma(x)` and its
//! derivative machinery.
//!
//! A refreshed evaluator holds one augmented-system assembly per point; the
//! multiplier estimate, penalty gradient, multiplier-Jacobian products
//! `Y u` / `Y' v` and both Gauss-Newton Hessian approximations are all
//! obtained from solves against that single assembly:
//!
//! * refresh: one solve (plus one Jacobian product to recover
//!   `g_sigma = g - A y_sigma` without touching `Q^(-1/2)`),
//! * gradient: one more solve (`Y c`),
//! * `B1 d` and `B2 d`: two solves each.
//!
//! `B1 = H - A Y' - Y A'` drops only the third-derivative term of the exact
//! Hessian; `B2` also drops the `S`-terms and needs no second constraint
//! derivatives at all. Both vanish differences only at solutions, which is
//! what makes them Gauss-Newton-like.

use crate::augsys::{AugSysError, AugSystem, Backend, SolveSettings, SystemMode};
use crate::model::{Bounds, NlpProblem};
use crate::scaling::{build_scaling, ScalingDiag, ScalingError, ScalingParams};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HessianMode {
    B1,
    B2,
}

#[derive(Debug, Error)]
pub enum PenaltyError {
    #[error(transparent)]
    Scaling(#[from] ScalingError),
    #[error(transparent)]
    AugSys(#[from] AugSysError),
    #[error("evaluator has no refreshed point")]
    NotRefreshed,
    #[error("non-finite {what} encountered during refresh")]
    NonFinite { what: &'static str },
}

/// Evaluation configuration shared by the implicit and explicit evaluators.
#[derive(Debug, Clone)]
pub struct EvaluatorConfig {
    pub sigma: f64,
    pub hessian_mode: HessianMode,
    pub system_mode: SystemMode,
    pub backend: Backend,
    pub solve: SolveSettings,
    /// Use the capped variant of the bound scaling.
    pub capped_scaling: bool,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        EvaluatorConfig {
            sigma: 1.0,
            hessian_mode: HessianMode::B2,
            system_mode: SystemMode::Symmetric,
            backend: Backend::Direct,
            solve: SolveSettings::default(),
            capped_scaling: false,
        }
    }
}

/// Cached quantities at one point; everything refers to the same `x` and
/// `sigma`, and `system` holds the single factorization/assembly they share.
pub struct PointState<'a> {
    pub(crate) x: DVector<f64>,
    pub(crate) scaling: ScalingDiag,
    pub(crate) f: f64,
    pub(crate) c: DVector<f64>,
    pub(crate) g: DVector<f64>,
    pub(crate) y_sigma: DVector<f64>,
    pub(crate) g_sigma: DVector<f64>,
    pub(crate) phi: f64,
    pub(crate) system: AugSystem<'a>,
}

pub struct PenaltyEvaluator<'a> {
    problem: &'a dyn NlpProblem,
    config: EvaluatorConfig,
    scaling_params: ScalingParams,
    state: Option<PointState<'a>>,
}

impl<'a> PenaltyEvaluator<'a> {
    pub fn new(problem: &'a dyn NlpProblem, config: EvaluatorConfig) -> Self {
        let mut scaling_params = ScalingParams::from_bounds(problem.bounds());
        scaling_params.capped = config.capped_scaling;
        PenaltyEvaluator {
            problem,
            config,
            scaling_params,
            state: None,
        }
    }

    pub fn problem(&self) -> &'a dyn NlpProblem {
        self.problem
    }

    pub fn config(&self) -> &EvaluatorConfig {
        &self.config
    }

    pub fn sigma(&self) -> f64 {
        self.config.sigma
    }

    /// Change the penalty parameter; invalidates any cached point.
    pub fn set_sigma(&mut self, sigma: f64) {
        self.config.sigma = sigma;
        self.state = None;
    }

    fn state(&self) -> Result<&PointState<'a>, PenaltyError> {
        self.state.as_ref().ok_or(PenaltyError::NotRefreshed)
    }

    pub fn phi(&self) -> Result<f64, PenaltyError> {
        Ok(self.state()?.phi)
    }

    pub fn y_sigma(&self) -> Result<&DVector<f64>, PenaltyError> {
        Ok(&self.state()?.y_sigma)
    }

    pub fn g_sigma(&self) -> Result<&DVector<f64>, PenaltyError> {
        Ok(&self.state()?.g_sigma)
    }

    pub fn constraint_values(&self) -> Result<&DVector<f64>, PenaltyError> {
        Ok(&self.state()?.c)
    }

    pub fn objective_value(&self) -> Result<f64, PenaltyError> {
        Ok(self.state()?.f)
    }

    pub fn scaling(&self) -> Result<&ScalingDiag, PenaltyError> {
        Ok(&self.state()?.scaling)
    }

    /// The point the evaluator is currently refreshed at.
    pub fn cached_x(&self) -> Result<&DVector<f64>, PenaltyError> {
        Ok(&self.state()?.x)
    }

    /// Cached objective gradient at the current point.
    pub fn cached_gradient(&self) -> Result<&DVector<f64>, PenaltyError> {
        Ok(&self.state()?.g)
    }

    /// The augmented system assembled at the current point.
    pub fn system(&self) -> Result<&AugSystem<'a>, PenaltyError> {
        Ok(&self.state()?.system)
    }

    /// Move the cached point out (so a trial refresh can be rolled back).
    pub fn take_state(&mut self) -> Option<PointState<'a>> {
        self.state.take()
    }

    /// Put a previously taken point back.
    pub fn restore_state(&mut self, state: PointState<'a>) {
        self.state = Some(state);
    }

    /// Evaluate the penalty function at `x`: assembles the augmented system,
    /// solves once for `y_sigma`, recovers `g_sigma = g - A y_sigma` with one
    /// extra Jacobian product, and caches
    /// `phi_sigma = f - c' y_sigma`.
    pub fn refresh(&mut self, x: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>), PenaltyError> {
        self.state = None;
        let scaling = build_scaling(x, self.problem.bounds(), &self.scaling_params)?;
        let f = self.problem.objective(x);
        let g = self.problem.gradient(x);
        let c = self.problem.constraints(x);
        if !f.is_finite() {
            return Err(PenaltyError::NonFinite { what: "objective" });
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(PenaltyError::NonFinite { what: "constraints" });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(PenaltyError::NonFinite { what: "gradient" });
        }
        let system = AugSystem::assemble(
            &scaling,
            self.problem,
            x,
            self.config.system_mode,
            self.config.backend,
        )?;
        let sigma_c = &c * self.config.sigma;
        let (y_sigma, g_sigma) = match self.config.system_mode {
            SystemMode::Symmetric => {
                let rhs_top = g.component_mul(&scaling.q_sqrt());
                let (_, y, _) = system.solve(&rhs_top, &sigma_c, &self.config.solve)?;
                let g_sigma = &g - self.problem.jac_prod(x, &y);
                (y, g_sigma)
            }
            SystemMode::Unsymmetric => {
                let (g_sigma, y, _) = system.solve(&g, &sigma_c, &self.config.solve)?;
                (y, g_sigma)
            }
        };
        let phi = f - c.dot(&y_sigma);
        if !phi.is_finite() {
            return Err(PenaltyError::NonFinite { what: "penalty value" });
        }
        self.state = Some(PointState {
            x: x.clone(),
            scaling,
            f,
            c,
            g,
            y_sigma: y_sigma.clone(),
            g_sigma: g_sigma.clone(),
            phi,
            system,
        });
        Ok((phi, y_sigma, g_sigma))
    }

    /// `grad phi_sigma = g_sigma - Y c`; costs one augmented solve.
    pub fn gradient(&self) -> Result<DVector<f64>, PenaltyError> {
        let st = self.state()?;
        let yc = self.y_product(&st.c)?;
        Ok(&st.g_sigma - yc)
    }

    // R_sigma v = diag(q') diag(g_sigma) v
    fn r_sigma(st: &PointState<'_>, v: &DVector<f64>) -> DVector<f64> {
        st.scaling.qprime.component_mul(&st.g_sigma).component_mul(v)
    }

    // S_sigma' w = T(x, w) (Q g_sigma) = H(x)(Q g_sigma) - H_L(x, w)(Q g_sigma),
    // two Lagrangian-Hessian products.
    fn s_sigma_adjoint(&self, st: &PointState<'_>, w: &DVector<f64>) -> DVector<f64> {
        let qg = st.scaling.q.component_mul(&st.g_sigma);
        let zero_y = DVector::zeros(self.problem.num_constraints());
        self.problem.lag_hess_prod(&st.x, &zero_y, &qg) - self.problem.lag_hess_prod(&st.x, w, &qg)
    }

    // S_sigma v = S(x, Q g_sigma) v, delegated to the problem (exact or FD).
    fn s_sigma(&self, st: &PointState<'_>, v: &DVector<f64>) -> DVector<f64> {
        let qg = st.scaling.q.component_mul(&st.g_sigma);
        self.problem.second_jac_prod(&st.x, &qg, v)
    }

    /// `Y u` via one augmented solve.
    pub fn y_product(&self, u: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let st = self.state()?;
        let sigma = self.config.sigma;
        match self.config.system_mode {
            SystemMode::Symmetric => {
                let zeros = DVector::zeros(st.x.len());
                let (v, w, _) = st.system.solve(&zeros, u, &self.config.solve)?;
                let aw = self.problem.jac_prod(&st.x, &w);
                let h_term = self
                    .problem
                    .lag_hess_prod(&st.x, &st.y_sigma, &v.component_mul(&st.scaling.q_sqrt()));
                Ok(h_term + &aw * sigma - Self::r_sigma(st, &aw) - self.s_sigma_adjoint(st, &w))
            }
            SystemMode::Unsymmetric => {
                let zeros = DVector::zeros(st.x.len());
                let (vbar, w, _) = st.system.solve(&zeros, u, &self.config.solve)?;
                // Y u = (H Q - sigma I + R) vbar - S' w with vbar = -A w
                let h_term = self
                    .problem
                    .lag_hess_prod(&st.x, &st.y_sigma, &vbar.component_mul(&st.scaling.q));
                Ok(h_term - &vbar * sigma + Self::r_sigma(st, &vbar) - self.s_sigma_adjoint(st, &w))
            }
        }
    }

    /// `Y' v` via one augmented solve.
    pub fn yt_product(&self, v: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let st = self.state()?;
        let sigma = self.config.sigma;
        let hv = self.problem.lag_hess_prod(&st.x, &st.y_sigma, v);
        let sv = self.s_sigma(st, v);
        match self.config.system_mode {
            SystemMode::Symmetric => {
                let rhs_top = hv.component_mul(&st.scaling.q_sqrt());
                let inner = v * sigma - Self::r_sigma(st, v);
                let rhs_bottom = self.problem.jac_adjoint_prod(&st.x, &inner) - sv;
                let (_, u, _) = st.system.solve(&rhs_top, &rhs_bottom, &self.config.solve)?;
                Ok(u)
            }
            SystemMode::Unsymmetric => {
                let rhs_top = hv.component_mul(&st.scaling.q) - v * sigma + Self::r_sigma(st, v);
                let rhs_bottom = -sv;
                let (_, u, _) = st
                    .system
                    .solve_transpose(&rhs_top, &rhs_bottom, &self.config.solve)?;
                Ok(u)
            }
        }
    }

    /// `Ptilde u = A (A'QA)^{-1} A' u` via one augmented solve.
    pub fn p_tilde(&self, u: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let st = self.state()?;
        match self.config.system_mode {
            SystemMode::Symmetric => {
                let zeros = DVector::zeros(st.x.len());
                let atu = self.problem.jac_adjoint_prod(&st.x, u);
                let (_, q, _) = st.system.solve(&zeros, &atu, &self.config.solve)?;
                Ok(-self.problem.jac_prod(&st.x, &q))
            }
            SystemMode::Unsymmetric => {
                let zeros = DVector::zeros(st.c.len());
                let (_, q, _) = st.system.solve_transpose(u, &zeros, &self.config.solve)?;
                Ok(self.problem.jac_prod(&st.x, &q))
            }
        }
    }

    /// Product with the configured Hessian approximation; two augmented
    /// solves in either mode.
    pub fn hess_product(&self, d: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let st = self.state()?;
        let sigma = self.config.sigma;
        let hd = self.problem.lag_hess_prod(&st.x, &st.y_sigma, d);
        match self.config.hessian_mode {
            HessianMode::B1 => {
                let ytd = self.yt_product(d)?;
                let a_ytd = self.problem.jac_prod(&st.x, &ytd);
                let atd = self.problem.jac_adjoint_prod(&st.x, d);
                let y_atd = self.y_product(&atd)?;
                Ok(hd - a_ytd - y_atd)
            }
            HessianMode::B2 => {
                // (Q H + R - sigma I) d, then project; then the transpose term
                let s1 = st.scaling.q.component_mul(&hd) + Self::r_sigma(st, d) - d * sigma;
                let t1 = self.p_tilde(&s1)?;
                let t2 = self.p_tilde(d)?;
                let s2 = self
                    .problem
                    .lag_hess_prod(&st.x, &st.y_sigma, &st.scaling.q.component_mul(&t2))
                    + Self::r_sigma(st, &t2)
                    - &t2 * sigma;
                Ok(hd - t1 - s2)
            }
        }
    }
}

/// Interface the trust-region solver drives; implemented by the implicit
/// evaluator here and the explicit-constraint evaluator.
pub trait PenaltyFunction {
    type State;

    fn bounds(&self) -> &Bounds;
    fn sigma(&self) -> f64;
    fn set_sigma(&mut self, sigma: f64);
    fn refresh(&mut self, x: &DVector<f64>) -> Result<(), PenaltyError>;
    fn phi(&self) -> Result<f64, PenaltyError>;
    fn objective(&self) -> Result<f64, PenaltyError>;
    /// Infinity norm of the full constraint residual (including any
    /// explicitly maintained linear block).
    fn primal_residual_inf(&self) -> Result<f64, PenaltyError>;
    fn multiplier_norm_inf(&self) -> Result<f64, PenaltyError>;
    fn multipliers(&self) -> Result<DVector<f64>, PenaltyError>;
    /// The Lagrangian gradient over all constraints.
    fn g_sigma_full(&self) -> Result<DVector<f64>, PenaltyError>;
    fn gradient(&self) -> Result<DVector<f64>, PenaltyError>;
    fn hess_product(&self, d: &DVector<f64>) -> Result<DVector<f64>, PenaltyError>;
    /// Bound-multiplier estimate derived from a computed gradient.
    fn dual_estimate(&self, gradient: &DVector<f64>) -> Result<DVector<f64>, PenaltyError>;
    /// Residual of the explicitly maintained linear constraints, if any.
    fn linear_residual_inf(&self) -> Option<f64> {
        None
    }
    /// Snap a candidate point back onto the explicit linear manifold
    /// (least-norm correction); identity when nothing is maintained.
    fn restore_linear_feasibility(&self, _x: &mut DVector<f64>) {}
    /// Columns spanning the explicitly maintained linear constraints, if
    /// any; trust-region steps are kept in their null space.
    fn step_nullspace_of(&self) -> Option<&DMatrix<f64>>;
    fn take_state(&mut self) -> Option<Self::State>;
    fn restore_state(&mut self, state: Self::State);
}

impl<'a> PenaltyFunction for PenaltyEvaluator<'a> {
    type State = PointState<'a>;

    fn bounds(&self) -> &Bounds {
        self.problem.bounds()
    }
    fn sigma(&self) -> f64 {
        self.config.sigma
    }
    fn set_sigma(&mut self, sigma: f64) {
        PenaltyEvaluator::set_sigma(self, sigma);
    }
    fn refresh(&mut self, x: &DVector<f64>) -> Result<(), PenaltyError> {
        PenaltyEvaluator::refresh(self, x).map(|_| ())
    }
    fn phi(&self) -> Result<f64, PenaltyError> {
        PenaltyEvaluator::phi(self)
    }
    fn objective(&self) -> Result<f64, PenaltyError> {
        self.objective_value()
    }
    fn primal_residual_inf(&self) -> Result<f64, PenaltyError> {
        Ok(self.state()?.c.amax())
    }
    fn multiplier_norm_inf(&self) -> Result<f64, PenaltyError> {
        let y = &self.state()?.y_sigma;
        Ok(if y.is_empty() { 0.0 } else { y.amax() })
    }
    fn multipliers(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.state()?.y_sigma.clone())
    }
    fn g_sigma_full(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.state()?.g_sigma.clone())
    }
    fn gradient(&self) -> Result<DVector<f64>, PenaltyError> {
        PenaltyEvaluator::gradient(self)
    }
    fn hess_product(&self, d: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        PenaltyEvaluator::hess_product(self, d)
    }
    fn dual_estimate(&self, gradient: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        Ok(gradient.clone())
    }
    fn step_nullspace_of(&self) -> Option<&DMatrix<f64>> {
        None
    }
    fn take_state(&mut self) -> Option<Self::State> {
        PenaltyEvaluator::take_state(self)
    }
    fn restore_state(&mut self, state: Self::State) {
        PenaltyEvaluator::restore_state(self, state)
    }
}
