//! Penalty evaluation when declared linear constraints `B'x = d` stay
//! explicit instead of being penalized.
//!
//! Only the nonlinear residuals enter the penalty,
//! `phi_sigma = f - c1(x)' y_sigma(x)`, while the multiplier estimate
//! `(y_sigma, w_sigma)` is the weighted least-squares solution over the full
//! constraint gradient `C = [A1 B]`. Because the library convention puts the
//! linear rows last in `c(x)`, `C` *is* the problem Jacobian and the
//! three-block augmented systems coincide with the standard assembly; the
//! explicit machinery differs only in the right-hand-side blocks it pads
//! with zeros and the multiplier blocks it extracts:
//!
//! * `Y u = [Y W] (u; 0)`  (pad the nonlinear block),
//! * `Y' v = [I 0] ([Y W]' v)` (drop the `w` rows),
//! * Hessian approximations sandwich with `C (C'QC)^{-1} [A1'; 0]` instead
//!   of the full weighted projector.
//!
//! Keeping the linear constraints explicit lowers the threshold penalty
//! parameter; the solver preserves `B'x = d` by projecting steps onto
//! `null(B')`.

use crate::model::{Bounds, NlpProblem};
use crate::penalty::{EvaluatorConfig, PenaltyError, PenaltyEvaluator, PenaltyFunction, PointState};
use crate::HessianMode;
use nalgebra::{DMatrix, DVector};

pub struct ExplicitPenaltyEvaluator<'a> {
    inner: PenaltyEvaluator<'a>,
    m1: usize,
    m2: usize,
    b: DMatrix<f64>,
    d: DVector<f64>,
    /// Triangular factor of the thin QR of `B`, for least-norm corrections
    /// back onto `B'x = d`.
    b_r: DMatrix<f64>,
}

impl<'a> ExplicitPenaltyEvaluator<'a> {
    /// Wrap `problem`, keeping its declared linear block explicit. Problems
    /// without a declared block degenerate to the implicit evaluator
    /// (`m2 = 0`).
    pub fn new(problem: &'a dyn NlpProblem, config: EvaluatorConfig) -> Self {
        let (b, d) = match problem.linear_block() {
            Some(lb) => (lb.b.clone(), lb.d.clone()),
            None => (
                DMatrix::zeros(problem.num_vars(), 0),
                DVector::zeros(0),
            ),
        };
        let m2 = b.ncols();
        let m1 = problem.num_constraints() - m2;
        let b_r = if m2 > 0 {
            b.clone().qr().r()
        } else {
            DMatrix::zeros(0, 0)
        };
        ExplicitPenaltyEvaluator {
            inner: PenaltyEvaluator::new(problem, config),
            m1,
            m2,
            b,
            d,
            b_r,
        }
    }

    pub fn problem(&self) -> &'a dyn NlpProblem {
        self.inner.problem()
    }

    pub fn split_dims(&self) -> (usize, usize) {
        (self.m1, self.m2)
    }

    pub fn linear_matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// Evaluate at `x`; returns `(phi, y_sigma, w_sigma, g_sigma_partial)`
    /// with `g_sigma_partial = g - A1 y_sigma` (the partial Lagrangian
    /// gradient over the nonlinear constraints only).
    #[allow(clippy::type_complexity)]
    pub fn refresh(
        &mut self,
        x: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>, DVector<f64>, DVector<f64>), PenaltyError> {
        self.inner.refresh(x)?;
        let y = self.y_nonlinear()?;
        let w = self.w_linear()?;
        Ok((self.phi()?, y, w, self.partial_lagrangian_gradient()?))
    }

    /// `phi_sigma = f - c1' y_sigma`: only nonlinear constraints penalized.
    pub fn phi(&self) -> Result<f64, PenaltyError> {
        let f = self.inner.objective_value()?;
        let c = self.inner.constraint_values()?;
        let y = self.inner.y_sigma()?;
        let mut acc = 0.0;
        for i in 0..self.m1 {
            acc += c[i] * y[i];
        }
        Ok(f - acc)
    }

    pub fn y_nonlinear(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.y_sigma()?.rows(0, self.m1).into_owned())
    }

    pub fn w_linear(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.y_sigma()?.rows(self.m1, self.m2).into_owned())
    }

    /// `g - A1 y_sigma`, computed explicitly with one Jacobian product on
    /// the zero-padded nonlinear multiplier (it is not part of the
    /// three-block solution).
    pub fn partial_lagrangian_gradient(&self) -> Result<DVector<f64>, PenaltyError> {
        let g = self.inner.cached_gradient()?;
        let y1 = self.y_nonlinear()?;
        let x = self.current_x()?;
        Ok(g - self.inner.problem().jac_prod(&x, &self.pad_nonlinear(&y1)))
    }

    /// The declared linear block `(B, d)`.
    pub fn linear_data(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.b, &self.d)
    }

    /// Least-norm correction onto `B'x = d`:
    /// `x <- x - B (B'B)^{-1} (B'x - d)` through the cached QR factor.
    pub fn project_onto_linear(&self, x: &mut DVector<f64>) {
        if self.m2 == 0 {
            return;
        }
        let r = self.b.transpose() * &*x - &self.d;
        let t = self
            .b_r
            .transpose()
            .solve_lower_triangular(&r)
            .and_then(|t| self.b_r.solve_upper_triangular(&t));
        if let Some(delta) = t {
            *x -= &self.b * delta;
        }
    }

    /// Residual of the explicit linear constraints at the current point.
    pub fn linear_residual_inf(&self) -> Result<f64, PenaltyError> {
        let c = self.inner.constraint_values()?;
        let mut r: f64 = 0.0;
        for i in self.m1..self.m1 + self.m2 {
            r = r.max(c[i].abs());
        }
        Ok(r)
    }

    fn pad_nonlinear(&self, u: &DVector<f64>) -> DVector<f64> {
        assert_eq!(u.len(), self.m1);
        let mut full = DVector::zeros(self.m1 + self.m2);
        full.rows_mut(0, self.m1).copy_from(u);
        full
    }

    /// `Y u` for a nonlinear-block vector `u`, via the embedding
    /// `[Y W] (u; 0)`.
    pub fn y_product(&self, u: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        self.inner.y_product(&self.pad_nonlinear(u))
    }

    /// `Y' v`: the nonlinear block of the full transpose product.
    pub fn yt_product(&self, v: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.yt_product(v)?.rows(0, self.m1).into_owned())
    }

    /// `grad phi_sigma = g_sigma^y - Y c1`.
    pub fn gradient(&self) -> Result<DVector<f64>, PenaltyError> {
        let c1 = self
            .inner
            .constraint_values()?
            .rows(0, self.m1)
            .into_owned();
        let gy = self.partial_lagrangian_gradient()?;
        Ok(gy - self.y_product(&c1)?)
    }

    /// `(C'QC)^{-1} C' v` (weighted pseudoinverse adjoint product).
    pub fn pinv_adjoint(&self, v: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let problem = self.inner.problem();
        let st_sys = self.inner.system()?;
        let x = self.current_x()?;
        let n = problem.num_vars();
        let ctv = problem.jac_adjoint_prod(&x, v);
        let (_, q, _) = st_sys.solve(&DVector::zeros(n), &(-ctv), &self.inner.config().solve)?;
        Ok(q)
    }

    /// `C (C'QC)^{-1} ubar` for a full multiplier-space vector `ubar`.
    pub fn pinv_apply(&self, ubar: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let problem = self.inner.problem();
        let st_sys = self.inner.system()?;
        let x = self.current_x()?;
        let n = problem.num_vars();
        let (_, q, _) = st_sys.solve(&DVector::zeros(n), ubar, &self.inner.config().solve)?;
        Ok(-problem.jac_prod(&x, &q))
    }

    // Pi_A u = C (C'QC)^{-1} [A1'; 0] u, the partial weighted projector of
    // the Appendix-A Hessian expansions.
    fn partial_projector(&self, u: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let problem = self.inner.problem();
        let x = self.current_x()?;
        let a1t_u = problem
            .jac_adjoint_prod(&x, u)
            .rows(0, self.m1)
            .into_owned();
        self.pinv_apply(&self.pad_nonlinear(&a1t_u))
    }

    // Pi_A' u = [A1 0] (C'QC)^{-1} C' u.
    fn partial_projector_adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let problem = self.inner.problem();
        let x = self.current_x()?;
        let mut q = self.pinv_adjoint(u)?;
        for i in self.m1..self.m1 + self.m2 {
            q[i] = 0.0;
        }
        Ok(problem.jac_prod(&x, &q))
    }

    fn current_x(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.cached_x()?.clone())
    }

    /// Product with the configured Hessian approximation (two solves).
    pub fn hess_product(&self, dvec: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let problem = self.inner.problem();
        let x = self.current_x()?;
        let y_full = self.inner.y_sigma()?.clone();
        let hd = problem.lag_hess_prod(&x, &y_full, dvec);
        match self.inner.config().hessian_mode {
            HessianMode::B1 => {
                let ytd = self.yt_product(dvec)?;
                let a_ytd = problem.jac_prod(&x, &self.pad_nonlinear(&ytd));
                let a1td = problem
                    .jac_adjoint_prod(&x, dvec)
                    .rows(0, self.m1)
                    .into_owned();
                let y_atd = self.y_product(&a1td)?;
                Ok(hd - a_ytd - y_atd)
            }
            HessianMode::B2 => {
                let scaling = self.inner.scaling()?;
                let g_sigma = self.inner.g_sigma()?;
                let sigma = self.inner.sigma();
                let r_of = |v: &DVector<f64>| -> DVector<f64> {
                    scaling.qprime.component_mul(g_sigma).component_mul(v)
                };
                let s1 = scaling.q.component_mul(&hd) + r_of(dvec) - dvec * sigma;
                let t1 = self.partial_projector_adjoint(&s1)?;
                let t2 = self.partial_projector(dvec)?;
                let s2 = problem.lag_hess_prod(&x, &y_full, &scaling.q.component_mul(&t2))
                    + r_of(&t2)
                    - &t2 * sigma;
                Ok(hd - t1 - s2)
            }
        }
    }
}

impl<'a> PenaltyFunction for ExplicitPenaltyEvaluator<'a> {
    type State = PointState<'a>;

    fn bounds(&self) -> &Bounds {
        self.inner.problem().bounds()
    }
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }
    fn set_sigma(&mut self, sigma: f64) {
        self.inner.set_sigma(sigma);
    }
    fn refresh(&mut self, x: &DVector<f64>) -> Result<(), PenaltyError> {
        ExplicitPenaltyEvaluator::refresh(self, x).map(|_| ())
    }
    fn phi(&self) -> Result<f64, PenaltyError> {
        ExplicitPenaltyEvaluator::phi(self)
    }
    fn objective(&self) -> Result<f64, PenaltyError> {
        self.inner.objective_value()
    }
    fn primal_residual_inf(&self) -> Result<f64, PenaltyError> {
        Ok(self.inner.constraint_values()?.amax())
    }
    fn multiplier_norm_inf(&self) -> Result<f64, PenaltyError> {
        let y = self.inner.y_sigma()?;
        Ok(if y.is_empty() { 0.0 } else { y.amax() })
    }
    fn multipliers(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.y_sigma()?.clone())
    }
    fn g_sigma_full(&self) -> Result<DVector<f64>, PenaltyError> {
        Ok(self.inner.g_sigma()?.clone())
    }
    fn gradient(&self) -> Result<DVector<f64>, PenaltyError> {
        ExplicitPenaltyEvaluator::gradient(self)
    }
    fn hess_product(&self, d: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        ExplicitPenaltyEvaluator::hess_product(self, d)
    }
    fn dual_estimate(&self, gradient: &DVector<f64>) -> Result<DVector<f64>, PenaltyError> {
        let w = self.w_linear()?;
        Ok(gradient - &self.b * w)
    }
    fn linear_residual_inf(&self) -> Option<f64> {
        ExplicitPenaltyEvaluator::linear_residual_inf(self).ok()
    }
    fn restore_linear_feasibility(&self, x: &mut DVector<f64>) {
        self.project_onto_linear(x)
    }
    fn step_nullspace_of(&self) -> Option<&DMatrix<f64>> {
        if self.m2 == 0 {
            None
        } else {
            Some(&self.b)
        }
    }
    fn take_state(&mut self) -> Option<Self::State> {
        self.inner.take_state()
    }
    fn restore_state(&mut self, state: Self::State) {
        self.inner.restore_state(state)
    }
}
