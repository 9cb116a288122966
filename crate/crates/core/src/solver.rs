//! Interior trust-region Newton-CG minimization of the penalty function over
//! the bounds.
//!
//! Iterates stay strictly inside `l < x < u`: candidate steps come from a
//! Steihaug-CG solve of the affine-scaled model (diagonal scaling
//! `D = diag(min(x - l, u - x, 1))`, which also appears in the stopping
//! test), and are then capped by a fraction-to-boundary rule. One penalty
//! evaluation per iteration decides acceptance by the usual ratio test.
//! When linear constraints are kept explicit, CG directions are projected
//! onto `null(B' D)`, so `B'x = d` is preserved exactly from a feasible
//! start.
//!
//! Convergence is declared when either branch of the stopping test holds on
//! the computed quantities:
//!
//! ```text
//! ||c(x)||_inf <= eps_p  and  ||N(x) g_sigma(x)||_inf <= eps_d,
//! or  ||N(x) grad phi_sigma(x)||_inf <= eps_d,
//! ```
//!
//! with `eps_p = eps (1 + ||x||_inf + ||c(x0)||_inf)` and
//! `eps_d = eps (1 + ||y||_inf + ||g_sigma(x0)||_inf)`. Inexact inner solves
//! shift stationary points by `O(eta)`, so the gradient branch is assessed
//! exactly as evaluated, matching how inexact evaluations are consumed by
//! the outer solver. Unboundedness of the penalty (sigma below its
//! threshold) is detected by an objective floor.

use crate::augsys::{Backend, Criterion, SolveSettings, SystemMode};
use crate::explicitlin::ExplicitPenaltyEvaluator;
use crate::model::{wrap_with_counters, Bounds, CounterSnapshot, NlpProblem};
use crate::penalty::{EvaluatorConfig, HessianMode, PenaltyError, PenaltyEvaluator, PenaltyFunction};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverStatus {
    Converged,
    Unbounded,
    IterationLimit,
    LinearSolverFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaUpdate {
    Off,
    Heuristic,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Penalty parameter; kept constant unless the heuristic is enabled.
    pub sigma: f64,
    /// Stopping scale `eps`.
    pub epsilon: f64,
    /// Inner linear-solve relative tolerance.
    pub eta: f64,
    pub criterion: Criterion,
    pub hessian_mode: HessianMode,
    pub system_mode: SystemMode,
    pub backend: Backend,
    /// Treat a declared linear block explicitly.
    pub explicit_linear: bool,
    pub delta0: f64,
    pub tau_boundary: f64,
    pub max_iterations: usize,
    /// Unboundedness floor: declared unbounded when
    /// `phi < unbounded_floor * (1 + |phi(x0)|)`.
    pub unbounded_floor: f64,
    pub sigma_update: SigmaUpdate,
    pub capped_scaling: bool,
    /// Cap on CG iterations per outer iteration (default `2n`).
    pub max_cg_iterations: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            sigma: 1.0,
            epsilon: 1e-8,
            eta: 1e-10,
            criterion: Criterion::ResidualBased,
            hessian_mode: HessianMode::B2,
            system_mode: SystemMode::Symmetric,
            backend: Backend::Direct,
            explicit_linear: false,
            delta0: 1.0,
            tau_boundary: 0.995,
            max_iterations: 500,
            unbounded_floor: -1e12,
            sigma_update: SigmaUpdate::Off,
            capped_scaling: false,
            max_cg_iterations: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HistoryEntry {
    pub phi: f64,
    pub primal_inf: f64,
    pub radius: f64,
    /// Residual of the explicit linear block, when one is maintained.
    pub linear_inf: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub status: SolverStatus,
    pub iterations: usize,
    pub counters: CounterSnapshot,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub objective: f64,
    pub phi: f64,
    /// `||c(x)||_inf` at exit.
    pub primal_residual: f64,
    /// `||N g_sigma||_inf` and `||N grad phi||_inf` at exit.
    pub dual_residual_gsigma: f64,
    pub dual_residual_grad: f64,
    pub epsilon_primal: f64,
    pub epsilon_dual: f64,
    pub sigma_final: f64,
    pub sigma_capped: bool,
    pub history: Vec<HistoryEntry>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == SolverStatus::Converged
    }
}

/// Bound-multiplier estimate at the evaluator's current point:
/// `z = grad phi_sigma` (implicit) or `grad phi_sigma - B w_sigma`
/// (explicit mode).
pub fn dual_estimate<E: PenaltyFunction>(evaluator: &E) -> Result<DVector<f64>, PenaltyError> {
    let grad = evaluator.gradient()?;
    evaluator.dual_estimate(&grad)
}

/// Minimize `phi_sigma` over the problem's bounds from its standard start.
pub fn minimize(problem: &dyn NlpProblem, config: &SolverConfig) -> SolveReport {
    minimize_from(problem, &problem.initial_point(), config)
}

/// Minimize from a caller-supplied strictly interior start.
pub fn minimize_from(problem: &dyn NlpProblem, x0: &DVector<f64>, config: &SolverConfig) -> SolveReport {
    let counted = wrap_with_counters(problem);
    let eval_config = EvaluatorConfig {
        sigma: config.sigma,
        hessian_mode: config.hessian_mode,
        system_mode: config.system_mode,
        backend: config.backend,
        solve: SolveSettings {
            eta: config.eta,
            criterion: config.criterion,
            sigma_min_bound: problem.sigma_min_bound(),
            ..Default::default()
        },
        capped_scaling: config.capped_scaling,
    };
    let mut report = if config.explicit_linear && problem.linear_block().is_some() {
        let mut eval = ExplicitPenaltyEvaluator::new(&counted, eval_config);
        drive(&mut eval, x0, config)
    } else {
        let mut eval = PenaltyEvaluator::new(&counted, eval_config);
        drive(&mut eval, x0, config)
    };
    report.counters = counted.snapshot();
    report
}

struct Workspace {
    x: DVector<f64>,
    radius: f64,
    history: Vec<HistoryEntry>,
    iterations: usize,
    sigma_capped: bool,
    /// `||c||_inf` trail of accepted iterates for the sigma heuristic.
    accepted_cnorms: Vec<f64>,
    /// Stopping thresholds from the most recent test, for reporting.
    eps_p: f64,
    eps_d: f64,
}

fn drive<E: PenaltyFunction>(eval: &mut E, x0: &DVector<f64>, config: &SolverConfig) -> SolveReport {
    let bounds = eval.bounds().clone();
    let mut ws = Workspace {
        x: x0.clone(),
        radius: config.delta0,
        history: Vec::new(),
        iterations: 0,
        sigma_capped: false,
        accepted_cnorms: Vec::new(),
        eps_p: config.epsilon,
        eps_d: config.epsilon,
    };

    macro_rules! bail {
        ($status:expr, $eval:expr, $ws:expr) => {
            return finish($status, $eval, &$ws)
        };
    }

    if eval.refresh(&ws.x).is_err() {
        bail!(SolverStatus::LinearSolverFailure, eval, ws);
    }
    let phi0 = eval.phi().unwrap_or(f64::INFINITY);
    let c0_inf = eval.primal_residual_inf().unwrap_or(f64::INFINITY);
    let gs0_inf = eval
        .g_sigma_full()
        .map(|g| if g.is_empty() { 0.0 } else { g.amax() })
        .unwrap_or(f64::INFINITY);
    let floor = config.unbounded_floor * (1.0 + phi0.abs());
    // with the heuristic enabled, react to a runaway penalty long before the
    // hard unboundedness floor, while the excursion is still recoverable
    let heuristic_floor = match config.sigma_update {
        SigmaUpdate::Heuristic => -100.0 * (1.0 + phi0.abs()),
        SigmaUpdate::Off => floor,
    };

    let mut phi = phi0;
    while ws.iterations < config.max_iterations {
        ws.iterations += 1;

        let grad = match eval.gradient() {
            Ok(g) => g,
            Err(_) => bail!(SolverStatus::LinearSolverFailure, eval, ws),
        };
        let tests = match residuals(eval, &bounds, &ws.x, &grad, c0_inf, gs0_inf, config.epsilon) {
            Ok(t) => t,
            Err(_) => bail!(SolverStatus::LinearSolverFailure, eval, ws),
        };
        ws.eps_p = tests.eps_p;
        ws.eps_d = tests.eps_d;
        ws.history.push(HistoryEntry {
            phi,
            primal_inf: tests.primal,
            radius: ws.radius,
            linear_inf: eval.linear_residual_inf(),
        });
        if tests.converged() {
            bail!(SolverStatus::Converged, eval, ws);
        }
        if phi < heuristic_floor {
            // with the heuristic on, an unbounded-looking penalty means
            // sigma is below its threshold: raise it and keep going
            if config.sigma_update == SigmaUpdate::Heuristic && eval.sigma() < 1e8 {
                eval.set_sigma((eval.sigma() * 10.0).min(1e8));
                if eval.refresh(&ws.x).is_err() {
                    bail!(SolverStatus::LinearSolverFailure, eval, ws);
                }
                phi = eval.phi().unwrap_or(phi);
                ws.accepted_cnorms.clear();
                continue;
            }
            if phi < floor {
                bail!(SolverStatus::Unbounded, eval, ws);
            }
        }

        // ----- Steihaug-CG on the affine-scaled model -----
        let d_scale = bounds.n_diag(&ws.x);
        let projector = eval.step_nullspace_of().map(|b| NullProjector::new(b, &d_scale));
        let g_scaled = {
            let mut g = grad.component_mul(&d_scale);
            if let Some(p) = &projector {
                g = p.project(g);
            }
            g
        };
        let gnorm = g_scaled.norm();
        if gnorm <= 1e-30 {
            // scaled-projected stationary but the stopping test is unmet
            bail!(SolverStatus::IterationLimit, eval, ws);
        }
        let cg_cap = config.max_cg_iterations.unwrap_or(2 * ws.x.len());
        let cg = match steihaug_cg(eval, &d_scale, projector.as_ref(), &g_scaled, ws.radius, cg_cap) {
            Ok(c) => c,
            Err(_) => bail!(SolverStatus::LinearSolverFailure, eval, ws),
        };

        // ----- fraction-to-boundary cap and trial point -----
        let p = cg.step.component_mul(&d_scale);
        let alpha_max = max_step_to_bounds(&bounds, &ws.x, &p);
        let beta = (config.tau_boundary * alpha_max).min(1.0);
        let pred = -(beta * cg.g_dot_p + 0.5 * beta * beta * cg.p_dot_hp);
        let mut x_trial = &ws.x + &p * beta;
        eval.restore_linear_feasibility(&mut x_trial);
        // below this, actual reduction is indistinguishable from rounding in
        // phi; such steps are accepted without the ratio test
        let noise = 64.0 * f64::EPSILON * (1.0 + phi.abs());

        let accepted = if pred <= 0.0 || !x_trial.iter().all(|v| v.is_finite()) {
            false
        } else {
            let old_state = eval.take_state();
            match eval.refresh(&x_trial) {
                Ok(()) => {
                    let phi_trial = eval.phi().unwrap_or(f64::INFINITY);
                    if phi_trial < floor && config.sigma_update == SigmaUpdate::Off {
                        ws.x = x_trial;
                        bail!(SolverStatus::Unbounded, eval, ws);
                    }
                    let ared = phi - phi_trial;
                    let rho = ared / pred;
                    if (rho >= 1e-4 && ared > 0.0) || (pred <= noise && ared >= -noise) {
                        ws.x = x_trial;
                        phi = phi_trial;
                        if pred > noise {
                            if rho >= 0.75 && (cg.hit_boundary || beta < 1.0) {
                                ws.radius = (2.5 * ws.radius).min(1e10);
                            } else if rho < 0.25 {
                                ws.radius *= 0.25;
                            }
                        }
                        true
                    } else {
                        let _ = eval.take_state(); // discard the trial point
                        if let Some(st) = old_state {
                            eval.restore_state(st);
                        }
                        false
                    }
                }
                Err(_) => {
                    if let Some(st) = old_state {
                        eval.restore_state(st);
                    }
                    false
                }
            }
        };
        if !accepted {
            ws.radius *= 0.25;
            if ws.radius < 1e-18 * (1.0 + ws.x.norm()) {
                bail!(SolverStatus::IterationLimit, eval, ws);
            }
            continue;
        }

        // ----- optional penalty-parameter heuristic -----
        if config.sigma_update == SigmaUpdate::Heuristic {
            let cnow = eval.primal_residual_inf().unwrap_or(f64::INFINITY);
            ws.accepted_cnorms.push(cnow);
            let window = 10;
            if ws.accepted_cnorms.len() > window {
                let then = ws.accepted_cnorms[ws.accepted_cnorms.len() - 1 - window];
                let dual_small = tests.dual_grad <= tests.eps_d.sqrt() || tests.dual_gsigma <= tests.eps_d.sqrt();
                if cnow > 0.5 * then && cnow > tests.eps_p && dual_small {
                    let sigma = eval.sigma();
                    if sigma >= 1e8 {
                        ws.sigma_capped = true;
                        bail!(SolverStatus::IterationLimit, eval, ws);
                    }
                    eval.set_sigma((sigma * 10.0).min(1e8));
                    if eval.refresh(&ws.x).is_err() {
                        bail!(SolverStatus::LinearSolverFailure, eval, ws);
                    }
                    phi = eval.phi().unwrap_or(phi);
                    ws.accepted_cnorms.clear();
                }
            }
        }
    }
    finish(SolverStatus::IterationLimit, eval, &ws)
}

struct Residuals {
    primal: f64,
    dual_gsigma: f64,
    dual_grad: f64,
    eps_p: f64,
    eps_d: f64,
}

impl Residuals {
    fn converged(&self) -> bool {
        (self.primal <= self.eps_p && self.dual_gsigma <= self.eps_d) || self.dual_grad <= self.eps_d
    }
}

fn residuals<E: PenaltyFunction>(
    eval: &E,
    bounds: &Bounds,
    x: &DVector<f64>,
    grad: &DVector<f64>,
    c0_inf: f64,
    gs0_inf: f64,
    epsilon: f64,
) -> Result<Residuals, PenaltyError> {
    let nx = bounds.n_diag(x);
    let primal = eval.primal_residual_inf()?;
    let gs = eval.g_sigma_full()?;
    let dual_gsigma = nx.component_mul(&gs).amax();
    let z = eval.dual_estimate(grad)?;
    let dual_grad = nx.component_mul(&z).amax();
    let eps_p = epsilon * (1.0 + x.amax() + c0_inf);
    let eps_d = epsilon * (1.0 + eval.multiplier_norm_inf()? + gs0_inf);
    Ok(Residuals {
        primal,
        dual_gsigma,
        dual_grad,
        eps_p,
        eps_d,
    })
}

fn finish<E: PenaltyFunction>(status: SolverStatus, eval: &mut E, ws: &Workspace) -> SolveReport {
    let n = ws.x.len();
    let bounds = eval.bounds().clone();
    let (grad, z) = match eval.gradient() {
        Ok(g) => {
            let z = eval.dual_estimate(&g).unwrap_or_else(|_| DVector::zeros(n));
            (g, z)
        }
        Err(_) => (DVector::zeros(n), DVector::zeros(n)),
    };
    let nx = bounds.n_diag(&ws.x);
    let gs = eval.g_sigma_full().unwrap_or_else(|_| DVector::zeros(n));
    let y = eval.multipliers().unwrap_or_else(|_| DVector::zeros(0));
    let primal = eval.primal_residual_inf().unwrap_or(f64::NAN);
    let phi = eval.phi().unwrap_or(f64::NAN);
    SolveReport {
        status,
        iterations: ws.iterations,
        counters: CounterSnapshot::default(),
        objective: eval.objective().unwrap_or(f64::NAN),
        x: ws.x.iter().cloned().collect(),
        y: y.iter().cloned().collect(),
        z: z.iter().cloned().collect(),
        phi,
        primal_residual: primal,
        dual_residual_gsigma: if gs.is_empty() { 0.0 } else { nx.component_mul(&gs).amax() },
        dual_residual_grad: if grad.is_empty() { 0.0 } else { nx.component_mul(&z).amax() },
        epsilon_primal: ws.eps_p,
        epsilon_dual: ws.eps_d,
        sigma_final: eval.sigma(),
        sigma_capped: ws.sigma_capped,
        history: ws.history.clone(),
    }
}

/// Orthonormal projector onto `null((D B)')` built from a thin QR.
struct NullProjector {
    u: DMatrix<f64>,
}

impl NullProjector {
    fn new(b: &DMatrix<f64>, d_scale: &DVector<f64>) -> Self {
        let mut db = b.clone();
        for i in 0..db.nrows() {
            let mut row = db.row_mut(i);
            row *= d_scale[i];
        }
        let u = db.qr().q();
        NullProjector { u }
    }

    fn project(&self, v: DVector<f64>) -> DVector<f64> {
        let coeff = self.u.transpose() * &v;
        v - &self.u * coeff
    }
}

struct CgOutcome {
    step: DVector<f64>,
    g_dot_p: f64,
    p_dot_hp: f64,
    hit_boundary: bool,
}

// Steihaug truncated CG on the scaled model
//   min g_s' p + p' (D B D) p / 2   s.t. ||p|| <= radius,
// where Hessian products go through the evaluator (two augmented solves
// each). Tracks H p incrementally so model values need no extra products.
fn steihaug_cg<E: PenaltyFunction>(
    eval: &E,
    d_scale: &DVector<f64>,
    projector: Option<&NullProjector>,
    g_scaled: &DVector<f64>,
    radius: f64,
    max_iter: usize,
) -> Result<CgOutcome, PenaltyError> {
    let n = g_scaled.len();
    let hess = |v: &DVector<f64>| -> Result<DVector<f64>, PenaltyError> {
        let hv = eval.hess_product(&v.component_mul(d_scale))?;
        let mut out = hv.component_mul(d_scale);
        if let Some(p) = projector {
            out = p.project(out);
        }
        Ok(out)
    };
    let gnorm = g_scaled.norm();
    let rtol = 0.1_f64.min(gnorm.sqrt()) * gnorm;

    let mut p = DVector::zeros(n);
    let mut hp = DVector::zeros(n);
    let mut r = g_scaled.clone();
    let mut d = -r.clone();
    let mut rr = r.norm_squared();
    let mut hit_boundary = false;

    let boundary_tau = |p: &DVector<f64>, d: &DVector<f64>| -> f64 {
        // positive root of ||p + tau d|| = radius
        let dd = d.norm_squared();
        let pd = p.dot(d);
        let pp = p.norm_squared();
        let disc = (pd * pd + dd * (radius * radius - pp)).max(0.0);
        (-pd + disc.sqrt()) / dd
    };

    for _ in 0..max_iter {
        let hd = hess(&d)?;
        let kappa = d.dot(&hd);
        if kappa <= 1e-14 * d.norm_squared() {
            let tau = boundary_tau(&p, &d);
            p += &d * tau;
            hp += &hd * tau;
            hit_boundary = true;
            break;
        }
        let alpha = rr / kappa;
        if (&p + &d * alpha).norm() >= radius {
            let tau = boundary_tau(&p, &d);
            p += &d * tau;
            hp += &hd * tau;
            hit_boundary = true;
            break;
        }
        p += &d * alpha;
        hp += &hd * alpha;
        r += &hd * alpha;
        let rr_new = r.norm_squared();
        if rr_new.sqrt() <= rtol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        d = -&r + &d * beta;
    }
    Ok(CgOutcome {
        g_dot_p: g_scaled.dot(&p),
        p_dot_hp: p.dot(&hp),
        step: p,
        hit_boundary,
    })
}

fn max_step_to_bounds(bounds: &Bounds, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for j in 0..x.len() {
        if p[j] > 0.0 && bounds.upper[j].is_finite() {
            alpha = alpha.min((bounds.upper[j] - x[j]) / p[j]);
        } else if p[j] < 0.0 && bounds.lower[j].is_finite() {
            alpha = alpha.min((bounds.lower[j] - x[j]) / p[j]);
        }
    }
    alpha
}
