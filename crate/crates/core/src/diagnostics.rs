//! Dense and finite-difference reference oracles, KKT verification, and the
//! threshold penalty parameter.
//!
//! The threshold at a KKT point `(x*, y*)` is
//!
//! ```text
//! sigma_bar  = lambda_max( P Q^(1/2) H_L(x*,y*) Q^(1/2) P ) / 2,
//! sigma_star = max(sigma_bar, 0),
//! ```
//!
//! with `P` the orthogonal projector onto `range(Q^(1/2) A)`. Above
//! `sigma_star` the penalty Hessian has nonnegative curvature on the
//! critical cone and stationary points of the penalty problem are feasible.
//! When declared linear constraints are kept explicit, the matrix is
//! additionally sandwiched by the projector onto `null((Q^(1/2) B)')`,
//! which can only shrink the threshold.
//!
//! Everything here is test-time ground truth: dense weighted least squares
//! for the multiplier estimate, a dense multiplier Jacobian solved column by
//! column, FD Hessians of the penalty, and dense `B1`/`B2`. Small problems
//! only.

use crate::model::{KktPoint, NlpProblem};
use crate::scaling::{build_scaling, ScalingDiag, ScalingParams};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("point is not approximately KKT (primal {primal:.3e}, dual {dual:.3e}, tolerance {tol:.3e})")]
    NotKkt { primal: f64, dual: f64, tol: f64 },
    #[error("problem too large for dense diagnostics (n = {n})")]
    TooLarge { n: usize },
    #[error("scaled Jacobian is rank deficient")]
    RankDeficient,
    #[error("degenerate complementarity at component {index}: active bound with |z| = {z:.3e}")]
    Degenerate { index: usize, z: f64 },
    #[error("point is outside the bounds")]
    NotInterior,
    #[error("power iteration did not converge within {0} iterations")]
    PowerIteration(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Implicit,
    Explicit,
}

#[derive(Debug, Clone, Serialize)]
pub struct ThresholdReport {
    pub sigma_star: f64,
    /// Signed half-eigenvalue before the max with zero.
    pub sigma_bar: f64,
    pub mode: ThresholdMode,
    /// `||M v - lambda v||` for the returned extremal eigenpair.
    pub eigen_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KktReport {
    pub primal_feas: f64,
    pub dual_feas: f64,
    pub complementarity: f64,
    pub sign_conditions: f64,
    pub is_first_order: bool,
    pub cone_min_curvature: Option<f64>,
}

// Scaling at x with the library-default widths.
fn scaling_at(problem: &dyn NlpProblem, x: &DVector<f64>) -> Result<ScalingDiag, DiagnosticsError> {
    let params = ScalingParams::from_bounds(problem.bounds());
    build_scaling(x, problem.bounds(), &params).map_err(|_| DiagnosticsError::NotInterior)
}

/// Dense `H_L(x, y)` assembled by probing the Hessian product.
pub fn dense_lagrangian_hessian(problem: &dyn NlpProblem, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
    let n = problem.num_vars();
    let mut h = DMatrix::zeros(n, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        h.set_column(j, &problem.lag_hess_prod(x, y, &e));
        e[j] = 0.0;
    }
    // symmetrize away probing round-off
    let ht = h.transpose();
    (h + ht) * 0.5
}

// Orthonormal basis of range(M) for a tall dense M with full column rank.
fn orthonormal_range(m: &DMatrix<f64>) -> Result<DMatrix<f64>, DiagnosticsError> {
    if m.ncols() == 0 {
        return Ok(DMatrix::zeros(m.nrows(), 0));
    }
    let qr = m.clone().col_piv_qr();
    let r = qr.r();
    let rmax = (0..r.nrows().min(r.ncols()))
        .map(|i| r[(i, i)].abs())
        .fold(0.0, f64::max);
    for i in 0..r.nrows().min(r.ncols()) {
        if r[(i, i)].abs() <= 1e-12 * rmax.max(1e-300) {
            return Err(DiagnosticsError::RankDeficient);
        }
    }
    // col-piv QR permutes columns; the thin Q still spans range(M)
    Ok(qr.q())
}

/// Threshold penalty parameter at an approximate KKT pair `(x*, y*)`.
pub fn threshold_sigma(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    mode: ThresholdMode,
) -> Result<ThresholdReport, DiagnosticsError> {
    let n = problem.num_vars();
    if n > 2000 {
        return Err(DiagnosticsError::TooLarge { n });
    }
    verify_approximate_kkt(problem, x, y)?;
    let scaling = scaling_at(problem, x)?;
    let sq = scaling.q_sqrt();
    let a = problem.jacobian(x);
    let mut aq = a;
    for i in 0..n {
        let mut row = aq.row_mut(i);
        row *= sq[i];
    }
    let u = orthonormal_range(&aq)?;

    let hl = dense_lagrangian_hessian(problem, x, y);
    // Q^(1/2) H_L Q^(1/2)
    let mut mid = hl;
    for i in 0..n {
        let mut row = mid.row_mut(i);
        row *= sq[i];
    }
    for j in 0..n {
        let mut col = mid.column_mut(j);
        col *= sq[j];
    }
    // P M P with P = U U'
    let pm = &u * (u.transpose() * &mid * &u) * u.transpose();
    let matrix = match mode {
        ThresholdMode::Implicit => pm,
        ThresholdMode::Explicit => {
            let (bu, has_block) = match problem.linear_block() {
                Some(lb) => {
                    let mut bq = lb.b.clone();
                    for i in 0..n {
                        let mut row = bq.row_mut(i);
                        row *= sq[i];
                    }
                    (orthonormal_range(&bq)?, true)
                }
                None => (DMatrix::zeros(n, 0), false),
            };
            if !has_block {
                pm
            } else {
                // Pbar = I - Ub Ub'; sandwich Pbar * PM * Pbar
                let t = &bu * (bu.transpose() * &pm);
                let left = &pm - t;
                &left - (&left * &bu) * bu.transpose()
            }
        }
    };
    let sym = (&matrix + matrix.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let (mut lambda_max, mut idx) = (f64::NEG_INFINITY, 0);
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l > lambda_max {
            lambda_max = l;
            idx = i;
        }
    }
    let v = eig.eigenvectors.column(idx).into_owned();
    let eigen_residual = (&sym * &v - &v * lambda_max).norm();
    let sigma_bar = 0.5 * lambda_max;
    Ok(ThresholdReport {
        sigma_star: sigma_bar.max(0.0),
        sigma_bar,
        mode,
        eigen_residual,
    })
}

/// Matrix-free variant for grid problems: shifted power iteration on
/// `v -> P Q^(1/2) H_L Q^(1/2) P v`, with `P v` applied through dense
/// normal-equation solves of the scaled Jacobian.
pub fn threshold_sigma_power(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ThresholdReport, DiagnosticsError> {
    verify_approximate_kkt(problem, x, y)?;
    let n = problem.num_vars();
    let scaling = scaling_at(problem, x)?;
    let sq = scaling.q_sqrt();
    let a = problem.jacobian(x);
    let mut aq = a;
    for i in 0..n {
        let mut row = aq.row_mut(i);
        row *= sq[i];
    }
    let gram = aq.transpose() * &aq;
    let chol = gram.cholesky().ok_or(DiagnosticsError::RankDeficient)?;
    let project = |v: &DVector<f64>| -> DVector<f64> {
        let s = chol.solve(&(aq.transpose() * v));
        &aq * s
    };
    let op = |v: &DVector<f64>| -> DVector<f64> {
        let pv = project(v);
        let hv = problem.lag_hess_prod(x, y, &pv.component_mul(&sq));
        project(&hv.component_mul(&sq))
    };
    let power = |shift: f64, start: &DVector<f64>| -> Result<(f64, DVector<f64>), DiagnosticsError> {
        let mut v = start.clone();
        let mut v_norm = v.norm();
        if v_norm == 0.0 {
            return Err(DiagnosticsError::RankDeficient);
        }
        v /= v_norm;
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let mut w = op(&v) + &v * shift;
            v_norm = w.norm();
            if v_norm == 0.0 {
                return Ok((shift, v));
            }
            w /= v_norm;
            let new_lambda = w.dot(&op(&w)) + shift;
            let done = (new_lambda - lambda).abs() <= tol * (1.0 + new_lambda.abs());
            lambda = new_lambda;
            v = w;
            if done {
                return Ok((lambda, v));
            }
        }
        Err(DiagnosticsError::PowerIteration(max_iter))
    };
    let start = DVector::from_fn(n, |i, _| ((i * 2654435761 + 1) % 1000) as f64 / 1000.0 - 0.5);
    // pass 1: spectral radius; pass 2: shift so the target eigenvalue is extremal
    let (lam1, v1) = power(0.0, &start)?;
    let (lambda_max, v) = if lam1 >= 0.0 {
        (lam1, v1)
    } else {
        let rho = lam1.abs();
        let (shifted, v2) = power(rho, &start)?;
        (shifted - rho, v2)
    };
    let eigen_residual = (op(&v) - &v * lambda_max).norm();
    let sigma_bar = 0.5 * lambda_max;
    Ok(ThresholdReport {
        sigma_star: sigma_bar.max(0.0),
        sigma_bar,
        mode: ThresholdMode::Implicit,
        eigen_residual,
    })
}

// Loose first-order check used as the precondition of threshold_sigma.
fn verify_approximate_kkt(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(), DiagnosticsError> {
    let g = problem.gradient(x);
    let c = problem.constraints(x);
    let z = &g - problem.jac_prod(x, y);
    let scale = 1.0 + g.amax() + if y.is_empty() { 0.0 } else { y.amax() };
    let tol = 1e-4 * scale;
    let primal = if c.is_empty() { 0.0 } else { c.amax() };
    // off the active set the bound multiplier must vanish
    let nx = problem.bounds().n_diag(x);
    let dual = nx.component_mul(&z).amax();
    if primal > tol || dual > tol {
        return Err(DiagnosticsError::NotKkt { primal, dual, tol });
    }
    Ok(())
}

/// First-order KKT verification at a supplied primal-dual triple.
/// Residuals are reported raw; `is_first_order` compares them to
/// `tolerance`. With `compute_cone` set, the minimum curvature of the
/// Lagrangian Hessian over the critical cone is appended (dense
/// eigendecomposition on a null-space basis; strict complementarity
/// required).
pub fn verify_kkt(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    tolerance: f64,
    compute_cone: bool,
) -> Result<KktReport, DiagnosticsError> {
    let bounds = problem.bounds();
    let c = problem.constraints(x);
    let g = problem.gradient(x);
    let mut primal = if c.is_empty() { 0.0 } else { c.amax() };
    for j in 0..x.len() {
        primal = primal.max(bounds.lower[j] - x[j]).max(x[j] - bounds.upper[j]);
    }
    let stat = &g - problem.jac_prod(x, y) - z;
    let dual = stat.amax();
    // complementarity via z .* min(distance, 1): zero under strict
    // complementarity without classifying activities
    let nx = bounds.n_diag(x);
    let complementarity = nx.component_mul(z).amax();
    // sign conditions need an activity classification
    let atol = tolerance.sqrt().max(1e-10);
    let mut sign: f64 = 0.0;
    for j in 0..x.len() {
        let dl = x[j] - bounds.lower[j];
        let du = bounds.upper[j] - x[j];
        if dl <= atol * (1.0 + x[j].abs()) {
            sign = sign.max(-z[j]);
        } else if du <= atol * (1.0 + x[j].abs()) {
            sign = sign.max(z[j]);
        }
    }
    let is_first_order =
        primal <= tolerance && dual <= tolerance && complementarity <= tolerance && sign <= tolerance;
    let cone_min_curvature = if compute_cone {
        critical_cone_curvature(problem, x, y, z, atol)?
    } else {
        None
    };
    Ok(KktReport {
        primal_feas: primal,
        dual_feas: dual,
        complementarity,
        sign_conditions: sign,
        is_first_order,
        cone_min_curvature,
    })
}

// Minimum eigenvalue of H_L restricted to the critical cone
// C(x, z) = { p : p_j = 0 where z_j != 0, A'p = 0 }, realized under strict
// complementarity. Returns None for a trivial cone.
fn critical_cone_curvature(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
    atol: f64,
) -> Result<Option<f64>, DiagnosticsError> {
    let bounds = problem.bounds();
    let n = problem.num_vars();
    let ztol = atol * (1.0 + z.amax());
    let mut free = Vec::new();
    for j in 0..n {
        let dist = (x[j] - bounds.lower[j]).min(bounds.upper[j] - x[j]);
        let active = dist <= atol * (1.0 + x[j].abs());
        let z_zero = z[j].abs() <= ztol;
        if active && z_zero {
            return Err(DiagnosticsError::Degenerate { index: j, z: z[j] });
        }
        if z_zero {
            free.push(j);
        }
    }
    if free.is_empty() {
        return Ok(None);
    }
    // null-space basis of the free-column Jacobian block via SVD
    let a = problem.jacobian(x); // n x m
    let m = problem.num_constraints();
    let mut af = DMatrix::zeros(m, free.len());
    for (col, &j) in free.iter().enumerate() {
        for i in 0..m {
            af[(i, col)] = a[(j, i)];
        }
    }
    let svd = af.clone().svd(false, true);
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > 1e-12 * smax.max(1e-300))
        .count();
    let null_dim = free.len() - rank;
    if null_dim == 0 {
        return Ok(None);
    }
    let mut basis = DMatrix::zeros(n, null_dim);
    for k in 0..null_dim {
        let row = vt.row(rank + k);
        for (col, &j) in free.iter().enumerate() {
            basis[(j, k)] = row[col];
        }
    }
    let hl = dense_lagrangian_hessian(problem, x, y);
    let reduced = basis.transpose() * hl * &basis;
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(Some(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)))
}

/// Least-squares KKT multipliers at a (near-)solution: solves
/// `min || g - A y - E_act z_act ||` and scatters `z_act` back. The
/// activity set is `min(x-l, u-x) <= atol (1 + |x|)`.
pub fn dense_kkt_multipliers(problem: &dyn NlpProblem, x: &DVector<f64>, atol: f64) -> KktPoint {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    let bounds = problem.bounds();
    let active: Vec<usize> = (0..n)
        .filter(|&j| {
            let dist = (x[j] - bounds.lower[j]).min(bounds.upper[j] - x[j]);
            dist <= atol * (1.0 + x[j].abs())
        })
        .collect();
    let a = problem.jacobian(x);
    let mut sys = DMatrix::zeros(n, m + active.len());
    sys.view_mut((0, 0), (n, m)).copy_from(&a);
    for (k, &j) in active.iter().enumerate() {
        sys[(j, m + k)] = 1.0;
    }
    let g = problem.gradient(x);
    let sol = sys
        .svd(true, true)
        .solve(&g, 1e-12)
        .expect("least-squares solve");
    let y = sol.rows(0, m).into_owned();
    let mut z = DVector::zeros(n);
    for (k, &j) in active.iter().enumerate() {
        z[j] = sol[m + k];
    }
    KktPoint::new(x.clone(), y, z, bounds, atol)
}

/// Dense ground truth for the matrix-free penalty machinery at one point.
pub struct DenseOracles {
    pub y_sigma: DVector<f64>,
    pub g_sigma: DVector<f64>,
    pub phi: f64,
    pub grad_phi: DVector<f64>,
    /// `Y`, `n` by `m`.
    pub y_matrix: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub b2: DMatrix<f64>,
}

/// Assemble the dense oracles (small problems only, `n <= 200`).
pub fn dense_oracles(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    sigma: f64,
) -> Result<DenseOracles, DiagnosticsError> {
    let n = problem.num_vars();
    if n > 200 {
        return Err(DiagnosticsError::TooLarge { n });
    }
    let m = problem.num_constraints();
    let scaling = scaling_at(problem, x)?;
    let a = problem.jacobian(x);
    let q = &scaling.q;
    let mut qa = a.clone();
    for i in 0..n {
        let mut row = qa.row_mut(i);
        row *= q[i];
    }
    let gram = a.transpose() * &qa; // A'QA
    let lu = gram.clone().lu();
    let g = problem.gradient(x);
    let c = problem.constraints(x);
    let f = problem.objective(x);
    let rhs = a.transpose() * q.component_mul(&g) - &c * sigma;
    let y_sigma = lu.solve(&rhs).ok_or(DiagnosticsError::RankDeficient)?;
    let g_sigma = &g - &a * &y_sigma;
    let phi = f - c.dot(&y_sigma);

    let h_sigma = dense_lagrangian_hessian(problem, x, &y_sigma);
    // R_sigma = diag(q' .* g_sigma)
    let r_diag = scaling.qprime.component_mul(&g_sigma);
    // S_sigma (m x n): column j is S(x, Q g_sigma) e_j
    let qg = q.component_mul(&g_sigma);
    let mut s_sigma = DMatrix::zeros(m, n);
    let mut e = DVector::zeros(n);
    for j in 0..n {
        e[j] = 1.0;
        s_sigma.set_column(j, &problem.second_jac_prod(x, &qg, &e));
        e[j] = 0.0;
    }
    // A'QA Y' = A'(Q H - sigma I + R) + S
    let mut qh = h_sigma.clone();
    for i in 0..n {
        let mut row = qh.row_mut(i);
        row *= q[i];
    }
    for i in 0..n {
        qh[(i, i)] -= sigma;
        qh[(i, i)] += r_diag[i];
    }
    let rhs_mat = a.transpose() * qh + &s_sigma;
    let yt = lu.solve(&rhs_mat).ok_or(DiagnosticsError::RankDeficient)?; // m x n
    let y_matrix = yt.transpose();
    let grad_phi = &g_sigma - &y_matrix * &c;

    let b1 = &h_sigma - &a * &yt - &y_matrix * a.transpose();
    // Ptilde = A (A'QA)^{-1} A'
    let inv_at = lu.solve(&a.transpose()).ok_or(DiagnosticsError::RankDeficient)?;
    let p_tilde = &a * inv_at;
    // (Q H + R - sigma I) and its transpose-side twin
    let mut qh_r = h_sigma.clone();
    for i in 0..n {
        let mut row = qh_r.row_mut(i);
        row *= q[i];
    }
    for i in 0..n {
        qh_r[(i, i)] += r_diag[i] - sigma;
    }
    let mut hq_r = h_sigma.clone();
    for j in 0..n {
        let mut col = hq_r.column_mut(j);
        col *= q[j];
    }
    for i in 0..n {
        hq_r[(i, i)] += r_diag[i] - sigma;
    }
    let b2 = &h_sigma - &p_tilde * &qh_r - &hq_r * &p_tilde;
    Ok(DenseOracles {
        y_sigma,
        g_sigma,
        phi,
        grad_phi,
        y_matrix,
        b1,
        b2,
    })
}

/// `phi_sigma` alone through the dense route (for FD checks).
pub fn dense_phi(problem: &dyn NlpProblem, x: &DVector<f64>, sigma: f64) -> Result<f64, DiagnosticsError> {
    let scaling = scaling_at(problem, x)?;
    let a = problem.jacobian(x);
    let q = &scaling.q;
    let n = problem.num_vars();
    let mut qa = a.clone();
    for i in 0..n {
        let mut row = qa.row_mut(i);
        row *= q[i];
    }
    let gram = a.transpose() * &qa;
    let g = problem.gradient(x);
    let c = problem.constraints(x);
    let rhs = a.transpose() * q.component_mul(&g) - &c * sigma;
    let y = gram.lu().solve(&rhs).ok_or(DiagnosticsError::RankDeficient)?;
    Ok(problem.objective(x) - c.dot(&y))
}

/// Central-difference gradient of `phi_sigma` (dense route).
pub fn fd_grad_phi(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    sigma: f64,
    step: f64,
) -> Result<DVector<f64>, DiagnosticsError> {
    let n = problem.num_vars();
    let mut g = DVector::zeros(n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = step * (1.0 + x[j].abs());
        xp[j] = x[j] + h;
        let fp = dense_phi(problem, &xp, sigma)?;
        xp[j] = x[j] - h;
        let fm = dense_phi(problem, &xp, sigma)?;
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Central-difference Hessian of `phi_sigma` built from the dense gradient.
pub fn fd_hessian_phi(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    sigma: f64,
) -> Result<DMatrix<f64>, DiagnosticsError> {
    let n = problem.num_vars();
    let step = f64::EPSILON.cbrt();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        let hj = step * (1.0 + x[j].abs());
        xp[j] = x[j] + hj;
        let gp = dense_oracles(problem, &xp, sigma)?.grad_phi;
        xp[j] = x[j] - hj;
        let gm = dense_oracles(problem, &xp, sigma)?.grad_phi;
        xp[j] = x[j];
        h.set_column(j, &((gp - gm) / (2.0 * hj)));
    }
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Minimum eigenvalue of the FD penalty Hessian restricted to the critical
/// cone `C_phi(x, z) = { p : p_j = 0 where z_j != 0 }` (strict
/// complementarity) — the quantity that flips sign across `sigma_star`.
/// Differences are taken along free coordinates only, so active bounds
/// (excluded from the cone) are never crossed.
pub fn projected_phi_hessian_min_eig(
    problem: &dyn NlpProblem,
    x: &DVector<f64>,
    z: &DVector<f64>,
    sigma: f64,
) -> Result<f64, DiagnosticsError> {
    let ztol = 1e-5 * (1.0 + z.amax());
    let free: Vec<usize> = (0..x.len()).filter(|&j| z[j].abs() <= ztol).collect();
    if free.is_empty() {
        return Ok(f64::INFINITY);
    }
    let step = f64::EPSILON.cbrt();
    let mut reduced = DMatrix::zeros(free.len(), free.len());
    let mut xp = x.clone();
    for (cidx, &j) in free.iter().enumerate() {
        let hj = step * (1.0 + x[j].abs());
        xp[j] = x[j] + hj;
        let gp = dense_oracles(problem, &xp, sigma)?.grad_phi;
        xp[j] = x[j] - hj;
        let gm = dense_oracles(problem, &xp, sigma)?.grad_phi;
        xp[j] = x[j];
        let col = (gp - gm) / (2.0 * hj);
        for (r, &i) in free.iter().enumerate() {
            reduced[(r, cidx)] = col[i];
        }
    }
    let sym = (&reduced + reduced.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}
