//! Hock-Schittkowski problem 113 (Wong II) in equality form.
//!
//! The eight inequality constraints `g_i(x) >= 0` become equalities
//! `g_i(x) - s_i = 0` with one slack each and `s >= 0`; the ten original
//! variables stay free. Constraints are ordered nonlinear first (the five
//! quadratic ones), then the three linear ones, which form the declared
//! linear block. Dimensions: n = 18, m = 8.

use super::{Bounds, LinearBlock, NlpProblem};
use nalgebra::{DMatrix, DVector};

const N_ORIG: usize = 10;
const M_NLN: usize = 5;
const M_LIN: usize = 3;
const N: usize = N_ORIG + M_NLN + M_LIN;
const M: usize = M_NLN + M_LIN;

pub struct Hs113 {
    bounds: Bounds,
    linear: LinearBlock,
}

// Inequalities in the book's numbering: rows of (coeff, constant) for the
// three linear constraints g1..g3, so that g = coeff . x + constant >= 0.
const LIN_COEFF: [[f64; N_ORIG]; M_LIN] = [
    [-4.0, -5.0, 0.0, 0.0, 0.0, 0.0, 3.0, -9.0, 0.0, 0.0],
    [-10.0, 8.0, 0.0, 0.0, 0.0, 0.0, 17.0, -2.0, 0.0, 0.0],
    [8.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -5.0, 2.0],
];
const LIN_CONST: [f64; M_LIN] = [105.0, 0.0, 12.0];

fn nonlinear_values(x: &DVector<f64>) -> [f64; M_NLN] {
    let (x1, x2, x3, x4, x5, x6) = (x[0], x[1], x[2], x[3], x[4], x[5]);
    let (x9, x10) = (x[8], x[9]);
    [
        // g4
        -3.0 * (x1 - 2.0).powi(2) - 4.0 * (x2 - 3.0).powi(2) - 2.0 * x3 * x3 + 7.0 * x4 + 120.0,
        // g5
        -5.0 * x1 * x1 - 8.0 * x2 - (x3 - 6.0).powi(2) + 2.0 * x4 + 40.0,
        // g6
        -x1 * x1 - 2.0 * (x2 - 2.0).powi(2) + 2.0 * x1 * x2 - 14.0 * x5 + 6.0 * x6,
        // g7
        -0.5 * (x1 - 8.0).powi(2) - 2.0 * (x2 - 4.0).powi(2) - 3.0 * x5 * x5 + x6 + 30.0,
        // g8
        3.0 * x1 - 6.0 * x2 - 12.0 * (x9 - 8.0).powi(2) + 7.0 * x10,
    ]
}

// Gradient of nonlinear inequality k with respect to the original variables.
fn nonlinear_gradient(x: &DVector<f64>, k: usize) -> [f64; N_ORIG] {
    let (x1, x2, x3, x5, x9) = (x[0], x[1], x[2], x[4], x[8]);
    let mut g = [0.0; N_ORIG];
    match k {
        0 => {
            g[0] = -6.0 * (x1 - 2.0);
            g[1] = -8.0 * (x2 - 3.0);
            g[2] = -4.0 * x3;
            g[3] = 7.0;
        }
        1 => {
            g[0] = -10.0 * x1;
            g[1] = -8.0;
            g[2] = -2.0 * (x3 - 6.0);
            g[3] = 2.0;
        }
        2 => {
            g[0] = -2.0 * x1 + 2.0 * x2;
            g[1] = -4.0 * (x2 - 2.0) + 2.0 * x1;
            g[4] = -14.0;
            g[5] = 6.0;
        }
        3 => {
            g[0] = -(x1 - 8.0);
            g[1] = -4.0 * (x2 - 4.0);
            g[4] = -6.0 * x5;
            g[5] = 1.0;
        }
        4 => {
            g[0] = 3.0;
            g[1] = -6.0;
            g[8] = -24.0 * (x9 - 8.0);
            g[9] = 7.0;
        }
        _ => unreachable!(),
    }
    g
}

// Hessian of nonlinear inequality k applied to v (original variables only).
fn nonlinear_hess_prod(k: usize, v: &DVector<f64>) -> [f64; N_ORIG] {
    let mut h = [0.0; N_ORIG];
    match k {
        0 => {
            h[0] = -6.0 * v[0];
            h[1] = -8.0 * v[1];
            h[2] = -4.0 * v[2];
        }
        1 => {
            h[0] = -10.0 * v[0];
            h[2] = -2.0 * v[2];
        }
        2 => {
            h[0] = -2.0 * v[0] + 2.0 * v[1];
            h[1] = 2.0 * v[0] - 4.0 * v[1];
        }
        3 => {
            h[0] = -v[0];
            h[1] = -4.0 * v[1];
            h[4] = -6.0 * v[4];
        }
        4 => {
            h[8] = -24.0 * v[8];
        }
        _ => unreachable!(),
    }
    h
}

impl Hs113 {
    pub fn new() -> Self {
        let mut lower = DVector::from_element(N, f64::NEG_INFINITY);
        for j in N_ORIG..N {
            lower[j] = 0.0;
        }
        let bounds = Bounds::new(lower, DVector::from_element(N, f64::INFINITY)).unwrap();
        // columns of B are gradients of the linear equality rows, including
        // the -1 for the paired slack
        let mut b = DMatrix::zeros(N, M_LIN);
        let mut d = DVector::zeros(M_LIN);
        for t in 0..M_LIN {
            for j in 0..N_ORIG {
                b[(j, t)] = LIN_COEFF[t][j];
            }
            b[(N_ORIG + M_NLN + t, t)] = -1.0;
            d[t] = -LIN_CONST[t];
        }
        Hs113 { bounds, linear: LinearBlock { b, d } }
    }
}

impl NlpProblem for Hs113 {
    fn name(&self) -> &str {
        "hs113"
    }
    fn num_vars(&self) -> usize {
        N
    }
    fn num_constraints(&self) -> usize {
        M
    }
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let (x1, x2, x3, x4, x5) = (x[0], x[1], x[2], x[3], x[4]);
        let (x6, x7, x8, x9, x10) = (x[5], x[6], x[7], x[8], x[9]);
        x1 * x1 + x2 * x2 + x1 * x2 - 14.0 * x1 - 16.0 * x2
            + (x3 - 10.0).powi(2)
            + 4.0 * (x4 - 5.0).powi(2)
            + (x5 - 3.0).powi(2)
            + 2.0 * (x6 - 1.0).powi(2)
            + 5.0 * x7 * x7
            + 7.0 * (x8 - 11.0).powi(2)
            + 2.0 * (x9 - 10.0).powi(2)
            + (x10 - 7.0).powi(2)
            + 45.0
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(N);
        g[0] = 2.0 * x[0] + x[1] - 14.0;
        g[1] = 2.0 * x[1] + x[0] - 16.0;
        g[2] = 2.0 * (x[2] - 10.0);
        g[3] = 8.0 * (x[3] - 5.0);
        g[4] = 2.0 * (x[4] - 3.0);
        g[5] = 4.0 * (x[5] - 1.0);
        g[6] = 10.0 * x[6];
        g[7] = 14.0 * (x[7] - 11.0);
        g[8] = 4.0 * (x[8] - 10.0);
        g[9] = 2.0 * (x[9] - 7.0);
        g
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(M);
        let nln = nonlinear_values(x);
        for k in 0..M_NLN {
            c[k] = nln[k] - x[N_ORIG + k];
        }
        for t in 0..M_LIN {
            let mut v = LIN_CONST[t];
            for j in 0..N_ORIG {
                v += LIN_COEFF[t][j] * x[j];
            }
            c[M_NLN + t] = v - x[N_ORIG + M_NLN + t];
        }
        c
    }
    fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(N);
        for k in 0..M_NLN {
            let g = nonlinear_gradient(x, k);
            for j in 0..N_ORIG {
                out[j] += g[j] * w[k];
            }
            out[N_ORIG + k] -= w[k];
        }
        for t in 0..M_LIN {
            for j in 0..N_ORIG {
                out[j] += LIN_COEFF[t][j] * w[M_NLN + t];
            }
            out[N_ORIG + M_NLN + t] -= w[M_NLN + t];
        }
        out
    }
    fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(M);
        for k in 0..M_NLN {
            let g = nonlinear_gradient(x, k);
            let mut acc = 0.0;
            for j in 0..N_ORIG {
                acc += g[j] * v[j];
            }
            out[k] = acc - v[N_ORIG + k];
        }
        for t in 0..M_LIN {
            let mut acc = 0.0;
            for j in 0..N_ORIG {
                acc += LIN_COEFF[t][j] * v[j];
            }
            out[M_NLN + t] = acc - v[N_ORIG + M_NLN + t];
        }
        out
    }
    fn lag_hess_prod(&self, _x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(N);
        // objective Hessian
        out[0] = 2.0 * v[0] + v[1];
        out[1] = 2.0 * v[1] + v[0];
        out[2] = 2.0 * v[2];
        out[3] = 8.0 * v[3];
        out[4] = 2.0 * v[4];
        out[5] = 4.0 * v[5];
        out[6] = 10.0 * v[6];
        out[7] = 14.0 * v[7];
        out[8] = 4.0 * v[8];
        out[9] = 2.0 * v[9];
        for k in 0..M_NLN {
            if y[k] == 0.0 {
                continue;
            }
            let h = nonlinear_hess_prod(k, v);
            for j in 0..N_ORIG {
                out[j] -= y[k] * h[j];
            }
        }
        out
    }
    fn second_jac_prod(&self, _x: &DVector<f64>, a: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(M);
        for k in 0..M_NLN {
            let h = nonlinear_hess_prod(k, a);
            let mut acc = 0.0;
            for j in 0..N_ORIG {
                acc += v[j] * h[j];
            }
            out[k] = acc;
        }
        out
    }
    fn has_exact_second_jac(&self) -> bool {
        true
    }
    fn linear_block(&self) -> Option<&LinearBlock> {
        Some(&self.linear)
    }
    fn initial_point(&self) -> DVector<f64> {
        let mut x = DVector::zeros(N);
        for (j, v) in [2.0, 3.0, 5.0, 5.0, 1.0, 2.0, 7.0, 3.0, 6.0, 10.0].iter().enumerate() {
            x[j] = *v;
        }
        // slacks absorb the inequality values: start is equality-feasible
        // and strictly interior (all inequalities hold strictly at x0)
        let nln = nonlinear_values(&x);
        for k in 0..M_NLN {
            x[N_ORIG + k] = nln[k];
        }
        for t in 0..M_LIN {
            let mut v = LIN_CONST[t];
            for j in 0..N_ORIG {
                v += LIN_COEFF[t][j] * x[j];
            }
            x[N_ORIG + M_NLN + t] = v;
        }
        x
    }
}
