//! Seeded convex quadratic programs with random linear equality constraints.
//!
//! `f(x) = x'Gx/2 + q'x` with `G = M'M/n + I` positive definite, constraints
//! `J x = b` with a dense Gaussian `J` (full rank almost surely) chosen
//! consistent with a random feasible point. The `degenerate` flag duplicates
//! the first constraint row to exercise rank-deficiency error paths, and
//! `mlin` declares the last rows as an explicit linear block.

use super::{Bounds, LinearBlock, NlpProblem};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub struct RandQp {
    g_mat: DMatrix<f64>,
    q: DVector<f64>,
    j: DMatrix<f64>, // m x n
    b: DVector<f64>,
    bounds: Bounds,
    x_feas: DVector<f64>,
    linear: Option<LinearBlock>,
}

impl RandQp {
    pub fn new(n: usize, m: usize, seed: u64, bounded: bool, degenerate: bool, mlin: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 {
            // Box-Muller from two uniforms
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let m_rand = DMatrix::from_fn(n, n, |_, _| normal());
        let g_mat = &m_rand.transpose() * &m_rand / n as f64 + DMatrix::identity(n, n);
        let q = DVector::from_fn(n, |_, _| normal());
        let mut j = DMatrix::from_fn(m, n, |_, _| normal());
        if degenerate && m >= 2 {
            let first = j.row(0).into_owned();
            j.set_row(m - 1, &first);
        }
        let x_feas = DVector::from_fn(n, |_, _| normal());
        let b = &j * &x_feas;
        let bounds = if bounded {
            Bounds::new(
                DVector::from_fn(n, |i, _| x_feas[i] - 1.5),
                DVector::from_fn(n, |i, _| x_feas[i] + 2.5),
            )
            .unwrap()
        } else {
            Bounds::unbounded(n)
        };
        let linear = if mlin > 0 {
            let bmat = j.rows(m - mlin, mlin).transpose();
            let d = b.rows(m - mlin, mlin).into_owned();
            Some(LinearBlock { b: bmat, d })
        } else {
            None
        };
        RandQp {
            g_mat,
            q,
            j,
            b,
            bounds,
            x_feas,
            linear,
        }
    }
}

impl NlpProblem for RandQp {
    fn name(&self) -> &str {
        "randqp"
    }
    fn num_vars(&self) -> usize {
        self.q.len()
    }
    fn num_constraints(&self) -> usize {
        self.b.len()
    }
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.g_mat * x)) + self.q.dot(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.g_mat * x + &self.q
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.j * x - &self.b
    }
    fn jac_prod(&self, _x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        self.j.transpose() * w
    }
    fn jac_adjoint_prod(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.j * v
    }
    fn lag_hess_prod(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.g_mat * v
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.j.transpose()
    }
    fn second_jac_prod(&self, _x: &DVector<f64>, _a: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.b.len())
    }
    fn has_exact_second_jac(&self) -> bool {
        true
    }
    fn linear_block(&self) -> Option<&LinearBlock> {
        self.linear.as_ref()
    }
    fn initial_point(&self) -> DVector<f64> {
        self.x_feas.clone()
    }
}
