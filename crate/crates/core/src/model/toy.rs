//! Scalar warm-up problem: `min x^2/2  s.t. x - 1 = 0`, optionally with
//! `x >= 0`. Everything about the penalty function is analytic here, which
//! makes it the reference case for threshold and unboundedness tests.

use super::{Bounds, NlpProblem};
use nalgebra::{DMatrix, DVector};

pub struct Toy1d {
    bounds: Bounds,
    bounded: bool,
}

impl Toy1d {
    pub fn new(bounded: bool) -> Self {
        let bounds = if bounded {
            Bounds::new(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![f64::INFINITY])).unwrap()
        } else {
            Bounds::unbounded(1)
        };
        Toy1d { bounds, bounded }
    }
}

impl NlpProblem for Toy1d {
    fn name(&self) -> &str {
        if self.bounded {
            "toy1d-bounded"
        } else {
            "toy1d"
        }
    }
    fn num_vars(&self) -> usize {
        1
    }
    fn num_constraints(&self) -> usize {
        1
    }
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x[0] * x[0]
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![x[0] - 1.0])
    }
    fn jac_prod(&self, _x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        w.clone()
    }
    fn jac_adjoint_prod(&self, _x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn lag_hess_prod(&self, _x: &DVector<f64>, _y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        v.clone()
    }
    fn jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0)
    }
    fn second_jac_prod(&self, _x: &DVector<f64>, _a: &DVector<f64>, _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }
    fn has_exact_second_jac(&self) -> bool {
        true
    }
    fn initial_point(&self) -> DVector<f64> {
        // The uncapped one-sided scaling makes the penalty unbounded far
        // from the bound, so the bounded variant starts closer to x* = 1.
        if self.bounded {
            DVector::from_vec(vec![0.5])
        } else {
            DVector::from_vec(vec![5.0])
        }
    }
}
