//! Smooth bound scaling `q`, the diagonal matrix `Q(x)` and the operator
//! `R(x, v)`.
//!
//! Each diagonal entry `q_i(x_i)` is a smooth concave approximation of the
//! complementarity function `min(x_i - l_i, u_i - x_i)`: it is positive
//! strictly inside the bounds, zero exactly on a bound, and equal to 1 when
//! the variable is free in both directions. A quadratic patch of width
//! `omega_i` joins the two linear pieces when both bounds are finite, so `q`
//! is C^1 on the whole interval.

use crate::model::Bounds;
use nalgebra::DVector;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScalingError {
    /// `build_scaling` was called at a point on or outside the bounds.
    #[error("point is not strictly interior: x[{index}] = {value} violates ({lower}, {upper})")]
    NotInterior {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
}

/// Smoothing widths for the quadratic patch of `q`, plus the optional cap.
#[derive(Debug, Clone)]
pub struct ScalingParams {
    /// Per-component smoothing width; only meaningful when both bounds are
    /// finite, where it must satisfy `0 < omega_i < u_i - l_i`.
    pub omega: DVector<f64>,
    /// When set, `q` approximates `min(x - l, u - x, 1)` instead, flattening
    /// far from the bounds. Off by default.
    pub capped: bool,
}

impl ScalingParams {
    /// Default widths `omega_i = min(1, (u_i - l_i)/2)`.
    pub fn from_bounds(bounds: &Bounds) -> Self {
        let omega = DVector::from_fn(bounds.len(), |i, _| {
            let gap = bounds.upper[i] - bounds.lower[i];
            if gap.is_finite() {
                (0.5 * gap).min(1.0)
            } else {
                1.0
            }
        });
        ScalingParams {
            omega,
            capped: false,
        }
    }
}

/// The diagonal of `Q(x)` and its componentwise derivative at a point.
#[derive(Debug, Clone)]
pub struct ScalingDiag {
    /// `q_i(x_i)`.
    pub q: DVector<f64>,
    /// `q_i'(x_i)`.
    pub qprime: DVector<f64>,
}

impl ScalingDiag {
    /// `diag(sqrt(q))`, the scaling actually applied to the Jacobian.
    pub fn q_sqrt(&self) -> DVector<f64> {
        self.q.map(f64::sqrt)
    }

    /// Identity scaling (used when a problem has no bounds at all).
    pub fn identity(n: usize) -> Self {
        ScalingDiag {
            q: DVector::from_element(n, 1.0),
            qprime: DVector::zeros(n),
        }
    }
}

/// One diagonal entry of `Q(x)`. Branches are checked top to bottom: free
/// variable, quadratic patch (both bounds finite), then the piecewise-linear
/// distance to the nearer bound.
pub fn q_value(x: f64, lower: f64, upper: f64, omega: f64) -> f64 {
    if lower == f64::NEG_INFINITY && upper == f64::INFINITY {
        return 1.0;
    }
    if lower.is_finite() && upper.is_finite() && (upper + lower - 2.0 * x).abs() <= omega {
        let t = 2.0 * x - upper - lower;
        return 0.5 * (upper - lower) - 0.25 * omega - t * t / (4.0 * omega);
    }
    (x - lower).min(upper - x)
}

/// Derivative of [`q_value`] in `x`. The cases mirror `q_value` and are
/// likewise checked top to bottom; on the quadratic patch the derivative is
/// `-(2x - u - l)/omega`, which matches both linear pieces at the seams.
pub fn q_derivative(x: f64, lower: f64, upper: f64, omega: f64) -> f64 {
    if lower == f64::NEG_INFINITY && upper == f64::INFINITY {
        return 0.0;
    }
    if lower.is_finite() && upper.is_finite() && (upper + lower - 2.0 * x).abs() <= omega {
        return -(2.0 * x - upper - lower) / omega;
    }
    if x - lower < upper - x {
        1.0
    } else {
        -1.0
    }
}

// Smooth cap of t against 1: identity below 3/4, constant 1 above 5/4,
// quadratic join in between. Concave, nondecreasing, s(0) = 0.
fn cap_value(t: f64) -> f64 {
    if t <= 0.75 {
        t
    } else if t >= 1.25 {
        1.0
    } else {
        let d = t - 0.75;
        t - d * d
    }
}

fn cap_derivative(t: f64) -> f64 {
    if t <= 0.75 {
        1.0
    } else if t >= 1.25 {
        0.0
    } else {
        1.0 - 2.0 * (t - 0.75)
    }
}

/// Assemble the diagonal scaling at a strictly interior point.
pub fn build_scaling(
    x: &DVector<f64>,
    bounds: &Bounds,
    params: &ScalingParams,
) -> Result<ScalingDiag, ScalingError> {
    let n = x.len();
    let mut q = DVector::zeros(n);
    let mut qprime = DVector::zeros(n);
    for i in 0..n {
        let (l, u) = (bounds.lower[i], bounds.upper[i]);
        if x[i] <= l || x[i] >= u {
            return Err(ScalingError::NotInterior {
                index: i,
                value: x[i],
                lower: l,
                upper: u,
            });
        }
        let w = params.omega[i];
        let free = l == f64::NEG_INFINITY && u == f64::INFINITY;
        let (qi, qpi) = if params.capped && !free {
            let v = q_value(x[i], l, u, w);
            (cap_value(v), cap_derivative(v) * q_derivative(x[i], l, u, w))
        } else {
            (q_value(x[i], l, u, w), q_derivative(x[i], l, u, w))
        };
        q[i] = qi;
        qprime[i] = qpi;
    }
    Ok(ScalingDiag { q, qprime })
}

/// `R(x, v) = diag(q_i'(x_i) v_i)` applied to a vector: componentwise
/// `qprime .* v`.
pub fn r_product(scaling: &ScalingDiag, v: &DVector<f64>) -> DVector<f64> {
    scaling.qprime.component_mul(v)
}
