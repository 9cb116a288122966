//! Finite-difference analogs of two 2D control problems on the square
//! `(-1,1)^2` with homogeneous Dirichlet state boundary conditions:
//!
//! * inverse Poisson: recover a diffusion coefficient `z >= 0` so the state
//!   of `-div(z grad u) = h` matches a target `u_d`;
//! * Poisson-Boltzmann: drive `-lap(u) + sinh(u) = h + z` toward a target
//!   with a nonnegative source control.
//!
//! Both use a 5-point stencil on the `N x N` interior grid; boundary values
//! of `u` are eliminated. Constraint rows carry an `h^2` factor (the
//! quadrature weight), which keeps their entries mesh-independent, and the
//! objective uses the same weight:
//! `f = h^2/2 ||u - u_d||^2 + alpha h^2/2 ||z||^2`. Variables are ordered
//! `(u, z)`, so `n = 2 N^2` and `m = N^2`.

use super::{Bounds, NlpProblem};
use crate::augsys::SchurPreconditioner;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

const FORCE_OMEGA: f64 = std::f64::consts::PI - 0.125;

#[derive(Debug, Clone, Copy)]
struct Grid {
    n_side: usize,
    h: f64,
}

impl Grid {
    fn new(n_side: usize) -> Self {
        Grid {
            n_side,
            h: 2.0 / (n_side as f64 + 1.0),
        }
    }

    fn m(&self) -> usize {
        self.n_side * self.n_side
    }

    fn coords(&self, k: usize) -> (f64, f64) {
        let i = k % self.n_side;
        let j = k / self.n_side;
        (-1.0 + (i as f64 + 1.0) * self.h, -1.0 + (j as f64 + 1.0) * self.h)
    }

    /// In-grid neighbors of node `k` (Dirichlet sides are simply absent).
    fn neighbors(&self, k: usize) -> impl Iterator<Item = Option<usize>> {
        let n = self.n_side;
        let i = k % n;
        let j = k / n;
        [
            (i > 0).then(|| k - 1),
            (i + 1 < n).then(|| k + 1),
            (j > 0).then(|| k - n),
            (j + 1 < n).then(|| k + n),
        ]
        .into_iter()
    }

    fn forcing(&self) -> DVector<f64> {
        DVector::from_fn(self.m(), |k, _| {
            let (x1, x2) = self.coords(k);
            -(FORCE_OMEGA * x1).sin() * (FORCE_OMEGA * x2).sin()
        })
    }
}

/// Conservative diffusion form: `[L(z) u]_k` with arithmetic averaging of
/// `z` on interior edges and a one-sided value on edges that meet the
/// boundary (where `u = 0`). Already scaled by `h^2`, so entries are O(1).
/// Bilinear in `(u, z)` and symmetric as a matrix acting on `u`.
fn diffusion_apply(grid: &Grid, u: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(grid.m());
    for k in 0..grid.m() {
        let mut acc = 0.0;
        for nb in grid.neighbors(k) {
            match nb {
                Some(j) => acc += 0.5 * (z[k] + z[j]) * (u[k] - u[j]),
                None => acc += z[k] * u[k],
            }
        }
        out[k] = acc;
    }
    out
}

/// Adjoint of `diffusion_apply` in its `z` argument:
/// `out_pq = d/dz_pq (y' L(z) u)`.
fn diffusion_adjoint_z(grid: &Grid, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(grid.m());
    for k in 0..grid.m() {
        for nb in grid.neighbors(k) {
            match nb {
                Some(j) => {
                    let t = y[k] * (u[k] - u[j]);
                    out[k] += 0.5 * t;
                    out[j] += 0.5 * t;
                }
                None => out[k] += y[k] * u[k],
            }
        }
    }
    out
}

/// Dense matrix of `u -> diffusion_apply(u, z)`.
fn diffusion_matrix(grid: &Grid, z: &DVector<f64>) -> DMatrix<f64> {
    let m = grid.m();
    let mut a = DMatrix::zeros(m, m);
    for k in 0..m {
        for nb in grid.neighbors(k) {
            match nb {
                Some(j) => {
                    let zh = 0.5 * (z[k] + z[j]);
                    a[(k, k)] += zh;
                    a[(k, j)] -= zh;
                }
                None => a[(k, k)] += z[k],
            }
        }
    }
    a
}

/// Dirichlet 5-point Laplacian times `h^2`: `(4 u_k - sum of neighbors)`.
fn laplacian_apply(grid: &Grid, u: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(grid.m());
    for k in 0..grid.m() {
        let mut acc = 4.0 * u[k];
        for nb in grid.neighbors(k).flatten() {
            acc -= u[nb];
        }
        out[k] = acc;
    }
    out
}

fn pack(u: DVector<f64>, z: DVector<f64>) -> DVector<f64> {
    let m = u.len();
    let mut x = DVector::zeros(2 * m);
    x.rows_mut(0, m).copy_from(&u);
    x.rows_mut(m, m).copy_from(&z);
    x
}

fn control_bounds(m: usize) -> Bounds {
    let mut lower = DVector::from_element(2 * m, f64::NEG_INFINITY);
    for j in m..2 * m {
        lower[j] = 0.0;
    }
    Bounds::new(lower, DVector::from_element(2 * m, f64::INFINITY)).unwrap()
}

/// `P = Ju Ju'` built from the (symmetric) state block of the Jacobian.
/// Solving with it costs two state solves, applying it two products.
pub struct StateBlockPreconditioner {
    ju: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl StateBlockPreconditioner {
    fn new(ju: DMatrix<f64>) -> Option<Self> {
        let chol = Cholesky::new(ju.clone())?;
        Some(StateBlockPreconditioner { ju, chol })
    }
}

impl SchurPreconditioner for StateBlockPreconditioner {
    fn solve(&self, r: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(&self.chol.solve(r))
    }
    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.ju * (&self.ju * v)
    }
}

pub struct InversePoisson {
    grid: Grid,
    alpha: f64,
    forcing: DVector<f64>, // h^2 * h(x), ready to subtract
    u_target: DVector<f64>,
    bounds: Bounds,
}

impl InversePoisson {
    pub fn new(n_side: usize, alpha: f64) -> Self {
        let grid = Grid::new(n_side);
        let h2 = grid.h * grid.h;
        let forcing = grid.forcing() * h2;
        // target state: solve the PDE with the reference coefficient field
        let z_star = DVector::from_fn(grid.m(), |k, _| {
            let (x1, x2) = grid.coords(k);
            let (d1, d2) = (x1 - 0.2, x2 - 0.2);
            let mut z = 1.0;
            if (d1 * d1 + d2 * d2).sqrt() <= 0.3 {
                z += 0.5;
            }
            if d1.abs() + d2.abs() <= 0.6 {
                z += 0.5;
            }
            z
        });
        let lz = diffusion_matrix(&grid, &z_star);
        let u_target = Cholesky::new(lz)
            .expect("reference diffusion operator must be SPD")
            .solve(&forcing);
        let bounds = control_bounds(grid.m());
        InversePoisson {
            grid,
            alpha,
            forcing,
            u_target,
            bounds,
        }
    }

    fn split<'x>(&self, x: &'x DVector<f64>) -> (nalgebra::DVectorView<'x, f64>, nalgebra::DVectorView<'x, f64>) {
        let m = self.grid.m();
        (x.rows(0, m), x.rows(m, m))
    }
}

impl NlpProblem for InversePoisson {
    fn name(&self) -> &str {
        "invpoisson-fd"
    }
    fn num_vars(&self) -> usize {
        2 * self.grid.m()
    }
    fn num_constraints(&self) -> usize {
        self.grid.m()
    }
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let (u, z) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        let du = u - &self.u_target;
        0.5 * h2 * (du.norm_squared() + self.alpha * z.norm_squared())
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        pack((u - &self.u_target) * h2, z * (self.alpha * h2))
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        diffusion_apply(&self.grid, &u.into_owned(), &z.into_owned()) - &self.forcing
    }
    fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        pack(
            diffusion_apply(&self.grid, w, &z.into_owned()),
            diffusion_adjoint_z(&self.grid, &u.into_owned(), w),
        )
    }
    fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        let (vu, vz) = self.split(v);
        diffusion_apply(&self.grid, &vu.into_owned(), &z.into_owned())
            + diffusion_apply(&self.grid, &u.into_owned(), &vz.into_owned())
    }
    fn lag_hess_prod(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (u, _) = self.split(x);
        let _ = u;
        let (vu, vz) = self.split(v);
        let h2 = self.grid.h * self.grid.h;
        let hu = vu.into_owned() * h2 - diffusion_apply(&self.grid, y, &vz.into_owned());
        let hz = vz.into_owned() * (self.alpha * h2) - diffusion_adjoint_z(&self.grid, &vu.into_owned(), y);
        pack(hu, hz)
    }
    fn second_jac_prod(&self, _x: &DVector<f64>, a: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (au, az) = self.split(a);
        let (vu, vz) = self.split(v);
        diffusion_apply(&self.grid, &vu.into_owned(), &az.into_owned())
            + diffusion_apply(&self.grid, &au.into_owned(), &vz.into_owned())
    }
    fn has_exact_second_jac(&self) -> bool {
        true
    }
    fn initial_point(&self) -> DVector<f64> {
        let m = self.grid.m();
        DVector::from_element(2 * m, 1.0)
    }
    fn build_preconditioner(&self, x: &DVector<f64>) -> Option<Box<dyn SchurPreconditioner>> {
        let (_, z) = self.split(x);
        let ju = diffusion_matrix(&self.grid, &z.into_owned());
        StateBlockPreconditioner::new(ju).map(|p| Box::new(p) as Box<dyn SchurPreconditioner>)
    }
    fn sigma_min_bound(&self) -> Option<f64> {
        // P^{-1} A'QA = I + P^{-1} Jz Z Jz' with Z >= 0 inside the bounds
        Some(1.0)
    }
}

pub struct PoissonBoltzmann {
    grid: Grid,
    alpha: f64,
    forcing: DVector<f64>, // h^2 * h(x)
    u_target: DVector<f64>,
    bounds: Bounds,
}

impl PoissonBoltzmann {
    pub fn new(n_side: usize, alpha: f64) -> Self {
        let grid = Grid::new(n_side);
        let h2 = grid.h * grid.h;
        let forcing = grid.forcing() * h2;
        let u_target = DVector::from_fn(grid.m(), |k, _| {
            let (x1, x2) = grid.coords(k);
            if (0.25..=0.75).contains(&x1) && (0.25..=0.75).contains(&x2) {
                10.0
            } else {
                5.0
            }
        });
        let bounds = control_bounds(grid.m());
        PoissonBoltzmann {
            grid,
            alpha,
            forcing,
            u_target,
            bounds,
        }
    }

    fn split<'x>(&self, x: &'x DVector<f64>) -> (nalgebra::DVectorView<'x, f64>, nalgebra::DVectorView<'x, f64>) {
        let m = self.grid.m();
        (x.rows(0, m), x.rows(m, m))
    }

    fn state_jacobian_diag(&self, u: &DVector<f64>) -> DVector<f64> {
        let h2 = self.grid.h * self.grid.h;
        u.map(|ui| h2 * ui.cosh())
    }
}

impl NlpProblem for PoissonBoltzmann {
    fn name(&self) -> &str {
        "poisson-boltzmann-fd"
    }
    fn num_vars(&self) -> usize {
        2 * self.grid.m()
    }
    fn num_constraints(&self) -> usize {
        self.grid.m()
    }
    fn bounds(&self) -> &Bounds {
        &self.bounds
    }
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let (u, z) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        let du = u - &self.u_target;
        0.5 * h2 * (du.norm_squared() + self.alpha * z.norm_squared())
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        pack((u - &self.u_target) * h2, z * (self.alpha * h2))
    }
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let (u, z) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        let u = u.into_owned();
        laplacian_apply(&self.grid, &u) + u.map(|ui| h2 * ui.sinh()) - &self.forcing - z * h2
    }
    fn jac_prod(&self, x: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let (u, _) = self.split(x);
        let h2 = self.grid.h * self.grid.h;
        let cu = self.state_jacobian_diag(&u.into_owned());
        pack(laplacian_apply(&self.grid, w) + cu.component_mul(w), w * (-h2))
    }
    fn jac_adjoint_prod(&self, x: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (u, _) = self.split(x);
        let (vu, vz) = self.split(v);
        let h2 = self.grid.h * self.grid.h;
        let cu = self.state_jacobian_diag(&u.into_owned());
        let vu = vu.into_owned();
        laplacian_apply(&self.grid, &vu) + cu.component_mul(&vu) - vz.into_owned() * h2
    }
    fn lag_hess_prod(&self, x: &DVector<f64>, y: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (u, _) = self.split(x);
        let (vu, vz) = self.split(v);
        let h2 = self.grid.h * self.grid.h;
        let u = u.into_owned();
        let vu = vu.into_owned();
        let hu = DVector::from_fn(self.grid.m(), |k, _| {
            h2 * vu[k] - h2 * y[k] * u[k].sinh() * vu[k]
        });
        pack(hu, vz.into_owned() * (self.alpha * h2))
    }
    fn second_jac_prod(&self, x: &DVector<f64>, a: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (u, _) = self.split(x);
        let (au, _) = self.split(a);
        let (vu, _) = self.split(v);
        let h2 = self.grid.h * self.grid.h;
        let u = u.into_owned();
        DVector::from_fn(self.grid.m(), |k, _| h2 * u[k].sinh() * au[k] * vu[k])
    }
    fn has_exact_second_jac(&self) -> bool {
        true
    }
    fn initial_point(&self) -> DVector<f64> {
        let m = self.grid.m();
        DVector::from_element(2 * m, 1.0)
    }
    fn build_preconditioner(&self, x: &DVector<f64>) -> Option<Box<dyn SchurPreconditioner>> {
        let (u, _) = self.split(x);
        let u = u.into_owned();
        let m = self.grid.m();
        let mut ju = DMatrix::zeros(m, m);
        for k in 0..m {
            ju[(k, k)] = 4.0 + self.grid.h * self.grid.h * u[k].cosh();
            for nb in self.grid.neighbors(k).flatten() {
                ju[(k, nb)] = -1.0;
            }
        }
        StateBlockPreconditioner::new(ju).map(|p| Box::new(p) as Box<dyn SchurPreconditioner>)
    }
    fn sigma_min_bound(&self) -> Option<f64> {
        Some(1.0)
    }
}
