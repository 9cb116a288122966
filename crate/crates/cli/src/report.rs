//! Machine-readable run records: JSON for single solves, CSV rows for
//! tolerance sweeps. The CSV column order is fixed (see [`CSV_HEADER`]);
//! failed rows carry `*` in the iteration and counter columns.

use fpen_core::augsys::{Backend, Criterion, SystemMode};
use fpen_core::penalty::HessianMode;
use fpen_core::solver::{SolveReport, SolverConfig, SolverStatus};
use serde::Serialize;

pub const CSV_HEADER: &str =
    "problem,criterion,eta,status,iterations,n_fg,n_hv,n_av,n_atv,phi,objective,primal_inf,dual_gsigma_inf,dual_grad_inf";

#[derive(Serialize)]
pub struct ConfigEcho {
    pub sigma: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub criterion: Criterion,
    pub hessian: HessianMode,
    pub mode: SystemMode,
    pub backend: Backend,
    pub explicit_linear: bool,
    pub max_iterations: usize,
}

/// One solve, flattened for reporting.
#[derive(Serialize)]
pub struct RunRecord {
    pub schema: u32,
    pub problem: String,
    pub params: Vec<String>,
    pub config: ConfigEcho,
    pub status: SolverStatus,
    pub iterations: usize,
    pub n_fg: u64,
    pub n_hv: u64,
    pub n_av: u64,
    pub n_atv: u64,
    pub phi: f64,
    pub objective: f64,
    pub primal_inf: f64,
    pub dual_gsigma_inf: f64,
    pub dual_grad_inf: f64,
    pub epsilon_primal: f64,
    pub epsilon_dual: f64,
    pub sigma_final: f64,
    pub sigma_capped: bool,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

impl RunRecord {
    pub fn new(problem: &str, params: Vec<String>, config: &SolverConfig, solve: &SolveReport) -> Self {
        RunRecord {
            schema: 1,
            problem: problem.to_string(),
            params,
            config: ConfigEcho {
                sigma: config.sigma,
                epsilon: config.epsilon,
                eta: config.eta,
                criterion: config.criterion,
                hessian: config.hessian_mode,
                mode: config.system_mode,
                backend: config.backend,
                explicit_linear: config.explicit_linear,
                max_iterations: config.max_iterations,
            },
            status: solve.status,
            iterations: solve.iterations,
            n_fg: solve.counters.n_fg,
            n_hv: solve.counters.n_hv,
            n_av: solve.counters.n_av,
            n_atv: solve.counters.n_atv,
            phi: solve.phi,
            objective: solve.objective,
            primal_inf: solve.primal_residual,
            dual_gsigma_inf: solve.dual_residual_gsigma,
            dual_grad_inf: solve.dual_residual_grad,
            epsilon_primal: solve.epsilon_primal,
            epsilon_dual: solve.epsilon_dual,
            sigma_final: solve.sigma_final,
            sigma_capped: solve.sigma_capped,
            x: solve.x.clone(),
            y: solve.y.clone(),
            z: solve.z.clone(),
        }
    }

    pub fn csv_row(&self) -> String {
        let criterion = match self.config.criterion {
            Criterion::ResidualBased => "residual",
            Criterion::ErrorBased => "error",
        };
        let status = match self.status {
            SolverStatus::Converged => "converged",
            SolverStatus::Unbounded => "unbounded",
            SolverStatus::IterationLimit => "iteration-limit",
            SolverStatus::LinearSolverFailure => "linear-solver-failure",
        };
        if self.status == SolverStatus::Converged {
            format!(
                "{},{},{:.0e},{},{},{},{},{},{},{:.12e},{:.12e},{:.3e},{:.3e},{:.3e}",
                self.problem,
                criterion,
                self.config.eta,
                status,
                self.iterations,
                self.n_fg,
                self.n_hv,
                self.n_av,
                self.n_atv,
                self.phi,
                self.objective,
                self.primal_inf,
                self.dual_gsigma_inf,
                self.dual_grad_inf
            )
        } else {
            // failed-row convention: starred iteration and counter columns
            format!(
                "{},{},{:.0e},{},*,*,*,*,*,{:.12e},{:.12e},{:.3e},{:.3e},{:.3e}",
                self.problem,
                criterion,
                self.config.eta,
                status,
                self.phi,
                self.objective,
                self.primal_inf,
                self.dual_gsigma_inf,
                self.dual_grad_inf
            )
        }
    }
}
