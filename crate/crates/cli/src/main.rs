//! Command-line harness: solve library problems with the smooth exact
//! penalty method, compute threshold penalty parameters, sweep the inner
//! solve tolerance, and run derivative/oracle check suites.
//!
//! Exit codes: 0 success/converged, 1 not converged or a failed check,
//! 2 usage errors.

mod checks;
mod report;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpen_core::augsys::{Backend, Criterion, SystemMode};
use fpen_core::diagnostics::{threshold_sigma, ThresholdMode};
use fpen_core::model::{make_problem, NlpProblem, ProblemParams};
use fpen_core::penalty::HessianMode;
use fpen_core::solver::{minimize, SigmaUpdate, SolverConfig};
use nalgebra::DVector;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fpen", version, about = "Smooth exact penalty method for bound- and equality-constrained programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Minimize the penalty function for one problem and print a JSON report
    Solve(SolveArgs),
    /// Run an inner-tolerance sweep and print a CSV table
    Sweep(SweepArgs),
    /// Solve, then compute the threshold penalty parameter both ways
    Threshold(ThresholdArgs),
    /// Derivative, adjoint and oracle consistency suites
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Residual,
    Error,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriteriaArg {
    Residual,
    Error,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "UPPERCASE")]
enum HessianArg {
    B1,
    B2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Symmetric,
    Unsymmetric,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Auto,
    Direct,
    Iterative,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaUpdateArg {
    Off,
    Heuristic,
}

#[derive(Args, Clone)]
struct ProblemArgs {
    /// Problem name: toy1d, toy1d-bounded, randqp, hs113, invpoisson-fd,
    /// poisson-boltzmann-fd
    #[arg(long)]
    problem: String,
    /// Problem parameters as key=value (repeatable): grid=16 alpha=1e-4 ...
    #[arg(long = "param", value_name = "KEY=VALUE")]
    params: Vec<String>,
    /// Seed for randomized problems and check points
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid size shorthand for the PDE problems (same as --param grid=N)
    #[arg(long)]
    grid: Option<usize>,
}

impl ProblemArgs {
    fn build(&self) -> Result<Box<dyn NlpProblem>, String> {
        let mut params = ProblemParams::parse(&self.params)?;
        if let Some(grid) = self.grid {
            params.set("grid", &grid.to_string());
        }
        if self.problem == "randqp" {
            params.set("seed", &self.seed.to_string());
        }
        make_problem(&self.problem, &params).map_err(|e| e.to_string())
    }

    fn params_echo(&self) -> Vec<String> {
        let mut v = self.params.clone();
        if let Some(grid) = self.grid {
            v.push(format!("grid={grid}"));
        }
        v.push(format!("seed={}", self.seed));
        v
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Penalty parameter (problem-specific default when omitted)
    #[arg(long)]
    sigma: Option<f64>,
    /// Inner linear-solve relative tolerance
    #[arg(long, default_value_t = 1e-10)]
    eta: f64,
    /// Inner-solve termination rule
    #[arg(long, value_enum, default_value_t = CriterionArg::Residual)]
    criterion: CriterionArg,
    /// Hessian approximation
    #[arg(long, value_enum, default_value_t = HessianArg::B2)]
    hessian: HessianArg,
    /// Augmented-system form
    #[arg(long, value_enum, default_value_t = ModeArg::Symmetric)]
    mode: ModeArg,
    /// Linear-system backend (auto: iterative when the problem supplies a
    /// preconditioner, direct otherwise)
    #[arg(long, value_enum, default_value_t = BackendArg::Auto)]
    backend: BackendArg,
    /// Keep a declared linear constraint block explicit
    #[arg(long = "explicit-linear", value_enum, default_value_t = OnOff::Off)]
    explicit_linear: OnOff,
    /// Stopping scale in the convergence test
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    #[arg(long = "max-iters", default_value_t = 500)]
    max_iters: usize,
    /// Penalty-parameter update policy
    #[arg(long = "sigma-update", value_enum, default_value_t = SigmaUpdateArg::Off)]
    sigma_update: SigmaUpdateArg,
    /// Initial trust-region radius
    #[arg(long, default_value_t = 1.0)]
    delta0: f64,
    /// Fraction-to-boundary step cap
    #[arg(long = "tau-boundary", default_value_t = 0.995)]
    tau_boundary: f64,
    /// Declare the penalty unbounded below this multiple of (1 + |phi(x0)|)
    #[arg(long = "unbounded-floor", default_value_t = -1e12, allow_hyphen_values = true)]
    unbounded_floor: f64,
    /// Cap the smooth bound scaling at 1 far from the bounds
    #[arg(long = "capped-scaling", value_enum, default_value_t = OnOff::Off)]
    capped_scaling: OnOff,
    /// Cap on CG iterations per outer iteration (default 2n)
    #[arg(long = "max-cg")]
    max_cg: Option<usize>,
}

fn default_sigma(problem: &str) -> f64 {
    match problem {
        "hs113" => 7.0,
        "invpoisson-fd" => 1e-2,
        "poisson-boltzmann-fd" => 1e-1,
        "randqp" => 5.0,
        _ => 1.0,
    }
}

impl SolverArgs {
    fn to_config(&self, problem_name: &str, problem: &dyn NlpProblem) -> SolverConfig {
        let backend = match self.backend {
            BackendArg::Direct => Backend::Direct,
            BackendArg::Iterative => Backend::Iterative,
            BackendArg::Auto => {
                if problem.build_preconditioner(&problem.initial_point()).is_some() {
                    Backend::Iterative
                } else {
                    Backend::Direct
                }
            }
        };
        SolverConfig {
            sigma: self.sigma.unwrap_or_else(|| default_sigma(problem_name)),
            epsilon: self.epsilon,
            eta: self.eta,
            criterion: match self.criterion {
                CriterionArg::Residual => Criterion::ResidualBased,
                CriterionArg::Error => Criterion::ErrorBased,
            },
            hessian_mode: match self.hessian {
                HessianArg::B1 => HessianMode::B1,
                HessianArg::B2 => HessianMode::B2,
            },
            system_mode: match self.mode {
                ModeArg::Symmetric => SystemMode::Symmetric,
                ModeArg::Unsymmetric => SystemMode::Unsymmetric,
            },
            backend,
            explicit_linear: matches!(self.explicit_linear, OnOff::On),
            max_iterations: self.max_iters,
            sigma_update: match self.sigma_update {
                SigmaUpdateArg::Off => SigmaUpdate::Off,
                SigmaUpdateArg::Heuristic => SigmaUpdate::Heuristic,
            },
            delta0: self.delta0,
            tau_boundary: self.tau_boundary,
            unbounded_floor: self.unbounded_floor,
            capped_scaling: matches!(self.capped_scaling, OnOff::On),
            max_cg_iterations: self.max_cg,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Write the JSON report here instead of stdout
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Comma-separated inner tolerances
    #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-4,1e-6,1e-8,1e-10")]
    etas: Vec<f64>,
    /// Which termination criteria to sweep
    #[arg(long, value_enum, default_value_t = CriteriaArg::Both)]
    criteria: CriteriaArg,
    /// Write the CSV table here instead of stdout
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct ThresholdArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<std::path::PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    /// Penalty parameter for the gradient and oracle suites
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of random interior points per suite
    #[arg(long, default_value_t = 5)]
    points: usize,
}

fn write_out(path: &Option<std::path::PathBuf>, content: &str) -> Result<(), String> {
    match path {
        Some(p) => std::fs::write(p, content).map_err(|e| format!("cannot write {}: {e}", p.display())),
        None => {
            println!("{content}");
            Ok(())
        }
    }
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode, String> {
    let problem = args.problem.build()?;
    let config = args.solver.to_config(&args.problem.problem, problem.as_ref());
    let solve = minimize(problem.as_ref(), &config);
    let record = report::RunRecord::new(&args.problem.problem, args.problem.params_echo(), &config, &solve);
    let json = serde_json::to_string_pretty(&record).map_err(|e| e.to_string())?;
    write_out(&args.out, &json)?;
    Ok(if solve.converged() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, String> {
    let problem = args.problem.build()?;
    let base = {
        let mut c = args.solver.to_config(&args.problem.problem, problem.as_ref());
        // a tolerance sweep is only meaningful for the iterative backend
        if !matches!(args.solver.backend, BackendArg::Direct) {
            c.backend = Backend::Iterative;
        }
        c
    };
    let mut criteria = Vec::new();
    match args.criteria {
        CriteriaArg::Residual => criteria.push(Criterion::ResidualBased),
        CriteriaArg::Error => criteria.push(Criterion::ErrorBased),
        CriteriaArg::Both => {
            criteria.push(Criterion::ResidualBased);
            if problem.sigma_min_bound().is_some() {
                criteria.push(Criterion::ErrorBased);
            } else {
                eprintln!(
                    "note: {} supplies no sigma_min bound; skipping error-based rows",
                    args.problem.problem
                );
            }
        }
    }
    let mut csv = String::from(report::CSV_HEADER);
    csv.push('\n');
    let mut all_converged = true;
    for criterion in criteria {
        for &eta in &args.etas {
            let config = SolverConfig {
                eta,
                criterion,
                ..base.clone()
            };
            let solve = minimize(problem.as_ref(), &config);
            all_converged &= solve.converged();
            let record = report::RunRecord::new(&args.problem.problem, args.problem.params_echo(), &config, &solve);
            csv.push_str(&record.csv_row());
            csv.push('\n');
        }
    }
    write_out(&args.out, csv.trim_end())?;
    Ok(if all_converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_threshold(args: ThresholdArgs) -> Result<ExitCode, String> {
    let problem = args.problem.build()?;
    let config = args.solver.to_config(&args.problem.problem, problem.as_ref());
    let solve = minimize(problem.as_ref(), &config);
    if !solve.converged() {
        return Err(format!(
            "solve for the threshold point did not converge (status {:?}); try another --sigma",
            solve.status
        ));
    }
    let x = DVector::from_vec(solve.x.clone());
    let y = DVector::from_vec(solve.y.clone());
    let implicit = threshold_sigma(problem.as_ref(), &x, &y, ThresholdMode::Implicit).map_err(|e| e.to_string())?;
    let explicit = threshold_sigma(problem.as_ref(), &x, &y, ThresholdMode::Explicit).map_err(|e| e.to_string())?;
    let json = serde_json::json!({
        "schema": 1,
        "problem": args.problem.problem,
        "params": args.problem.params_echo(),
        "sigma_solve": config.sigma,
        "solve_status": solve.status,
        "sigma_star_implicit": implicit.sigma_star,
        "sigma_bar_implicit": implicit.sigma_bar,
        "eigen_residual_implicit": implicit.eigen_residual,
        "sigma_star_explicit": explicit.sigma_star,
        "sigma_bar_explicit": explicit.sigma_bar,
        "eigen_residual_explicit": explicit.eigen_residual,
    });
    write_out(&args.out, &serde_json::to_string_pretty(&json).map_err(|e| e.to_string())?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode, String> {
    let problem = args.problem.build()?;
    let sigma = args.sigma.unwrap_or_else(|| default_sigma(&args.problem.problem));
    let outcome = checks::run_all(problem.as_ref(), sigma, args.problem.seed, args.points);
    Ok(if outcome {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Threshold(args) => cmd_threshold(args),
        Command::Check(args) => cmd_check(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
