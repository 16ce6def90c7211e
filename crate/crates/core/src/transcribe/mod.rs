//! Convex program over the feedback parameterization `(F, M)`.
//!
//! [`transcribe`] assembles the objective and every constraint over a
//! [`DecisionLayout`], lowers them to a [`ConicProgram`], and [`solve`] runs
//! any [`ConicSolver`] on it and maps the solution back to `(F, M)`.

pub mod conic;
pub mod ipm;
pub mod layout;
pub mod terms;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use conic::{ConeConstraint, ConeKind, ConicProgram, ConicSolver, SolverOutput};
pub use ipm::{InteriorPoint, IpmSettings};
pub use layout::DecisionLayout;
pub use terms::TerminalForm;

use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::lift::LiftedOperators;
use crate::linalg;
use crate::model::{self, SteeringProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalFailure => "numerical-failure",
        })
    }
}

/// Default relative weight of the tie-break term, see [`SolveOptions::tie_break`].
pub const DEFAULT_TIE_BREAK: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveOptions {
    /// Keep only `F` blocks with `k - i <= bandwidth`.
    pub bandwidth: Option<usize>,
    pub terminal: TerminalForm,
    /// When `S` is singular the objective does not determine `F` on its null
    /// space. The trace term then uses `S + w S̄` with `S̄` positive definite
    /// and `w = tie_break * λmax(S) / λmax(S̄)`, which leaves the
    /// unconstrained minimizer unchanged and makes the argmin unique. Zero
    /// disables it.
    pub tie_break: f64,
    pub solver: IpmSettings,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            bandwidth: None,
            terminal: TerminalForm::Lmi,
            tie_break: DEFAULT_TIE_BREAK,
            solver: IpmSettings::default(),
        }
    }
}

impl SolveOptions {
    /// Sets all three solver tolerances at once.
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.solver.feas_tol = tol;
        self.solver.abs_tol = tol;
        self.solver.rel_tol = tol;
        self.solver.reduced_tol = self.solver.reduced_tol.max(tol);
        self
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub status: SolveStatus,
    /// Exact objective `J(F, M)` at the returned point.
    pub objective: Option<f64>,
    /// Value of the program actually solved (differs from `objective` only
    /// by the tie-break term).
    pub program_objective: Option<f64>,
    /// Present only when `status` is optimal.
    pub f: Option<DMatrix<f64>>,
    pub m: Option<DVector<f64>>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
    /// Largest cone violation of the returned point in the lowered program.
    pub max_violation: f64,
    pub message: String,
    pub layout: DecisionLayout,
}

impl SolveOutcome {
    fn without_solution(status: SolveStatus, message: String, layout: DecisionLayout) -> Self {
        Self {
            status,
            objective: None,
            program_objective: None,
            f: None,
            m: None,
            iterations: 0,
            primal_residual: f64::NAN,
            dual_residual: f64::NAN,
            gap: f64::NAN,
            max_violation: f64::NAN,
            message,
            layout,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }
}

/// Either a program ready for a solver, or a reason it is infeasible
/// before any solve.
#[derive(Debug, Clone)]
pub enum Transcription {
    Program(ConicProgram),
    Infeasible(String),
}

/// Trace-term covariance with the tie-break applied when `S` is singular.
fn objective_cov(problem: &SteeringProblem, ops: &LiftedOperators, tie_break: f64) -> DMatrix<f64> {
    if tie_break <= 0.0 {
        return ops.s.clone();
    }
    let (vals, _) = linalg::sym_eigen(&ops.s);
    let top = vals[vals.len() - 1].max(0.0);
    if top <= 0.0 || vals[0] > 1e-10 * top {
        return ops.s.clone();
    }
    let unit = ops.unit_innovation_cov(problem);
    let (uvals, _) = linalg::sym_eigen(&unit);
    let w = tie_break * top / uvals[uvals.len() - 1];
    &ops.s + unit * w
}

/// Builds the lowered program: objective epigraph, terminal mean equality,
/// chance cones for `k = 1..N`, and the terminal covariance bound. The
/// `k = 0` chance constraints and the terminal precheck involve no decision
/// and are evaluated here.
pub fn transcribe(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    ops: &LiftedOperators,
    opts: &SolveOptions,
) -> Result<Transcription> {
    let dims = problem.dims();
    let layout = DecisionLayout::new(dims.horizon, dims.nx, dims.nu, opts.bandwidth);
    let pre = model::feasibility_precheck(problem, schedule)?;
    if !pre.passed {
        return Ok(Transcription::Infeasible(format!(
            "terminal filter error exceeds the covariance bound: min eigenvalue of P_f - P_err_N is {:.6e}",
            pre.min_eigenvalue
        )));
    }
    let mut constraints = vec![terms::mean_constraint(
        ops,
        &layout,
        &problem.prior_mean,
        &problem.target_mean,
    )];
    let origin = vec![0.0; layout.len()];
    for (j, con) in problem.constraints.iter().enumerate() {
        for k in 0..=dims.horizon {
            let label = format!("chance j={} k={k}", j + 1);
            let cone = terms::chance_constraint_rows(
                ops,
                schedule,
                &layout,
                &problem.prior_mean,
                con,
                k,
                label,
            )?;
            if k == 0 {
                let margin = cone.margin(&origin);
                if margin < 0.0 {
                    return Ok(Transcription::Infeasible(format!(
                        "chance constraint j={} is violated at k=0 by the initial distribution (margin {margin:.6e})",
                        j + 1
                    )));
                }
                continue;
            }
            constraints.push(cone);
        }
    }
    constraints.push(terms::terminal_cov_constraint(
        ops,
        &layout,
        &problem.target_cov_bound,
        &schedule.posterior_error_cov[dims.horizon],
        opts.terminal,
    )?);
    let cov = objective_cov(problem, ops, opts.tie_break);
    let objective = terms::objective_with_cov(ops, &problem.prior_mean, &layout, &cov);
    Ok(Transcription::Program(conic::lower_to_conic(
        &objective,
        constraints,
        &layout,
    )?))
}

/// Runs `solver` and maps its point back to `(F, M)`.
pub fn solve(program: &ConicProgram, solver: &dyn ConicSolver) -> SolveOutcome {
    let out = solver.solve(program);
    let layout = program.layout.clone();
    let finite = out.x.len() == program.n_vars && out.x.iter().all(|v| v.is_finite());
    let max_violation = if finite {
        program.max_violation(&out.x)
    } else {
        f64::NAN
    };
    let mut outcome = SolveOutcome {
        status: out.status,
        objective: None,
        program_objective: None,
        f: None,
        m: None,
        iterations: out.iterations,
        primal_residual: out.primal_residual,
        dual_residual: out.dual_residual,
        gap: out.gap,
        max_violation,
        message: out.message,
        layout,
    };
    if out.status == SolveStatus::Optimal && finite {
        let (f, m) = outcome.layout.unpack(&out.x);
        outcome.program_objective = Some(program.objective_value(&out.x));
        outcome.f = Some(f);
        outcome.m = Some(m);
    } else if out.status == SolveStatus::Optimal {
        outcome.status = SolveStatus::NumericalFailure;
        outcome.message = format!(
            "solver reported optimal with a non-finite point: {}",
            outcome.message
        );
    }
    outcome
}

/// Validates, transcribes and solves with the built-in interior-point
/// backend. Validation failures are errors; infeasibility is a status.
pub fn solve_problem(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    ops: &LiftedOperators,
    opts: &SolveOptions,
) -> Result<SolveOutcome> {
    let report = model::validate(problem);
    if !report.passed() {
        return Err(Error::Invalid(report.failure_summary()));
    }
    let program = match transcribe(problem, schedule, ops, opts)? {
        Transcription::Program(p) => p,
        Transcription::Infeasible(why) => {
            let dims = problem.dims();
            let layout = DecisionLayout::new(dims.horizon, dims.nx, dims.nu, opts.bandwidth);
            return Ok(SolveOutcome::without_solution(
                SolveStatus::Infeasible,
                why,
                layout,
            ));
        }
    };
    let solver = InteriorPoint::new(opts.solver.clone());
    let mut outcome = solve(&program, &solver);
    if let (Some(f), Some(m)) = (&outcome.f, &outcome.m) {
        outcome.objective = Some(terms::objective_value(ops, &problem.prior_mean, f, m));
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{kalman, lift};

    fn scalar_problem(horizon: usize) -> SteeringProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        SteeringProblem {
            horizon,
            a: vec![one.clone(); horizon],
            b: vec![one.clone(); horizon],
            g: vec![one.clone() * 0.1; horizon],
            c: vec![one.clone(); horizon + 1],
            d: vec![one.clone() * 0.2; horizon + 1],
            prior_mean: DVector::from_element(1, 0.0),
            prior_estimate_cov: one.clone() * 0.05,
            prior_error_cov: one.clone() * 0.05,
            target_mean: DVector::from_element(1, 1.0),
            target_cov_bound: one.clone(),
            q: vec![one.clone(); horizon],
            r: vec![one.clone(); horizon],
            constraints: vec![],
            total_risk: 1e-3,
        }
    }

    #[test]
    fn unreachable_mean_is_infeasible() {
        let mut p = scalar_problem(2);
        p.b = vec![DMatrix::zeros(1, 1); 2];
        let sched = kalman::run_schedule(&p).unwrap();
        let ops = lift::build(&p, &sched).unwrap();
        let out = solve_problem(&p, &sched, &ops, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);
        assert!(out.f.is_none());
    }

    #[test]
    fn precheck_failure_is_infeasible_without_solve() {
        let mut p = scalar_problem(2);
        p.target_cov_bound = DMatrix::from_element(1, 1, 1e-6);
        let sched = kalman::run_schedule(&p).unwrap();
        let ops = lift::build(&p, &sched).unwrap();
        let out = solve_problem(&p, &sched, &ops, &SolveOptions::default()).unwrap();
        assert_eq!(out.status, SolveStatus::Infeasible);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn solution_respects_layout_and_mean() {
        let p = scalar_problem(3);
        let sched = kalman::run_schedule(&p).unwrap();
        let ops = lift::build(&p, &sched).unwrap();
        let opts = SolveOptions {
            bandwidth: Some(1),
            ..Default::default()
        };
        let out = solve_problem(&p, &sched, &ops, &opts).unwrap();
        assert_eq!(out.status, SolveStatus::Optimal, "{}", out.message);
        let f = out.f.unwrap();
        assert!(out.layout.respects(&f));
        let m = out.m.unwrap();
        let mean = &ops.a * &p.prior_mean + &ops.b * &m;
        assert!((mean[3] - 1.0).abs() < 1e-7);
    }
}
