//! Problem definition: dynamics, observation model, initial and terminal
//! distribution data, cost weights and probabilistic half-plane constraints.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::linalg;

/// Probabilistic half-plane constraint `P(α' x_k > β) <= risk`.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfPlaneConstraint {
    pub normal: DVector<f64>,
    pub offset: f64,
    pub risk: f64,
}

impl HalfPlaneConstraint {
    pub fn new(normal: DVector<f64>, offset: f64, risk: f64) -> Self {
        Self {
            normal,
            offset,
            risk,
        }
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.normal.dot(x) <= self.offset
    }
}

/// A full steering problem over a horizon of `N` steps.
///
/// Per-step sequences are indexed by time: dynamics and cost have `N`
/// entries (`k = 0..N-1`), the observation model has `N + 1` (`k = 0..N`).
#[derive(Debug, Clone)]
pub struct SteeringProblem {
    pub horizon: usize,
    /// State transition matrices `A_k`.
    pub a: Vec<DMatrix<f64>>,
    /// Input matrices `B_k`.
    pub b: Vec<DMatrix<f64>>,
    /// Process noise input matrices `G_k` (`n_x x n_w`).
    pub g: Vec<DMatrix<f64>>,
    /// Observation matrices `C_k`.
    pub c: Vec<DMatrix<f64>>,
    /// Measurement noise matrices `D_k` (square, invertible).
    pub d: Vec<DMatrix<f64>>,
    pub prior_mean: DVector<f64>,
    /// Covariance of the prior state estimate around the mean.
    pub prior_estimate_cov: DMatrix<f64>,
    /// Covariance of the prior estimation error.
    pub prior_error_cov: DMatrix<f64>,
    pub target_mean: DVector<f64>,
    pub target_cov_bound: DMatrix<f64>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub constraints: Vec<HalfPlaneConstraint>,
    /// Total failure probability `p_fail`.
    pub total_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    pub nw: usize,
    pub horizon: usize,
}

impl SteeringProblem {
    pub fn dims(&self) -> Dims {
        Dims {
            nx: self.prior_mean.len(),
            nu: self.b.first().map_or(0, |m| m.ncols()),
            ny: self.c.first().map_or(0, |m| m.nrows()),
            nw: self.g.first().map_or(0, |m| m.ncols()),
            horizon: self.horizon,
        }
    }

    /// Returns a copy with every symmetric input symmetrized, or an error if
    /// any of them is visibly asymmetric.
    pub fn symmetrized(&self) -> Result<Self> {
        let mut out = self.clone();
        out.prior_estimate_cov = linalg::checked_symmetric(&self.prior_estimate_cov)?;
        out.prior_error_cov = linalg::checked_symmetric(&self.prior_error_cov)?;
        out.target_cov_bound = linalg::checked_symmetric(&self.target_cov_bound)?;
        out.q = self
            .q
            .iter()
            .map(linalg::checked_symmetric)
            .collect::<Result<_>>()?;
        out.r = self
            .r
            .iter()
            .map(linalg::checked_symmetric)
            .collect::<Result<_>>()?;
        Ok(out)
    }

    /// Validates and returns an error listing every failed check.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate(self);
        if report.passed() {
            Ok(())
        } else {
            Err(Error::Invalid(report.failure_summary()))
        }
    }

    /// Product `A_{to-1} ... A_{from}` (identity when `to == from`).
    pub fn transition(&self, to: usize, from: usize) -> DMatrix<f64> {
        let nx = self.prior_mean.len();
        let mut phi = DMatrix::identity(nx, nx);
        for k in from..to {
            phi = &self.a[k] * phi;
        }
        phi
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Failure message; empty for a passing check.
    pub detail: String,
}

/// Itemized result of [`validate`].
#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    fn record(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        let detail = if passed { String::new() } else { detail.into() };
        self.checks.push(Check {
            name: name.into(),
            passed,
            detail,
        });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn failure_summary(&self) -> String {
        self.failures()
            .map(|c| c.detail.clone())
            .collect::<Vec<_>>()
            .join("; ")
    }
}

fn shape_ok(m: &DMatrix<f64>, rows: usize, cols: usize) -> bool {
    m.nrows() == rows && m.ncols() == cols
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Checks every standing assumption of the method. Never aborts: each
/// violated invariant becomes a failed entry naming the offending step `k`
/// or constraint `j` (1-based).
pub fn validate(problem: &SteeringProblem) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = problem.horizon;
    let Dims { nx, nu, ny, nw, .. } = problem.dims();

    rep.record(
        "horizon",
        n >= 1,
        format!("horizon N = {n} must be positive"),
    );
    rep.record(
        "state dimension",
        nx >= 1,
        "state dimension must be positive",
    );

    let lengths = [
        ("A", problem.a.len(), n),
        ("B", problem.b.len(), n),
        ("G", problem.g.len(), n),
        ("C", problem.c.len(), n + 1),
        ("D", problem.d.len(), n + 1),
        ("Q", problem.q.len(), n),
        ("R", problem.r.len(), n),
    ];
    let mut lengths_ok = true;
    for (name, got, want) in lengths {
        let ok = got == want;
        lengths_ok &= ok;
        rep.record(
            format!("{name} sequence length"),
            ok,
            format!("{name} has {got} steps, expected {want}"),
        );
    }

    let mut dims_ok = lengths_ok;
    if lengths_ok {
        for k in 0..n {
            for (name, m, r, c) in [
                ("A", &problem.a[k], nx, nx),
                ("B", &problem.b[k], nx, nu),
                ("G", &problem.g[k], nx, nw),
                ("Q", &problem.q[k], nx, nx),
                ("R", &problem.r[k], nu, nu),
            ] {
                if !shape_ok(m, r, c) || !finite(m) {
                    dims_ok = false;
                    rep.record(
                        format!("{name}_{k} shape"),
                        false,
                        format!(
                            "{name}_{k} is {}x{} (expected {r}x{c}) or has non-finite entries",
                            m.nrows(),
                            m.ncols()
                        ),
                    );
                }
            }
        }
        for k in 0..=n {
            for (name, m, r, c) in [("C", &problem.c[k], ny, nx), ("D", &problem.d[k], ny, ny)] {
                if !shape_ok(m, r, c) || !finite(m) {
                    dims_ok = false;
                    rep.record(
                        format!("{name}_{k} shape"),
                        false,
                        format!(
                            "{name}_{k} is {}x{} (expected {r}x{c}) or has non-finite entries",
                            m.nrows(),
                            m.ncols()
                        ),
                    );
                }
            }
        }
    }
    for (name, m) in [
        ("prior estimate covariance", &problem.prior_estimate_cov),
        ("prior error covariance", &problem.prior_error_cov),
        ("terminal covariance bound", &problem.target_cov_bound),
    ] {
        if !shape_ok(m, nx, nx) || !finite(m) {
            dims_ok = false;
            rep.record(
                format!("{name} shape"),
                false,
                format!("{name} must be a finite {nx}x{nx} matrix"),
            );
        }
    }
    if problem.target_mean.len() != nx {
        dims_ok = false;
        rep.record(
            "terminal mean shape",
            false,
            format!(
                "terminal mean has length {}, expected {nx}",
                problem.target_mean.len()
            ),
        );
    }
    rep.record(
        "dimensions consistent",
        dims_ok,
        "matrix dimensions are inconsistent",
    );

    if dims_ok {
        for (k, d) in problem.d.iter().enumerate() {
            let sv = d.clone().singular_values();
            let smax = sv.max();
            let smin = sv.min();
            let ok = ny == 0 || smin > 1e-12 * smax.max(1.0);
            rep.record(
                format!("D_{k} invertible"),
                ok,
                format!("D_{k} not invertible (smallest singular value {smin:.3e})"),
            );
        }

        let sym_checks: Vec<(String, &DMatrix<f64>, bool)> = {
            let mut v = vec![
                (
                    "prior estimate covariance".to_string(),
                    &problem.prior_estimate_cov,
                    false,
                ),
                (
                    "prior error covariance".to_string(),
                    &problem.prior_error_cov,
                    false,
                ),
                ("P_f".to_string(), &problem.target_cov_bound, true),
            ];
            for (k, q) in problem.q.iter().enumerate() {
                v.push((format!("Q_{k}"), q, false));
            }
            for (k, r) in problem.r.iter().enumerate() {
                v.push((format!("R_{k}"), r, true));
            }
            v
        };
        for (name, m, strict) in sym_checks {
            let asym = linalg::max_asymmetry(m);
            let sym_ok = asym <= linalg::SYMMETRY_TOL * linalg::max_abs(m).max(1.0);
            rep.record(
                format!("{name} symmetric"),
                sym_ok,
                format!("{name} is not symmetric (asymmetry {asym:.3e})"),
            );
            if sym_ok {
                let (ok, what) = if strict {
                    (linalg::is_pd(m), "positive definite")
                } else {
                    (linalg::is_psd(m), "positive semidefinite")
                };
                rep.record(
                    format!("{name} {what}"),
                    ok,
                    format!(
                        "{name} is not {what} (min eigenvalue {:.3e})",
                        linalg::min_eigenvalue(m)
                    ),
                );
            }
        }
    }

    let p_fail = problem.total_risk;
    rep.record(
        "total risk range",
        p_fail > 0.0 && p_fail < 0.5,
        format!("p_fail = {p_fail} outside (0, 0.5)"),
    );
    let mut risk_sum = 0.0;
    for (idx, con) in problem.constraints.iter().enumerate() {
        let j = idx + 1;
        risk_sum += con.risk;
        rep.record(
            format!("p_{j} range"),
            con.risk > 0.0 && con.risk < 0.5,
            format!("p_{j} outside (0, 0.5)"),
        );
        rep.record(
            format!("alpha_{j} shape"),
            con.normal.len() == nx,
            format!("alpha_{j} has length {}, expected {nx}", con.normal.len()),
        );
        rep.record(
            format!("alpha_{j} nonzero"),
            con.normal.iter().any(|v| *v != 0.0) && con.normal.iter().all(|v| v.is_finite()),
            format!("alpha_{j} must be a finite nonzero vector"),
        );
        rep.record(
            format!("beta_{j} finite"),
            con.offset.is_finite(),
            format!("beta_{j} must be finite"),
        );
    }
    rep.record(
        "risk allocation",
        risk_sum <= p_fail * (1.0 + 1e-12),
        format!("sum of p_j = {risk_sum} exceeds p_fail = {p_fail}"),
    );
    rep
}

/// Result of [`feasibility_precheck`].
#[derive(Debug, Clone, Serialize)]
pub struct PrecheckResult {
    pub passed: bool,
    /// Smallest eigenvalue of `P_f - P̃_N`.
    pub min_eigenvalue: f64,
    /// All eigenvalues of `P_f - P̃_N`, ascending.
    pub margin_eigenvalues: Vec<f64>,
    /// Eigenvalues of the terminal filter error covariance `P̃_N`, ascending.
    pub terminal_error_eigenvalues: Vec<f64>,
    pub tolerance: f64,
}

/// Default `ε` in the strict test `P_f - P̃_N ≻ ε I`.
pub const PRECHECK_TOL: f64 = 1e-9;

/// Passes iff `P_f - P̃_N ≻ ε I`: no policy can bring the total terminal
/// covariance under `P_f` when the filter error alone already exceeds it.
pub fn feasibility_precheck(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
) -> Result<PrecheckResult> {
    feasibility_precheck_with_tol(problem, schedule, PRECHECK_TOL)
}

pub fn feasibility_precheck_with_tol(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    tol: f64,
) -> Result<PrecheckResult> {
    let n = problem.horizon;
    let nx = problem.prior_mean.len();
    if schedule.posterior_error_cov.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "schedule covers {} steps, problem horizon needs {}",
            schedule.posterior_error_cov.len(),
            n + 1
        )));
    }
    let terminal = &schedule.posterior_error_cov[n];
    if !shape_ok(terminal, nx, nx) || !shape_ok(&problem.target_cov_bound, nx, nx) {
        return Err(Error::Dimension(
            "terminal covariance shapes do not match the state dimension".into(),
        ));
    }
    let margin = &problem.target_cov_bound - terminal;
    let (vals, _) = linalg::sym_eigen(&margin);
    let (terr, _) = linalg::sym_eigen(terminal);
    let min_eigenvalue = vals[0];
    Ok(PrecheckResult {
        passed: min_eigenvalue > tol,
        min_eigenvalue,
        margin_eigenvalues: vals.iter().copied().collect(),
        terminal_error_eigenvalues: terr.iter().copied().collect(),
        tolerance: tol,
    })
}

/// Parameters of the planar double-integrator instance.
#[derive(Debug, Clone)]
pub struct DoubleIntegratorParams {
    pub horizon: usize,
    pub dt: f64,
    pub process_noise: f64,
    /// Diagonal of `D_k`.
    pub measurement_noise: [f64; 3],
    pub prior_error_diag: [f64; 4],
    pub prior_estimate_diag: [f64; 4],
    pub prior_mean: [f64; 4],
    pub target_mean: [f64; 4],
    pub target_cov_diag: [f64; 4],
    /// `(α, β, p)` for each half-plane.
    pub constraints: Vec<([f64; 4], f64, f64)>,
    pub total_risk: f64,
    /// `Q_k = state_weight * I`. Zero gives the minimum-effort objective.
    pub state_weight: f64,
}

impl Default for DoubleIntegratorParams {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.2,
            process_noise: 0.01,
            measurement_noise: [0.1, 0.003, 0.003],
            prior_error_diag: [2e-2, 1e-2, 1.4e-2, 1.4e-2],
            prior_estimate_diag: [8e-2, 9e-2, 0.6e-2, 0.6e-2],
            prior_mean: [1.5, 3.5, 3.0, 2.0],
            target_mean: [6.5, 1.5, 0.0, 0.0],
            target_cov_diag: [6e-2, 6e-2, 0.6e-2, 0.6e-2],
            constraints: vec![
                ([1.0, 5.0, 0.0, 0.0], 27.5, 5e-4),
                ([1.0, 1.0, 0.0, 0.0], 9.0, 5e-4),
            ],
            total_risk: 1e-3,
            state_weight: 0.0,
        }
    }
}

/// Planar double integrator with the velocity pair and the second position
/// coordinate measured, `R_k = I` and `Q_k = state_weight * I`.
pub fn double_integrator(p: &DoubleIntegratorParams) -> SteeringProblem {
    let dt = p.dt;
    #[rustfmt::skip]
    let a = DMatrix::from_row_slice(4, 4, &[
        1.0, 0.0, dt, 0.0,
        0.0, 1.0, 0.0, dt,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    #[rustfmt::skip]
    let b = DMatrix::from_row_slice(4, 2, &[
        dt * dt / 2.0, 0.0,
        0.0, dt * dt / 2.0,
        dt, 0.0,
        0.0, dt,
    ]);
    let g = DMatrix::identity(4, 4) * p.process_noise;
    #[rustfmt::skip]
    let c = DMatrix::from_row_slice(3, 4, &[
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]);
    let d = DMatrix::from_diagonal(&DVector::from_row_slice(&p.measurement_noise));
    let n = p.horizon;
    SteeringProblem {
        horizon: n,
        a: vec![a; n],
        b: vec![b; n],
        g: vec![g; n],
        c: vec![c; n + 1],
        d: vec![d; n + 1],
        prior_mean: DVector::from_row_slice(&p.prior_mean),
        prior_estimate_cov: DMatrix::from_diagonal(&DVector::from_row_slice(
            &p.prior_estimate_diag,
        )),
        prior_error_cov: DMatrix::from_diagonal(&DVector::from_row_slice(&p.prior_error_diag)),
        target_mean: DVector::from_row_slice(&p.target_mean),
        target_cov_bound: DMatrix::from_diagonal(&DVector::from_row_slice(&p.target_cov_diag)),
        q: vec![DMatrix::identity(4, 4) * p.state_weight; n],
        r: vec![DMatrix::identity(2, 2); n],
        constraints: p
            .constraints
            .iter()
            .map(|(alpha, beta, risk)| {
                HalfPlaneConstraint::new(DVector::from_row_slice(alpha), *beta, *risk)
            })
            .collect(),
        total_risk: p.total_risk,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman;

    #[test]
    fn double_integrator_passes_validation() {
        let problem = double_integrator(&DoubleIntegratorParams::default());
        let report = validate(&problem);
        assert!(report.passed(), "{}", report.failure_summary());
    }

    #[test]
    fn singular_measurement_noise_is_reported() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        problem.d[0] = DMatrix::zeros(3, 3);
        let report = validate(&problem);
        assert!(!report.passed());
        assert!(report
            .failures()
            .any(|c| c.detail.contains("D_0 not invertible")));
    }

    #[test]
    fn risk_out_of_range_is_reported() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        problem.constraints[0].risk = 0.6;
        let report = validate(&problem);
        assert!(report
            .failures()
            .any(|c| c.detail.contains("p_1 outside (0, 0.5)")));
    }

    #[test]
    fn validate_is_total_on_garbage_shapes() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        problem.a.pop();
        problem.c[3] = DMatrix::zeros(1, 1);
        problem.constraints[1].normal = DVector::zeros(2);
        let report = validate(&problem);
        assert!(!report.passed());
        assert!(report.failures().count() >= 2);
    }

    #[test]
    fn precheck_boundaries() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        let schedule = kalman::run_schedule(&problem).unwrap();
        assert!(feasibility_precheck(&problem, &schedule).unwrap().passed);

        let terminal = schedule.posterior_error_cov[problem.horizon].clone();
        problem.target_cov_bound = terminal.clone();
        let res = feasibility_precheck(&problem, &schedule).unwrap();
        assert!(!res.passed);
        assert!(res.min_eigenvalue.abs() < 1e-15);

        problem.target_cov_bound = terminal + DMatrix::identity(4, 4);
        assert!(feasibility_precheck(&problem, &schedule).unwrap().passed);
    }
}
