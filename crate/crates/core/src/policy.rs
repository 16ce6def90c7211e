//! History-feedback gains and the analytic closed-loop distribution.
//!
//! The control law is `u_k = Σ_{i<=k} K_{k,i} (x̂_i - x̄_i) + m_k`. Writing
//! `Z = A (x̂_{0⁻} - x̄_0) + L Ỹ` for the lifted noise (covariance `S`), the
//! closed loop gives `U - M = F Z` and `X̂ - X̄ = (I + BF) Z` with
//! `F = K (I - BK)^{-1}`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::lift::LiftedOperators;
use crate::linalg;
use crate::model::SteeringProblem;
use crate::stats;
use crate::transcribe::{DecisionLayout, SolveOutcome};

/// `K = F (I + BF)^{-1}`. `I + BF` is unit block lower-triangular whenever
/// `F` is block lower-triangular, so this is a triangular solve.
pub fn recover_gains(f: &DMatrix<f64>, ops: &LiftedOperators) -> DMatrix<f64> {
    let closed = DMatrix::identity(ops.state_dim(), ops.state_dim()) + &ops.b * f;
    // K (I + BF) = F  <=>  (I + BF)' K' = F'
    let kt = closed
        .transpose()
        .solve_upper_triangular(&f.transpose())
        .expect("unit triangular system is nonsingular");
    kt.transpose()
}

/// `F = K (I - BK)^{-1}`, the inverse of [`recover_gains`].
pub fn feedback_from_gains(k: &DMatrix<f64>, ops: &LiftedOperators) -> DMatrix<f64> {
    let open = DMatrix::identity(ops.state_dim(), ops.state_dim()) - &ops.b * k;
    let ft = open
        .transpose()
        .solve_upper_triangular(&k.transpose())
        .expect("unit triangular system is nonsingular");
    ft.transpose()
}

/// Analytic closed-loop distribution for `k = 0..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    /// `x̄_k`, the mean of both `x_k` and `x̂_k`.
    pub mean: Vec<DVector<f64>>,
    /// `P̂_k = E_k (I+BF) S (I+BF)' E_k'`.
    pub filtered_cov: Vec<DMatrix<f64>>,
    /// `P_k = P̂_k + P̃_k`.
    pub total_cov: Vec<DMatrix<f64>>,
}

pub fn propagate_distribution(
    f: &DMatrix<f64>,
    m: &DVector<f64>,
    ops: &LiftedOperators,
    schedule: &FilterSchedule,
    prior_mean: &DVector<f64>,
) -> Distribution {
    let nx = ops.nx;
    let mean_stack = &ops.a * prior_mean + &ops.b * m;
    let closed = DMatrix::identity(ops.state_dim(), ops.state_dim()) + &ops.b * f;
    let phat = linalg::symmetrize(&(&closed * &ops.s * closed.transpose()));
    let mut out = Distribution {
        mean: Vec::with_capacity(ops.horizon + 1),
        filtered_cov: Vec::with_capacity(ops.horizon + 1),
        total_cov: Vec::with_capacity(ops.horizon + 1),
    };
    for k in 0..=ops.horizon {
        let r = ops.state_range(k);
        out.mean.push(mean_stack.rows(r.start, nx).clone_owned());
        let block = phat.view((r.start, r.start), (nx, nx)).clone_owned();
        out.total_cov.push(linalg::symmetrize(
            &(&block + &schedule.posterior_error_cov[k]),
        ));
        out.filtered_cov.push(block);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub layout: DecisionLayout,
    pub f: DMatrix<f64>,
    pub m: DVector<f64>,
    /// `N n_u x (N+1) n_x`, block lower-triangular.
    pub k: DMatrix<f64>,
    /// `m_k` for `k = 0..N-1`.
    pub feedforward: Vec<DVector<f64>>,
    pub distribution: Distribution,
    /// `J(F, M)` when known.
    pub objective: Option<f64>,
}

impl Policy {
    pub fn new(
        layout: DecisionLayout,
        f: DMatrix<f64>,
        m: DVector<f64>,
        problem: &SteeringProblem,
        schedule: &FilterSchedule,
        ops: &LiftedOperators,
    ) -> Result<Self> {
        if f.nrows() != ops.input_dim()
            || f.ncols() != ops.state_dim()
            || m.len() != ops.input_dim()
        {
            return Err(Error::Dimension(format!(
                "F must be {}x{} and M of length {}",
                ops.input_dim(),
                ops.state_dim(),
                ops.input_dim()
            )));
        }
        if !layout.respects(&f) {
            return Err(Error::Layout(
                "F has nonzeros outside its decision layout".into(),
            ));
        }
        let k = recover_gains(&f, ops);
        let feedforward = (0..ops.horizon)
            .map(|t| m.rows(t * ops.nu, ops.nu).clone_owned())
            .collect();
        let distribution = propagate_distribution(&f, &m, ops, schedule, &problem.prior_mean);
        Ok(Self {
            layout,
            f,
            m,
            k,
            feedforward,
            distribution,
            objective: None,
        })
    }

    pub fn from_outcome(
        outcome: &SolveOutcome,
        problem: &SteeringProblem,
        schedule: &FilterSchedule,
        ops: &LiftedOperators,
    ) -> Result<Self> {
        let (Some(f), Some(m)) = (&outcome.f, &outcome.m) else {
            return Err(Error::Invalid(format!(
                "no policy to recover: solver status {}",
                outcome.status
            )));
        };
        let mut policy = Self::new(
            outcome.layout.clone(),
            f.clone(),
            m.clone(),
            problem,
            schedule,
            ops,
        )?;
        policy.objective = outcome.objective;
        Ok(policy)
    }

    pub fn horizon(&self) -> usize {
        self.layout.horizon
    }

    /// Block `K_{k,i}`.
    pub fn gain(&self, k: usize, i: usize) -> DMatrix<f64> {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        self.k.view((k * nu, i * nx), (nu, nx)).clone_owned()
    }

    /// `u_k` from the stacked estimate deviations `x̂_i - x̄_i`, `i = 0..=k`
    /// (at least `(k+1) n_x` entries are read).
    pub fn control_into(&self, k: usize, deviations: &[f64], u: &mut [f64]) {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        let len = (k + 1) * nx;
        for (a, out) in u.iter_mut().enumerate().take(nu) {
            let row = k * nu + a;
            let mut acc = self.m[row];
            for (c, d) in deviations[..len].iter().enumerate() {
                acc += self.k[(row, c)] * d;
            }
            *out = acc;
        }
    }

    pub fn to_export(&self, audit: &ConstraintAudit) -> PolicyExport {
        let (nx, nu) = (self.layout.nx, self.layout.nu);
        let blocks = self
            .layout
            .blocks()
            .iter()
            .map(|&(k, i)| GainBlock {
                k,
                i,
                gain: linalg::nested_rows(&self.gain(k, i)),
                feedback: linalg::nested_rows(
                    &self.f.view((k * nu, i * nx), (nu, nx)).clone_owned(),
                ),
            })
            .collect();
        PolicyExport {
            config_sha256: None,
            horizon: self.layout.horizon,
            nx,
            nu,
            bandwidth: self.layout.bandwidth,
            objective: self.objective,
            blocks,
            feedforward: self
                .feedforward
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            mean: self
                .distribution
                .mean
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            filtered_cov: self
                .distribution
                .filtered_cov
                .iter()
                .map(linalg::row_major)
                .collect(),
            total_cov: self
                .distribution
                .total_cov
                .iter()
                .map(linalg::row_major)
                .collect(),
            audit: audit.clone(),
        }
    }

    /// Rebuilds a policy from its export; the distribution is recomputed.
    pub fn from_export(
        export: &PolicyExport,
        problem: &SteeringProblem,
        schedule: &FilterSchedule,
        ops: &LiftedOperators,
    ) -> Result<Self> {
        let (nx, nu) = (export.nx, export.nu);
        if export.horizon != ops.horizon || nx != ops.nx || nu != ops.nu {
            return Err(Error::Dimension(format!(
                "policy is for N={}, n_x={}, n_u={} but the problem has N={}, n_x={}, n_u={}",
                export.horizon, nx, nu, ops.horizon, ops.nx, ops.nu
            )));
        }
        let layout = DecisionLayout::new(export.horizon, nx, nu, export.bandwidth);
        let mut f = DMatrix::zeros(layout.f_rows(), layout.f_cols());
        for b in &export.blocks {
            let block = rows_to_matrix(&b.feedback, nu, nx)?;
            if b.i > b.k || b.k >= export.horizon {
                return Err(Error::Layout(format!(
                    "block ({}, {}) outside the horizon",
                    b.k, b.i
                )));
            }
            f.view_mut((b.k * nu, b.i * nx), (nu, nx)).copy_from(&block);
        }
        if export.feedforward.len() != export.horizon
            || export.feedforward.iter().any(|v| v.len() != nu)
        {
            return Err(Error::Dimension(format!(
                "feedforward must be {} vectors of length {nu}",
                export.horizon
            )));
        }
        let m = DVector::from_iterator(
            export.horizon * nu,
            export.feedforward.iter().flatten().copied(),
        );
        let mut policy = Self::new(layout, f, m, problem, schedule, ops)?;
        policy.objective = export.objective;
        Ok(policy)
    }
}

fn rows_to_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!(
            "expected a {nrows}x{ncols} block"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainBlock {
    pub k: usize,
    pub i: usize,
    /// `K_{k,i}`.
    pub gain: Vec<Vec<f64>>,
    /// `F_{k,i}`.
    pub feedback: Vec<Vec<f64>>,
}

/// Machine-readable policy; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyExport {
    /// Hash of the configuration bytes the policy was solved for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub bandwidth: Option<usize>,
    pub objective: Option<f64>,
    pub blocks: Vec<GainBlock>,
    pub feedforward: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub filtered_cov: Vec<Vec<f64>>,
    pub total_cov: Vec<Vec<f64>>,
    pub audit: ConstraintAudit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceSlack {
    pub k: usize,
    /// 1-based constraint index.
    pub j: usize,
    /// `Φ⁻¹(1 - p_j) ||P_k^{1/2} α_j|| + α_j' x̄_k - β_j`; satisfied when `<= 0`.
    pub value: f64,
    /// `-value`, in the units of `β_j`; negative means violated.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub chance: Vec<ChanceSlack>,
    /// Minimum eigenvalue of `P_f - P_N`.
    pub terminal_cov_slack: f64,
    /// `||x̄_N - x̄_f||_∞`.
    pub terminal_mean_residual: f64,
}

impl ConstraintAudit {
    /// Smallest chance slack, `+inf` without half-plane constraints.
    pub fn worst_chance_slack(&self) -> f64 {
        self.chance
            .iter()
            .map(|c| c.slack)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn worst_chance(&self) -> Option<&ChanceSlack> {
        self.chance
            .iter()
            .min_by(|a, b| a.slack.total_cmp(&b.slack))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,k,j,value,slack\n");
        for c in &self.chance {
            s.push_str(&format!(
                "chance,{},{},{:e},{:e}\n",
                c.k, c.j, c.value, c.slack
            ));
        }
        s.push_str(&format!(
            "terminal-covariance,,,,{:e}\n",
            self.terminal_cov_slack
        ));
        s.push_str(&format!(
            "terminal-mean,,,{:e},{:e}\n",
            self.terminal_mean_residual, -self.terminal_mean_residual
        ));
        s
    }
}

/// Chance-constraint slacks for every `(k, j)` and the terminal slacks.
pub fn audit_constraints(policy: &Policy, problem: &SteeringProblem) -> ConstraintAudit {
    let dist = &policy.distribution;
    let n = problem.horizon;
    let mut chance = Vec::new();
    for k in 0..=n {
        for (j, con) in problem.constraints.iter().enumerate() {
            let q = stats::normal_quantile(1.0 - con.risk);
            let alpha = &con.normal;
            let spread = alpha.dot(&(&dist.total_cov[k] * alpha)).max(0.0).sqrt();
            let value = q * spread + alpha.dot(&dist.mean[k]) - con.offset;
            chance.push(ChanceSlack {
                k,
                j: j + 1,
                value,
                slack: -value,
            });
        }
    }
    let terminal_cov_slack = linalg::min_eigenvalue(&linalg::symmetrize(
        &(&problem.target_cov_bound - &dist.total_cov[n]),
    ));
    let terminal_mean_residual = (&dist.mean[n] - &problem.target_mean).amax();
    ConstraintAudit {
        chance,
        terminal_cov_slack,
        terminal_mean_residual,
    }
}

/// Mean trajectory CSV: `k, x̄_k...`, then `m_k...` (empty at `k = N`).
pub fn mean_trajectory_csv(policy: &Policy) -> String {
    let (nx, nu) = (policy.layout.nx, policy.layout.nu);
    let mut s = String::from("k");
    for i in 0..nx {
        s.push_str(&format!(",mean_{i}"));
    }
    for a in 0..nu {
        s.push_str(&format!(",feedforward_{a}"));
    }
    s.push('\n');
    for (k, mean) in policy.distribution.mean.iter().enumerate() {
        s.push_str(&k.to_string());
        for v in mean.iter() {
            s.push_str(&format!(",{v:e}"));
        }
        for a in 0..nu {
            match policy.feedforward.get(k) {
                Some(m) => s.push_str(&format!(",{:e}", m[a])),
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

/// `samples` boundary points of `{z : (z - μ)' Σ⁻¹ (z - μ) = sigma²}` for the
/// marginal of coordinates `(a, b)` of a Gaussian with `mean` and `cov`.
pub fn ellipse_points(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    coords: (usize, usize),
    sigma: f64,
    samples: usize,
) -> Vec<(f64, f64)> {
    let (a, b) = coords;
    let sub = DMatrix::from_row_slice(2, 2, &[cov[(a, a)], cov[(a, b)], cov[(b, a)], cov[(b, b)]]);
    // columns of the factor map the unit circle onto the ellipse
    let (vals, vecs) = linalg::sym_eigen(&sub);
    let scale = |i: usize| vals[i].max(0.0).sqrt() * sigma;
    (0..samples)
        .map(|p| {
            let t = 2.0 * std::f64::consts::PI * p as f64 / samples as f64;
            let (c, sn) = (t.cos() * scale(0), t.sin() * scale(1));
            (
                mean[a] + vecs[(0, 0)] * c + vecs[(0, 1)] * sn,
                mean[b] + vecs[(1, 0)] * c + vecs[(1, 1)] * sn,
            )
        })
        .collect()
}

/// [`ellipse_points`] of every `x_k` marginal, one row per point.
pub fn ellipse_csv(policy: &Policy, coords: (usize, usize), sigma: f64, samples: usize) -> String {
    let (a, b) = coords;
    let mut s = format!("k,point,x{a},x{b}\n");
    let dist = &policy.distribution;
    for (k, (mean, cov)) in dist.mean.iter().zip(&dist.total_cov).enumerate() {
        for (p, (x, y)) in ellipse_points(mean, cov, coords, sigma, samples)
            .into_iter()
            .enumerate()
        {
            s.push_str(&format!("{k},{p},{x:e},{y:e}\n"));
        }
    }
    s
}
