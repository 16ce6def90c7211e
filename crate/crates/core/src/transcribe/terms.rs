//! Objective and constraint terms over the flat decision vector.

use nalgebra::{DMatrix, DVector};

use super::conic::{svec_dim, svec_index, AffineMap, ConeConstraint, ConeKind, QuadraticObjective};
use super::layout::DecisionLayout;
use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::lift::LiftedOperators;
use crate::linalg;
use crate::model::HalfPlaneConstraint;
use crate::stats;

/// How the terminal covariance bound enters the program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalForm {
    /// Exact linear matrix inequality.
    #[default]
    Lmi,
    /// Conservative single cone bounding the Frobenius norm.
    Frobenius,
}

/// `J(F, M) = (A x̄0 + B M)' Q (A x̄0 + B M) + M' R M
///           + tr{[(I + BF)' Q (I + BF) + F' R F] S}` as a quadratic in the layout.
pub fn objective(
    ops: &LiftedOperators,
    prior_mean: &DVector<f64>,
    layout: &DecisionLayout,
) -> QuadraticObjective {
    objective_with_cov(ops, prior_mean, layout, &ops.s)
}

/// Same as [`objective`] with `S` replaced by `cov` in the trace term.
pub fn objective_with_cov(
    ops: &LiftedOperators,
    prior_mean: &DVector<f64>,
    layout: &DecisionLayout,
    cov: &DMatrix<f64>,
) -> QuadraticObjective {
    let n = layout.len();
    let bt_q = ops.b.transpose() * &ops.q;
    let mc = &bt_q * &ops.b + &ops.r;
    let bqs = &bt_q * cov;
    let drift = &ops.a * prior_mean;

    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    let f_len = layout.f_len();
    let entries: Vec<(usize, usize)> = (0..f_len).map(|p| layout.f_entry(p)).collect();
    for q in 0..f_len {
        let (b, beta) = entries[q];
        let mut col = h.column_mut(q);
        for p in 0..f_len {
            let (a, alpha) = entries[p];
            col[p] = mc[(a, b)] * cov[(alpha, beta)];
        }
        g[q] = bqs[(b, beta)];
    }
    let mo = layout.m_offset();
    let ml = layout.m_len();
    h.view_mut((mo, mo), (ml, ml)).copy_from(&mc);
    g.rows_mut(mo, ml).copy_from(&(&bt_q * &drift));
    let c = drift.dot(&(&ops.q * &drift)) + (&ops.q * cov).trace();
    QuadraticObjective { h, g, c }
}

/// Exact objective value for explicit `(F, M)`.
pub fn objective_value(
    ops: &LiftedOperators,
    prior_mean: &DVector<f64>,
    f: &DMatrix<f64>,
    m: &DVector<f64>,
) -> f64 {
    let mean = &ops.a * prior_mean + &ops.b * m;
    let dim = ops.state_dim();
    let closed = DMatrix::identity(dim, dim) + &ops.b * f;
    let weight = closed.transpose() * &ops.q * &closed + f.transpose() * &ops.r * f;
    mean.dot(&(&ops.q * &mean)) + m.dot(&(&ops.r * m)) + (weight * &ops.s).trace()
}

/// Terminal mean equality `E_N (A x̄0 + B M) = x̄f` as a zero-cone term.
pub fn mean_constraint(
    ops: &LiftedOperators,
    layout: &DecisionLayout,
    prior_mean: &DVector<f64>,
    target_mean: &DVector<f64>,
) -> ConeConstraint {
    let range = ops.state_range(ops.horizon);
    let drift = (&ops.a * prior_mean)
        .rows(range.start, ops.nx)
        .clone_owned();
    let coef = ops.b.rows(range.start, ops.nx).clone_owned();
    ConeConstraint::new(
        ConeKind::Zero,
        "terminal mean",
        AffineMap {
            dim: ops.nx,
            constant: drift - target_mean,
            rows: (0..ops.nx).collect(),
            cols: (layout.m_offset()..layout.m_offset() + layout.m_len()).collect(),
            coef,
        },
    )
}

/// `S_half_r (w + F' v)` over the layout, where `S_half_r` keeps the given
/// rows of `S_half`. Returns the constant, the `F` columns touched and the
/// coefficient block.
fn history_image(
    ops: &LiftedOperators,
    layout: &DecisionLayout,
    s_rows: &[usize],
    w: &DVector<f64>,
    v: &DVector<f64>,
) -> (DVector<f64>, Vec<usize>, DMatrix<f64>) {
    let r = s_rows.len();
    let mut constant = DVector::zeros(r);
    for (lr, &sr) in s_rows.iter().enumerate() {
        constant[lr] = ops.s_half.row(sr).transpose().dot(w);
    }
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    for row in 0..layout.f_rows() {
        let vr = v[row];
        if vr == 0.0 {
            continue;
        }
        for (idx, col) in layout.row_entries(row) {
            cols.push(idx);
            vals.push((col, vr));
        }
    }
    let mut coef = DMatrix::zeros(r, cols.len());
    for (lc, &(col, vr)) in vals.iter().enumerate() {
        for (lr, &sr) in s_rows.iter().enumerate() {
            coef[(lr, lc)] = ops.s_half[(sr, col)] * vr;
        }
    }
    (constant, cols, coef)
}

/// Cone form of `Φ⁻¹(1 - p) ||[S_half (I+BF)' E_k' α; P̃_k^{1/2} α]|| + α' x̄_k - β <= 0`:
/// `((β - α' E_k (A x̄0 + B M)) / Φ⁻¹(1 - p), S_half (I+BF)' E_k' α, ||P̃_k^{1/2} α||)`.
///
/// At `k = 0` the expression is constant (no decision enters it).
pub fn chance_constraint_rows(
    ops: &LiftedOperators,
    schedule: &FilterSchedule,
    layout: &DecisionLayout,
    prior_mean: &DVector<f64>,
    constraint: &HalfPlaneConstraint,
    k: usize,
    label: impl Into<String>,
) -> Result<ConeConstraint> {
    let p = constraint.risk;
    if !(p > 0.0 && p < 0.5) {
        return Err(Error::Invalid(format!("risk {p} outside (0, 0.5)")));
    }
    let quantile = stats::normal_quantile(1.0 - p);
    let nx = ops.nx;
    let range = ops.state_range(k);
    let alpha = &constraint.normal;

    let mut w = DVector::zeros(ops.state_dim());
    w.rows_mut(range.start, nx).copy_from(alpha);
    let v = ops.b.rows(range.start, nx).transpose() * alpha;
    let drift = (&ops.a * prior_mean).rows(range.start, nx).dot(alpha);
    let error_std = alpha
        .dot(&(&schedule.posterior_error_cov[k] * alpha))
        .max(0.0)
        .sqrt();

    let s_rows = ops.s_half_rank_rows();
    let r = s_rows.len();
    let (hist_const, f_cols, f_coef) = history_image(ops, layout, &s_rows, &w, &v);

    let m_entries: Vec<(usize, f64)> = (0..layout.m_len())
        .filter(|&i| v[i] != 0.0)
        .map(|i| (layout.m_offset() + i, v[i]))
        .collect();

    let dim = r + 2;
    let mut constant = DVector::zeros(dim);
    constant[0] = (constraint.offset - drift) / quantile;
    constant.rows_mut(1, r).copy_from(&hist_const);
    constant[r + 1] = error_std;

    let mut cols = f_cols;
    cols.extend(m_entries.iter().map(|(i, _)| *i));
    let nf = f_coef.ncols();
    let mut coef = DMatrix::zeros(r + 1, cols.len());
    for (lc, (_, vi)) in m_entries.iter().enumerate() {
        coef[(0, nf + lc)] = -vi / quantile;
    }
    coef.view_mut((1, 0), (r, nf)).copy_from(&f_coef);
    let map = if cols.is_empty() {
        AffineMap::constant(constant)
    } else {
        AffineMap {
            dim,
            constant,
            rows: (0..=r).collect(),
            cols,
            coef,
        }
    };
    Ok(ConeConstraint::new(ConeKind::Soc, label, map))
}

/// Terminal bound `E_N (I+BF) S (I+BF)' E_N' ⪯ P_f - P̃_N`, through
/// `Y = S_half (I+BF)' E_N' (P_f - P̃_N)^{-1/2}`: either
/// `[[I, Y'], [Y, I]] ⪰ 0` or the Frobenius cone `(1, vec Y)`.
pub fn terminal_cov_constraint(
    ops: &LiftedOperators,
    layout: &DecisionLayout,
    target_cov_bound: &DMatrix<f64>,
    terminal_error_cov: &DMatrix<f64>,
    form: TerminalForm,
) -> Result<ConeConstraint> {
    let margin = linalg::symmetrize(&(target_cov_bound - terminal_error_cov));
    let min_eig = linalg::min_eigenvalue(&margin);
    if min_eig <= 0.0 {
        return Err(Error::Precheck {
            min_eigenvalue: min_eig,
        });
    }
    let scale = linalg::inv_sqrt_pd(&margin)?;
    let nx = ops.nx;
    let range = ops.state_range(ops.horizon);
    let b_n = ops.b.rows(range.start, nx).transpose().clone_owned();
    let s_rows = ops.s_half_rank_rows();
    let r = s_rows.len();

    // Y column by column; every column touches the same F entries
    let mut consts = Vec::with_capacity(nx);
    let mut coefs = Vec::with_capacity(nx);
    let mut all_cols: Vec<usize> = Vec::new();
    let mut per_col_cols = Vec::with_capacity(nx);
    for c in 0..nx {
        let wc = scale.column(c).clone_owned();
        let mut w = DVector::zeros(ops.state_dim());
        w.rows_mut(range.start, nx).copy_from(&wc);
        let v = &b_n * &wc;
        let (k, cols, coef) = history_image(ops, layout, &s_rows, &w, &v);
        all_cols.extend(cols.iter().copied());
        consts.push(k);
        coefs.push(coef);
        per_col_cols.push(cols);
    }
    all_cols.sort_unstable();
    all_cols.dedup();
    let position = |idx: usize| all_cols.binary_search(&idx).unwrap();

    let (kind, dim, label) = match form {
        TerminalForm::Lmi => (
            ConeKind::Psd { order: nx + r },
            svec_dim(nx + r),
            "terminal covariance (LMI)",
        ),
        TerminalForm::Frobenius => (ConeKind::Soc, 1 + r * nx, "terminal covariance (Frobenius)"),
    };
    // output row of Y[rho, c] and its scale
    let y_row = |rho: usize, c: usize| -> (usize, f64) {
        match form {
            TerminalForm::Lmi => (svec_index(c, nx + rho), std::f64::consts::SQRT_2),
            TerminalForm::Frobenius => (1 + c * r + rho, 1.0),
        }
    };
    let mut constant = DVector::zeros(dim);
    match form {
        TerminalForm::Lmi => {
            for i in 0..nx + r {
                constant[svec_index(i, i)] = 1.0;
            }
        }
        TerminalForm::Frobenius => constant[0] = 1.0,
    }
    let mut rows = Vec::with_capacity(r * nx);
    let mut coef = DMatrix::zeros(r * nx, all_cols.len());
    for c in 0..nx {
        let local_cols: Vec<usize> = per_col_cols[c].iter().map(|&i| position(i)).collect();
        for rho in 0..r {
            let (row, sc) = y_row(rho, c);
            constant[row] = consts[c][rho] * sc;
            let lr = rows.len();
            rows.push(row);
            for (j, &lc) in local_cols.iter().enumerate() {
                coef[(lr, lc)] = coefs[c][(rho, j)] * sc;
            }
        }
    }
    let map = if all_cols.is_empty() {
        AffineMap::constant(constant)
    } else {
        AffineMap {
            dim,
            constant,
            rows,
            cols: all_cols,
            coef,
        }
    };
    Ok(ConeConstraint::new(kind, label, map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman;
    use crate::lift;
    use crate::model::{double_integrator, DoubleIntegratorParams, SteeringProblem};

    fn scalar_problem(n: usize, a: f64, b: f64) -> SteeringProblem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        SteeringProblem {
            horizon: n,
            a: vec![m(a); n],
            b: vec![m(b); n],
            g: vec![m(0.2); n],
            c: vec![m(1.0); n + 1],
            d: vec![m(0.5); n + 1],
            prior_mean: DVector::from_element(1, 0.0),
            prior_estimate_cov: m(0.3),
            prior_error_cov: m(0.2),
            target_mean: DVector::from_element(1, 1.0),
            target_cov_bound: m(10.0),
            q: vec![m(1.0); n],
            r: vec![m(1.0); n],
            constraints: vec![],
            total_risk: 0.01,
        }
    }

    fn setup(p: &SteeringProblem) -> (FilterSchedule, LiftedOperators, DecisionLayout) {
        let sched = kalman::run_schedule(p).unwrap();
        let ops = lift::build(p, &sched).unwrap();
        let layout = DecisionLayout::new(p.horizon, ops.nx, ops.nu, None);
        (sched, ops, layout)
    }

    #[test]
    fn mean_constraint_scalar() {
        let p = scalar_problem(1, 1.0, 1.0);
        let (_, ops, layout) = setup(&p);
        let con = mean_constraint(&ops, &layout, &p.prior_mean, &p.target_mean);
        // m_0 - 1 = 0
        let mut z = vec![0.0; layout.len()];
        z[layout.m_offset()] = 1.0;
        assert_eq!(con.map.eval(&z)[0], 0.0);
        z[layout.m_offset()] = 0.0;
        assert_eq!(con.map.eval(&z)[0], -1.0);
    }

    #[test]
    fn objective_at_zero_and_against_direct_formula() {
        let p = double_integrator(&DoubleIntegratorParams {
            horizon: 4,
            state_weight: 1.0,
            ..Default::default()
        });
        let (_, ops, layout) = setup(&p);
        let obj = objective(&ops, &p.prior_mean, &layout);
        let z0 = vec![0.0; layout.len()];
        let drift = &ops.a * &p.prior_mean;
        let want = drift.dot(&(&ops.q * &drift)) + (&ops.q * &ops.s).trace();
        assert!((obj.eval(&z0) - want).abs() < 1e-10 * want.abs());

        let z: Vec<f64> = (0..layout.len())
            .map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5)
            .collect();
        let (f, m) = layout.unpack(&z);
        let direct = objective_value(&ops, &p.prior_mean, &f, &m);
        assert!((obj.eval(&z) - direct).abs() < 1e-9 * direct.abs());
    }

    #[test]
    fn chance_row_value_matches_formula() {
        let p = double_integrator(&DoubleIntegratorParams {
            horizon: 4,
            ..Default::default()
        });
        let (sched, ops, layout) = setup(&p);
        let con = &p.constraints[0];
        let z: Vec<f64> = (0..layout.len())
            .map(|i| ((i * 31) % 7) as f64 / 20.0 - 0.15)
            .collect();
        let (f, m) = layout.unpack(&z);
        let q = stats::normal_quantile(1.0 - con.risk);
        let dim = ops.state_dim();
        let closed = DMatrix::identity(dim, dim) + &ops.b * &f;
        let phat = &closed * &ops.s * closed.transpose();
        let mean = &ops.a * &p.prior_mean + &ops.b * &m;
        for k in 0..=p.horizon {
            let row =
                chance_constraint_rows(&ops, &sched, &layout, &p.prior_mean, con, k, "c").unwrap();
            let r = ops.state_range(k);
            let pk = phat.view((r.start, r.start), (4, 4)) + &sched.posterior_error_cov[k];
            let alpha = &con.normal;
            let slack = q * alpha.dot(&(&pk * alpha)).sqrt() + alpha.dot(&mean.rows(r.start, 4))
                - con.offset;
            // cone margin scaled by the quantile is minus the slack
            assert!((row.margin(&z) * q + slack).abs() < 1e-9, "k = {k}");
        }
    }

    #[test]
    fn terminal_forms_agree_with_covariance() {
        let p = double_integrator(&DoubleIntegratorParams {
            horizon: 4,
            ..Default::default()
        });
        let (sched, ops, layout) = setup(&p);
        let z: Vec<f64> = (0..layout.len())
            .map(|i| ((i * 17) % 5) as f64 / 10.0 - 0.2)
            .collect();
        let (f, _) = layout.unpack(&z);
        let dim = ops.state_dim();
        let closed = DMatrix::identity(dim, dim) + &ops.b * &f;
        let phat = &closed * &ops.s * closed.transpose();
        let r = ops.state_range(p.horizon);
        let pn = phat.view((r.start, r.start), (4, 4)).clone_owned();
        for bound in [
            p.target_cov_bound.clone(),
            p.target_cov_bound.clone() * 50.0,
        ] {
            let margin = &bound - &sched.posterior_error_cov[p.horizon];
            let w = linalg::inv_sqrt_pd(&margin).unwrap();
            let normalized = &w * &pn * &w;
            let lam_max = linalg::sym_eigen(&normalized).0[3];
            let lmi = terminal_cov_constraint(
                &ops,
                &layout,
                &bound,
                &sched.posterior_error_cov[p.horizon],
                TerminalForm::Lmi,
            )
            .unwrap();
            // min eigenvalue of [[I, Y'], [Y, I]] is 1 - ||Y||_2
            assert!((lmi.margin(&z) - (1.0 - lam_max.sqrt())).abs() < 1e-9);
            let fro = terminal_cov_constraint(
                &ops,
                &layout,
                &bound,
                &sched.posterior_error_cov[p.horizon],
                TerminalForm::Frobenius,
            )
            .unwrap();
            assert!((fro.margin(&z) - (1.0 - normalized.trace().sqrt())).abs() < 1e-9);
        }
    }

    #[test]
    fn terminal_constraint_rejects_precheck_violation() {
        let p = scalar_problem(2, 1.0, 1.0);
        let (sched, ops, layout) = setup(&p);
        let err = terminal_cov_constraint(
            &ops,
            &layout,
            &sched.posterior_error_cov[2],
            &sched.posterior_error_cov[2],
            TerminalForm::Lmi,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Precheck { .. }));
    }
}
