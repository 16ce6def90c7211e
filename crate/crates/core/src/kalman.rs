//! Control-independent Kalman filter schedule.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::SteeringProblem;

/// Condition number of the innovation covariance above which the observation
/// model is treated as ill-posed.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;

/// Filter quantities for `k = 0..N`, all independent of the control.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSchedule {
    /// Kalman gains `L_k`.
    pub gains: Vec<DMatrix<f64>>,
    /// Error covariance after the measurement update at `k`.
    pub posterior_error_cov: Vec<DMatrix<f64>>,
    /// Error covariance before the measurement update at `k`.
    pub prior_error_cov: Vec<DMatrix<f64>>,
    /// Innovation covariances `C P̃⁻ C' + D D'`.
    pub innovation_cov: Vec<DMatrix<f64>>,
}

fn check_shape(what: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{what} is {}x{}, expected {rows}x{cols}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `A P̃ A' + G G'`, symmetrized.
pub fn predict_error_cov(
    posterior: &DMatrix<f64>,
    a: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let nx = posterior.nrows();
    check_shape("error covariance", posterior, nx, nx)?;
    check_shape("A", a, nx, nx)?;
    check_shape("G", g, nx, g.ncols())?;
    Ok(linalg::symmetrize(
        &(a * posterior * a.transpose() + g * g.transpose()),
    ))
}

/// `C P̃⁻ C' + D D'`, symmetrized.
pub fn innovation_cov(
    prior: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let nx = prior.nrows();
    let ny = c.nrows();
    check_shape("error covariance", prior, nx, nx)?;
    check_shape("C", c, ny, nx)?;
    check_shape("D", d, ny, ny)?;
    Ok(linalg::symmetrize(
        &(c * prior * c.transpose() + d * d.transpose()),
    ))
}

/// Kalman gain and the innovation covariance it inverts.
///
/// The step index in an ill-posedness error is 0; [`run_schedule`] rewrites it.
pub fn kalman_gain(
    prior: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let py = innovation_cov(prior, c, d)?;
    let ny = py.nrows();
    if ny == 0 {
        return Ok((DMatrix::zeros(prior.nrows(), 0), py));
    }
    let (vals, _) = linalg::sym_eigen(&py);
    let (lo, hi) = (vals[0], vals[ny - 1]);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= MAX_INNOVATION_CONDITION) {
        return Err(Error::IllPosedObservation { step: 0, condition });
    }
    let chol = linalg::DenseCholesky::factor(py.clone())
        .map_err(|_| Error::IllPosedObservation { step: 0, condition })?;
    // L = P̃⁻ C' P_y^{-1}; solve P_y L' = C P̃⁻
    let mut lt = c * prior;
    for j in 0..lt.ncols() {
        let mut col: Vec<f64> = lt.column(j).iter().copied().collect();
        chol.solve_in_place(&mut col);
        lt.column_mut(j).copy_from_slice(&col);
    }
    Ok((lt.transpose(), py))
}

/// Joseph-form update `(I - L C) P̃⁻ (I - L C)' + L D D' L'`, symmetrized.
/// PSD for any gain.
pub fn update_error_cov(
    prior: &DMatrix<f64>,
    gain: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let nx = prior.nrows();
    let ny = c.nrows();
    check_shape("error covariance", prior, nx, nx)?;
    check_shape("L", gain, nx, ny)?;
    check_shape("C", c, ny, nx)?;
    check_shape("D", d, ny, ny)?;
    let i_lc = DMatrix::identity(nx, nx) - gain * c;
    let ld = gain * d;
    Ok(linalg::symmetrize(
        &(&i_lc * prior * i_lc.transpose() + &ld * ld.transpose()),
    ))
}

/// Alternates update (at `k`, using measurement `k`) and predict
/// (`k -> k + 1`) from `P̃_{0⁻}`.
pub fn run_schedule(problem: &SteeringProblem) -> Result<FilterSchedule> {
    let n = problem.horizon;
    if problem.c.len() != n + 1 || problem.d.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "observation model needs {} steps",
            n + 1
        )));
    }
    if problem.a.len() != n || problem.g.len() != n {
        return Err(Error::Dimension(format!("dynamics need {n} steps")));
    }
    let mut out = FilterSchedule {
        gains: Vec::with_capacity(n + 1),
        posterior_error_cov: Vec::with_capacity(n + 1),
        prior_error_cov: Vec::with_capacity(n + 1),
        innovation_cov: Vec::with_capacity(n + 1),
    };
    let mut prior = linalg::symmetrize(&problem.prior_error_cov);
    for k in 0..=n {
        let (gain, py) =
            kalman_gain(&prior, &problem.c[k], &problem.d[k]).map_err(|e| match e {
                Error::IllPosedObservation { condition, .. } => {
                    Error::IllPosedObservation { step: k, condition }
                }
                other => other,
            })?;
        let posterior = update_error_cov(&prior, &gain, &problem.c[k], &problem.d[k])?;
        let next = if k < n {
            Some(predict_error_cov(&posterior, &problem.a[k], &problem.g[k])?)
        } else {
            None
        };
        out.gains.push(gain);
        out.innovation_cov.push(py);
        out.prior_error_cov.push(prior.clone());
        out.posterior_error_cov.push(posterior);
        if let Some(next) = next {
            prior = next;
        }
    }
    Ok(out)
}

impl FilterSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len().saturating_sub(1)
    }

    /// One row per step: `k`, then `L_k`, `P̃_k`, `P̃_{k⁻}` flattened row-major.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let Some(l0) = self.gains.first() else {
            return s;
        };
        let (nx, ny) = (l0.nrows(), l0.ncols());
        s.push('k');
        for i in 0..nx {
            for j in 0..ny {
                write!(s, ",L_{i}_{j}").unwrap();
            }
        }
        for name in ["P_post", "P_prior"] {
            for i in 0..nx {
                for j in 0..nx {
                    write!(s, ",{name}_{i}_{j}").unwrap();
                }
            }
        }
        s.push('\n');
        for k in 0..self.gains.len() {
            write!(s, "{k}").unwrap();
            for m in [
                &self.gains[k],
                &self.posterior_error_cov[k],
                &self.prior_error_cov[k],
            ] {
                for v in linalg::row_major(m) {
                    write!(s, ",{v:e}").unwrap();
                }
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{double_integrator, DoubleIntegratorParams};

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn predict_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let out = predict_error_cov(&p, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(out, p);
        let out = predict_error_cov(&scalar(1.0), &scalar(2.0), &scalar(1.0)).unwrap();
        assert_eq!(out[(0, 0)], 5.0);
        assert!(predict_error_cov(&p, &DMatrix::identity(3, 3), &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn gain_examples() {
        let (l, _) = kalman_gain(
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(l.amax(), 0.0);
        let (l, py) = kalman_gain(&scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((l[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(py[(0, 0)], 2.0);
        let eps = 1e-2;
        let (l, _) = kalman_gain(
            &DMatrix::identity(3, 3),
            &DMatrix::identity(3, 3),
            &(DMatrix::identity(3, 3) * eps),
        )
        .unwrap();
        let want = DMatrix::identity(3, 3) / (1.0 + eps * eps);
        assert!((l - want).amax() < 1e-14);
    }

    #[test]
    fn gain_rejects_ill_conditioned_innovation() {
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&[1.0, 1e-7]));
        let err = kalman_gain(&DMatrix::zeros(2, 2), &DMatrix::identity(2, 2), &d).unwrap_err();
        assert!(matches!(err, Error::IllPosedObservation { .. }));
    }

    #[test]
    fn update_examples() {
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let c = DMatrix::identity(2, 2);
        let out = update_error_cov(&p, &DMatrix::zeros(2, 2), &c, &c).unwrap();
        assert_eq!(out, p);
        let out = update_error_cov(&scalar(1.0), &scalar(0.5), &scalar(1.0), &scalar(1.0)).unwrap();
        assert!((out[(0, 0)] - 0.5).abs() < 1e-15);
        let eps = 0.1;
        let d = DMatrix::identity(3, 3) * eps;
        let (l, _) = kalman_gain(&DMatrix::identity(3, 3), &DMatrix::identity(3, 3), &d).unwrap();
        let out =
            update_error_cov(&DMatrix::identity(3, 3), &l, &DMatrix::identity(3, 3), &d).unwrap();
        let want = DMatrix::identity(3, 3) * (eps * eps / (1.0 + eps * eps));
        assert!((out - want).amax() < 1e-15);
    }

    #[test]
    fn innovation_examples() {
        let out = innovation_cov(
            &DMatrix::identity(2, 2),
            &DMatrix::zeros(2, 2),
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        assert_eq!(out, DMatrix::identity(2, 2));
        let out = innovation_cov(&scalar(1.0), &scalar(1.0), &scalar(1.0)).unwrap();
        assert_eq!(out[(0, 0)], 2.0);
    }

    /// Short-form recursion written out independently, used as an oracle.
    fn oracle_schedule(problem: &SteeringProblem) -> Vec<DMatrix<f64>> {
        let mut p = problem.prior_error_cov.clone();
        let mut out = Vec::new();
        for k in 0..=problem.horizon {
            let c = &problem.c[k];
            let d = &problem.d[k];
            let s = c * &p * c.transpose() + d * d.transpose();
            let l = &p * c.transpose() * s.try_inverse().unwrap();
            let post = (DMatrix::identity(p.nrows(), p.nrows()) - &l * c) * &p;
            out.push(post.clone());
            if k < problem.horizon {
                p = &problem.a[k] * post * problem.a[k].transpose()
                    + &problem.g[k] * problem.g[k].transpose();
            }
        }
        out
    }

    #[test]
    fn double_integrator_schedule_matches_short_form_oracle() {
        let problem = double_integrator(&DoubleIntegratorParams::default());
        let sched = run_schedule(&problem).unwrap();
        let oracle = oracle_schedule(&problem);
        for (k, expected) in oracle.iter().enumerate() {
            let diff = (&sched.posterior_error_cov[k] - expected).amax();
            assert!(diff < 1e-12, "k = {k}: {diff}");
        }
        assert_eq!(sched.prior_error_cov[0], problem.prior_error_cov);
        // step-0 update then predict
        let pred =
            predict_error_cov(&sched.posterior_error_cov[0], &problem.a[0], &problem.g[0]).unwrap();
        assert!((pred - &sched.prior_error_cov[1]).amax() < 1e-15);
    }

    #[test]
    fn noiseless_schedule_is_zero() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        problem.prior_error_cov = DMatrix::zeros(4, 4);
        problem.g = vec![DMatrix::zeros(4, 4); problem.horizon];
        let sched = run_schedule(&problem).unwrap();
        for k in 0..=problem.horizon {
            assert_eq!(sched.gains[k].amax(), 0.0);
            assert_eq!(sched.posterior_error_cov[k].amax(), 0.0);
        }
    }

    #[test]
    fn precise_measurements_shrink_trace() {
        let mut problem = double_integrator(&DoubleIntegratorParams::default());
        problem.g = vec![DMatrix::zeros(4, 4); problem.horizon];
        problem.c = vec![DMatrix::identity(4, 4); problem.horizon + 1];
        problem.d = vec![DMatrix::identity(4, 4) * 0.01; problem.horizon + 1];
        let sched = run_schedule(&problem).unwrap();
        for k in 1..=problem.horizon {
            assert!(
                sched.posterior_error_cov[k].trace() < sched.posterior_error_cov[k - 1].trace()
            );
        }
    }

    #[test]
    fn csv_has_one_row_per_step() {
        let problem = double_integrator(&DoubleIntegratorParams::default());
        let sched = run_schedule(&problem).unwrap();
        let csv = sched.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), problem.horizon + 2);
        assert_eq!(lines[0].split(',').count(), 1 + 12 + 16 + 16);
        assert_eq!(lines[1].split(',').count(), 1 + 12 + 16 + 16);
    }
}
