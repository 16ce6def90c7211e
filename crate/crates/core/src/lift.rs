//! Stacked block operators of the filtered-state process
//! `X̂ = A x̂_{0⁻} + B U + L Ỹ`.

use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::linalg;
use crate::model::SteeringProblem;

#[derive(Debug, Clone)]
pub struct LiftedOperators {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub ny: usize,
    /// `(N+1) n_x x n_x`; row block `k` is `A_{k-1} ... A_0`.
    pub a: DMatrix<f64>,
    /// `(N+1) n_x x N n_u`, strictly block lower-triangular.
    pub b: DMatrix<f64>,
    /// `(N+1) n_x x (N+1) n_y`, block lower-triangular with `L_k` on the diagonal.
    pub l: DMatrix<f64>,
    /// `blkdiag(Q_0, ..., Q_{N-1}, 0)`.
    pub q: DMatrix<f64>,
    /// `blkdiag(R_0, ..., R_{N-1})`.
    pub r: DMatrix<f64>,
    /// `blkdiag` of the innovation covariances.
    pub innovation_cov: DMatrix<f64>,
    /// `A P̂_{0⁻} A' + L P_Ỹ L'`.
    pub s: DMatrix<f64>,
    /// `S_half' S_half = S`; rows for zero eigenvalues are exactly zero.
    pub s_half: DMatrix<f64>,
}

impl LiftedOperators {
    /// Row range of the state block `k`, i.e. the selector `E_k`.
    pub fn state_range(&self, k: usize) -> Range<usize> {
        k * self.nx..(k + 1) * self.nx
    }

    /// Column range of the input block `k`.
    pub fn input_range(&self, k: usize) -> Range<usize> {
        k * self.nu..(k + 1) * self.nu
    }

    pub fn state_dim(&self) -> usize {
        (self.horizon + 1) * self.nx
    }

    pub fn input_dim(&self) -> usize {
        self.horizon * self.nu
    }

    /// Rows of `S_half` that are not identically zero.
    pub fn s_half_rank_rows(&self) -> Vec<usize> {
        (0..self.s_half.nrows())
            .filter(|&i| self.s_half.row(i).iter().any(|v| *v != 0.0))
            .collect()
    }

    /// Covariance of the open-loop lifted process driven by unit, full-rank
    /// innovations: `A A' + Φ Φ'` with `Φ` the block transition operator.
    /// Positive definite for every problem.
    pub fn unit_innovation_cov(&self, problem: &SteeringProblem) -> DMatrix<f64> {
        let nx = self.nx;
        let dim = self.state_dim();
        let mut phi = DMatrix::zeros(dim, dim);
        for i in 0..=self.horizon {
            let mut block = DMatrix::identity(nx, nx);
            for k in i..=self.horizon {
                if k > i {
                    block = &problem.a[k - 1] * block;
                }
                phi.view_mut((k * nx, i * nx), (nx, nx)).copy_from(&block);
            }
        }
        linalg::symmetrize(&(&self.a * self.a.transpose() + &phi * phi.transpose()))
    }
}

/// Assembles every lifted operator and the noise covariance factor.
pub fn build(problem: &SteeringProblem, schedule: &FilterSchedule) -> Result<LiftedOperators> {
    let n = problem.horizon;
    let dims = problem.dims();
    let (nx, nu, ny) = (dims.nx, dims.nu, dims.ny);
    if schedule.gains.len() != n + 1
        || schedule.innovation_cov.len() != n + 1
        || problem.a.len() != n
        || problem.b.len() != n
    {
        return Err(Error::Dimension(
            "schedule or dynamics do not cover the horizon".into(),
        ));
    }
    if schedule
        .gains
        .iter()
        .any(|l| l.nrows() != nx || l.ncols() != ny)
    {
        return Err(Error::Dimension(format!("Kalman gains must be {nx}x{ny}")));
    }
    let rows = (n + 1) * nx;

    let mut a = DMatrix::zeros(rows, nx);
    let mut chain = DMatrix::identity(nx, nx);
    a.view_mut((0, 0), (nx, nx)).copy_from(&chain);
    for k in 1..=n {
        chain = &problem.a[k - 1] * chain;
        a.view_mut((k * nx, 0), (nx, nx)).copy_from(&chain);
    }

    let mut b = DMatrix::zeros(rows, n * nu);
    for j in 0..n {
        let mut block = problem.b[j].clone();
        for k in j + 1..=n {
            if k > j + 1 {
                block = &problem.a[k - 1] * block;
            }
            b.view_mut((k * nx, j * nu), (nx, nu)).copy_from(&block);
        }
    }

    let mut l = DMatrix::zeros(rows, (n + 1) * ny);
    for i in 0..=n {
        let mut block = schedule.gains[i].clone();
        for k in i..=n {
            if k > i {
                block = &problem.a[k - 1] * block;
            }
            l.view_mut((k * nx, i * ny), (nx, ny)).copy_from(&block);
        }
    }

    let mut q_blocks = problem.q.clone();
    q_blocks.push(DMatrix::zeros(nx, nx));
    let q = linalg::block_diag(&q_blocks);
    let r = linalg::block_diag(&problem.r);
    let innovation_cov = linalg::block_diag(&schedule.innovation_cov);

    let s = linalg::symmetrize(
        &(&a * &problem.prior_estimate_cov * a.transpose() + &l * &innovation_cov * l.transpose()),
    );
    let s_half = noise_cov_factor(&s)?;

    Ok(LiftedOperators {
        horizon: n,
        nx,
        nu,
        ny,
        a,
        b,
        l,
        q,
        r,
        innovation_cov,
        s,
        s_half,
    })
}

/// `Λ^{1/2} V'` from the symmetric eigendecomposition, negative eigenvalues
/// clipped to zero.
pub fn noise_cov_factor(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = linalg::checked_symmetric(s)?;
    Ok(linalg::psd_factor(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman;
    use crate::model::{double_integrator, DoubleIntegratorParams, SteeringProblem};
    use nalgebra::DVector;

    fn scalar_problem(n: usize, a: f64, b: f64) -> SteeringProblem {
        let m = |v: f64| DMatrix::from_element(1, 1, v);
        SteeringProblem {
            horizon: n,
            a: vec![m(a); n],
            b: vec![m(b); n],
            g: vec![m(0.1); n],
            c: vec![m(1.0); n + 1],
            d: vec![m(0.5); n + 1],
            prior_mean: DVector::from_element(1, 0.0),
            prior_estimate_cov: m(1.0),
            prior_error_cov: m(1.0),
            target_mean: DVector::from_element(1, 0.0),
            target_cov_bound: m(10.0),
            q: vec![m(1.0); n],
            r: vec![m(1.0); n],
            constraints: vec![],
            total_risk: 0.01,
        }
    }

    #[test]
    fn scalar_input_map() {
        let (a, b) = (1.7, 0.4);
        let p = scalar_problem(2, a, b);
        let ops = build(&p, &kalman::run_schedule(&p).unwrap()).unwrap();
        let want = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, b, 0.0, a * b, b]);
        assert!((&ops.b - want).amax() < 1e-15);
    }

    #[test]
    fn identity_chain() {
        let mut p = scalar_problem(1, 1.0, 1.0);
        p.a = vec![DMatrix::identity(1, 1)];
        let ops = build(&p, &kalman::run_schedule(&p).unwrap()).unwrap();
        assert_eq!(ops.a, DMatrix::from_element(2, 1, 1.0));
    }

    #[test]
    fn scalar_innovation_map() {
        let a = 0.9;
        let p = scalar_problem(2, a, 1.0);
        let sched = kalman::run_schedule(&p).unwrap();
        let ops = build(&p, &sched).unwrap();
        let l: Vec<f64> = sched.gains.iter().map(|g| g[(0, 0)]).collect();
        #[rustfmt::skip]
        let want = DMatrix::from_row_slice(3, 3, &[
            l[0], 0.0, 0.0,
            a * l[0], l[1], 0.0,
            a * a * l[0], a * l[1], l[2],
        ]);
        assert!((&ops.l - want).amax() < 1e-15);
    }

    #[test]
    fn factor_examples() {
        let f = noise_cov_factor(&DMatrix::identity(3, 3)).unwrap();
        assert!((f.transpose() * &f - DMatrix::identity(3, 3)).amax() < 1e-14);
        let d = DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 9.0]));
        let f = noise_cov_factor(&d).unwrap();
        assert!((f.transpose() * &f - &d).amax() < 1e-13);
        assert_eq!(noise_cov_factor(&DMatrix::zeros(2, 2)).unwrap().amax(), 0.0);
        let mut asym = DMatrix::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(noise_cov_factor(&asym).is_err());
    }

    #[test]
    fn double_integrator_structure() {
        let p = double_integrator(&DoubleIntegratorParams::default());
        let ops = build(&p, &kalman::run_schedule(&p).unwrap()).unwrap();
        let (nx, nu) = (ops.nx, ops.nu);
        for k in 0..=p.horizon {
            for j in 0..p.horizon {
                let blk = ops.b.view((k * nx, j * nu), (nx, nu));
                if k <= j {
                    assert_eq!(blk.amax(), 0.0);
                }
            }
        }
        let rec = ops.s_half.transpose() * &ops.s_half;
        assert!((rec - &ops.s).amax() <= 1e-8 * (1.0 + ops.s.amax()));
        assert_eq!(
            ops.q
                .view((p.horizon * nx, p.horizon * nx), (nx, nx))
                .amax(),
            0.0
        );
        assert!(linalg::is_pd(&ops.unit_innovation_cov(&p)));
    }
}
