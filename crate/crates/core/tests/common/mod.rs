#![allow(dead_code)]

use covsteer::model::{HalfPlaneConstraint, SteeringProblem};
use covsteer::{config, kalman, lift, FilterSchedule, LiftedOperators};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub const EXAMPLE: &str = concat!(
    env!("CARGO_MANIFEST_DIR"),
    "/examples/double_integrator.json"
);

pub fn example() -> SteeringProblem {
    config::load_problem(EXAMPLE).expect("bundled example loads")
}

pub fn prepare(p: &SteeringProblem) -> (FilterSchedule, LiftedOperators) {
    let s = kalman::run_schedule(p).expect("schedule");
    let ops = lift::build(p, &s).expect("lift");
    (s, ops)
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn randn_vec(rng: &mut ChaCha20Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `M M' + floor I` with `M` Gaussian.
pub fn random_spd(rng: &mut ChaCha20Rng, n: usize, scale: f64, floor: f64) -> DMatrix<f64> {
    let m = randn(rng, n, n, scale);
    &m * m.transpose() + DMatrix::identity(n, n) * floor
}

/// Random well-posed problem with `n_x <= max_nx` and `N <= max_horizon`.
pub fn random_problem(rng: &mut ChaCha20Rng, max_nx: usize, max_horizon: usize) -> SteeringProblem {
    let nx = rng.random_range(1..=max_nx);
    let ny = rng.random_range(1..=nx.min(3));
    let nu = rng.random_range(1..=nx.min(2));
    let nw = rng.random_range(1..=nx);
    let n = rng.random_range(1..=max_horizon);
    let a: Vec<_> = (0..n)
        .map(|_| DMatrix::identity(nx, nx) + randn(rng, nx, nx, 0.3 / (nx as f64).sqrt()))
        .collect();
    let b = (0..n).map(|_| randn(rng, nx, nu, 1.0)).collect();
    let g = (0..n).map(|_| randn(rng, nx, nw, 0.2)).collect();
    let c = (0..=n).map(|_| randn(rng, ny, nx, 1.0)).collect();
    let d = (0..=n)
        .map(|_| {
            let diag = DVector::from_fn(ny, |_, _| rng.random_range(0.1..1.0));
            DMatrix::from_diagonal(&diag) + randn(rng, ny, ny, 0.02)
        })
        .collect();
    let normal = randn_vec(rng, nx, 1.0);
    SteeringProblem {
        horizon: n,
        a,
        b,
        g,
        c,
        d,
        prior_mean: randn_vec(rng, nx, 1.0),
        prior_estimate_cov: random_spd(rng, nx, 0.3, 1e-3),
        prior_error_cov: random_spd(rng, nx, 0.3, 1e-3),
        target_mean: randn_vec(rng, nx, 1.0),
        target_cov_bound: DMatrix::identity(nx, nx) * 100.0,
        q: (0..n).map(|_| random_spd(rng, nx, 0.5, 0.0)).collect(),
        r: (0..n).map(|_| random_spd(rng, nu, 0.5, 0.1)).collect(),
        constraints: vec![HalfPlaneConstraint::new(normal, 50.0, 0.01)],
        total_risk: 0.01,
    }
}

/// Random block lower-triangular `N n_u x (N+1) n_x` matrix.
pub fn random_block_lower(
    rng: &mut ChaCha20Rng,
    ops: &LiftedOperators,
    scale: f64,
) -> DMatrix<f64> {
    let (nx, nu) = (ops.nx, ops.nu);
    let mut k = DMatrix::zeros(ops.input_dim(), ops.state_dim());
    for t in 0..ops.horizon {
        for i in 0..=t {
            k.view_mut((t * nu, i * nx), (nu, nx))
                .copy_from(&randn(rng, nu, nx, scale));
        }
    }
    k
}

/// Filtered-state recursion `x̂_{k+1} = A_k x̂_k + B_k u_k + L_{k+1} ỹ_{k+1}`
/// from `x̂_0 = x̂_{0⁻} + L_0 ỹ_0`; returns the stacked `x̂_k`.
pub fn stepwise_estimates(
    p: &SteeringProblem,
    s: &FilterSchedule,
    xhat0_prior: &DVector<f64>,
    u: &DVector<f64>,
    innov: &DVector<f64>,
) -> DVector<f64> {
    let d = p.dims();
    let (nx, nu, ny) = (d.nx, d.nu, d.ny);
    let mut out = DVector::zeros((d.horizon + 1) * nx);
    let mut xhat = xhat0_prior + &s.gains[0] * innov.rows(0, ny);
    out.rows_mut(0, nx).copy_from(&xhat);
    for k in 0..d.horizon {
        xhat = &p.a[k] * &xhat
            + &p.b[k] * u.rows(k * nu, nu)
            + &s.gains[k + 1] * innov.rows((k + 1) * ny, ny);
        out.rows_mut((k + 1) * nx, nx).copy_from(&xhat);
    }
    out
}
