//! Seedable Monte Carlo simulation of the closed loop.
//!
//! Runs are split into fixed batches of [`BATCH_RUNS`]; batch `b` draws from
//! a ChaCha20 generator seeded with `seed` on stream `b`. Batch summaries are
//! merged in batch order, so a report depends only on `(seed, runs)` and not
//! on the number of worker threads.

use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kalman::FilterSchedule;
use crate::lift;
use crate::linalg;
use crate::model::SteeringProblem;
use crate::policy::Policy;
use crate::stats;

pub const BATCH_RUNS: usize = 2048;

/// Two-sided level of the reported violation-rate intervals.
pub const CONFIDENCE: f64 = 0.99;

pub const GENERATOR: &str =
    "ChaCha20Rng (rand_chacha 0.9) seeded by seed_from_u64, stream = batch index; normals by rand_distr 0.5 StandardNormal (ziggurat)";

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "COVSTEER_THREADS";

/// `mean + factor' z` with `z` standard normal; `factor' factor` is the covariance.
pub fn sample_gaussian(
    mean: &DVector<f64>,
    factor: &DMatrix<f64>,
    rng: &mut ChaCha20Rng,
) -> DVector<f64> {
    let z = DVector::from_fn(factor.nrows(), |_, _| StandardNormal.sample(rng));
    mean + factor.tr_mul(&z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    /// Runs with `α_j' x_k > β_j` for some `j`.
    pub violations: u64,
    pub rate: f64,
    pub rate_low: f64,
    pub rate_high: f64,
    /// Violation counts per constraint.
    pub constraint_violations: Vec<u64>,
    /// Largest `|C_ij - P_ij| / se_ij` with `C` the second moment of
    /// `x_k - x̄_k` and `se_ij² = (P_ii P_jj + P_ij²) / runs`.
    pub cov_max_z: f64,
    /// Same for `x̃_k = x_k - x̂_k` against `P̃_k`.
    pub error_cov_max_z: f64,
    /// Largest `|E[(x̂_k - x̄_k)_i x̃_kj]| / se` with `se² = P̂_ii P̃_jj / runs`.
    pub orthogonality_max_z: f64,
    /// Largest z-score of the cross moment of the innovations at `k` and
    /// `k + 1` (zero at `k = N`).
    pub innovation_lag1_max_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub generator: String,
    pub seed: u64,
    pub runs: u64,
    pub batch_runs: usize,
    pub p_fail: f64,
    pub confidence: f64,
    pub steps: Vec<StepReport>,
    pub max_violation_rate: f64,
    pub max_violation_step: usize,
    pub terminal_mean: Vec<f64>,
    /// Sample covariance of `x_N` about the sample mean, row-major.
    pub terminal_cov: Vec<f64>,
    /// Largest eigenvalue of `terminal_cov - P_f`.
    pub terminal_cov_excess: f64,
    /// `3 ||SE_N||_F` with `SE_N` the entrywise standard errors of the sample covariance.
    pub terminal_cov_tolerance: f64,
    pub cov_max_z: f64,
    pub error_cov_max_z: f64,
    pub orthogonality_max_z: f64,
    pub innovation_lag1_max_z: f64,
    /// Largest absolute sample correlation between innovation entries at consecutive steps.
    pub innovation_lag1_max_corr: f64,
}

impl SimulationReport {
    pub fn terminal_cov_within_bound(&self) -> bool {
        self.terminal_cov_excess <= self.terminal_cov_tolerance
    }

    /// Fixed-width console table of the per-step violation rates.
    pub fn summary_table(&self) -> String {
        let mut s = format!(
            "{:>4} {:>10} {:>12} {:>12} {:>12}\n",
            "k", "violations", "rate", "upper", "p_fail"
        );
        for st in &self.steps {
            s.push_str(&format!(
                "{:>4} {:>10} {:>12.6e} {:>12.6e} {:>12.6e}\n",
                st.k, st.violations, st.rate, st.rate_high, self.p_fail
            ));
        }
        s
    }
}

/// Per-batch sums; merging is addition.
#[derive(Debug, Clone)]
struct Accum {
    runs: u64,
    violations: Vec<u64>,
    per_constraint: Vec<Vec<u64>>,
    dev_sum: Vec<DVector<f64>>,
    dev_outer: Vec<DMatrix<f64>>,
    error_outer: Vec<DMatrix<f64>>,
    cross: Vec<DMatrix<f64>>,
    innov_outer: Vec<DMatrix<f64>>,
    innov_lag: Vec<DMatrix<f64>>,
}

impl Accum {
    fn new(n: usize, nx: usize, ny: usize, nc: usize) -> Self {
        Self {
            runs: 0,
            violations: vec![0; n + 1],
            per_constraint: vec![vec![0; nc]; n + 1],
            dev_sum: vec![DVector::zeros(nx); n + 1],
            dev_outer: vec![DMatrix::zeros(nx, nx); n + 1],
            error_outer: vec![DMatrix::zeros(nx, nx); n + 1],
            cross: vec![DMatrix::zeros(nx, nx); n + 1],
            innov_outer: vec![DMatrix::zeros(ny, ny); n + 1],
            innov_lag: vec![DMatrix::zeros(ny, ny); n],
        }
    }

    fn merge(&mut self, o: &Accum) {
        self.runs += o.runs;
        for k in 0..self.violations.len() {
            self.violations[k] += o.violations[k];
            for (a, b) in self.per_constraint[k].iter_mut().zip(&o.per_constraint[k]) {
                *a += b;
            }
            self.dev_sum[k] += &o.dev_sum[k];
            self.dev_outer[k] += &o.dev_outer[k];
            self.error_outer[k] += &o.error_outer[k];
            self.cross[k] += &o.cross[k];
            self.innov_outer[k] += &o.innov_outer[k];
        }
        for (a, b) in self.innov_lag.iter_mut().zip(&o.innov_lag) {
            *a += b;
        }
    }
}

/// Everything a batch needs, precomputed once.
struct Plan<'a> {
    problem: &'a SteeringProblem,
    schedule: &'a FilterSchedule,
    policy: &'a Policy,
    estimate_factor: DMatrix<f64>,
    error_factor: DMatrix<f64>,
}

impl<'a> Plan<'a> {
    fn new(
        problem: &'a SteeringProblem,
        schedule: &'a FilterSchedule,
        policy: &'a Policy,
    ) -> Result<Self> {
        let dims = problem.dims();
        if policy.horizon() != dims.horizon
            || policy.layout.nx != dims.nx
            || policy.layout.nu != dims.nu
        {
            return Err(Error::Dimension(
                "policy does not match the problem dimensions".into(),
            ));
        }
        if schedule.gains.len() != dims.horizon + 1 {
            return Err(Error::Dimension(
                "schedule does not cover the horizon".into(),
            ));
        }
        Ok(Self {
            problem,
            schedule,
            policy,
            estimate_factor: lift::noise_cov_factor(&problem.prior_estimate_cov)?,
            error_factor: lift::noise_cov_factor(&problem.prior_error_cov)?,
        })
    }

    /// Runs `count` trajectories on `rng`; `sink` receives
    /// `(k, x_k, x̂_k, u_k)` rows of every run when present.
    fn run_batch(
        &self,
        rng: &mut ChaCha20Rng,
        count: usize,
        first_run: usize,
        mut sink: Option<&mut String>,
    ) -> Accum {
        let p = self.problem;
        let dims = p.dims();
        let (n, nx, nu, ny) = (dims.horizon, dims.nx, dims.nu, dims.ny);
        let dist = &self.policy.distribution;
        let mut acc = Accum::new(n, nx, ny, p.constraints.len());
        let mut deviations = vec![0.0; (n + 1) * nx];
        let mut u = DVector::zeros(nu);
        let mut innov_prev = DVector::zeros(ny);
        let zero_x = DVector::zeros(nx);
        for run in 0..count {
            let mut xhat_prior = sample_gaussian(&p.prior_mean, &self.estimate_factor, rng);
            let mut x = &xhat_prior + sample_gaussian(&zero_x, &self.error_factor, rng);
            for k in 0..=n {
                let v = DVector::from_fn(p.d[k].ncols(), |_, _| StandardNormal.sample(rng));
                let y = &p.c[k] * &x + &p.d[k] * v;
                let innov = &y - &p.c[k] * &xhat_prior;
                let xhat = &xhat_prior + &self.schedule.gains[k] * &innov;

                let dev = &x - &dist.mean[k];
                let dev_hat = &xhat - &dist.mean[k];
                let err = &x - &xhat;
                acc.dev_sum[k] += &dev;
                acc.dev_outer[k].ger(1.0, &dev, &dev, 1.0);
                acc.error_outer[k].ger(1.0, &err, &err, 1.0);
                acc.cross[k].ger(1.0, &dev_hat, &err, 1.0);
                acc.innov_outer[k].ger(1.0, &innov, &innov, 1.0);
                if k > 0 {
                    acc.innov_lag[k - 1].ger(1.0, &innov_prev, &innov, 1.0);
                }
                innov_prev.copy_from(&innov);
                let mut any = false;
                for (j, con) in p.constraints.iter().enumerate() {
                    if !con.contains(&x) {
                        acc.per_constraint[k][j] += 1;
                        any = true;
                    }
                }
                if any {
                    acc.violations[k] += 1;
                }
                deviations[k * nx..(k + 1) * nx].copy_from_slice(dev_hat.as_slice());

                if k < n {
                    self.policy.control_into(k, &deviations, u.as_mut_slice());
                }
                if let Some(out) = sink.as_deref_mut() {
                    write_row(out, first_run + run, k, &x, &xhat, &u, k < n);
                }
                if k == n {
                    break;
                }
                let w = DVector::from_fn(p.g[k].ncols(), |_, _| StandardNormal.sample(rng));
                xhat_prior = &p.a[k] * &xhat + &p.b[k] * &u;
                x = &p.a[k] * &x + &p.b[k] * &u + &p.g[k] * w;
            }
            acc.runs += 1;
        }
        acc
    }
}

fn write_row(
    out: &mut String,
    run: usize,
    k: usize,
    x: &DVector<f64>,
    xhat: &DVector<f64>,
    u: &DVector<f64>,
    with_u: bool,
) {
    use std::fmt::Write as _;
    write!(out, "{run},{k}").unwrap();
    for v in x.iter().chain(xhat.iter()) {
        write!(out, ",{v:e}").unwrap();
    }
    // no control at the final step; the columns stay empty
    for v in u.iter() {
        match with_u {
            true => write!(out, ",{v:e}").unwrap(),
            false => out.push(','),
        }
    }
    out.push('\n');
}

fn batch_rng(seed: u64, batch: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

/// Worker count: `COVSTEER_THREADS` if set and positive, else the available
/// parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Simulates `runs` closed-loop trajectories with the thread count from
/// [`worker_threads`].
pub fn run_closed_loop(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    policy: &Policy,
    runs: usize,
    seed: u64,
) -> Result<SimulationReport> {
    run_closed_loop_with_threads(problem, schedule, policy, runs, seed, worker_threads())
}

pub fn run_closed_loop_with_threads(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    policy: &Policy,
    runs: usize,
    seed: u64,
    threads: usize,
) -> Result<SimulationReport> {
    if runs == 0 {
        return Err(Error::Invalid("at least one run is required".into()));
    }
    let plan = Plan::new(problem, schedule, policy)?;
    let batches = runs.div_ceil(BATCH_RUNS);
    let size = |b: usize| BATCH_RUNS.min(runs - b * BATCH_RUNS);
    let threads = threads.clamp(1, batches);
    let mut results: Vec<Option<Accum>> = vec![None; batches];
    if threads == 1 {
        for (b, slot) in results.iter_mut().enumerate() {
            *slot = Some(plan.run_batch(&mut batch_rng(seed, b), size(b), b * BATCH_RUNS, None));
        }
    } else {
        let next = AtomicUsize::new(0);
        let parts: Vec<Vec<(usize, Accum)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|_| {
                    scope.spawn(|| {
                        let mut done = Vec::new();
                        loop {
                            let b = next.fetch_add(1, Ordering::Relaxed);
                            if b >= batches {
                                break done;
                            }
                            done.push((
                                b,
                                plan.run_batch(
                                    &mut batch_rng(seed, b),
                                    size(b),
                                    b * BATCH_RUNS,
                                    None,
                                ),
                            ));
                        }
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        });
        for (b, acc) in parts.into_iter().flatten() {
            results[b] = Some(acc);
        }
    }
    let dims = problem.dims();
    let mut total = Accum::new(dims.horizon, dims.nx, dims.ny, problem.constraints.len());
    for acc in results.iter().flatten() {
        total.merge(acc);
    }
    Ok(report(problem, schedule, policy, &total, seed))
}

/// Per-run trajectories as CSV (`run, k, x..., x̂..., u...`), drawn from the
/// same streams as [`run_closed_loop`].
pub fn trajectories_csv(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    policy: &Policy,
    runs: usize,
    seed: u64,
) -> Result<String> {
    let plan = Plan::new(problem, schedule, policy)?;
    let dims = problem.dims();
    let mut out = String::from("run,k");
    for name in ["x", "xhat"] {
        for i in 0..dims.nx {
            out.push_str(&format!(",{name}_{i}"));
        }
    }
    for a in 0..dims.nu {
        out.push_str(&format!(",u_{a}"));
    }
    out.push('\n');
    for b in 0..runs.div_ceil(BATCH_RUNS) {
        let count = BATCH_RUNS.min(runs - b * BATCH_RUNS);
        plan.run_batch(
            &mut batch_rng(seed, b),
            count,
            b * BATCH_RUNS,
            Some(&mut out),
        );
    }
    Ok(out)
}

/// `|sample - expected| / se`, with a zero standard error meaning an exact
/// comparison.
fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn report(
    problem: &SteeringProblem,
    schedule: &FilterSchedule,
    policy: &Policy,
    acc: &Accum,
    seed: u64,
) -> SimulationReport {
    let dims = problem.dims();
    let (n, nx, ny) = (dims.horizon, dims.nx, dims.ny);
    let runs = acc.runs;
    let rn = runs as f64;
    let dist = &policy.distribution;
    let mut steps = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let viol = acc.violations[k];
        let (lo, hi) = stats::clopper_pearson(viol, runs, CONFIDENCE);
        let p = &dist.total_cov[k];
        let pt = &schedule.posterior_error_cov[k];
        let ph = &dist.filtered_cov[k];
        let mut cov_z = 0.0_f64;
        let mut err_z = 0.0_f64;
        let mut orth_z = 0.0_f64;
        for i in 0..nx {
            for j in 0..nx {
                if j >= i {
                    let se = ((p[(i, i)] * p[(j, j)] + p[(i, j)].powi(2)) / rn).sqrt();
                    cov_z = cov_z.max(z_score(acc.dev_outer[k][(i, j)] / rn - p[(i, j)], se));
                    let se = ((pt[(i, i)] * pt[(j, j)] + pt[(i, j)].powi(2)) / rn).sqrt();
                    err_z = err_z.max(z_score(acc.error_outer[k][(i, j)] / rn - pt[(i, j)], se));
                }
                let se = (ph[(i, i)].max(0.0) * pt[(j, j)].max(0.0) / rn).sqrt();
                orth_z = orth_z.max(z_score(acc.cross[k][(i, j)] / rn, se));
            }
        }
        let mut lag_z = 0.0_f64;
        if k < n {
            let (s0, s1) = (&schedule.innovation_cov[k], &schedule.innovation_cov[k + 1]);
            for i in 0..ny {
                for j in 0..ny {
                    let se = (s0[(i, i)] * s1[(j, j)] / rn).sqrt();
                    lag_z = lag_z.max(z_score(acc.innov_lag[k][(i, j)] / rn, se));
                }
            }
        }
        steps.push(StepReport {
            k,
            violations: viol,
            rate: viol as f64 / rn,
            rate_low: lo,
            rate_high: hi,
            constraint_violations: acc.per_constraint[k].clone(),
            cov_max_z: cov_z,
            error_cov_max_z: err_z,
            orthogonality_max_z: orth_z,
            innovation_lag1_max_z: lag_z,
        });
    }
    let mut lag_corr = 0.0_f64;
    for k in 0..n {
        let (o0, o1) = (&acc.innov_outer[k], &acc.innov_outer[k + 1]);
        for i in 0..ny {
            for j in 0..ny {
                let denom = (o0[(i, i)] * o1[(j, j)]).sqrt();
                if denom > 0.0 {
                    lag_corr = lag_corr.max((acc.innov_lag[k][(i, j)] / denom).abs());
                }
            }
        }
    }
    let (max_k, max_rate) =
        steps
            .iter()
            .map(|s| (s.k, s.rate))
            .fold((0, f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });

    // terminal statistics about the sample mean
    let mean_dev = &acc.dev_sum[n] / rn;
    let terminal_mean = &dist.mean[n] + &mean_dev;
    let terminal_cov = if runs > 1 {
        linalg::symmetrize(
            &((&acc.dev_outer[n] - &mean_dev * mean_dev.transpose() * rn) / (rn - 1.0)),
        )
    } else {
        DMatrix::zeros(nx, nx)
    };
    let pn = &dist.total_cov[n];
    let se_fro = (0..nx)
        .flat_map(|i| (0..nx).map(move |j| (i, j)))
        .map(|(i, j)| (pn[(i, i)] * pn[(j, j)] + pn[(i, j)].powi(2)) / rn)
        .sum::<f64>()
        .sqrt();
    let excess = linalg::sym_eigen(&linalg::symmetrize(
        &(&terminal_cov - &problem.target_cov_bound),
    ))
    .0[nx - 1];
    let max_of = |f: fn(&StepReport) -> f64| steps.iter().map(f).fold(0.0_f64, f64::max);
    SimulationReport {
        generator: GENERATOR.into(),
        seed,
        runs,
        batch_runs: BATCH_RUNS,
        p_fail: problem.total_risk,
        confidence: CONFIDENCE,
        max_violation_rate: max_rate,
        max_violation_step: max_k,
        terminal_mean: terminal_mean.iter().copied().collect(),
        terminal_cov: linalg::row_major(&terminal_cov),
        terminal_cov_excess: excess,
        terminal_cov_tolerance: 3.0 * se_fro,
        cov_max_z: max_of(|s| s.cov_max_z),
        error_cov_max_z: max_of(|s| s.error_cov_max_z),
        orthogonality_max_z: max_of(|s| s.orthogonality_max_z),
        innovation_lag1_max_z: max_of(|s| s.innovation_lag1_max_z),
        innovation_lag1_max_corr: lag_corr,
        steps,
    }
}
