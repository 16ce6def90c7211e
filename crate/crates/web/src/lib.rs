//! Browser front end for the planar double integrator: solve a steering
//! problem, draw its covariance ellipses and run a small Monte Carlo batch.
//!
//! [`Demo`] holds the logic and is usable natively; [`WebDemo`] wraps it for
//! JavaScript and exchanges JSON strings.

use covsteer::model::{self, DoubleIntegratorParams};
use covsteer::policy::{self, Policy};
use covsteer::transcribe::{self, SolveOptions};
use covsteer::{kalman, lift, simulate, FilterSchedule, SteeringProblem};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Position coordinates of the planar state.
const PLANE: (usize, usize) = (0, 1);
const ELLIPSE_SAMPLES: usize = 48;
/// The bundled horizon; solves take about 20 s in the browser at this size.
pub const MAX_HORIZON: usize = 20;
/// Monte Carlo batches in the browser are small; the cap keeps the page
/// responsive.
pub const MAX_RUNS: usize = 20_000;
pub const MAX_DRAWN: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct DemoSettings {
    pub horizon: usize,
    /// Multiplies the default terminal covariance bound.
    pub bound_scale: f64,
    pub bandwidth: Option<usize>,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self {
            horizon: 12,
            bound_scale: 1.0,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HalfPlane {
    /// Position part of the normal; the demo constraints ignore velocity.
    pub normal: [f64; 2],
    pub offset: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub horizon: usize,
    pub objective: f64,
    pub iterations: usize,
    pub worst_chance_slack: f64,
    pub worst_chance_step: Option<usize>,
    pub terminal_cov_slack: f64,
    pub mean: Vec<[f64; 2]>,
    pub target: [f64; 2],
    /// Three-sigma boundary of the terminal covariance bound.
    pub target_ellipse: Vec<[f64; 2]>,
    pub constraints: Vec<HalfPlane>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MonteCarlo {
    pub runs: usize,
    pub seed: u64,
    /// Fraction of runs outside some half-plane at each step.
    pub rates: Vec<f64>,
    pub max_rate: f64,
    pub allowed_rate: f64,
    /// Position paths of the first few runs.
    pub paths: Vec<Vec<[f64; 2]>>,
}

pub struct Demo {
    problem: SteeringProblem,
    schedule: FilterSchedule,
    policy: Policy,
    iterations: usize,
}

fn pair((x, y): (f64, f64)) -> [f64; 2] {
    [x, y]
}

impl Demo {
    pub fn solve(settings: &DemoSettings) -> Result<Self, String> {
        if !(2..=MAX_HORIZON).contains(&settings.horizon) {
            return Err(format!(
                "horizon {} outside 2..={MAX_HORIZON}",
                settings.horizon
            ));
        }
        if !(settings.bound_scale > 0.0 && settings.bound_scale.is_finite()) {
            return Err(format!(
                "bound scale {} must be positive",
                settings.bound_scale
            ));
        }
        let mut params = DoubleIntegratorParams {
            horizon: settings.horizon,
            ..Default::default()
        };
        for v in params.target_cov_diag.iter_mut() {
            *v *= settings.bound_scale;
        }
        let problem = model::double_integrator(&params);
        let schedule = kalman::run_schedule(&problem).map_err(|e| e.to_string())?;
        let ops = lift::build(&problem, &schedule).map_err(|e| e.to_string())?;
        let opts = SolveOptions {
            bandwidth: settings.bandwidth,
            ..Default::default()
        };
        let outcome = transcribe::solve_problem(&problem, &schedule, &ops, &opts)
            .map_err(|e| e.to_string())?;
        if !outcome.is_optimal() {
            return Err(format!(
                "solver stopped: {} ({})",
                outcome.status, outcome.message
            ));
        }
        let policy =
            Policy::from_outcome(&outcome, &problem, &schedule, &ops).map_err(|e| e.to_string())?;
        Ok(Self {
            problem,
            schedule,
            policy,
            iterations: outcome.iterations,
        })
    }

    pub fn summary(&self) -> Summary {
        let audit = policy::audit_constraints(&self.policy, &self.problem);
        let p = &self.problem;
        Summary {
            horizon: p.horizon,
            objective: self.policy.objective.unwrap_or(f64::NAN),
            iterations: self.iterations,
            worst_chance_slack: audit.worst_chance_slack(),
            worst_chance_step: audit.worst_chance().map(|c| c.k),
            terminal_cov_slack: audit.terminal_cov_slack,
            mean: self
                .policy
                .distribution
                .mean
                .iter()
                .map(|m| [m[PLANE.0], m[PLANE.1]])
                .collect(),
            target: [p.target_mean[PLANE.0], p.target_mean[PLANE.1]],
            target_ellipse: policy::ellipse_points(
                &p.target_mean,
                &p.target_cov_bound,
                PLANE,
                3.0,
                ELLIPSE_SAMPLES,
            )
            .into_iter()
            .map(pair)
            .collect(),
            constraints: p
                .constraints
                .iter()
                .map(|c| HalfPlane {
                    normal: [c.normal[PLANE.0], c.normal[PLANE.1]],
                    offset: c.offset,
                    risk: c.risk,
                })
                .collect(),
        }
    }

    /// `sigma`-level boundaries of the position marginal at every step.
    pub fn ellipses(&self, sigma: f64) -> Vec<Vec<[f64; 2]>> {
        let dist = &self.policy.distribution;
        dist.mean
            .iter()
            .zip(&dist.total_cov)
            .map(|(m, c)| {
                policy::ellipse_points(m, c, PLANE, sigma, ELLIPSE_SAMPLES)
                    .into_iter()
                    .map(pair)
                    .collect()
            })
            .collect()
    }

    pub fn simulate(&self, runs: usize, seed: u64, drawn: usize) -> Result<MonteCarlo, String> {
        if runs == 0 || runs > MAX_RUNS {
            return Err(format!("runs must lie in 1..={MAX_RUNS}"));
        }
        let (p, s, pol) = (&self.problem, &self.schedule, &self.policy);
        // No threads in the browser.
        let report = simulate::run_closed_loop_with_threads(p, s, pol, runs, seed, 1)
            .map_err(|e| e.to_string())?;
        let drawn = drawn.min(runs).min(MAX_DRAWN);
        let csv = simulate::trajectories_csv(p, s, pol, drawn, seed).map_err(|e| e.to_string())?;
        Ok(MonteCarlo {
            runs,
            seed,
            rates: report.steps.iter().map(|st| st.rate).collect(),
            max_rate: report.max_violation_rate,
            allowed_rate: report.p_fail,
            paths: paths_from_csv(&csv, drawn),
        })
    }
}

/// Rows are `run, k, x_0, x_1, ...` ordered by run, then step.
fn paths_from_csv(csv: &str, runs: usize) -> Vec<Vec<[f64; 2]>> {
    let mut paths = vec![Vec::new(); runs];
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let field = |i: usize| cols.get(i).and_then(|v| v.parse::<f64>().ok());
        let run = cols[0].parse::<usize>().ok();
        if let (Some(path), Some(x), Some(y)) = (
            run.and_then(|r| paths.get_mut(r)),
            field(2 + PLANE.0),
            field(2 + PLANE.1),
        ) {
            path.push([x, y]);
        }
    }
    paths
}

fn to_json<T: Serialize>(value: &T) -> Result<String, JsError> {
    serde_json::to_string(value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub struct WebDemo(Demo);

#[wasm_bindgen]
impl WebDemo {
    /// Negative `bandwidth` keeps the full causal history.
    #[wasm_bindgen(constructor)]
    pub fn new(horizon: usize, bound_scale: f64, bandwidth: i32) -> Result<WebDemo, JsError> {
        let settings = DemoSettings {
            horizon,
            bound_scale,
            bandwidth: usize::try_from(bandwidth).ok(),
        };
        Demo::solve(&settings)
            .map(WebDemo)
            .map_err(|e| JsError::new(&e))
    }

    pub fn summary(&self) -> Result<String, JsError> {
        to_json(&self.0.summary())
    }

    pub fn ellipses(&self, sigma: f64) -> Result<String, JsError> {
        to_json(&self.0.ellipses(sigma))
    }

    pub fn simulate(&self, runs: usize, seed: u32, drawn: usize) -> Result<String, JsError> {
        let mc = self
            .0
            .simulate(runs, u64::from(seed), drawn)
            .map_err(|e| JsError::new(&e))?;
        to_json(&mc)
    }
}
