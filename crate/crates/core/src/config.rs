//! JSON problem files.
//!
//! Matrices are row-major nested arrays. Each matrix sequence is either a
//! single matrix (with `"constant": true` on its group) or one matrix per step.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{HalfPlaneConstraint, SteeringProblem};

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSeq {
    Single(Rows),
    PerStep(Vec<Rows>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default)]
    pub constant: bool,
    #[serde(rename = "A")]
    pub a: MatrixSeq,
    #[serde(rename = "B")]
    pub b: MatrixSeq,
    #[serde(rename = "G")]
    pub g: MatrixSeq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    #[serde(default)]
    pub constant: bool,
    #[serde(rename = "C")]
    pub c: MatrixSeq,
    #[serde(rename = "D")]
    pub d: MatrixSeq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub mean: Vec<f64>,
    pub estimate_cov: Rows,
    pub error_cov: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TerminalConfig {
    pub mean: Vec<f64>,
    pub cov_bound: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub constant: bool,
    #[serde(rename = "Q")]
    pub q: MatrixSeq,
    #[serde(rename = "R")]
    pub r: MatrixSeq,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub alpha: Vec<f64>,
    pub beta: f64,
    /// Per-constraint risk; defaults to an equal split of the total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskConfig {
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub horizon: usize,
    pub dynamics: DynamicsConfig,
    pub observation: ObservationConfig,
    pub initial: InitialConfig,
    pub terminal: TerminalConfig,
    pub cost: CostConfig,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    pub risk: RiskConfig,
}

fn matrix(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Config(format!("{name}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn sequence(name: &str, seq: &MatrixSeq, constant: bool, len: usize) -> Result<Vec<DMatrix<f64>>> {
    match (seq, constant) {
        (MatrixSeq::Single(rows), true) => Ok(vec![matrix(name, rows)?; len]),
        (MatrixSeq::PerStep(steps), false) => {
            if steps.len() != len {
                return Err(Error::Config(format!(
                    "{name}: {} steps given, expected {len}",
                    steps.len()
                )));
            }
            steps
                .iter()
                .enumerate()
                .map(|(k, rows)| matrix(&format!("{name}_{k}"), rows))
                .collect()
        }
        (MatrixSeq::Single(_), false) => Err(Error::Config(format!(
            "{name}: a single matrix requires \"constant\": true"
        ))),
        (MatrixSeq::PerStep(_), true) => Err(Error::Config(format!(
            "{name}: \"constant\": true requires a single matrix"
        ))),
    }
}

fn rows_of(m: &DMatrix<f64>) -> Rows {
    linalg::nested_rows(m)
}

fn seq_of(ms: &[DMatrix<f64>]) -> (MatrixSeq, bool) {
    if ms.windows(2).all(|w| w[0] == w[1]) && !ms.is_empty() {
        (MatrixSeq::Single(rows_of(&ms[0])), true)
    } else {
        (MatrixSeq::PerStep(ms.iter().map(rows_of).collect()), false)
    }
}

impl ProblemConfig {
    pub fn to_problem(&self) -> Result<SteeringProblem> {
        let n = self.horizon;
        let dy = &self.dynamics;
        let ob = &self.observation;
        let co = &self.cost;
        let count = self.constraints.len().max(1) as f64;
        let default_risk = self.risk.total / count;
        let problem = SteeringProblem {
            horizon: n,
            a: sequence("A", &dy.a, dy.constant, n)?,
            b: sequence("B", &dy.b, dy.constant, n)?,
            g: sequence("G", &dy.g, dy.constant, n)?,
            c: sequence("C", &ob.c, ob.constant, n + 1)?,
            d: sequence("D", &ob.d, ob.constant, n + 1)?,
            prior_mean: DVector::from_vec(self.initial.mean.clone()),
            prior_estimate_cov: matrix("initial.estimate_cov", &self.initial.estimate_cov)?,
            prior_error_cov: matrix("initial.error_cov", &self.initial.error_cov)?,
            target_mean: DVector::from_vec(self.terminal.mean.clone()),
            target_cov_bound: matrix("terminal.cov_bound", &self.terminal.cov_bound)?,
            q: sequence("Q", &co.q, co.constant, n)?,
            r: sequence("R", &co.r, co.constant, n)?,
            constraints: self
                .constraints
                .iter()
                .map(|c| {
                    HalfPlaneConstraint::new(
                        DVector::from_vec(c.alpha.clone()),
                        c.beta,
                        c.risk.unwrap_or(default_risk),
                    )
                })
                .collect(),
            total_risk: self.risk.total,
        };
        // Visibly asymmetric inputs are left as given so validation reports them.
        Ok(problem.symmetrized().unwrap_or(problem))
    }

    pub fn from_problem(p: &SteeringProblem) -> Self {
        let (a, ca) = seq_of(&p.a);
        let (b, cb) = seq_of(&p.b);
        let (g, cg) = seq_of(&p.g);
        let (c, cc) = seq_of(&p.c);
        let (d, cd) = seq_of(&p.d);
        let (q, cq) = seq_of(&p.q);
        let (r, cr) = seq_of(&p.r);
        let per_step = |seq: MatrixSeq, ms: &[DMatrix<f64>], constant: bool, all: bool| {
            if constant == all {
                seq
            } else {
                MatrixSeq::PerStep(ms.iter().map(rows_of).collect())
            }
        };
        let dyn_const = ca && cb && cg;
        let obs_const = cc && cd;
        let cost_const = cq && cr;
        Self {
            horizon: p.horizon,
            dynamics: DynamicsConfig {
                constant: dyn_const,
                a: per_step(a, &p.a, ca, dyn_const),
                b: per_step(b, &p.b, cb, dyn_const),
                g: per_step(g, &p.g, cg, dyn_const),
            },
            observation: ObservationConfig {
                constant: obs_const,
                c: per_step(c, &p.c, cc, obs_const),
                d: per_step(d, &p.d, cd, obs_const),
            },
            initial: InitialConfig {
                mean: p.prior_mean.iter().copied().collect(),
                estimate_cov: rows_of(&p.prior_estimate_cov),
                error_cov: rows_of(&p.prior_error_cov),
            },
            terminal: TerminalConfig {
                mean: p.target_mean.iter().copied().collect(),
                cov_bound: rows_of(&p.target_cov_bound),
            },
            cost: CostConfig {
                constant: cost_const,
                q: per_step(q, &p.q, cq, cost_const),
                r: per_step(r, &p.r, cr, cost_const),
            },
            constraints: p
                .constraints
                .iter()
                .map(|c| ConstraintConfig {
                    alpha: c.normal.iter().copied().collect(),
                    beta: c.offset,
                    risk: Some(c.risk),
                })
                .collect(),
            risk: RiskConfig {
                total: p.total_risk,
            },
        }
    }
}

pub fn parse_problem(text: &str) -> Result<SteeringProblem> {
    let cfg: ProblemConfig = serde_json::from_str(text)?;
    cfg.to_problem()
}

pub fn load_problem(path: impl AsRef<Path>) -> Result<SteeringProblem> {
    parse_problem(&std::fs::read_to_string(path)?)
}

pub fn problem_to_json(problem: &SteeringProblem) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ProblemConfig::from_problem(
        problem,
    ))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{double_integrator, DoubleIntegratorParams};

    fn same(a: &SteeringProblem, b: &SteeringProblem) -> bool {
        a.horizon == b.horizon
            && a.a == b.a
            && a.b == b.b
            && a.g == b.g
            && a.c == b.c
            && a.d == b.d
            && a.q == b.q
            && a.r == b.r
            && a.prior_mean == b.prior_mean
            && a.prior_estimate_cov == b.prior_estimate_cov
            && a.prior_error_cov == b.prior_error_cov
            && a.target_mean == b.target_mean
            && a.target_cov_bound == b.target_cov_bound
            && a.constraints == b.constraints
            && a.total_risk == b.total_risk
    }

    #[test]
    fn bundled_example_encodes_double_integrator() {
        let path = concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/examples/double_integrator.json"
        );
        let loaded = load_problem(path).unwrap();
        let built = double_integrator(&DoubleIntegratorParams::default());
        assert!(same(&loaded, &built));
    }

    #[test]
    fn round_trip_through_json() {
        let mut p = double_integrator(&DoubleIntegratorParams {
            horizon: 3,
            ..Default::default()
        });
        p.a[1][(0, 0)] = 1.1;
        let text = problem_to_json(&p).unwrap();
        let back = parse_problem(&text).unwrap();
        assert!(same(&p, &back));
    }

    #[test]
    fn default_risk_split() {
        let p = double_integrator(&DoubleIntegratorParams::default());
        let mut cfg = ProblemConfig::from_problem(&p);
        for c in &mut cfg.constraints {
            c.risk = None;
        }
        let q = cfg.to_problem().unwrap();
        assert!(q.constraints.iter().all(|c| c.risk == 5e-4));
    }

    #[test]
    fn constant_flag_must_match_shape() {
        let p = double_integrator(&DoubleIntegratorParams::default());
        let mut cfg = ProblemConfig::from_problem(&p);
        cfg.dynamics.constant = false;
        let err = cfg.to_problem().unwrap_err();
        assert!(err.to_string().contains("constant"));
    }
}
