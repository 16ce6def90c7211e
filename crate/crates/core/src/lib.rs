//! Output-feedback covariance steering for discrete-time linear time-varying
//! Gaussian systems.
//!
//! The pipeline is:
//!
//! 1. [`model`]: describe and validate a [`SteeringProblem`].
//! 2. [`kalman`]: compute the control-independent filter schedule.
//! 3. [`lift`]: stack the filtered-state process into block operators.
//! 4. [`transcribe`]: build the convex program over the feedback
//!    parameterization `(F, M)`, lower it to conic standard form and solve it
//!    with the built-in interior-point backend.
//! 5. [`policy`]: recover the history-feedback gains and audit the analytic
//!    closed-loop distribution.
//! 6. [`simulate`]: Monte Carlo validation of the closed loop.
//!
//! ```no_run
//! use covsteer::{config, kalman, lift, policy, transcribe};
//!
//! let problem = config::load_problem("examples/double_integrator.json").unwrap();
//! let schedule = kalman::run_schedule(&problem).unwrap();
//! let ops = lift::build(&problem, &schedule).unwrap();
//! let outcome = transcribe::solve_problem(&problem, &schedule, &ops, &Default::default()).unwrap();
//! let policy = policy::Policy::from_outcome(&outcome, &problem, &schedule, &ops).unwrap();
//! let audit = policy::audit_constraints(&policy, &problem);
//! println!("worst chance slack: {}", audit.worst_chance_slack());
//! ```

// `!(x > 0.0)` is used deliberately so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod kalman;
pub mod lift;
pub mod linalg;
pub mod model;
pub mod policy;
pub mod simulate;
pub mod stats;
pub mod transcribe;

#[cfg(feature = "cli")]
pub mod cli;

pub use error::{Error, Result};
pub use kalman::FilterSchedule;
pub use lift::LiftedOperators;
pub use model::{HalfPlaneConstraint, SteeringProblem};
pub use policy::Policy;
pub use simulate::SimulationReport;
pub use transcribe::{SolveOutcome, SolveStatus};
