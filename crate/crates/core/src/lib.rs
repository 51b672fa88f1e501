//! Reverse reinforcement learning on finite MDPs.
//!
//! The crate answers retrospective questions ("given the agent is in `s` now,
//! how much reward has accumulated since the last reset?") with reverse
//! general value functions. It provides:
//!
//! * [`mdp`]: finite MDPs, policies, sampling and the chain-level matrices,
//! * [`oracle`]: exact solutions (forward and reverse GVFs, linear fixed
//!   points, the distributional reverse Bellman operator) plus Monte-Carlo
//!   estimators used to cross-check them,
//! * [`reverse_td`]: Reverse TD, Reverse TD(λ) and off-policy Reverse TD,
//! * [`distributional`]: quantile-regression distributional Reverse TD and
//!   Gaussian-mixture imputation,
//! * [`anomaly`]: a constant-memory streaming anomaly detector,
//! * [`harness`]: seeded experiment orchestration and CSV/JSON output.

pub mod anomaly;
pub mod distributional;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod mdp;
pub mod oracle;
pub mod reverse_td;
pub mod stats;

pub use error::{Error, Result};
pub use mdp::{FiniteMdp, Policy, RewardOutcome, Transition};
pub use oracle::DiscreteDistribution;
pub use reverse_td::{LinearValueModel, ReverseReturnTracker, StepSchedule};
pub use distributional::{GaussianMixture, QuantileModel};

pub use nalgebra::{DMatrix, DVector};
