//! Conformal prediction intervals for unobserved counterfactual outcomes.
//!
//! Two calibration procedures are provided for a pre-trained two-sided
//! quantile regressor of the treated outcome `Y(1)`:
//!
//! * [`cci`]: weighted split-conformal calibration on the real treated units,
//!   with a test-point-dependent widening.
//! * [`spcci`]: synthetic-label calibration. Counterfactual labels sampled
//!   from a generator on the (larger) control arm are combined with the real
//!   treated units through a debiased, importance-weighted miscoverage
//!   estimate, and the widening is the smallest one whose Hoeffding upper
//!   confidence bound meets the target level.
//!
//! Around those sit the data generators ([`dgp`]), the boosted-tree models
//! ([`models`]), counterfactual policy regret ([`policy_eval`]) and the
//! experiment harness with its CLI ([`harness`]).
//!
//! Data-parallel loops (trials, Monte Carlo integration, per-test-point
//! evaluation) go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and runs sequentially otherwise. Results are identical
//! either way.

// NaN-rejecting parameter checks are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cci;
pub mod dgp;
pub mod error;
pub mod harness;
pub mod models;
pub mod par;
pub mod policy_eval;
pub mod rng;
pub mod spcci;
pub mod types;

pub use error::{Error, Result};
pub use types::{Arm, Dataset, Interval, Provenance, TreatmentSplit, TrialMetrics, Unit};
