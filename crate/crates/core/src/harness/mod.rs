//! Experiment harness: configuration, dataset files, trial orchestration,
//! report emission and the radio policy trials. The `cfci` binary is a thin
//! wrapper over this module.

pub mod config;
pub mod data;
pub mod policy;
pub mod report;
pub mod trial;

pub use config::{resolve_config, DgpKind, EvalArm, ExperimentConfig, Method, Overrides, Quality};
pub use data::{generate_ihdp_like, ingest_ihdp_csv, load_dataset_csv, write_dataset_csv, write_ihdp_csv, IhdpIngest, IhdpLikeConfig};
pub use policy::{radio_sweep, run_policy_experiment, PolicyReport};
pub use report::emit_report;
pub use trial::{run_experiment, run_experiment_with, run_trial, ExperimentContext, MethodSummary, RunReport, TrialRecord};
