//! Handover policy trials on the radio DGP.
//!
//! Each trial draws `radio_n` users and cuts them into five equal parts:
//! quantile training, generator training, calibration, a policy-selection
//! part (unused here) and evaluation. Both arms are calibrated, `Y(1)` directly
//! and `Y(0)` by role swap, and regret bounds are formed on the evaluation
//! part.

use serde::{Deserialize, Serialize};

use crate::dgp::{self, PropensityModel, RadioDgpConfig};
use crate::error::Result;
use crate::par::{self, Exec};
use crate::policy_eval::{
    calibrate_arm, evaluate_policy, linspace, theta_sweep, true_average_regret, true_regret, ArmCalibrationInput,
    CalibratedArm, CalibrationMethod, PerArm, SweepRow, ThresholdPolicy,
};
use crate::rng;
use crate::types::{Arm, Dataset};

use super::config::ExperimentConfig;

pub const RADIO_PARTS: usize = 5;

/// Both arms calibrated with one method on one draw of the radio DGP.
#[derive(Debug, Clone)]
pub struct RadioCalibration {
    pub method: CalibrationMethod,
    pub control: CalibratedArm,
    pub treated: CalibratedArm,
}

impl RadioCalibration {
    pub fn arms(&self) -> PerArm<'_> {
        PerArm::new(&self.control.intervals, &self.treated.intervals)
    }
}

#[derive(Debug, Clone)]
pub struct RadioTrial {
    pub radio: RadioDgpConfig,
    pub evaluation: Dataset,
    pub calibrations: Vec<RadioCalibration>,
}

impl RadioTrial {
    pub fn policy(&self, theta: f64) -> ThresholdPolicy {
        let r = self.radio;
        ThresholdPolicy::new(move |x| r.distance_gap(x), theta)
    }
}

fn five_parts(data: &Dataset) -> Result<Vec<Dataset>> {
    let n = data.len();
    (0..RADIO_PARTS)
        .map(|k| data.select(&((k * n / RADIO_PARTS)..((k + 1) * n / RADIO_PARTS)).collect::<Vec<_>>()))
        .collect()
}

pub fn radio_propensity(cfg: &ExperimentConfig) -> Result<PropensityModel> {
    let prop = dgp::radio_propensity(&cfg.radio(cfg.base_seed), cfg.pt1_draws, Exec::Parallel)?;
    prop.with_range(cfg.clip_floor, 1.0 - cfg.clip_floor)
}

pub fn prepare_radio_trial(
    cfg: &ExperimentConfig,
    prop: &PropensityModel,
    trial_seed: u64,
    methods: &[CalibrationMethod],
) -> Result<RadioTrial> {
    let radio = cfg.radio(trial_seed);
    let data = dgp::generate_radio(&radio, cfg.radio_n)?;
    let parts = five_parts(&data)?;
    let gbqr = cfg.gbqr();
    let input = ArmCalibrationInput {
        qm_train: &parts[0],
        gen_train: &parts[1],
        calibration: &parts[2],
        prop,
        gbqr: &gbqr,
        generator_fraction: cfg.policy_quality.fraction(),
        alpha: cfg.alpha,
        delta: cfg.delta,
        c: cfg.c_override,
        seed: rng::derive_seed(trial_seed, 7),
    };
    let calibrations = methods
        .iter()
        .map(|&method| {
            Ok(RadioCalibration {
                method,
                control: calibrate_arm(Arm::Control, method, &input)?,
                treated: calibrate_arm(Arm::Treated, method, &input)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RadioTrial {
        radio,
        evaluation: parts[4].clone(),
        calibrations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub method: CalibrationMethod,
    pub theta: f64,
    pub regret_lower: f64,
    pub regret_upper: f64,
    pub true_regret: f64,
    pub covered: bool,
    pub n_infinite: usize,
    /// Share of units whose true regret lies in their own interval.
    pub unit_coverage: f64,
    /// Mean width of the finite per-unit regret intervals.
    pub avg_unit_width: Option<f64>,
    pub eta_control: Option<f64>,
    pub eta_treated: Option<f64>,
    pub dropped_control: usize,
    pub dropped_treated: usize,
}

fn eta_of(arm: &CalibratedArm) -> Option<f64> {
    match &arm.intervals {
        crate::policy_eval::ArmIntervals::Spcci { result, .. } => Some(result.eta_or_inf()),
        crate::policy_eval::ArmIntervals::Cci { .. } => None,
    }
}

pub fn evaluate_radio_trial(trial: usize, seed: u64, rt: &RadioTrial, theta: f64) -> Result<Vec<PolicyTrialRecord>> {
    let policy = rt.policy(theta);
    let truth = true_average_regret(&rt.evaluation, &policy)
        .ok_or_else(|| crate::Error::InsufficientData("radio units without oracle".into()))?;
    rt.calibrations
        .iter()
        .map(|cal| {
            let b = evaluate_policy(&rt.evaluation, &policy, &cal.arms())?;
            let units = rt.evaluation.units();
            let hits = units
                .iter()
                .zip(&b.per_unit)
                .filter(|(u, iv)| true_regret(u, &policy).is_some_and(|r| iv.0 <= r && r <= iv.1))
                .count();
            let finite: Vec<f64> = b
                .per_unit
                .iter()
                .filter(|iv| iv.0.is_finite() && iv.1.is_finite())
                .map(|iv| iv.1 - iv.0)
                .collect();
            Ok(PolicyTrialRecord {
                trial,
                seed,
                method: cal.method,
                theta,
                regret_lower: b.lower,
                regret_upper: b.upper,
                true_regret: truth,
                covered: b.contains(truth),
                n_infinite: b.n_infinite,
                unit_coverage: hits as f64 / units.len() as f64,
                avg_unit_width: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
                eta_control: eta_of(&cal.control),
                eta_treated: eta_of(&cal.treated),
                dropped_control: cal.control.n_real_dropped,
                dropped_treated: cal.treated.n_real_dropped,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub method: CalibrationMethod,
    pub n_trials: usize,
    /// Trials whose aggregate bounds contain the true average regret.
    pub n_covered: usize,
    pub mean_unit_coverage: f64,
    pub mean_unit_width: Option<f64>,
    /// Trials in which either arm dropped real calibration units.
    pub n_rebalanced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub config: ExperimentConfig,
    pub p_t1: f64,
    pub summaries: Vec<PolicySummary>,
    pub trials: Vec<PolicyTrialRecord>,
    pub failed_trials: Vec<super::trial::FailedTrial>,
}

pub fn run_policy_experiment(cfg: &ExperimentConfig, methods: &[CalibrationMethod], exec: Exec) -> Result<PolicyReport> {
    cfg.validate()?;
    let prop = radio_propensity(cfg)?;
    let seeds: Vec<u64> = (0..cfg.n_trials).map(|i| rng::derive_seed(cfg.base_seed, i as u64)).collect();
    let outcomes = par::with_workers(cfg.workers, || {
        par::map_range(exec, cfg.n_trials, |i| {
            let rt = prepare_radio_trial(cfg, &prop, seeds[i], methods)?;
            evaluate_radio_trial(i, seeds[i], &rt, cfg.policy_theta)
        })
    });
    let mut trials = Vec::new();
    let mut failed_trials = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(rs) => trials.extend(rs),
            Err(e) => failed_trials.push(super::trial::FailedTrial {
                trial: i,
                seed: seeds[i],
                error: e.to_string(),
            }),
        }
    }
    let summaries = methods
        .iter()
        .map(|&m| {
            let rs: Vec<&PolicyTrialRecord> = trials.iter().filter(|r| r.method == m).collect();
            let k = rs.len().max(1) as f64;
            let widths: Vec<f64> = rs.iter().filter_map(|r| r.avg_unit_width).collect();
            PolicySummary {
                method: m,
                n_trials: rs.len(),
                n_covered: rs.iter().filter(|r| r.covered).count(),
                mean_unit_coverage: rs.iter().map(|r| r.unit_coverage).sum::<f64>() / k,
                mean_unit_width: (!widths.is_empty()).then(|| widths.iter().sum::<f64>() / widths.len() as f64),
                n_rebalanced: rs.iter().filter(|r| r.dropped_control + r.dropped_treated > 0).count(),
            }
        })
        .collect();
    Ok(PolicyReport {
        config: cfg.clone(),
        p_t1: prop.p_t1(),
        summaries,
        trials,
        failed_trials,
    })
}

/// Theta sweep on one radio draw, one table per method.
pub fn radio_sweep(
    cfg: &ExperimentConfig,
    trial_seed: u64,
    methods: &[CalibrationMethod],
    exec: Exec,
) -> Result<Vec<(CalibrationMethod, Vec<SweepRow>)>> {
    let prop = radio_propensity(cfg)?;
    let rt = prepare_radio_trial(cfg, &prop, trial_seed, methods)?;
    let thetas = linspace(cfg.sweep_theta_min, cfg.sweep_theta_max, cfg.sweep_n_thetas);
    let policy = rt.policy(cfg.policy_theta);
    rt.calibrations
        .iter()
        .map(|cal| Ok((cal.method, theta_sweep(exec, &rt.evaluation, &thetas, &policy, &cal.arms())?)))
        .collect()
}
