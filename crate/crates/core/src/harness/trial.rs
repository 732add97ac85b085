//! Trial protocol and experiment orchestration.
//!
//! One trial: draw (or reshuffle) the data, split it four ways, fit the
//! quantile band on the treated units of the first part, fit one generator
//! per quality on the treated units of the second, calibrate on the third and
//! score intervals for `Y(1)` on the control units of the fourth.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cci::{CciCalibrator, ScoredCalibration};
use crate::dgp::{self, PropensityModel};
use crate::error::{Error, Result};
use crate::models::{fit_cf_generator, fit_quantile_model, QuantileModel};
use crate::par::{self, Exec};
use crate::rng;
use crate::spcci::{self, treatment_probability_bound, TreatmentProbabilityBound, UcbPoint};
use crate::types::{coverage_and_width, split_by_treatment, Arm, Dataset, Interval, TrialMetrics};

use super::config::{DgpKind, EvalArm, ExperimentConfig, Quality};
use super::data::{ingest_ihdp_csv, IhdpIngest};

/// Per-experiment state shared by all trials.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub config: ExperimentConfig,
    pub propensity: PropensityModel,
    /// Fixed dataset reshuffled per trial (IHDP); simulated DGPs draw afresh.
    pub pool: Option<Dataset>,
    pub dataset_sha256: Option<String>,
    pub warnings: Vec<String>,
}

impl ExperimentContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        match config.dgp {
            DgpKind::Ihdp => {
                let path = config.ihdp_path.clone().ok_or_else(|| Error::Config("ihdp_path unset".into()))?;
                let ing = ingest_ihdp_csv(&path)?;
                Self::from_ihdp(config, ing)
            }
            DgpKind::Synthetic => {
                let prop = dgp::synthetic_propensity_with(&config.synthetic(config.base_seed), config.pt1_draws, Exec::Parallel)?;
                let e_max = prop.e_max();
                let prop = prop.with_range(config.clip_floor, e_max)?;
                Ok(Self::simulated(config, prop))
            }
            DgpKind::Radio => {
                let prop = dgp::radio_propensity(&config.radio(config.base_seed), config.pt1_draws, Exec::Parallel)?;
                let prop = prop.with_range(config.clip_floor, 1.0 - config.clip_floor)?;
                Ok(Self::simulated(config, prop))
            }
        }
    }

    fn simulated(config: ExperimentConfig, propensity: PropensityModel) -> Self {
        ExperimentContext {
            config,
            propensity,
            pool: None,
            dataset_sha256: None,
            warnings: Vec::new(),
        }
    }

    /// Randomized assignment is assumed: `e(x) = P(T = 1) = ` the pooled
    /// treated fraction, so every importance weight is 1.
    pub fn from_ihdp(mut config: ExperimentConfig, ing: IhdpIngest) -> Result<Self> {
        let data = ing.dataset;
        if !data.units().iter().all(|u| u.has_oracle()) {
            return Err(Error::InsufficientData("IHDP rows need both potential outcomes".into()));
        }
        config.n = data.len();
        let p = data.n_treated() as f64 / data.len() as f64;
        let propensity = PropensityModel::constant(p)?;
        Ok(ExperimentContext {
            config,
            propensity,
            pool: Some(data),
            dataset_sha256: Some(ing.sha256),
            warnings: ing.warnings,
        })
    }

    fn trial_data(&self, trial_seed: u64) -> Result<Dataset> {
        let cfg = &self.config;
        let data = match (&self.pool, cfg.dgp) {
            (Some(pool), _) => pool.clone(),
            (None, DgpKind::Synthetic) => dgp::generate_synthetic(&cfg.synthetic(trial_seed), cfg.n)?,
            (None, DgpKind::Radio) => dgp::generate_radio(&cfg.radio(trial_seed), cfg.n)?,
            (None, DgpKind::Ihdp) => return Err(Error::Config("IHDP context without data".into())),
        };
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng::stream(trial_seed, 1));
        data.select(&idx)
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        rng::derive_seed(self.config.base_seed, trial as u64)
    }
}

/// Consecutive parts with sizes `round(f_k n)`, the last taking the rest.
pub fn split_four(data: &Dataset, fractions: [f64; 4]) -> Result<[Dataset; 4]> {
    let n = data.len();
    let mut bounds = [0usize; 5];
    let mut acc = 0.0;
    for k in 0..3 {
        acc += fractions[k];
        bounds[k + 1] = ((acc * n as f64).round() as usize).min(n);
    }
    bounds[4] = n;
    if bounds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InsufficientData(format!("{n} units cannot fill a four-way split")));
    }
    let part = |k: usize| data.select(&(bounds[k]..bounds[k + 1]).collect::<Vec<_>>());
    Ok([part(0)?, part(1)?, part(2)?, part(3)?])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    /// `cci` or `spcci-<quality>`.
    pub method: String,
    pub quality: Option<Quality>,
    pub metrics: TrialMetrics,
    pub n0_cal: usize,
    pub n1_cal: usize,
    /// Treated test units not scored under `eval_arm = control`.
    pub n_skipped_test: usize,
    /// SP-CCI only; `None` when infeasible.
    pub eta_hat: Option<f64>,
    pub feasible: Option<bool>,
    pub radius: Option<f64>,
    pub eps_inflation: Option<f64>,
    pub min_ucb: Option<f64>,
    pub group_size: Option<usize>,
    /// Real calibration units dropped so that `n1 <= n0` (SP-CCI only).
    pub n_real_dropped: usize,
    #[serde(skip)]
    pub ucb_curve: Vec<UcbPoint>,
}

pub fn method_label(quality: Option<Quality>) -> String {
    match quality {
        None => "cci".to_string(),
        Some(q) => format!("spcci-{}", q.label()),
    }
}

struct TestSet<'a> {
    xs: Vec<&'a [f64]>,
    truths: Vec<f64>,
    skipped: usize,
}

fn test_set(test: &Dataset, eval_arm: EvalArm) -> Result<TestSet<'_>> {
    let mut xs = Vec::new();
    let mut truths = Vec::new();
    let mut skipped = 0;
    for u in test.units() {
        if eval_arm == EvalArm::Control && u.t != Arm::Control {
            skipped += 1;
            continue;
        }
        let y1 = u
            .y1
            .ok_or_else(|| Error::InsufficientData("test unit without oracle Y(1)".into()))?;
        xs.push(u.x.as_slice());
        truths.push(y1);
    }
    if xs.is_empty() {
        return Err(Error::InsufficientData("no scorable test units".into()));
    }
    Ok(TestSet { xs, truths, skipped })
}

fn cci_intervals(qm: &QuantileModel, d1: &Dataset, prop: &PropensityModel, alpha: f64, xs: &[&[f64]]) -> Result<Vec<Interval>> {
    let cal = CciCalibrator::new(&ScoredCalibration::from_treated(qm, d1, prop)?);
    Ok(xs.iter().map(|x| cal.interval(qm, x, prop, alpha)).collect())
}

fn seed_for(trial_seed: u64, tag: u64) -> u64 {
    rng::derive_seed(trial_seed, tag)
}

/// All metric records of one trial, CCI first, then SP-CCI by quality.
pub fn run_trial(ctx: &ExperimentContext, trial: usize, trial_seed: u64) -> Result<Vec<TrialRecord>> {
    let cfg = &ctx.config;
    let gbqr = cfg.gbqr();
    let data = ctx.trial_data(trial_seed)?;
    let [q_part, g_part, c_part, t_part] = split_four(&data, cfg.splits())?;
    let qm = fit_quantile_model(&q_part.filter_arm(Arm::Treated)?, cfg.alpha, &gbqr)?;
    let split = split_by_treatment(&c_part)?;
    let test = test_set(&t_part, cfg.eval_arm)?;

    let mut prop = ctx.propensity.clone();
    let mut pt1_bound: Option<TreatmentProbabilityBound> = None;
    if cfg.pt1_empirical {
        let b = treatment_probability_bound(
            data.n_treated() as u64,
            data.len() as u64,
            1.0 - cfg.delta,
            prop.e_min(),
            prop.e_max(),
        )?;
        prop = prop.with_p_t1(b.p_hat.clamp(1e-9, 1.0 - 1e-9))?;
        pt1_bound = Some(b);
    }

    let base = |quality: Option<Quality>, metrics: TrialMetrics| TrialRecord {
        trial,
        seed: trial_seed,
        method: method_label(quality),
        quality,
        metrics,
        n0_cal: split.n0(),
        n1_cal: split.n1(),
        n_skipped_test: test.skipped,
        eta_hat: None,
        feasible: None,
        radius: None,
        eps_inflation: None,
        min_ucb: None,
        group_size: None,
        n_real_dropped: 0,
        ucb_curve: Vec::new(),
    };

    let mut records = Vec::new();
    let mut cci_cache: Option<Vec<Interval>> = None;
    let mut cci = || -> Result<Vec<Interval>> {
        if cci_cache.is_none() {
            cci_cache = Some(cci_intervals(&qm, &split.d1, &prop, cfg.alpha, &test.xs)?);
        }
        Ok(cci_cache.clone().unwrap_or_default())
    };
    if cfg.method.runs_cci() {
        let ivs = cci()?;
        records.push(base(None, coverage_and_width(&ivs, &test.truths, cfg.alpha)?));
    }
    if cfg.method.runs_spcci() {
        let gen_train = g_part.filter_arm(Arm::Treated)?;
        let (balanced, dropped) = spcci::balance_real_arm(&split, seed_for(trial_seed, 400))?;
        for (qi, &quality) in cfg.qualities.iter().enumerate() {
            let gen = fit_cf_generator(&gen_train, quality.fraction(), &gbqr, seed_for(trial_seed, 100 + qi as u64))?;
            let grouped = spcci::build_grouped_calibration_with(
                &balanced,
                &gen,
                seed_for(trial_seed, 200 + qi as u64),
                cfg.draws_per_label,
            )?;
            let mut w = spcci::compute_weights(&grouped, &prop)?;
            if cfg.weight_error > 0.0 {
                w = w.perturbed(cfg.weight_error, cfg.weight_error, seed_for(trial_seed, 300 + qi as u64))?;
            }
            if let Some(b) = pt1_bound {
                w.eps_real += b.eps_real;
                w.eps_syn += b.eps_syn;
            }
            let c = cfg.c_override.unwrap_or_else(|| prop.concentration_constant());
            let res = spcci::select_eta(&grouped, &w, &qm, cfg.alpha, cfg.delta, c)?;
            let ivs: Vec<Interval> = test.xs.iter().map(|x| spcci::spcci_interval(&qm, &res, x)).collect();
            let mut rec = base(Some(quality), coverage_and_width(&ivs, &test.truths, cfg.alpha)?);
            rec.eta_hat = res.eta_hat;
            rec.feasible = Some(res.feasible);
            rec.radius = Some(res.radius);
            rec.eps_inflation = Some(res.eps_inflation);
            rec.min_ucb = Some(res.min_ucb);
            rec.group_size = Some(res.r);
            rec.n_real_dropped = dropped;
            rec.ucb_curve = res.ucb_curve;
            records.push(rec);
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedTrial {
    pub trial: usize,
    pub seed: u64,
    pub error: String,
}

/// Aggregate over trials for one method label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_trials: usize,
    pub mean_coverage: f64,
    pub se_coverage: f64,
    /// Fraction of trials with empirical coverage below `1 - alpha`.
    pub cvr: f64,
    /// Mean over trials of the per-trial average finite width.
    pub mean_apiw: Option<f64>,
    pub se_apiw: Option<f64>,
    /// Trials whose intervals were all unbounded (excluded from APIW).
    pub n_all_infinite: usize,
    pub n_infeasible: usize,
    /// Trials in which real calibration units were dropped.
    pub n_rebalanced: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

pub fn summarize(records: &[TrialRecord]) -> Vec<MethodSummary> {
    let mut labels: Vec<(Option<Quality>, String)> = records.iter().map(|r| (r.quality, r.method.clone())).collect();
    labels.sort();
    labels.dedup();
    labels
        .into_iter()
        .map(|(_, method)| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.method == method).collect();
            let cov: Vec<f64> = rs.iter().map(|r| r.metrics.empirical_coverage).collect();
            let widths: Vec<f64> = rs.iter().filter_map(|r| r.metrics.avg_width).collect();
            let (mean_coverage, se_coverage) = mean_se(&cov);
            let (mean_apiw, se_apiw) = if widths.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_se(&widths);
                (Some(m), Some(s))
            };
            MethodSummary {
                method,
                n_trials: rs.len(),
                mean_coverage,
                se_coverage,
                cvr: rs.iter().filter(|r| !r.metrics.covered_target).count() as f64 / rs.len() as f64,
                mean_apiw,
                se_apiw,
                n_all_infinite: rs.len() - widths.len(),
                n_infeasible: rs.iter().filter(|r| r.feasible == Some(false)).count(),
                n_rebalanced: rs.iter().filter(|r| r.n_real_dropped > 0).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensitySummary {
    pub p_t1: f64,
    pub e_min: f64,
    pub e_max: f64,
    /// `2 / e_min + 1 / (1 - e_max)`.
    pub default_c: f64,
    pub c_used: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub trial_seeds: Vec<u64>,
    pub propensity: PropensitySummary,
    pub dataset_sha256: Option<String>,
    pub warnings: Vec<String>,
    pub summaries: Vec<MethodSummary>,
    pub trials: Vec<TrialRecord>,
    pub failed_trials: Vec<FailedTrial>,
}

impl RunReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn records<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a TrialRecord> + 'a {
        self.trials.iter().filter(move |r| r.method == method)
    }
}

pub fn run_experiment(ctx: &ExperimentContext) -> Result<RunReport> {
    run_experiment_with(ctx, Exec::Parallel)
}

/// Trials run concurrently under `exec`; failures are recorded, not raised.
pub fn run_experiment_with(ctx: &ExperimentContext, exec: Exec) -> Result<RunReport> {
    let cfg = &ctx.config;
    let seeds: Vec<u64> = (0..cfg.n_trials).map(|i| ctx.trial_seed(i)).collect();
    let outcomes = par::with_workers(cfg.workers, || {
        par::map_range(exec, cfg.n_trials, |i| run_trial(ctx, i, seeds[i]))
    });
    let mut trials = Vec::new();
    let mut failed_trials = Vec::new();
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(rs) => trials.extend(rs),
            Err(e) => failed_trials.push(FailedTrial {
                trial: i,
                seed: seeds[i],
                error: e.to_string(),
            }),
        }
    }
    let prop = &ctx.propensity;
    Ok(RunReport {
        config: cfg.clone(),
        trial_seeds: seeds,
        propensity: PropensitySummary {
            p_t1: prop.p_t1(),
            e_min: prop.e_min(),
            e_max: prop.e_max(),
            default_c: prop.concentration_constant(),
            c_used: cfg.c_override.unwrap_or_else(|| prop.concentration_constant()),
        },
        dataset_sha256: ctx.dataset_sha256.clone(),
        warnings: ctx.warnings.clone(),
        summaries: summarize(&trials),
        trials,
        failed_trials,
    })
}
