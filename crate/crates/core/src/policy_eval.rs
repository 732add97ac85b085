//! Counterfactual regret of threshold policies.
//!
//! A policy `pi(x) = 1{s(x) > theta}` picks an arm; its regret on a unit is
//! `Y(1 - pi(x)) - Y(pi(x))`. Only `Y(t)` is observed, so the regret is
//! bounded with a conformal interval for the missing arm `Y(1 - t)`. Both
//! arms therefore need a calibrated interval provider; the control arm is
//! handled by exchanging the arm labels and reusing the treated-arm pipeline.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cci::{CciCalibrator, ScoredCalibration};
use crate::dgp::PropensityModel;
use crate::error::{Error, Result};
use crate::models::{fit_cf_generator, fit_quantile_model, GbqrConfig, QuantileModel};
use crate::par::{self, Exec};
use crate::rng;
use crate::spcci::{self, CalibrationResult};
use crate::types::{split_by_treatment, Arm, Dataset, Interval, Unit};

type Summary = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct ThresholdPolicy {
    summary: Summary,
    pub theta: f64,
}

impl fmt::Debug for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThresholdPolicy").field("theta", &self.theta).finish_non_exhaustive()
    }
}

impl ThresholdPolicy {
    pub fn new(summary: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, theta: f64) -> Self {
        ThresholdPolicy {
            summary: Arc::new(summary),
            theta,
        }
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        ThresholdPolicy {
            summary: Arc::clone(&self.summary),
            theta,
        }
    }

    pub fn summary(&self, x: &[f64]) -> f64 {
        (self.summary)(x)
    }

    /// Treated iff `s(x) > theta`.
    pub fn decision(&self, x: &[f64]) -> Arm {
        if self.summary(x) > self.theta {
            Arm::Treated
        } else {
            Arm::Control
        }
    }
}

/// Regret interval of `policy` on `unit`, given an interval for the
/// unobserved outcome `Y(1 - t)`.
pub fn regret_interval(unit: &Unit, policy: &ThresholdPolicy, interval_for_missing_arm: &Interval) -> (f64, f64) {
    let y = unit.y_obs;
    let iv = interval_for_missing_arm;
    if policy.decision(&unit.x) == unit.t {
        // chosen arm observed, regret = Y(missing) - y
        (iv.lo() - y, iv.hi() - y)
    } else {
        // regret = y - Y(missing)
        (y - iv.hi(), y - iv.lo())
    }
}

/// Regret with both potential outcomes known.
pub fn true_regret(unit: &Unit, policy: &ThresholdPolicy) -> Option<f64> {
    let chosen = policy.decision(&unit.x);
    Some(unit.potential(chosen.other())? - unit.potential(chosen)?)
}

/// Mean true regret, when every unit carries both outcomes.
pub fn true_average_regret(test: &Dataset, policy: &ThresholdPolicy) -> Option<f64> {
    let total = test
        .units()
        .iter()
        .map(|u| true_regret(u, policy))
        .sum::<Option<f64>>()?;
    Some(total / test.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationMethod {
    Cci,
    Spcci,
}

impl fmt::Display for CalibrationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CalibrationMethod::Cci => "cci",
            CalibrationMethod::Spcci => "spcci",
        })
    }
}

/// Conformal interval provider for one potential outcome `Y(arm)`.
#[derive(Debug, Clone)]
pub enum ArmIntervals {
    Spcci {
        qm: QuantileModel,
        result: CalibrationResult,
    },
    Cci {
        qm: QuantileModel,
        calibrator: CciCalibrator,
        /// Propensity of this arm (swapped for the control arm).
        prop: PropensityModel,
        alpha: f64,
    },
}

impl ArmIntervals {
    pub fn interval(&self, x: &[f64]) -> Interval {
        match self {
            ArmIntervals::Spcci { qm, result } => spcci::spcci_interval(qm, result, x),
            ArmIntervals::Cci {
                qm,
                calibrator,
                prop,
                alpha,
            } => calibrator.interval(qm, x, prop, *alpha),
        }
    }

    pub fn method(&self) -> CalibrationMethod {
        match self {
            ArmIntervals::Spcci { .. } => CalibrationMethod::Spcci,
            ArmIntervals::Cci { .. } => CalibrationMethod::Cci,
        }
    }

    /// Widen every interval by a further `extra` (for monotonicity checks).
    pub fn widened(&self, extra: f64) -> WidenedArm<'_> {
        WidenedArm { inner: self, extra }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WidenedArm<'a> {
    inner: &'a ArmIntervals,
    extra: f64,
}

/// Anything that yields an interval for one arm's potential outcome.
pub trait IntervalSource: Sync {
    fn interval(&self, x: &[f64]) -> Interval;
}

impl IntervalSource for ArmIntervals {
    fn interval(&self, x: &[f64]) -> Interval {
        ArmIntervals::interval(self, x)
    }
}

impl IntervalSource for WidenedArm<'_> {
    fn interval(&self, x: &[f64]) -> Interval {
        let iv = self.inner.interval(x);
        Interval::widened(iv.lo(), iv.hi(), self.extra)
    }
}

impl<F: Fn(&[f64]) -> Interval + Sync> IntervalSource for F {
    fn interval(&self, x: &[f64]) -> Interval {
        self(x)
    }
}

/// Interval providers for `Y(0)` and `Y(1)`.
pub struct PerArm<'a> {
    pub control: Option<&'a dyn IntervalSource>,
    pub treated: Option<&'a dyn IntervalSource>,
}

impl<'a> PerArm<'a> {
    pub fn new(control: &'a dyn IntervalSource, treated: &'a dyn IntervalSource) -> Self {
        PerArm {
            control: Some(control),
            treated: Some(treated),
        }
    }

    fn get(&self, arm: Arm) -> Result<&'a dyn IntervalSource> {
        match arm {
            Arm::Control => self.control,
            Arm::Treated => self.treated,
        }
        .ok_or(Error::ArmNotCalibrated(arm.bit()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretBounds {
    /// Mean of finite per-unit lower bounds; `-inf` when none are finite.
    pub lower: f64,
    /// Mean of finite per-unit upper bounds; `+inf` when none are finite.
    pub upper: f64,
    pub per_unit: Vec<(f64, f64)>,
    pub n_infinite: usize,
}

impl RegretBounds {
    pub fn contains(&self, regret: f64) -> bool {
        self.lower <= regret && regret <= self.upper
    }
}

pub fn evaluate_policy(test: &Dataset, policy: &ThresholdPolicy, arms: &PerArm<'_>) -> Result<RegretBounds> {
    let per_unit = test
        .units()
        .iter()
        .map(|u| {
            let src = arms.get(u.t.other())?;
            Ok(regret_interval(u, policy, &src.interval(&u.x)))
        })
        .collect::<Result<Vec<_>>>()?;
    let finite: Vec<&(f64, f64)> = per_unit.iter().filter(|b| b.0.is_finite() && b.1.is_finite()).collect();
    let n_infinite = per_unit.len() - finite.len();
    let (lower, upper) = if finite.is_empty() {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let k = finite.len() as f64;
        (
            finite.iter().map(|b| b.0).sum::<f64>() / k,
            finite.iter().map(|b| b.1).sum::<f64>() / k,
        )
    };
    Ok(RegretBounds {
        lower,
        upper,
        per_unit,
        n_infinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: f64,
    pub bounds: RegretBounds,
    pub true_regret: Option<f64>,
}

pub fn theta_sweep(
    exec: Exec,
    test: &Dataset,
    thetas: &[f64],
    policy: &ThresholdPolicy,
    arms: &PerArm<'_>,
) -> Result<Vec<SweepRow>> {
    if thetas.is_empty() {
        return Err(Error::Empty("thetas"));
    }
    let rows = par::map_slice(exec, thetas, |&theta| {
        let p = policy.with_theta(theta);
        Ok(SweepRow {
            theta,
            bounds: evaluate_policy(test, &p, arms)?,
            true_regret: true_average_regret(test, &p),
        })
    });
    rows.into_iter().collect()
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// CSV with columns `theta, regret_lower, regret_upper, true_regret,
/// n_infinite`; the `true_regret` column is omitted unless every row has it.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let with_truth = !rows.is_empty() && rows.iter().all(|r| r.true_regret.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["theta", "regret_lower", "regret_upper"];
    if with_truth {
        header.push("true_regret");
    }
    header.push("n_infinite");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.theta.to_string(), r.bounds.lower.to_string(), r.bounds.upper.to_string()];
        if let Some(t) = r.true_regret.filter(|_| with_truth) {
            rec.push(t.to_string());
        }
        rec.push(r.bounds.n_infinite.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<sweep csv>", e))?;
    Ok(())
}

/// Inputs shared by both arm calibrations.
#[derive(Debug, Clone)]
pub struct ArmCalibrationInput<'a> {
    pub qm_train: &'a Dataset,
    pub gen_train: &'a Dataset,
    pub calibration: &'a Dataset,
    /// Propensity of the treated arm; swapped internally for the control arm.
    pub prop: &'a PropensityModel,
    pub gbqr: &'a GbqrConfig,
    pub generator_fraction: f64,
    pub alpha: f64,
    pub delta: f64,
    /// `None` uses the propensity model's concentration constant.
    pub c: Option<f64>,
    pub seed: u64,
}

/// Calibrated provider for `Y(arm)`. `n_real_dropped` counts real
/// calibration units SP-CCI discarded because the opposite arm was smaller.
#[derive(Debug, Clone)]
pub struct CalibratedArm {
    pub arm: Arm,
    pub intervals: ArmIntervals,
    pub n_real_dropped: usize,
}

pub fn calibrate_arm(arm: Arm, method: CalibrationMethod, input: &ArmCalibrationInput<'_>) -> Result<CalibratedArm> {
    let relabel = |d: &Dataset| if arm == Arm::Treated { d.clone() } else { d.swapped() };
    let prop = if arm == Arm::Treated {
        input.prop.clone()
    } else {
        input.prop.swapped()
    };
    let qm = fit_quantile_model(&relabel(input.qm_train).filter_arm(Arm::Treated)?, input.alpha, input.gbqr)?;
    let cal = relabel(input.calibration);
    let split = split_by_treatment(&cal)?;
    let cci = |qm: QuantileModel| -> Result<ArmIntervals> {
        let scored = ScoredCalibration::from_treated(&qm, &split.d1, &prop)?;
        Ok(ArmIntervals::Cci {
            qm,
            calibrator: CciCalibrator::new(&scored),
            prop: prop.clone(),
            alpha: input.alpha,
        })
    };
    if method == CalibrationMethod::Cci {
        return Ok(CalibratedArm {
            arm,
            intervals: cci(qm)?,
            n_real_dropped: 0,
        });
    }
    let (balanced, n_real_dropped) = spcci::balance_real_arm(&split, rng::derive_seed(input.seed, 11))?;
    let gen = fit_cf_generator(
        &relabel(input.gen_train).filter_arm(Arm::Treated)?,
        input.generator_fraction,
        input.gbqr,
        input.seed,
    )?;
    let out = spcci::calibrate(&balanced, &qm, &gen, &prop, input.alpha, input.delta, input.c, input.seed)?;
    Ok(CalibratedArm {
        arm,
        intervals: ArmIntervals::Spcci { qm, result: out.result },
        n_real_dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Provenance;
    use rand::Rng;

    fn policy(theta: f64) -> ThresholdPolicy {
        ThresholdPolicy::new(|x| x[0], theta)
    }

    fn iv(lo: f64, hi: f64) -> Interval {
        Interval::new(lo, hi).unwrap()
    }

    #[test]
    fn decision_is_strict() {
        let p = policy(1.0);
        assert_eq!(p.decision(&[1.0]), Arm::Control);
        assert_eq!(p.decision(&[1.0 + 1e-12]), Arm::Treated);
        assert_eq!(p.with_theta(0.0).decision(&[0.5]), Arm::Treated);
    }

    #[test]
    fn regret_examples() {
        // agreement: policy treats (x = 5 > 0), unit treated
        let u = Unit::observed(vec![5.0], Arm::Treated, 6.0);
        assert_eq!(regret_interval(&u, &policy(0.0), &iv(5.0, 9.0)), (-1.0, 3.0));
        // disagreement
        let u = Unit::observed(vec![-5.0], Arm::Treated, 6.0);
        assert_eq!(regret_interval(&u, &policy(0.0), &iv(5.0, 9.0)), (-3.0, 1.0));
        let u = Unit::observed(vec![5.0], Arm::Treated, 6.0);
        assert_eq!(regret_interval(&u, &policy(0.0), &iv(6.0, 6.0)), (0.0, 0.0));
        let (lo, hi) = regret_interval(&u, &policy(0.0), &Interval::unbounded());
        assert!(lo == f64::NEG_INFINITY && hi == f64::INFINITY);
    }

    /// Enumerate both potential outcomes over the missing interval.
    fn enumerate(u: &Unit, p: &ThresholdPolicy, missing: &Interval) -> (f64, f64) {
        let vals = [missing.lo(), missing.hi()].map(|m| {
            let (y0, y1) = match u.t {
                Arm::Control => (u.y_obs, m),
                Arm::Treated => (m, u.y_obs),
            };
            let chosen = p.decision(&u.x);
            let (yc, yo) = match chosen {
                Arm::Control => (y0, y1),
                Arm::Treated => (y1, y0),
            };
            yo - yc
        });
        (vals[0].min(vals[1]), vals[0].max(vals[1]))
    }

    #[test]
    fn regret_interval_matches_enumeration() {
        let mut rng = crate::rng::seeded(17);
        for _ in 0..10_000 {
            let t = if rng.random::<bool>() { Arm::Treated } else { Arm::Control };
            let u = Unit::observed(vec![rng.random_range(-1.0..1.0)], t, rng.random_range(-10.0..10.0));
            let a: f64 = rng.random_range(-10.0..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            let m = iv(a.min(b), a.max(b));
            let p = policy(rng.random_range(-1.0..1.0));
            assert_eq!(regret_interval(&u, &p, &m), enumerate(&u, &p, &m));
        }
    }

    fn oracle_data() -> Dataset {
        let units = (0..40)
            .map(|i| {
                let x = i as f64 - 20.0;
                let t = if i % 3 == 0 { Arm::Treated } else { Arm::Control };
                Unit::with_potential(vec![x], t, 0.1 * x, 1.0 - 0.05 * x)
            })
            .collect();
        Dataset::new(units, Provenance::RadioSim).unwrap()
    }

    #[test]
    fn zero_width_collapses_to_truth() {
        let data = oracle_data();
        let y0 = |x: &[f64]| iv(0.1 * x[0], 0.1 * x[0]);
        let y1 = |x: &[f64]| iv(1.0 - 0.05 * x[0], 1.0 - 0.05 * x[0]);
        let arms = PerArm::new(&y0, &y1);
        for theta in [-30.0, -3.0, 0.0, 7.5, 30.0] {
            let p = policy(theta);
            let b = evaluate_policy(&data, &p, &arms).unwrap();
            let truth = true_average_regret(&data, &p).unwrap();
            assert!((b.lower - truth).abs() < 1e-12 && (b.upper - truth).abs() < 1e-12);
            assert_eq!(b.n_infinite, 0);
        }
    }

    #[test]
    fn widening_never_shrinks() {
        let data = oracle_data();
        let y0 = |x: &[f64]| iv(0.1 * x[0] - 1.0, 0.1 * x[0] + 0.5);
        let y1 = |x: &[f64]| iv(0.5 - 0.05 * x[0], 2.0 - 0.05 * x[0]);
        let w0 = |x: &[f64]| {
            let i = y0(x);
            iv(i.lo() - 0.3, i.hi() + 0.3)
        };
        let w1 = |x: &[f64]| {
            let i = y1(x);
            iv(i.lo() - 0.3, i.hi() + 0.3)
        };
        let p = policy(2.0);
        let narrow = evaluate_policy(&data, &p, &PerArm::new(&y0, &y1)).unwrap();
        let wide = evaluate_policy(&data, &p, &PerArm::new(&w0, &w1)).unwrap();
        assert!(wide.lower <= narrow.lower && narrow.upper <= wide.upper);
    }

    #[test]
    fn infinite_units_are_counted_and_excluded() {
        let data = oracle_data();
        let y0 = |_: &[f64]| Interval::unbounded();
        let y1 = |_: &[f64]| iv(0.0, 1.0);
        let b = evaluate_policy(&data, &policy(0.0), &PerArm::new(&y0, &y1)).unwrap();
        // treated units need Y(0), which is unbounded
        assert_eq!(b.n_infinite, data.n_treated());
        assert!(b.lower.is_finite() && b.upper.is_finite() && b.lower <= b.upper);
        let b = evaluate_policy(&data, &policy(0.0), &PerArm::new(&y0, &y0)).unwrap();
        assert_eq!((b.lower, b.upper), (f64::NEG_INFINITY, f64::INFINITY));
    }

    #[test]
    fn missing_arm_is_an_error() {
        let data = oracle_data();
        let y1 = |_: &[f64]| iv(0.0, 1.0);
        let arms = PerArm {
            control: None,
            treated: Some(&y1),
        };
        assert!(matches!(
            evaluate_policy(&data, &policy(0.0), &arms),
            Err(Error::ArmNotCalibrated(0))
        ));
    }

    #[test]
    fn sweep_shapes() {
        let data = oracle_data();
        let y0 = |x: &[f64]| iv(0.1 * x[0] - 1.0, 0.1 * x[0] + 1.0);
        let y1 = |x: &[f64]| iv(-0.05 * x[0], 2.0 - 0.05 * x[0]);
        let arms = PerArm::new(&y0, &y1);
        let p = policy(0.0);
        let one = theta_sweep(Exec::Sequential, &data, &[3.0], &p, &arms).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].bounds, evaluate_policy(&data, &p.with_theta(3.0), &arms).unwrap());
        let thetas = linspace(100.0, 300.0, 50);
        assert_eq!((thetas[0], thetas[49]), (100.0, 300.0));
        let rows = theta_sweep(Exec::Parallel, &data, &thetas, &p, &arms).unwrap();
        assert_eq!(rows, theta_sweep(Exec::Sequential, &data, &thetas, &p, &arms).unwrap());
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.starts_with("theta,regret_lower,regret_upper,true_regret,n_infinite\n"));
        assert!(theta_sweep(Exec::Sequential, &data, &[], &p, &arms).is_err());
    }

    #[test]
    fn sweep_without_oracle_drops_truth_column() {
        let units = (0..10)
            .map(|i| Unit::observed(vec![i as f64], Arm::from_bit((i % 2) as u8).unwrap(), 1.0))
            .collect();
        let data = Dataset::new(units, Provenance::IhdpCsv).unwrap();
        let y = |_: &[f64]| iv(0.0, 2.0);
        let rows = theta_sweep(Exec::Sequential, &data, &[1.0, 2.0], &policy(0.0), &PerArm::new(&y, &y)).unwrap();
        assert!(rows.iter().all(|r| r.true_regret.is_none()));
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("theta,regret_lower,regret_upper,n_infinite\n"));
    }
}
