//! Weighted split-conformal calibration for counterfactual outcomes.
//!
//! Scores are the distance of the treated outcome outside the quantile band;
//! each treated calibration unit carries weight `1 / e(x)`. For a test point
//! the widening is the smallest score at which the weighted empirical CDF,
//! normalised with the test point's own weight `1 / e(x_test)`, reaches
//! `1 - alpha`. When the calibration mass can never reach that level the
//! widening is `+inf` and the interval is the whole line.

use crate::dgp::PropensityModel;
use crate::error::{Error, Result};
use crate::models::QuantileModel;
use crate::types::{Arm, Dataset, Interval};

/// `max(q_lo(x) - y, y - q_hi(x), 0)`.
pub fn nonconformity_score(qm: &QuantileModel, x: &[f64], y: f64) -> f64 {
    let (lo, hi) = qm.band(x);
    (lo - y).max(y - hi).max(0.0)
}

/// Scores and weights of the real treated calibration units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCalibration {
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ScoredCalibration {
    pub fn new(scores: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if scores.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: scores.len(),
                right: weights.len(),
            });
        }
        if scores.is_empty() {
            return Err(Error::Empty("calibration scores"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("weights must be finite and positive".into()));
        }
        if scores.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidParameter("scores must be >= 0".into()));
        }
        Ok(ScoredCalibration { scores, weights })
    }

    /// Score the treated units of `d1` with weights `1 / e(x)` (clipped).
    pub fn from_treated(qm: &QuantileModel, d1: &Dataset, prop: &PropensityModel) -> Result<Self> {
        if d1.units().iter().any(|u| u.t != Arm::Treated) {
            return Err(Error::InvalidParameter("calibration arm must be treated units only".into()));
        }
        let (scores, weights) = d1
            .units()
            .iter()
            .map(|u| (nonconformity_score(qm, &u.x, u.y_obs), 1.0 / prop.e(&u.x)))
            .unzip();
        ScoredCalibration::new(scores, weights)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")))
    }
}

/// Sorted scores with prefix sums of weights, for repeated queries.
#[derive(Debug, Clone)]
pub struct CciCalibrator {
    sorted_scores: Vec<f64>,
    cum_weights: Vec<f64>,
}

impl CciCalibrator {
    pub fn new(cal: &ScoredCalibration) -> Self {
        let mut pairs: Vec<(f64, f64)> = cal.scores.iter().copied().zip(cal.weights.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        let (sorted_scores, cum_weights) = pairs
            .into_iter()
            .map(|(s, w)| {
                acc += w;
                (s, acc)
            })
            .unzip();
        CciCalibrator {
            sorted_scores,
            cum_weights,
        }
    }

    pub fn total_weight(&self) -> f64 {
        *self.cum_weights.last().unwrap_or(&0.0)
    }

    /// Widening for a test point with propensity `e_test`; `+inf` when the
    /// level is unreachable.
    pub fn eta(&self, e_test: f64, alpha: f64) -> f64 {
        let denom = self.total_weight() + 1.0 / e_test;
        let level = 1.0 - alpha;
        // cumulative weights are nondecreasing, so the predicate is monotone
        let k = self.cum_weights.partition_point(|&c| c / denom < level);
        match self.sorted_scores.get(k) {
            Some(&s) => s,
            None => f64::INFINITY,
        }
    }

    pub fn interval(&self, qm: &QuantileModel, x: &[f64], prop: &PropensityModel, alpha: f64) -> Interval {
        let (lo, hi) = qm.band(x);
        Interval::widened(lo, hi, self.eta(prop.e(x), alpha))
    }
}

/// Smallest `t` with `sum_i 1(S_i <= t) w_i / (sum_i w_i + 1 / e_test) >= 1 - alpha`.
pub fn cci_eta(cal: &ScoredCalibration, e_test: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(e_test > 0.0 && e_test < 1.0) {
        return Err(Error::InvalidParameter(format!("e_test = {e_test} not in (0, 1)")));
    }
    if cal.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }
    Ok(CciCalibrator::new(cal).eta(e_test, alpha))
}

pub fn cci_interval(
    qm: &QuantileModel,
    cal: &ScoredCalibration,
    x_test: &[f64],
    prop: &PropensityModel,
    alpha: f64,
) -> Result<Interval> {
    let eta = cci_eta(cal, prop.e(x_test), alpha)?;
    let (lo, hi) = qm.band(x_test);
    Ok(Interval::widened(lo, hi, eta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cal(scores: &[f64], weights: &[f64]) -> ScoredCalibration {
        ScoredCalibration::new(scores.to_vec(), weights.to_vec()).unwrap()
    }

    /// Infimum over the score grid plus zero, evaluated directly.
    fn brute_eta(c: &ScoredCalibration, e_test: f64, alpha: f64) -> f64 {
        let denom: f64 = c.weights.iter().sum::<f64>() + 1.0 / e_test;
        let mut grid: Vec<f64> = c.scores.clone();
        grid.push(0.0);
        grid.sort_by(f64::total_cmp);
        for t in grid {
            let mass: f64 = c
                .scores
                .iter()
                .zip(&c.weights)
                .filter(|(s, _)| **s <= t)
                .map(|(_, w)| w)
                .sum();
            if mass / denom >= 1.0 - alpha {
                return t;
            }
        }
        f64::INFINITY
    }

    #[test]
    fn score_examples() {
        let qm = QuantileModel::constant(1.0, 3.0);
        assert_eq!(nonconformity_score(&qm, &[0.0], 2.0), 0.0);
        assert_eq!(nonconformity_score(&qm, &[0.0], 4.0), 1.0);
        assert_eq!(nonconformity_score(&qm, &[0.0], 1.0), 0.0);
        assert_eq!(nonconformity_score(&qm, &[0.0], -0.5), 1.5);
    }

    #[test]
    fn eta_examples() {
        let c = cal(&[0.1, 0.2, 0.3], &[1.0, 1.0, 1.0]);
        // 1 / e_test = 1 -> e_test = 1 is outside (0, 1); use the calibrator directly
        let k = CciCalibrator::new(&c);
        assert_eq!(k.eta(1.0, 0.25), 0.3);
        assert_eq!(k.eta(1.0, 0.999), 0.1);
        assert_eq!(cci_eta(&c, 0.5, 0.5).unwrap(), 0.3);
        // single score: w / (w + 1/e) = 1 / 3 < 0.9
        let single = cal(&[0.4], &[1.0]);
        assert_eq!(cci_eta(&single, 0.5, 0.1).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ties_accumulate_before_threshold() {
        let c = cal(&[0.5, 0.5, 0.5, 2.0], &[1.0, 1.0, 1.0, 1.0]);
        let k = CciCalibrator::new(&c);
        // need 0.6 * 5 = 3 -> reached within the tie block
        assert_eq!(k.eta(1.0, 0.4), 0.5);
    }

    #[test]
    fn intervals() {
        let qm = QuantileModel::constant(1.0, 3.0);
        let prop = PropensityModel::constant(0.5).unwrap();
        let zero = cal(&[0.0, 0.0, 0.0, 0.0], &[2.0; 4]);
        let iv = cci_interval(&qm, &zero, &[0.0], &prop, 0.2).unwrap();
        assert_eq!((iv.lo(), iv.hi()), (1.0, 3.0));
        let c = cal(&[0.3; 10], &[2.0; 10]);
        let iv = cci_interval(&qm, &c, &[0.0], &prop, 0.2).unwrap();
        assert!((iv.lo() - 0.7).abs() < 1e-15 && (iv.hi() - 3.3).abs() < 1e-15);
        let iv = cci_interval(&qm, &cal(&[0.3], &[2.0]), &[0.0], &prop, 0.2).unwrap();
        assert_eq!(iv, Interval::unbounded());
    }

    #[test]
    fn rejects_invalid() {
        assert!(ScoredCalibration::new(vec![0.1], vec![0.0]).is_err());
        assert!(ScoredCalibration::new(vec![0.1], vec![1.0, 2.0]).is_err());
        assert!(ScoredCalibration::new(vec![], vec![]).is_err());
        let c = cal(&[0.1], &[1.0]);
        assert!(cci_eta(&c, 0.5, 0.0).is_err());
        assert!(cci_eta(&c, 0.0, 0.1).is_err());
    }

    proptest! {
        #[test]
        fn sort_and_scan_matches_brute_force(
            rows in proptest::collection::vec((0.0f64..5.0, 0.1f64..10.0), 1..50),
            e_test in 0.01f64..0.99,
            alpha in 0.01f64..0.99,
        ) {
            let c = cal(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), &rows.iter().map(|r| r.1).collect::<Vec<_>>());
            prop_assert_eq!(cci_eta(&c, e_test, alpha).unwrap(), brute_eta(&c, e_test, alpha));
        }

        #[test]
        fn eta_monotone_in_alpha_and_test_weight(
            rows in proptest::collection::vec((0.0f64..5.0, 0.1f64..10.0), 1..30),
            e1 in 0.01f64..0.99, e2 in 0.01f64..0.99,
            a1 in 0.01f64..0.99, a2 in 0.01f64..0.99,
        ) {
            let c = cal(&rows.iter().map(|r| r.0).collect::<Vec<_>>(), &rows.iter().map(|r| r.1).collect::<Vec<_>>());
            let (alo, ahi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            prop_assert!(cci_eta(&c, e1, ahi).unwrap() <= cci_eta(&c, e1, alo).unwrap());
            // smaller e_test means larger test weight 1/e_test
            let (elo, ehi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            prop_assert!(cci_eta(&c, elo, a1).unwrap() >= cci_eta(&c, ehi, a1).unwrap());
        }
    }
}
