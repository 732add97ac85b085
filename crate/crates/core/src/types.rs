//! Units, datasets, intervals, and the coverage/width metrics shared by every
//! calibration method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary treatment arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    Control,
    Treated,
}

impl Arm {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Arm::Control),
            1 => Some(Arm::Treated),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Arm::Control => 0,
            Arm::Treated => 1,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Arm::Control => Arm::Treated,
            Arm::Treated => Arm::Control,
        }
    }
}

/// One observational unit. Potential outcomes are only present for simulated
/// or semi-synthetic data, where they serve as the evaluation oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    pub x: Vec<f64>,
    pub t: Arm,
    pub y_obs: f64,
    pub y0: Option<f64>,
    pub y1: Option<f64>,
}

impl Unit {
    pub fn observed(x: Vec<f64>, t: Arm, y_obs: f64) -> Self {
        Unit {
            x,
            t,
            y_obs,
            y0: None,
            y1: None,
        }
    }

    /// Unit with both potential outcomes; `y_obs` is set to `Y(t)`.
    pub fn with_potential(x: Vec<f64>, t: Arm, y0: f64, y1: f64) -> Self {
        let y_obs = match t {
            Arm::Control => y0,
            Arm::Treated => y1,
        };
        Unit {
            x,
            t,
            y_obs,
            y0: Some(y0),
            y1: Some(y1),
        }
    }

    pub fn potential(&self, arm: Arm) -> Option<f64> {
        match arm {
            Arm::Control => self.y0,
            Arm::Treated => self.y1,
        }
    }

    /// `Y(1 - t)`, when known.
    pub fn counterfactual(&self) -> Option<f64> {
        self.potential(self.t.other())
    }

    pub fn has_oracle(&self) -> bool {
        self.y0.is_some() && self.y1.is_some()
    }

    /// Same unit with the arm labels exchanged.
    pub fn swapped(&self) -> Self {
        Unit {
            x: self.x.clone(),
            t: self.t.other(),
            y_obs: self.y_obs,
            y0: self.y1,
            y1: self.y0,
        }
    }

    fn check_consistency(&self) -> Result<()> {
        if let Some(y) = self.potential(self.t) {
            if y.to_bits() != self.y_obs.to_bits() {
                return Err(Error::InconsistentUnit(format!(
                    "observed outcome {} differs from Y({}) = {}",
                    self.y_obs,
                    self.t.bit(),
                    y
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic,
    IhdpCsv,
    RadioSim,
}

/// Nonempty ordered collection of units with a common covariate dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    units: Vec<Unit>,
    d: usize,
    provenance: Provenance,
}

impl Dataset {
    pub fn new(units: Vec<Unit>, provenance: Provenance) -> Result<Self> {
        let first = units.first().ok_or(Error::Empty("dataset"))?;
        let d = first.x.len();
        for u in &units {
            if u.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    found: u.x.len(),
                });
            }
            u.check_consistency()?;
        }
        Ok(Dataset {
            units,
            d,
            provenance,
        })
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    pub fn into_units(self) -> Vec<Unit> {
        self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn n_treated(&self) -> usize {
        self.units.iter().filter(|u| u.t == Arm::Treated).count()
    }

    /// Subset by index list, keeping the given order.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            idx.iter().map(|&i| self.units[i].clone()).collect(),
            self.provenance,
        )
    }

    /// Units observed under `arm`, in order.
    pub fn filter_arm(&self, arm: Arm) -> Result<Dataset> {
        let units: Vec<Unit> = self.units.iter().filter(|u| u.t == arm).cloned().collect();
        if units.is_empty() {
            return Err(match arm {
                Arm::Control => Error::EmptyControlArm,
                Arm::Treated => Error::EmptyTreatedArm,
            });
        }
        Ok(Dataset {
            units,
            d: self.d,
            provenance: self.provenance,
        })
    }

    pub fn swapped(&self) -> Dataset {
        Dataset {
            units: self.units.iter().map(Unit::swapped).collect(),
            d: self.d,
            provenance: self.provenance,
        }
    }
}

/// Calibration data partitioned by observed arm.
#[derive(Debug, Clone, PartialEq)]
pub struct TreatmentSplit {
    pub d0: Dataset,
    pub d1: Dataset,
}

impl TreatmentSplit {
    pub fn n0(&self) -> usize {
        self.d0.len()
    }

    pub fn n1(&self) -> usize {
        self.d1.len()
    }

    /// Role swap: the control arm becomes the calibrated ("treated") arm.
    pub fn swapped(&self) -> TreatmentSplit {
        TreatmentSplit {
            d0: self.d1.swapped(),
            d1: self.d0.swapped(),
        }
    }
}

/// Stable partition of `data` by treatment.
pub fn split_by_treatment(data: &Dataset) -> Result<TreatmentSplit> {
    let (treated, control): (Vec<Unit>, Vec<Unit>) = data
        .units()
        .iter()
        .cloned()
        .partition(|u| u.t == Arm::Treated);
    if control.is_empty() {
        return Err(Error::EmptyControlArm);
    }
    if treated.is_empty() {
        return Err(Error::EmptyTreatedArm);
    }
    Ok(TreatmentSplit {
        d0: Dataset::new(control, data.provenance())?,
        d1: Dataset::new(treated, data.provenance())?,
    })
}

/// Closed interval, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidParameter(format!(
                "interval [{lo}, {hi}] is empty or NaN"
            )));
        }
        Ok(Interval { lo, hi })
    }

    pub const fn unbounded() -> Self {
        Interval {
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }

    /// `[lo - eta, hi + eta]`; unbounded for infinite `eta`.
    pub fn widened(lo: f64, hi: f64, eta: f64) -> Self {
        debug_assert!(lo <= hi && eta >= 0.0);
        if eta.is_infinite() {
            return Interval::unbounded();
        }
        Interval {
            lo: lo - eta,
            hi: hi + eta,
        }
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }
}

/// Per-trial evaluation of a set of intervals against oracle outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub empirical_coverage: f64,
    /// Mean width over finite intervals; `None` when every interval is
    /// unbounded.
    pub avg_width: Option<f64>,
    pub n_infinite: usize,
    pub n: usize,
    pub covered_target: bool,
}

pub fn coverage_and_width(intervals: &[Interval], truths: &[f64], alpha: f64) -> Result<TrialMetrics> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")));
    }
    if intervals.len() != truths.len() {
        return Err(Error::LengthMismatch {
            left: intervals.len(),
            right: truths.len(),
        });
    }
    if intervals.is_empty() {
        return Err(Error::Empty("intervals"));
    }
    let n = intervals.len();
    let covered = intervals
        .iter()
        .zip(truths)
        .filter(|(iv, &y)| iv.contains(y))
        .count();
    let (width_sum, n_finite) = intervals
        .iter()
        .filter(|iv| iv.is_finite())
        .fold((0.0, 0usize), |(s, k), iv| (s + iv.width(), k + 1));
    let empirical_coverage = covered as f64 / n as f64;
    Ok(TrialMetrics {
        empirical_coverage,
        avg_width: (n_finite > 0).then(|| width_sum / n_finite as f64),
        n_infinite: n - n_finite,
        n,
        covered_target: empirical_coverage >= 1.0 - alpha,
    })
}
