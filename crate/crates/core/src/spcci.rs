//! Synthetic-label calibration.
//!
//! The control covariates `D0` are labelled with counterfactual draws from a
//! generator and split into `n1` consecutive groups of `r = floor(n0 / n1)`
//! points; group `i` is paired with real treated unit `i`. For a widening
//! `eta` the per-group estimate is
//!
//! ```text
//! l_i(eta) = (1/r) sum_{j in group i} w~_j l_eta(x~_j, y~_j)
//!            - w_i [ l_eta(x_i, y^_i) - l_eta(x_i, y_i) ]
//! ```
//!
//! with `w_i = P(T=1) / e(x_i)`, `w~_j = P(T=0) / (1 - e(x~_j))` and
//! `y^_i` a generator draw at the real covariate. Its mean `L^(eta)` is an
//! unbiased estimate of the miscoverage of the widened band; adding the
//! Hoeffding radius `C sqrt(log(1/delta) / (2 n1))` (plus any weight-error
//! budget) gives an upper confidence bound, and the selected widening is the
//! smallest candidate whose bound is at most `alpha`.
//!
//! `l_eta(x, y) = 1{s(x, y) > eta}` where `s` is the band-exceedance
//! threshold, so `L^` is piecewise constant with jumps only at the `n1 r + 2 n1`
//! thresholds. Selection sorts them once and scans once. Note `L^` is signed
//! and generally *not* monotone in `eta`: passing the threshold of `y^_i`
//! raises it by `w_i / n1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cci::nonconformity_score;
use crate::dgp::PropensityModel;
use crate::error::{Error, Result};
use crate::models::{CfGenerator, QuantileModel};
use crate::rng;
use crate::types::{Interval, TreatmentSplit};

/// Smallest widening covering `y`; identical to the CCI nonconformity score.
pub fn threshold(qm: &QuantileModel, x: &[f64], y: f64) -> f64 {
    nonconformity_score(qm, x, y)
}

/// 0 when `y` lies in `[q_lo(x) - eta, q_hi(x) + eta]`, else 1. Evaluated as
/// `threshold > eta` so it agrees exactly with the scan at the jump points.
pub fn miscoverage_loss(qm: &QuantileModel, eta: f64, x: &[f64], y: f64) -> f64 {
    if threshold(qm, x, y) > eta {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealPoint {
    pub x: Vec<f64>,
    pub y: f64,
    /// Generator draw at `x`, used by the debiasing term.
    pub y_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPoint {
    pub x: Vec<f64>,
    pub y: f64,
}

/// `n1` real treated points, each paired with a disjoint group of `r`
/// synthetic points (stored consecutively).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedCalibration {
    real: Vec<RealPoint>,
    synthetic: Vec<SyntheticPoint>,
    r: usize,
}

impl GroupedCalibration {
    pub fn new(real: Vec<RealPoint>, synthetic: Vec<SyntheticPoint>, r: usize) -> Result<Self> {
        if real.is_empty() {
            return Err(Error::EmptyTreatedArm);
        }
        if r == 0 {
            return Err(Error::InvalidParameter("group size r must be >= 1".into()));
        }
        if synthetic.len() != real.len() * r {
            return Err(Error::LengthMismatch {
                left: synthetic.len(),
                right: real.len() * r,
            });
        }
        Ok(GroupedCalibration { real, synthetic, r })
    }

    pub fn n1(&self) -> usize {
        self.real.len()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn real(&self) -> &[RealPoint] {
        &self.real
    }

    pub fn synthetic(&self) -> &[SyntheticPoint] {
        &self.synthetic
    }

    pub fn group(&self, i: usize) -> &[SyntheticPoint] {
        &self.synthetic[i * self.r..(i + 1) * self.r]
    }

    /// Number of thresholds the selection scans, `n1 r + 2 n1`.
    pub fn n_thresholds(&self) -> usize {
        self.synthetic.len() + 2 * self.real.len()
    }
}

pub fn build_grouped_calibration(split: &TreatmentSplit, gen: &CfGenerator, seed: u64) -> Result<GroupedCalibration> {
    build_grouped_calibration_with(split, gen, seed, 1)
}

/// Drops real units uniformly at random until `n1 <= n0`, so that groups of
/// at least one synthetic point can be formed. Returns the (possibly
/// unchanged) split and the number of real units dropped; surviving units
/// keep their original order.
pub fn balance_real_arm(split: &TreatmentSplit, seed: u64) -> Result<(TreatmentSplit, usize)> {
    let (n0, n1) = (split.n0(), split.n1());
    if n0 >= n1 {
        return Ok((split.clone(), 0));
    }
    if n0 == 0 {
        return Err(Error::EmptyControlArm);
    }
    let mut keep = rand::seq::index::sample(&mut rng::stream(seed, 0), n1, n0).into_vec();
    keep.sort_unstable();
    let balanced = TreatmentSplit {
        d0: split.d0.clone(),
        d1: split.d1.select(&keep)?,
    };
    Ok((balanced, n1 - n0))
}

/// As [`build_grouped_calibration`], with every label (synthetic and
/// imputed) the mean of `draws_per_label` generator draws. Draw indices:
/// synthetic point `j` uses `j k .. (j + 1) k`, imputed label `i` uses
/// `(n1 r + i) k ..`, with `k = draws_per_label`, on the generator
/// reseeded by `seed`.
pub fn build_grouped_calibration_with(
    split: &TreatmentSplit,
    gen: &CfGenerator,
    seed: u64,
    draws_per_label: usize,
) -> Result<GroupedCalibration> {
    let (n0, n1) = (split.n0(), split.n1());
    if n1 == 0 {
        return Err(Error::EmptyTreatedArm);
    }
    if n0 < n1 {
        return Err(Error::ArmImbalance { n0, n1 });
    }
    if draws_per_label == 0 {
        return Err(Error::InvalidParameter("draws_per_label must be >= 1".into()));
    }
    let r = n0 / n1;
    let g = gen.reseeded(rng::derive_seed(gen.seed, seed));
    let k = draws_per_label as u64;
    let label = |x: &[f64], slot: u64| -> f64 {
        if k == 1 {
            return g.sample(x, slot);
        }
        let z = (slot * k..(slot + 1) * k).map(|i| g.normal(i)).sum::<f64>() / k as f64;
        g.mean(x) + g.residual_sd * z
    };
    let synthetic: Vec<SyntheticPoint> = split.d0.units()[..n1 * r]
        .iter()
        .enumerate()
        .map(|(j, u)| SyntheticPoint {
            x: u.x.clone(),
            y: label(&u.x, j as u64),
        })
        .collect();
    let offset = (n1 * r) as u64;
    let real = split
        .d1
        .units()
        .iter()
        .enumerate()
        .map(|(i, u)| RealPoint {
            x: u.x.clone(),
            y: u.y_obs,
            y_hat: label(&u.x, offset + i as u64),
        })
        .collect();
    GroupedCalibration::new(real, synthetic, r)
}

/// Importance weights for real (`w`) and synthetic (`w~`) points with the
/// elementwise error budgets they are known to within.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceWeights {
    pub w_real: Vec<f64>,
    pub w_syn: Vec<f64>,
    pub eps_real: f64,
    pub eps_syn: f64,
}

impl ImportanceWeights {
    pub fn new(w_real: Vec<f64>, w_syn: Vec<f64>, eps_real: f64, eps_syn: f64) -> Result<Self> {
        if w_real.iter().chain(&w_syn).any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::InvalidParameter("weights must be finite and positive".into()));
        }
        if !(eps_real >= 0.0 && eps_syn >= 0.0) {
            return Err(Error::InvalidParameter("weight error budgets must be >= 0".into()));
        }
        Ok(ImportanceWeights {
            w_real,
            w_syn,
            eps_real,
            eps_syn,
        })
    }

    /// Add independent `U(-eps, eps)` errors (kept positive) and record the
    /// budgets. Models estimated weights for the robust selection.
    pub fn perturbed(&self, eps_real: f64, eps_syn: f64, seed: u64) -> Result<Self> {
        let mut rng = rng::seeded(seed);
        let mut jitter = |w: f64, eps: f64| {
            if eps == 0.0 {
                return w;
            }
            (w + rng.random_range(-eps..=eps)).max(f64::MIN_POSITIVE)
        };
        let w_real = self.w_real.iter().map(|&w| jitter(w, eps_real)).collect();
        let w_syn = self.w_syn.iter().map(|&w| jitter(w, eps_syn)).collect();
        ImportanceWeights::new(w_real, w_syn, eps_real, eps_syn)
    }

    fn check_shape(&self, cal: &GroupedCalibration) -> Result<()> {
        if self.w_real.len() != cal.n1() {
            return Err(Error::LengthMismatch {
                left: self.w_real.len(),
                right: cal.n1(),
            });
        }
        if self.w_syn.len() != cal.synthetic().len() {
            return Err(Error::LengthMismatch {
                left: self.w_syn.len(),
                right: cal.synthetic().len(),
            });
        }
        Ok(())
    }

    /// Range of the per-group estimate implied by these weights:
    /// `[-max w, max w + max w~]`.
    pub fn per_group_bounds(&self) -> (f64, f64) {
        let max_w = self.w_real.iter().copied().fold(0.0, f64::max);
        let max_ws = self.w_syn.iter().copied().fold(0.0, f64::max);
        (-max_w, max_w + max_ws)
    }
}

/// `w_i = p / e(x_i)` and `w~_j = (1 - p) / (1 - e(x~_j))`, clipped propensities.
pub fn compute_weights(cal: &GroupedCalibration, prop: &PropensityModel) -> Result<ImportanceWeights> {
    let p = prop.p_t1();
    let w_real = cal.real().iter().map(|pt| p / prop.e(&pt.x)).collect();
    let w_syn = cal.synthetic().iter().map(|pt| (1.0 - p) / (1.0 - prop.e(&pt.x))).collect();
    ImportanceWeights::new(w_real, w_syn, 0.0, 0.0)
}

/// Debiased estimate from real point `i` and its synthetic group.
pub fn debiased_group_loss(
    i: usize,
    eta: f64,
    cal: &GroupedCalibration,
    w: &ImportanceWeights,
    qm: &QuantileModel,
) -> f64 {
    let group = cal.group(i);
    let base = i * cal.r();
    let synthetic = group
        .iter()
        .enumerate()
        .map(|(k, pt)| w.w_syn[base + k] * miscoverage_loss(qm, eta, &pt.x, pt.y))
        .sum::<f64>()
        / cal.r() as f64;
    let pt = &cal.real()[i];
    let correction = miscoverage_loss(qm, eta, &pt.x, pt.y_hat) - miscoverage_loss(qm, eta, &pt.x, pt.y);
    synthetic - w.w_real[i] * correction
}

/// Direct evaluation of `L^(eta)`, the mean of the per-group estimates.
pub fn l_hat(eta: f64, cal: &GroupedCalibration, w: &ImportanceWeights, qm: &QuantileModel) -> f64 {
    (0..cal.n1())
        .map(|i| debiased_group_loss(i, eta, cal, w, qm))
        .sum::<f64>()
        / cal.n1() as f64
}

/// `2 / e_min + 1 / (1 - e_max)`.
pub fn concentration_constant(e_min: f64, e_max: f64) -> f64 {
    2.0 / e_min + 1.0 / (1.0 - e_max)
}

/// `c sqrt(log(1/delta) / (2 n1))`. `delta = 1` is accepted (radius 0).
pub fn hoeffding_radius(n1: usize, delta: f64, c: f64) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} not in (0, 1]")));
    }
    if n1 == 0 {
        return Err(Error::InvalidParameter("n1 must be >= 1".into()));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::InvalidParameter(format!("concentration constant {c} must be > 0")));
    }
    Ok(c * ((1.0 / delta).ln() / (2.0 * n1 as f64)).sqrt())
}

pub fn hoeffding_ucb(l_hat: f64, n1: usize, delta: f64, c: f64) -> Result<f64> {
    Ok(l_hat + hoeffding_radius(n1, delta, c)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UcbPoint {
    pub threshold: f64,
    pub l_hat: f64,
    pub ucb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    /// `None` when no candidate meets the target.
    pub eta_hat: Option<f64>,
    pub feasible: bool,
    pub alpha: f64,
    pub delta: f64,
    pub conc_constant: f64,
    pub radius: f64,
    pub eps_inflation: f64,
    pub n1: usize,
    pub r: usize,
    /// Smallest bound over all candidates.
    pub min_ucb: f64,
    /// Range of the per-group estimate under the instantiated weights.
    pub group_loss_bounds: (f64, f64),
    pub ucb_curve: Vec<UcbPoint>,
}

impl CalibrationResult {
    pub fn eta_or_inf(&self) -> f64 {
        self.eta_hat.unwrap_or(f64::INFINITY)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn check_levels(alpha: f64, delta: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta = {delta} not in (0, 1)")));
    }
    Ok(())
}

/// Selection with the weight-error budgets recorded in `w`.
pub fn select_eta(
    cal: &GroupedCalibration,
    w: &ImportanceWeights,
    qm: &QuantileModel,
    alpha: f64,
    delta: f64,
    c: f64,
) -> Result<CalibrationResult> {
    select_eta_robust(cal, w, qm, alpha, delta, c, w.eps_real, w.eps_syn)
}

/// Smallest candidate `eta` with `L^(eta) + eps_real + eps_syn + radius <= alpha`,
/// where `L^` uses the (possibly estimated) weights in `w`.
#[allow(clippy::too_many_arguments)]
pub fn select_eta_robust(
    cal: &GroupedCalibration,
    w: &ImportanceWeights,
    qm: &QuantileModel,
    alpha: f64,
    delta: f64,
    c: f64,
    eps_real: f64,
    eps_syn: f64,
) -> Result<CalibrationResult> {
    check_levels(alpha, delta)?;
    if !(eps_real >= 0.0 && eps_syn >= 0.0) {
        return Err(Error::InvalidParameter("weight error budgets must be >= 0".into()));
    }
    w.check_shape(cal)?;
    let n1 = cal.n1();
    let radius = hoeffding_radius(n1, delta, c)?;
    let eps_inflation = eps_real + eps_syn;

    // Contribution of each indicator to L^ while it is 1, i.e. for eta below
    // its threshold.
    let inv_n1 = 1.0 / n1 as f64;
    let syn_scale = inv_n1 / cal.r() as f64;
    let mut events: Vec<(f64, f64)> = Vec::with_capacity(cal.n_thresholds());
    for (pt, &ws) in cal.synthetic().iter().zip(&w.w_syn) {
        events.push((threshold(qm, &pt.x, pt.y), ws * syn_scale));
    }
    for (pt, &wr) in cal.real().iter().zip(&w.w_real) {
        events.push((threshold(qm, &pt.x, pt.y_hat), -wr * inv_n1));
        events.push((threshold(qm, &pt.x, pt.y), wr * inv_n1));
    }
    let total: f64 = events.iter().map(|e| e.1).sum();
    events.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

    let mut curve = Vec::with_capacity(events.len() + 1);
    let mut eta_hat = None;
    let mut min_ucb = f64::INFINITY;
    let mut removed = 0.0;
    let mut k = 0;
    let mut candidate = 0.0;
    loop {
        // all indicators with threshold <= candidate have switched off
        while k < events.len() && events[k].0 <= candidate {
            removed += events[k].1;
            k += 1;
        }
        let l = total - removed;
        let ucb = l + radius + eps_inflation;
        curve.push(UcbPoint {
            threshold: candidate,
            l_hat: l,
            ucb,
        });
        min_ucb = min_ucb.min(ucb);
        if eta_hat.is_none() && ucb <= alpha {
            eta_hat = Some(candidate);
        }
        match events.get(k) {
            Some(e) => candidate = e.0,
            None => break,
        }
    }

    Ok(CalibrationResult {
        feasible: eta_hat.is_some(),
        eta_hat,
        alpha,
        delta,
        conc_constant: c,
        radius,
        eps_inflation,
        n1,
        r: cal.r(),
        min_ucb,
        group_loss_bounds: w.per_group_bounds(),
        ucb_curve: curve,
    })
}

pub fn spcci_interval(qm: &QuantileModel, result: &CalibrationResult, x_test: &[f64]) -> Interval {
    let (lo, hi) = qm.band(x_test);
    match result.eta_hat {
        Some(eta) => Interval::widened(lo, hi, eta),
        None => Interval::unbounded(),
    }
}

/// Everything produced by one synthetic-label calibration.
#[derive(Debug, Clone)]
pub struct SpcciCalibration {
    pub grouped: GroupedCalibration,
    pub weights: ImportanceWeights,
    pub result: CalibrationResult,
}

/// Group, weight and select in one call. `c = None` uses the propensity
/// model's concentration constant.
#[allow(clippy::too_many_arguments)]
pub fn calibrate(
    split: &TreatmentSplit,
    qm: &QuantileModel,
    gen: &CfGenerator,
    prop: &PropensityModel,
    alpha: f64,
    delta: f64,
    c: Option<f64>,
    seed: u64,
) -> Result<SpcciCalibration> {
    let grouped = build_grouped_calibration(split, gen, seed)?;
    let weights = compute_weights(&grouped, prop)?;
    let c = c.unwrap_or_else(|| prop.concentration_constant());
    let result = select_eta(&grouped, &weights, qm, alpha, delta, c)?;
    Ok(SpcciCalibration {
        grouped,
        weights,
        result,
    })
}

/// Exact (Clopper-Pearson) interval for an estimated treatment probability
/// and the induced elementwise weight errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreatmentProbabilityBound {
    pub p_hat: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    /// `max |p - p_hat| / e_min`
    pub eps_real: f64,
    /// `max |p - p_hat| / (1 - e_max)`
    pub eps_syn: f64,
}

fn ln_choose(n: u64, k: u64) -> f64 {
    libm::lgamma(n as f64 + 1.0) - libm::lgamma(k as f64 + 1.0) - libm::lgamma((n - k) as f64 + 1.0)
}

/// `P(Bin(n, p) <= k)`.
pub fn binomial_cdf(k: u64, n: u64, p: f64) -> f64 {
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return if k >= n { 1.0 } else { 0.0 };
    }
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    (0..=k.min(n))
        .map(|i| (ln_choose(n, i) + i as f64 * lp + (n - i) as f64 * lq).exp())
        .sum::<f64>()
        .min(1.0)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> bool) -> f64 {
    // f(lo) false, f(hi) true
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn treatment_probability_bound(
    n_treated: u64,
    n: u64,
    confidence: f64,
    e_min: f64,
    e_max: f64,
) -> Result<TreatmentProbabilityBound> {
    if n == 0 || n_treated > n {
        return Err(Error::InvalidParameter(format!("{n_treated} treated out of {n}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!("confidence {confidence} not in (0, 1)")));
    }
    if !(e_min > 0.0 && e_max < 1.0 && e_min <= e_max) {
        return Err(Error::InvalidParameter("propensity range must lie in (0, 1)".into()));
    }
    let tail = (1.0 - confidence) / 2.0;
    let k = n_treated;
    let p_hi = if k == n {
        1.0
    } else {
        bisect(0.0, 1.0, |p| binomial_cdf(k, n, p) <= tail)
    };
    let p_lo = if k == 0 {
        0.0
    } else {
        bisect(0.0, 1.0, |p| 1.0 - binomial_cdf(k - 1, n, p) >= tail)
    };
    let p_hat = k as f64 / n as f64;
    let dev = (p_hi - p_hat).max(p_hat - p_lo);
    Ok(TreatmentProbabilityBound {
        p_hat,
        p_lo,
        p_hi,
        eps_real: dev / e_min,
        eps_syn: dev / (1.0 - e_max),
    })
}
