//! Data-generating processes.
//!
//! * The synthetic benchmark: equicorrelated Gaussian latents squashed through
//!   the normal CDF, a Beta(2,4)-CDF propensity on the first covariate, and a
//!   product-of-logistics treated outcome (`Y(0) = 0`).
//! * A two-base-station received-power model for handover policy evaluation:
//!   log-distance path loss with lognormal shadowing, where the observed arm is
//!   the station with the higher received power.
//!
//! Both keep the potential outcomes on every unit for oracle evaluation.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;
use crate::types::{Arm, Dataset, Provenance, Unit};

/// Default lower clip for propensities entering importance weights.
pub const DEFAULT_CLIP_FLOOR: f64 = 1e-3;
/// Monte Carlo draws used to integrate the propensity for `P(T = 1)`.
pub const DEFAULT_PT1_DRAWS: usize = 1_000_000;

const MC_BATCH: usize = 10_000;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// CDF of Beta(2, 4), via the binomial-sum identity for integer shapes:
/// `sum_{j=2..5} C(5, j) x^j (1 - x)^(5 - j)`.
pub fn beta24_cdf(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidParameter(format!("beta24_cdf argument {x} outside [0, 1]")));
    }
    const BINOM5: [f64; 6] = [1.0, 5.0, 10.0, 10.0, 5.0, 1.0];
    let y = 1.0 - x;
    Ok((2..=5)
        .map(|j| BINOM5[j] * x.powi(j as i32) * y.powi(5 - j as i32))
        .sum())
}

/// `2 / (1 + exp(-12 (x - 0.5)))`.
pub fn logistic_bump(x: f64) -> f64 {
    2.0 / (1.0 + (-12.0 * (x - 0.5)).exp())
}

/// Propensity of the synthetic benchmark: `0.4 * beta24_cdf(x_1)`.
pub fn synthetic_propensity_at(x: &[f64]) -> f64 {
    0.4 * beta24_cdf(x[0].clamp(0.0, 1.0)).unwrap_or(0.0)
}

/// Conditional mean of `Y(1)` in the synthetic benchmark.
pub fn synthetic_treated_mean(x: &[f64]) -> f64 {
    logistic_bump(x[0]) * logistic_bump(x[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDgpConfig {
    pub d: usize,
    pub rho: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticDgpConfig {
    fn default() -> Self {
        SyntheticDgpConfig {
            d: 10,
            rho: 0.0,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticDgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::InvalidParameter(format!("d = {} < 2", self.d)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!("rho = {} not in [0, 1)", self.rho)));
        }
        if !(self.noise_sd > 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise_sd = {} must be > 0", self.noise_sd)));
        }
        Ok(())
    }

    /// Draw one covariate vector `Phi(X')`, `X' ~ N(0, (1 - rho) I + rho 11^T)`.
    pub fn draw_covariates<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let common: f64 = StandardNormal.sample(rng);
        let (a, b) = (self.rho.sqrt(), (1.0 - self.rho).sqrt());
        (0..self.d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                std_normal_cdf(a * common + b * z)
            })
            .collect()
    }
}

pub fn generate_synthetic(config: &SyntheticDgpConfig, n: usize) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let units = (0..n)
        .map(|_| {
            let x = config.draw_covariates(&mut rng);
            let e = synthetic_propensity_at(&x);
            let t = if rng.random::<f64>() < e { Arm::Treated } else { Arm::Control };
            let eps: f64 = StandardNormal.sample(&mut rng);
            let y1 = synthetic_treated_mean(&x) + config.noise_sd * eps;
            Unit::with_potential(x, t, 0.0, y1)
        })
        .collect();
    Dataset::new(units, Provenance::Synthetic)
}

type PropensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Known propensity score `e(x) = P(T = 1 | X = x)` together with the marginal
/// treatment probability and the clipping range used for weights.
#[derive(Clone)]
pub struct PropensityModel {
    e: PropensityFn,
    p_t1: f64,
    e_min: f64,
    e_max: f64,
}

impl fmt::Debug for PropensityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PropensityModel")
            .field("p_t1", &self.p_t1)
            .field("e_min", &self.e_min)
            .field("e_max", &self.e_max)
            .finish_non_exhaustive()
    }
}

impl PropensityModel {
    /// Range defaults to `[floor, 1 - floor]` with `floor = DEFAULT_CLIP_FLOOR`
    /// until narrowed by [`PropensityModel::with_pool_range`].
    pub fn new(e: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, p_t1: f64) -> Result<Self> {
        if !(p_t1 > 0.0 && p_t1 < 1.0) {
            return Err(Error::InvalidParameter(format!("p_t1 = {p_t1} not in (0, 1)")));
        }
        Ok(PropensityModel {
            e: Arc::new(e),
            p_t1,
            e_min: DEFAULT_CLIP_FLOOR,
            e_max: 1.0 - DEFAULT_CLIP_FLOOR,
        })
    }

    /// Constant propensity (randomized assignment).
    pub fn constant(p: f64) -> Result<Self> {
        let mut m = PropensityModel::new(move |_| p, p)?;
        m.e_min = p;
        m.e_max = p;
        Ok(m)
    }

    /// Set `[e_min, e_max]` to the range of `e` over `pool`, clipped into
    /// `[floor, 1 - floor]`.
    pub fn with_pool_range<'a>(mut self, pool: impl IntoIterator<Item = &'a [f64]>, floor: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < 0.5) {
            return Err(Error::InvalidParameter(format!("clip floor {floor} not in (0, 0.5)")));
        }
        let (lo, hi) = pool
            .into_iter()
            .map(|x| (self.e)(x))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)));
        if lo > hi {
            return Err(Error::Empty("propensity pool"));
        }
        self.e_min = lo.clamp(floor, 1.0 - floor);
        self.e_max = hi.clamp(floor, 1.0 - floor).max(self.e_min);
        Ok(self)
    }

    /// Explicit clipping range.
    pub fn with_range(mut self, e_min: f64, e_max: f64) -> Result<Self> {
        if !(e_min > 0.0 && e_min <= e_max && e_max < 1.0) {
            return Err(Error::InvalidParameter(format!("propensity range [{e_min}, {e_max}] invalid")));
        }
        self.e_min = e_min;
        self.e_max = e_max;
        Ok(self)
    }

    pub fn with_p_t1(mut self, p_t1: f64) -> Result<Self> {
        if !(p_t1 > 0.0 && p_t1 < 1.0) {
            return Err(Error::InvalidParameter(format!("p_t1 = {p_t1} not in (0, 1)")));
        }
        self.p_t1 = p_t1;
        Ok(self)
    }

    /// Unclipped `e(x)`.
    pub fn raw(&self, x: &[f64]) -> f64 {
        (self.e)(x)
    }

    /// `e(x)` clipped into `[e_min, e_max]`.
    pub fn e(&self, x: &[f64]) -> f64 {
        (self.e)(x).clamp(self.e_min, self.e_max)
    }

    pub fn p_t1(&self) -> f64 {
        self.p_t1
    }

    pub fn e_min(&self) -> f64 {
        self.e_min
    }

    pub fn e_max(&self) -> f64 {
        self.e_max
    }

    /// `2 / e_min + 1 / (1 - e_max)`, the range constant of the debiased
    /// per-group loss used in the Hoeffding radius.
    pub fn concentration_constant(&self) -> f64 {
        2.0 / self.e_min + 1.0 / (1.0 - self.e_max)
    }

    /// Propensity of the control arm, for calibrating `Y(0)` by role swap.
    pub fn swapped(&self) -> PropensityModel {
        let e = self.e.clone();
        PropensityModel {
            e: Arc::new(move |x| 1.0 - e(x)),
            p_t1: 1.0 - self.p_t1,
            e_min: 1.0 - self.e_max,
            e_max: 1.0 - self.e_min,
        }
    }
}

/// Monte Carlo estimate of `E[f(X)]` with `draws` samples from `sample`,
/// batched over independent ChaCha streams. Deterministic for any `exec`.
pub fn monte_carlo_mean<S, F>(exec: Exec, seed: u64, draws: usize, sample: S, f: F) -> f64
where
    S: Fn(&mut rand_chacha::ChaCha8Rng) -> Vec<f64> + Sync + Send,
    F: Fn(&[f64]) -> f64 + Sync + Send,
{
    let batches = draws.div_ceil(MC_BATCH);
    let sums = par::map_range(exec, batches, |b| {
        let mut rng = rng::stream(seed, b as u64);
        let k = MC_BATCH.min(draws - b * MC_BATCH);
        (0..k).map(|_| f(&sample(&mut rng))).sum::<f64>()
    });
    sums.iter().sum::<f64>() / draws as f64
}

/// Propensity model of the synthetic benchmark with `P(T = 1)` obtained by
/// Monte Carlo integration of `e(X)` over the covariate law.
pub fn synthetic_propensity(config: &SyntheticDgpConfig) -> Result<PropensityModel> {
    synthetic_propensity_with(config, DEFAULT_PT1_DRAWS, Exec::Parallel)
}

pub fn synthetic_propensity_with(config: &SyntheticDgpConfig, draws: usize, exec: Exec) -> Result<PropensityModel> {
    config.validate()?;
    let cfg = *config;
    let p_t1 = monte_carlo_mean(
        exec,
        rng::derive_seed(config.seed, 0x5054_3131),
        draws.max(1),
        move |rng| cfg.draw_covariates(rng),
        synthetic_propensity_at,
    );
    let mut m = PropensityModel::new(synthetic_propensity_at, p_t1)?;
    m.e_max = 0.4;
    Ok(m)
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadioDgpConfig {
    pub bs0: [f64; 3],
    pub bs1: [f64; 3],
    pub path_loss_exponent: f64,
    /// dB
    pub shadowing_sd: f64,
    /// dBm
    pub tx_power: f64,
    pub area: Area,
    pub seed: u64,
}

impl Default for RadioDgpConfig {
    fn default() -> Self {
        RadioDgpConfig {
            bs0: [0.0, 0.0, 25.0],
            bs1: [400.0, 0.0, 25.0],
            path_loss_exponent: 3.0,
            shadowing_sd: 6.0,
            tx_power: 43.0,
            area: Area {
                min: [-100.0, -250.0, 1.5],
                max: [500.0, 250.0, 1.5],
            },
            seed: 0,
        }
    }
}

const MIN_DISTANCE_M: f64 = 1.0;

fn distance(a: &[f64], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

impl RadioDgpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bs0 == self.bs1 {
            return Err(Error::InvalidParameter("base stations coincide".into()));
        }
        if !(self.shadowing_sd >= 0.0) {
            return Err(Error::InvalidParameter("shadowing_sd must be >= 0".into()));
        }
        if !(self.path_loss_exponent > 0.0) {
            return Err(Error::InvalidParameter("path_loss_exponent must be > 0".into()));
        }
        let extent = |k: usize| self.area.max[k] - self.area.min[k];
        if (0..3).any(|k| !(extent(k) >= 0.0)) || extent(0) == 0.0 || extent(1) == 0.0 {
            return Err(Error::InvalidParameter("degenerate user area".into()));
        }
        Ok(())
    }

    pub fn station(&self, arm: Arm) -> &[f64; 3] {
        match arm {
            Arm::Control => &self.bs0,
            Arm::Treated => &self.bs1,
        }
    }

    pub fn distance_to(&self, x: &[f64], arm: Arm) -> f64 {
        distance(x, self.station(arm))
    }

    /// Mean received power `tx_power - 10 n log10(d)` in dBm.
    pub fn mean_power(&self, x: &[f64], arm: Arm) -> f64 {
        self.tx_power - 10.0 * self.path_loss_exponent * self.distance_to(x, arm).max(MIN_DISTANCE_M).log10()
    }

    /// `P(Y(1) > Y(0) | x)` under independent shadowing on the two links.
    pub fn propensity_at(&self, x: &[f64]) -> f64 {
        let gap = self.mean_power(x, Arm::Treated) - self.mean_power(x, Arm::Control);
        if self.shadowing_sd == 0.0 {
            return if gap > 0.0 { 1.0 } else { 0.0 };
        }
        std_normal_cdf(gap / (self.shadowing_sd * std::f64::consts::SQRT_2))
    }

    /// Uniform position in the area, re-drawn while closer than 1 m to a
    /// station.
    pub fn draw_position<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        loop {
            let x: Vec<f64> = (0..3)
                .map(|k| {
                    let (lo, hi) = (self.area.min[k], self.area.max[k]);
                    if hi > lo { rng.random_range(lo..hi) } else { lo }
                })
                .collect();
            if distance(&x, &self.bs0) >= MIN_DISTANCE_M && distance(&x, &self.bs1) >= MIN_DISTANCE_M {
                return x;
            }
        }
    }

    /// Default scalar location summary for threshold policies:
    /// distance to station 0 minus distance to station 1.
    pub fn distance_gap(&self, x: &[f64]) -> f64 {
        self.distance_to(x, Arm::Control) - self.distance_to(x, Arm::Treated)
    }
}

pub fn generate_radio(config: &RadioDgpConfig, n: usize) -> Result<Dataset> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidParameter("n must be >= 1".into()));
    }
    let mut rng = rng::seeded(config.seed);
    let units = (0..n)
        .map(|_| {
            let x = config.draw_position(&mut rng);
            let mut power = |arm| {
                let z: f64 = StandardNormal.sample(&mut rng);
                config.mean_power(&x, arm) + config.shadowing_sd * z
            };
            let y0 = power(Arm::Control);
            let y1 = power(Arm::Treated);
            // ties go to station 0
            let t = if y1 > y0 { Arm::Treated } else { Arm::Control };
            Unit::with_potential(x, t, y0, y1)
        })
        .collect();
    Dataset::new(units, Provenance::RadioSim)
}

/// Propensity model of the radio DGP; `P(T = 1)` by Monte Carlo over user
/// positions.
pub fn radio_propensity(config: &RadioDgpConfig, draws: usize, exec: Exec) -> Result<PropensityModel> {
    config.validate()?;
    let cfg = *config;
    let p_t1 = monte_carlo_mean(
        exec,
        rng::derive_seed(config.seed, 0x5241_4449),
        draws.max(1),
        move |rng| cfg.draw_position(rng),
        move |x| cfg.propensity_at(x),
    );
    PropensityModel::new(move |x| cfg.propensity_at(x), p_t1.clamp(1e-9, 1.0 - 1e-9))
}
