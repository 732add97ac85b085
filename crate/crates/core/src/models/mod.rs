//! Pre-trained components consumed by calibration: a two-sided quantile
//! regressor for `Y(1)` and a counterfactual label generator.

mod boost;

use std::fmt;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};

pub use boost::{empirical_quantile, pinball, BoostedTrees, GbqrConfig, Loss};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{Arm, Dataset};

/// A fitted point predictor.
pub trait Regressor: Send + Sync + fmt::Debug {
    fn predict(&self, x: &[f64]) -> f64;
}

impl Regressor for BoostedTrees {
    fn predict(&self, x: &[f64]) -> f64 {
        BoostedTrees::predict(self, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantRegressor(pub f64);

impl Regressor for ConstantRegressor {
    fn predict(&self, _: &[f64]) -> f64 {
        self.0
    }
}

type SharedFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Closure-backed regressor, mainly for fixed oracle models.
pub struct FnRegressor(SharedFn);

impl FnRegressor {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnRegressor(Arc::new(f))
    }
}

impl fmt::Debug for FnRegressor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FnRegressor")
    }
}

impl Regressor for FnRegressor {
    fn predict(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Lower/upper quantile regressors at levels `alpha_lo`, `alpha_hi`.
/// Predictions are uncrossed by returning `(min, max)` of the two fits.
#[derive(Debug, Clone)]
pub struct QuantileModel {
    lo: Arc<dyn Regressor>,
    hi: Arc<dyn Regressor>,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Set when training targets were constant and a constant band was used.
    pub degenerate: bool,
}

impl QuantileModel {
    pub fn new(lo: Arc<dyn Regressor>, hi: Arc<dyn Regressor>, alpha_lo: f64, alpha_hi: f64) -> Self {
        QuantileModel {
            lo,
            hi,
            alpha_lo,
            alpha_hi,
            degenerate: false,
        }
    }

    pub fn from_fns(
        lo: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        hi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        QuantileModel::new(Arc::new(FnRegressor::new(lo)), Arc::new(FnRegressor::new(hi)), f64::NAN, f64::NAN)
    }

    pub fn constant(lo: f64, hi: f64) -> Self {
        QuantileModel::new(
            Arc::new(ConstantRegressor(lo)),
            Arc::new(ConstantRegressor(hi)),
            f64::NAN,
            f64::NAN,
        )
    }

    /// `(q_lo(x), q_hi(x))` with `q_lo <= q_hi`.
    pub fn band(&self, x: &[f64]) -> (f64, f64) {
        let a = self.lo.predict(x);
        let b = self.hi.predict(x);
        (a.min(b), a.max(b))
    }

    pub fn q_lo(&self, x: &[f64]) -> f64 {
        self.band(x).0
    }

    pub fn q_hi(&self, x: &[f64]) -> f64 {
        self.band(x).1
    }
}

fn treated_rows(train: &Dataset) -> Result<(Vec<&[f64]>, Vec<f64>)> {
    if train.units().iter().any(|u| u.t != Arm::Treated) {
        return Err(Error::InvalidParameter("training set must contain treated units only".into()));
    }
    Ok(train.units().iter().map(|u| (u.x.as_slice(), u.y_obs)).unzip())
}

/// Two pinball-loss boosted ensembles at `alpha / 2` and `1 - alpha / 2`.
pub fn fit_quantile_model(train: &Dataset, alpha: f64, config: &GbqrConfig) -> Result<QuantileModel> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} not in (0, 1)")));
    }
    config.validate()?;
    let (xs, ys) = treated_rows(train)?;
    if ys.len() < 2 * config.min_leaf {
        return Err(Error::InsufficientData(format!(
            "{} treated training units, need at least {}",
            ys.len(),
            2 * config.min_leaf
        )));
    }
    let (alpha_lo, alpha_hi) = (alpha / 2.0, 1.0 - alpha / 2.0);
    if ys.iter().all(|&y| y == ys[0]) {
        let mut m = QuantileModel::constant(ys[0], ys[0]);
        m.alpha_lo = alpha_lo;
        m.alpha_hi = alpha_hi;
        m.degenerate = true;
        return Ok(m);
    }
    let (lo, _) = BoostedTrees::fit(&xs, &ys, Loss::Pinball(alpha_lo), config)?;
    let (hi, _) = BoostedTrees::fit(&xs, &ys, Loss::Pinball(alpha_hi), config)?;
    Ok(QuantileModel::new(Arc::new(lo), Arc::new(hi), alpha_lo, alpha_hi))
}

/// Counterfactual label sampler: `mean(x) + residual_sd * z`, Gaussian `z`.
#[derive(Debug, Clone)]
pub struct CfGenerator {
    mean: Arc<dyn Regressor>,
    pub residual_sd: f64,
    pub seed: u64,
}

pub const RESIDUAL_SD_FLOOR: f64 = 1e-6;
pub const MIN_GENERATOR_SAMPLES: usize = 10;

impl CfGenerator {
    pub fn new(mean: Arc<dyn Regressor>, residual_sd: f64, seed: u64) -> Self {
        CfGenerator {
            mean,
            residual_sd,
            seed,
        }
    }

    pub fn from_fn(mean: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, residual_sd: f64, seed: u64) -> Self {
        CfGenerator::new(Arc::new(FnRegressor::new(mean)), residual_sd, seed)
    }

    pub fn mean(&self, x: &[f64]) -> f64 {
        self.mean.predict(x)
    }

    /// Same model, different sampling stream.
    pub fn reseeded(&self, seed: u64) -> Self {
        CfGenerator {
            seed,
            ..self.clone()
        }
    }

    /// The `draw_index`-th standard normal of this generator's stream.
    pub fn normal(&self, draw_index: u64) -> f64 {
        StandardNormal.sample(&mut rng::stream(self.seed, draw_index))
    }

    pub fn sample(&self, x: &[f64], draw_index: u64) -> f64 {
        let m = self.mean(x);
        if self.residual_sd == 0.0 {
            return m;
        }
        m + self.residual_sd * self.normal(draw_index)
    }
}

/// `sample_cf` in free-function form.
pub fn sample_cf(gen: &CfGenerator, x: &[f64], draw_index: u64) -> f64 {
    gen.sample(x, draw_index)
}

/// Squared-loss boosted mean on the first `ceil(fraction * n)` treated units,
/// with homoscedastic Gaussian residuals.
pub fn fit_cf_generator(train: &Dataset, fraction: f64, config: &GbqrConfig, seed: u64) -> Result<CfGenerator> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!("fraction = {fraction} not in (0, 1]")));
    }
    let (xs, ys) = treated_rows(train)?;
    let k = ((fraction * ys.len() as f64).ceil() as usize).min(ys.len());
    if k < MIN_GENERATOR_SAMPLES {
        return Err(Error::InsufficientData(format!(
            "generator subsample of {k} units, need at least {MIN_GENERATOR_SAMPLES}"
        )));
    }
    let (xs, ys) = (&xs[..k], &ys[..k]);
    let (model, _) = BoostedTrees::fit(xs, ys, Loss::Squared, config)?;
    let resid: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| y - model.predict(x)).collect();
    let mean = resid.iter().sum::<f64>() / k as f64;
    let sd = (resid.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k as f64).sqrt();
    Ok(CfGenerator::new(Arc::new(model), sd.max(RESIDUAL_SD_FLOOR), seed))
}
