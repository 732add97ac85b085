//! Experiment configuration: a flat TOML file plus command-line overrides.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos do not silently fall back to defaults.
//!
//! ```toml
//! alpha = 0.15
//! delta = 0.1
//! n = 5000
//! split_qhat = 0.3
//! split_generator = 0.3
//! split_calibration = 0.2
//! split_test = 0.2
//! qualities = ["lq", "mq", "hq"]
//! n_trials = 50
//! base_seed = 0
//! method = "both"          # cci | spcci | both
//! dgp = "synthetic"        # synthetic | ihdp | radio
//! c_override = 1.0         # omit for 2/e_min + 1/(1 - e_max)
//! eval_arm = "control"     # control | all
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dgp::{RadioDgpConfig, SyntheticDgpConfig, DEFAULT_CLIP_FLOOR, DEFAULT_PT1_DRAWS};
use crate::error::{Error, Result};
use crate::models::GbqrConfig;

/// Share of the generator-training treated units the generator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Lq,
    Mq,
    Hq,
}

impl Quality {
    pub const ALL: [Quality; 3] = [Quality::Lq, Quality::Mq, Quality::Hq];

    pub fn fraction(self) -> f64 {
        match self {
            Quality::Lq => 0.2,
            Quality::Mq => 0.6,
            Quality::Hq => 1.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Quality::Lq => "lq",
            Quality::Mq => "mq",
            Quality::Hq => "hq",
        }
    }
}

impl FromStr for Quality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lq" => Ok(Quality::Lq),
            "mq" => Ok(Quality::Mq),
            "hq" => Ok(Quality::Hq),
            other => Err(Error::Config(format!("unknown quality {other:?} (lq, mq, hq)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Cci,
    Spcci,
    Both,
}

impl Method {
    pub fn runs_cci(self) -> bool {
        matches!(self, Method::Cci | Method::Both)
    }

    pub fn runs_spcci(self) -> bool {
        matches!(self, Method::Spcci | Method::Both)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cci" => Ok(Method::Cci),
            "spcci" | "sp-cci" => Ok(Method::Spcci),
            "both" => Ok(Method::Both),
            other => Err(Error::Config(format!("unknown method {other:?} (cci, spcci, both)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpKind {
    Synthetic,
    Ihdp,
    Radio,
}

impl FromStr for DgpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "synthetic" => Ok(DgpKind::Synthetic),
            "ihdp" => Ok(DgpKind::Ihdp),
            "radio" => Ok(DgpKind::Radio),
            other => Err(Error::Config(format!("unknown dgp {other:?} (synthetic, ihdp, radio)"))),
        }
    }
}

/// Which test units are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalArm {
    /// Control units against their oracle `Y(1)`.
    Control,
    /// Every test unit against its oracle `Y(1)`.
    All,
}

impl FromStr for EvalArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "control" => Ok(EvalArm::Control),
            "all" => Ok(EvalArm::All),
            other => Err(Error::Config(format!("unknown eval_arm {other:?} (control, all)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Cci => "cci",
            Method::Spcci => "spcci",
            Method::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub alpha: f64,
    pub delta: f64,
    pub n: usize,
    pub split_qhat: f64,
    pub split_generator: f64,
    pub split_calibration: f64,
    pub split_test: f64,
    pub qualities: Vec<Quality>,
    pub n_trials: usize,
    pub base_seed: u64,
    pub method: Method,
    pub dgp: DgpKind,
    /// Synthetic covariate dimension, correlation and outcome noise.
    pub synthetic_d: usize,
    pub synthetic_rho: f64,
    pub synthetic_noise_sd: f64,
    /// IHDP-format CSV; required when `dgp = "ihdp"`.
    pub ihdp_path: Option<PathBuf>,
    pub radio_shadowing_sd: f64,
    pub radio_path_loss_exponent: f64,
    /// Concentration constant; default `2/e_min + 1/(1 - e_max)`.
    pub c_override: Option<f64>,
    pub clip_floor: f64,
    /// Monte Carlo draws for `P(T = 1)` of the simulated DGPs.
    pub pt1_draws: usize,
    /// Estimate `P(T = 1)` from the pooled sample and inflate by its exact
    /// binomial bound instead of using the population value.
    pub pt1_empirical: bool,
    /// Perturb SP-CCI weights by up to this amount and select robustly.
    pub weight_error: f64,
    pub draws_per_label: usize,
    pub gbqr_n_stages: usize,
    pub gbqr_learning_rate: f64,
    pub gbqr_max_depth: usize,
    pub gbqr_min_leaf: usize,
    pub workers: Option<usize>,
    pub eval_arm: EvalArm,
    /// Radio policy trials: sample size, fixed threshold, generator quality
    /// and the theta sweep grid.
    pub radio_n: usize,
    pub policy_theta: f64,
    pub policy_quality: Quality,
    pub sweep_theta_min: f64,
    pub sweep_theta_max: f64,
    pub sweep_n_thetas: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let g = GbqrConfig::default();
        let r = RadioDgpConfig::default();
        let s = SyntheticDgpConfig::default();
        ExperimentConfig {
            alpha: 0.15,
            delta: 0.1,
            n: 5000,
            split_qhat: 0.3,
            split_generator: 0.3,
            split_calibration: 0.2,
            split_test: 0.2,
            qualities: Quality::ALL.to_vec(),
            n_trials: 50,
            base_seed: 0,
            method: Method::Both,
            dgp: DgpKind::Synthetic,
            synthetic_d: s.d,
            synthetic_rho: s.rho,
            synthetic_noise_sd: s.noise_sd,
            ihdp_path: None,
            radio_shadowing_sd: r.shadowing_sd,
            radio_path_loss_exponent: r.path_loss_exponent,
            c_override: None,
            clip_floor: DEFAULT_CLIP_FLOOR,
            pt1_draws: DEFAULT_PT1_DRAWS,
            pt1_empirical: false,
            weight_error: 0.0,
            draws_per_label: 1,
            gbqr_n_stages: g.n_stages,
            gbqr_learning_rate: g.learning_rate,
            gbqr_max_depth: g.max_depth,
            gbqr_min_leaf: g.min_leaf,
            workers: None,
            eval_arm: EvalArm::Control,
            radio_n: 2000,
            policy_theta: 80.0,
            policy_quality: Quality::Hq,
            sweep_theta_min: 100.0,
            sweep_theta_max: 300.0,
            sweep_n_thetas: 50,
        }
    }
}

const SPLIT_TOLERANCE: f64 = 1e-9;

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn splits(&self) -> [f64; 4] {
        [self.split_qhat, self.split_generator, self.split_calibration, self.split_test]
    }

    pub fn gbqr(&self) -> GbqrConfig {
        GbqrConfig {
            n_stages: self.gbqr_n_stages,
            learning_rate: self.gbqr_learning_rate,
            max_depth: self.gbqr_max_depth,
            min_leaf: self.gbqr_min_leaf,
        }
    }

    pub fn synthetic(&self, seed: u64) -> SyntheticDgpConfig {
        SyntheticDgpConfig {
            d: self.synthetic_d,
            rho: self.synthetic_rho,
            noise_sd: self.synthetic_noise_sd,
            seed,
        }
    }

    pub fn radio(&self, seed: u64) -> RadioDgpConfig {
        RadioDgpConfig {
            shadowing_sd: self.radio_shadowing_sd,
            path_loss_exponent: self.radio_path_loss_exponent,
            seed,
            ..RadioDgpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha = {} not in (0, 1)", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta = {} not in (0, 1)", self.delta));
        }
        let splits = self.splits();
        if splits.iter().any(|f| !(*f > 0.0)) || (splits.iter().sum::<f64>() - 1.0).abs() > SPLIT_TOLERANCE {
            return bad(format!("split fractions {splits:?} must be positive and sum to 1"));
        }
        if self.n_trials == 0 {
            return bad("n_trials must be >= 1".into());
        }
        if self.method.runs_spcci() && self.qualities.is_empty() {
            return bad("spcci needs at least one generator quality".into());
        }
        if let Some(c) = self.c_override {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("c_override = {c} must be positive"));
            }
        }
        if !(self.clip_floor > 0.0 && self.clip_floor < 0.5) {
            return bad(format!("clip_floor = {} not in (0, 0.5)", self.clip_floor));
        }
        if !(self.weight_error >= 0.0 && self.weight_error.is_finite()) {
            return bad("weight_error must be >= 0".into());
        }
        if self.draws_per_label == 0 || self.pt1_draws == 0 {
            return bad("draws_per_label and pt1_draws must be >= 1".into());
        }
        if self.dgp == DgpKind::Ihdp && self.ihdp_path.is_none() {
            return bad("dgp = \"ihdp\" needs ihdp_path".into());
        }
        if self.sweep_n_thetas == 0 || !(self.sweep_theta_min <= self.sweep_theta_max) {
            return bad("sweep needs n_thetas >= 1 and theta_min <= theta_max".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be >= 1".into());
        }
        self.gbqr().validate().map_err(|e| Error::Config(e.to_string()))?;
        self.synthetic(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        self.radio(0).validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// Command-line overrides; `None` keeps the file or default value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub delta: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub qualities: Option<Vec<Quality>>,
    pub n: Option<usize>,
    pub dgp: Option<DgpKind>,
    pub ihdp_path: Option<PathBuf>,
    pub c_override: Option<f64>,
    pub workers: Option<usize>,
    pub eval_arm: Option<EvalArm>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { cfg.$target = v; })*
            };
        }
        set!(alpha => alpha, delta => delta, trials => n_trials, seed => base_seed, method => method,
             qualities => qualities, n => n, dgp => dgp, eval_arm => eval_arm);
        if let Some(p) = &self.ihdp_path {
            cfg.ihdp_path = Some(p.clone());
        }
        if let Some(c) = self.c_override {
            cfg.c_override = Some(c);
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
    }
}

/// Defaults, then the file (if any), then the overrides; validated.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = ExperimentConfig::default();
        assert_eq!((c.alpha, c.delta, c.n, c.n_trials), (0.15, 0.1, 5000, 50));
        assert_eq!(c.splits(), [0.3, 0.3, 0.2, 0.2]);
        assert_eq!(
            c.qualities.iter().map(|q| q.fraction()).collect::<Vec<_>>(),
            vec![0.2, 0.6, 1.0]
        );
        c.validate().unwrap();
    }

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn file_values_and_round_trip() {
        let c = ExperimentConfig::from_toml_str(
            "alpha = 0.1\nn_trials = 3\nmethod = \"spcci\"\nqualities = [\"hq\"]\nc_override = 1.0\n",
        )
        .unwrap();
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.method, Method::Spcci);
        assert_eq!(c.qualities, vec![Quality::Hq]);
        assert_eq!(c.c_override, Some(1.0));
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(ExperimentConfig::from_toml_str("alpah = 0.1").is_err());
        assert!(ExperimentConfig::from_toml_str("alpha = 1.5").is_err());
        assert!(ExperimentConfig::from_toml_str("split_test = 0.3").is_err());
        assert!(ExperimentConfig::from_toml_str("dgp = \"ihdp\"").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"magic\"").is_err());
    }

    #[test]
    fn flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "alpha = 0.2\ndelta = 0.05\n").unwrap();
        let o = Overrides {
            alpha: Some(0.1),
            trials: Some(7),
            ..Overrides::default()
        };
        let c = resolve_config(Some(&path), &o).unwrap();
        assert_eq!((c.alpha, c.delta, c.n_trials), (0.1, 0.05, 7));
        let o = Overrides {
            alpha: Some(2.0),
            ..Overrides::default()
        };
        assert!(resolve_config(None, &o).is_err());
    }

    #[test]
    fn parse_enums() {
        assert_eq!("HQ".parse::<Quality>().unwrap(), Quality::Hq);
        assert_eq!("sp-cci".parse::<Method>().unwrap(), Method::Spcci);
        assert_eq!("radio".parse::<DgpKind>().unwrap(), DgpKind::Radio);
        assert_eq!("all".parse::<EvalArm>().unwrap(), EvalArm::All);
        assert!("xq".parse::<Quality>().is_err());
    }
}
