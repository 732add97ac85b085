//! Dataset files.
//!
//! Two CSV layouts are understood:
//!
//! * the crate's own layout, `t,y_obs,y0,y1,x1..xd`, where `y0`/`y1` may be
//!   empty when unknown;
//! * the IHDP layout, `treatment,y_factual,y_cfactual,[mu0,mu1,]x1..x25`,
//!   read strictly (every column required, no extras).
//!
//! [`generate_ihdp_like`] writes a semi-synthetic stand-in in the IHDP layout
//! for environments without the real replicate files.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{Arm, Dataset, Provenance, Unit};

pub const IHDP_COVARIATES: usize = 25;
/// Pooled row count of the IHDP benchmark.
pub const IHDP_POOLED_ROWS: usize = 1746;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn parse_num(row: usize, col: &str, s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Row {
        row,
        msg: format!("column `{col}`: cannot parse {s:?} as a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Row {
            row,
            msg: format!("column `{col}`: non-finite value"),
        });
    }
    Ok(v)
}

fn parse_treatment(row: usize, col: &str, s: &str) -> Result<Arm> {
    let v = parse_num(row, col, s)?;
    if v == 0.0 {
        Ok(Arm::Control)
    } else if v == 1.0 {
        Ok(Arm::Treated)
    } else {
        Err(Error::Row {
            row,
            msg: format!("column `{col}`: treatment must be 0 or 1, got {s:?}"),
        })
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Covariate columns `x1, x2, ...` in numeric order, contiguous from 1.
fn covariate_columns(headers: &csv::StringRecord) -> Vec<usize> {
    let mut out = Vec::new();
    while let Some(i) = headers.iter().position(|h| h.trim() == format!("x{}", out.len() + 1)) {
        out.push(i);
    }
    out
}

/// Header is line 1, so data row `i` (0-based) is line `i + 2`.
fn line_of(i: usize) -> usize {
    i + 2
}

pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["t".to_string(), "y_obs".into(), "y0".into(), "y1".into()];
    header.extend((1..=data.dim()).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for u in data.units() {
        let mut rec = vec![u.t.bit().to_string(), u.y_obs.to_string(), opt(u.y0), opt(u.y1)];
        rec.extend(u.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dataset csv>", e))?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R, provenance: Provenance) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let (ct, cy) = (column(&headers, "t")?, column(&headers, "y_obs")?);
    let (c0, c1) = (column(&headers, "y0")?, column(&headers, "y1")?);
    let xs = covariate_columns(&headers);
    if xs.is_empty() {
        return Err(Error::MissingColumn("x1".into()));
    }
    let known = 4 + xs.len();
    if headers.len() != known {
        let extra = headers
            .iter()
            .find(|h| !matches!(h.trim(), "t" | "y_obs" | "y0" | "y1") && !h.trim().starts_with('x'))
            .unwrap_or("?");
        return Err(Error::UnexpectedColumn(extra.to_string()));
    }
    let mut units = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = line_of(i);
        let rec = rec?;
        let t = parse_treatment(row, "t", &rec[ct])?;
        let y_obs = parse_num(row, "y_obs", &rec[cy])?;
        let opt = |c: usize, name: &str| -> Result<Option<f64>> {
            let s = rec[c].trim();
            if s.is_empty() {
                Ok(None)
            } else {
                parse_num(row, name, s).map(Some)
            }
        };
        let (y0, y1) = (opt(c0, "y0")?, opt(c1, "y1")?);
        let x = xs
            .iter()
            .enumerate()
            .map(|(k, &c)| parse_num(row, &format!("x{}", k + 1), &rec[c]))
            .collect::<Result<Vec<_>>>()?;
        let unit = Unit { x, t, y_obs, y0, y1 };
        if unit.potential(t).is_some_and(|v| v != y_obs) {
            return Err(Error::Row {
                row,
                msg: "y_obs differs from the potential outcome of the assigned arm".into(),
            });
        }
        units.push(unit);
    }
    if units.is_empty() {
        return Err(Error::Empty("dataset csv"));
    }
    Dataset::new(units, provenance)
}

pub fn load_dataset_csv(path: &Path, provenance: Provenance) -> Result<Dataset> {
    read_dataset_csv(read_file(path)?.as_slice(), provenance)
}

/// An ingested IHDP-format file.
#[derive(Debug, Clone)]
pub struct IhdpIngest {
    pub dataset: Dataset,
    pub sha256: String,
    pub warnings: Vec<String>,
}

pub fn parse_ihdp_csv(bytes: &[u8]) -> Result<IhdpIngest> {
    let mut r = csv::Reader::from_reader(bytes);
    let headers = r.headers()?.clone();
    let ct = column(&headers, "treatment")?;
    let cf = column(&headers, "y_factual")?;
    let ccf = column(&headers, "y_cfactual")?;
    let xs: Vec<usize> = (1..=IHDP_COVARIATES)
        .map(|k| column(&headers, &format!("x{k}")))
        .collect::<Result<_>>()?;
    for h in headers.iter() {
        let h = h.trim();
        let known = matches!(h, "treatment" | "y_factual" | "y_cfactual" | "mu0" | "mu1")
            || h.strip_prefix('x')
                .and_then(|k| k.parse::<usize>().ok())
                .is_some_and(|k| (1..=IHDP_COVARIATES).contains(&k));
        if !known {
            return Err(Error::UnexpectedColumn(h.to_string()));
        }
    }
    let mut units = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = line_of(i);
        let rec = rec.map_err(|e| Error::Row {
            row,
            msg: e.to_string(),
        })?;
        if rec.len() != headers.len() {
            return Err(Error::Row {
                row,
                msg: format!("{} fields, header has {}", rec.len(), headers.len()),
            });
        }
        let t = parse_treatment(row, "treatment", &rec[ct])?;
        let yf = parse_num(row, "y_factual", &rec[cf])?;
        let ycf = parse_num(row, "y_cfactual", &rec[ccf])?;
        let x = xs
            .iter()
            .enumerate()
            .map(|(k, &c)| parse_num(row, &format!("x{}", k + 1), &rec[c]))
            .collect::<Result<Vec<_>>>()?;
        let (y0, y1) = match t {
            Arm::Treated => (ycf, yf),
            Arm::Control => (yf, ycf),
        };
        units.push(Unit::with_potential(x, t, y0, y1));
    }
    if units.is_empty() {
        return Err(Error::Empty("ihdp csv"));
    }
    let mut warnings = Vec::new();
    if units.len() != IHDP_POOLED_ROWS {
        warnings.push(format!(
            "{} rows; the pooled IHDP benchmark has {IHDP_POOLED_ROWS}",
            units.len()
        ));
    }
    Ok(IhdpIngest {
        dataset: Dataset::new(units, Provenance::IhdpCsv)?,
        sha256: sha256_hex(bytes),
        warnings,
    })
}

pub fn ingest_ihdp_csv(path: &Path) -> Result<IhdpIngest> {
    parse_ihdp_csv(&read_file(path)?)
}

/// Knobs of the IHDP-format stand-in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IhdpLikeConfig {
    pub n: usize,
    pub treated_fraction: f64,
    pub n_continuous: usize,
    /// Target average effect on the treated.
    pub att: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for IhdpLikeConfig {
    fn default() -> Self {
        IhdpLikeConfig {
            n: IHDP_POOLED_ROWS,
            treated_fraction: 0.2,
            n_continuous: 6,
            att: 4.0,
            noise_sd: 1.0,
            seed: 0,
        }
    }
}

/// Semi-synthetic data in the IHDP layout: 6 standard-normal and 19 binary
/// covariates, randomized treatment, and a nonlinear control surface
/// `exp((x + 0.5) . beta)` against a linear treated surface, shifted so the
/// effect on the treated averages `att`. Returns the dataset with its
/// noiseless surfaces `(mu0, mu1)`.
pub fn generate_ihdp_like(cfg: &IhdpLikeConfig) -> Result<(Dataset, Vec<(f64, f64)>)> {
    if cfg.n == 0 || cfg.n_continuous > IHDP_COVARIATES {
        return Err(Error::InvalidParameter("n >= 1 and n_continuous <= 25 required".into()));
    }
    if !(cfg.treated_fraction > 0.0 && cfg.treated_fraction < 1.0) {
        return Err(Error::InvalidParameter("treated_fraction not in (0, 1)".into()));
    }
    let mut rng = rng::seeded(cfg.seed);
    // sparse coefficients: 0 w.p. 0.6, else one of 0.1..0.4
    let beta: Vec<f64> = (0..IHDP_COVARIATES)
        .map(|_| {
            if rng.random::<f64>() < 0.6 {
                0.0
            } else {
                0.1 * rng.random_range(1..=4) as f64
            }
        })
        .collect();
    let probs: Vec<f64> = (cfg.n_continuous..IHDP_COVARIATES).map(|_| rng.random_range(0.2..0.8)).collect();
    let treat = Bernoulli::new(cfg.treated_fraction).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let rows: Vec<(Vec<f64>, Arm)> = (0..cfg.n)
        .map(|_| {
            let mut x: Vec<f64> = (0..cfg.n_continuous).map(|_| StandardNormal.sample(&mut rng)).collect();
            x.extend(probs.iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }));
            let t = if treat.sample(&mut rng) { Arm::Treated } else { Arm::Control };
            (x, t)
        })
        .collect();
    let dot = |x: &[f64], shift: f64| x.iter().zip(&beta).map(|(v, b)| (v + shift) * b).sum::<f64>();
    let mu0: Vec<f64> = rows.iter().map(|(x, _)| dot(x, 0.5).exp()).collect();
    let lin: Vec<f64> = rows.iter().map(|(x, _)| dot(x, 0.0)).collect();
    let treated: Vec<usize> = (0..cfg.n).filter(|&i| rows[i].1 == Arm::Treated).collect();
    let omega = if treated.is_empty() {
        0.0
    } else {
        treated.iter().map(|&i| lin[i] - mu0[i]).sum::<f64>() / treated.len() as f64 - cfg.att
    };
    let mut surfaces = Vec::with_capacity(cfg.n);
    let units = rows
        .into_iter()
        .enumerate()
        .map(|(i, (x, t))| {
            let m0 = mu0[i];
            let m1 = lin[i] - omega;
            surfaces.push((m0, m1));
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            Unit::with_potential(x, t, m0 + cfg.noise_sd * z0, m1 + cfg.noise_sd * z1)
        })
        .collect();
    Ok((Dataset::new(units, Provenance::IhdpCsv)?, surfaces))
}

pub fn write_ihdp_csv<W: Write>(data: &Dataset, surfaces: Option<&[(f64, f64)]>, out: W) -> Result<()> {
    if data.dim() != IHDP_COVARIATES {
        return Err(Error::DimensionMismatch {
            expected: IHDP_COVARIATES,
            found: data.dim(),
        });
    }
    if let Some(s) = surfaces {
        if s.len() != data.len() {
            return Err(Error::LengthMismatch {
                left: s.len(),
                right: data.len(),
            });
        }
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["treatment".to_string(), "y_factual".into(), "y_cfactual".into()];
    if surfaces.is_some() {
        header.extend(["mu0".to_string(), "mu1".into()]);
    }
    header.extend((1..=IHDP_COVARIATES).map(|k| format!("x{k}")));
    w.write_record(&header)?;
    for (i, u) in data.units().iter().enumerate() {
        let cf = u.counterfactual().ok_or_else(|| Error::InconsistentUnit("missing counterfactual".into()))?;
        let mut rec = vec![u.t.bit().to_string(), u.y_obs.to_string(), cf.to_string()];
        if let Some(s) = surfaces {
            rec.extend([s[i].0.to_string(), s[i].1.to_string()]);
        }
        rec.extend(u.x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<ihdp csv>", e))?;
    Ok(())
}
