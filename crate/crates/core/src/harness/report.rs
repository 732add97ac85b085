//! Report files. Output is a pure function of the report, so re-emitting
//! gives identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::trial::{RunReport, TrialRecord};

pub const HIST_BINS: usize = 20;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fmt_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

pub fn report_json(report: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn metrics_csv(trials: &[TrialRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &[
            "trial",
            "seed",
            "method",
            "empirical_coverage",
            "avg_width",
            "n_infinite",
            "n",
            "covered_target",
            "eta_hat",
            "feasible",
            "radius",
            "n_real_dropped",
        ],
        trials.iter().map(|r| {
            vec![
                r.trial.to_string(),
                r.seed.to_string(),
                r.method.clone(),
                r.metrics.empirical_coverage.to_string(),
                fmt_opt(r.metrics.avg_width),
                r.metrics.n_infinite.to_string(),
                r.metrics.n.to_string(),
                r.metrics.covered_target.to_string(),
                fmt_opt(r.eta_hat),
                fmt_opt(r.feasible),
                fmt_opt(r.radius),
                r.n_real_dropped.to_string(),
            ]
        }),
    )
}

/// UCB curves of the SP-CCI records of one trial.
pub fn ucb_curve_csv(records: &[&TrialRecord]) -> Result<Vec<u8>> {
    csv_bytes(
        &["method", "threshold", "l_hat", "ucb"],
        records.iter().flat_map(|r| {
            r.ucb_curve.iter().map(|p| {
                vec![
                    r.method.clone(),
                    p.threshold.to_string(),
                    p.l_hat.to_string(),
                    p.ucb.to_string(),
                ]
            })
        }),
    )
}

/// Equal-width counts per method over the shared range of `values`.
pub fn histogram_csv(values: &[(String, f64)]) -> Result<Vec<u8>> {
    let finite: Vec<&(String, f64)> = values.iter().filter(|v| v.1.is_finite()).collect();
    let mut methods: Vec<&str> = Vec::new();
    for (m, _) in &finite {
        if !methods.contains(&m.as_str()) {
            methods.push(m);
        }
    }
    let lo = finite.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
    let hi = finite.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let edge = |k: usize| lo + span * k as f64 / HIST_BINS as f64;
    let mut rows = Vec::new();
    for m in methods {
        let mut counts = [0usize; HIST_BINS];
        for (_, v) in finite.iter().filter(|v| v.0 == m) {
            let k = (((v - lo) / span) * HIST_BINS as f64).floor() as usize;
            counts[k.min(HIST_BINS - 1)] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            rows.push(vec![m.to_string(), edge(k).to_string(), edge(k + 1).to_string(), c.to_string()]);
        }
    }
    csv_bytes(&["method", "bin_lo", "bin_hi", "count"], rows)
}

/// Write `report.json`, `metrics.csv`, `ucb_curve_<trial>.csv`,
/// `widths_hist.csv` and `coverage_hist.csv` into `out_dir`.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if report.trials.is_empty() {
        return Err(Error::NoTrials);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: String, bytes: Vec<u8>| -> Result<()> {
        let p = out_dir.join(name);
        write_file(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    put("report.json".into(), report_json(report)?.into_bytes())?;
    put("metrics.csv".into(), metrics_csv(&report.trials)?)?;
    let mut trial_ids: Vec<usize> = report.trials.iter().map(|r| r.trial).collect();
    trial_ids.dedup();
    for t in trial_ids {
        let recs: Vec<&TrialRecord> = report
            .trials
            .iter()
            .filter(|r| r.trial == t && !r.ucb_curve.is_empty())
            .collect();
        if !recs.is_empty() {
            put(format!("ucb_curve_{t}.csv"), ucb_curve_csv(&recs)?)?;
        }
    }
    let widths: Vec<(String, f64)> = report
        .trials
        .iter()
        .filter_map(|r| r.metrics.avg_width.map(|w| (r.method.clone(), w)))
        .collect();
    put("widths_hist.csv".into(), histogram_csv(&widths)?)?;
    let cov: Vec<(String, f64)> = report
        .trials
        .iter()
        .map(|r| (r.method.clone(), r.metrics.empirical_coverage))
        .collect();
    put("coverage_hist.csv".into(), histogram_csv(&cov)?)?;
    Ok(written)
}
