//! `cfci`: conformal counterfactual intervals from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::seq::SliceRandom;

use cfconformal::cci::{CciCalibrator, ScoredCalibration};
use cfconformal::dgp::{self, PropensityModel};
use cfconformal::harness::data::{parse_ihdp_csv, IHDP_POOLED_ROWS};
use cfconformal::harness::trial::split_four;
use cfconformal::harness::{
    emit_report, generate_ihdp_like, load_dataset_csv, radio_sweep, resolve_config, run_experiment,
    run_policy_experiment, write_dataset_csv, write_ihdp_csv, DgpKind, EvalArm, ExperimentContext, IhdpLikeConfig,
    Method, Overrides, Quality,
};
use cfconformal::models::{fit_cf_generator, fit_quantile_model};
use cfconformal::par::Exec;
use cfconformal::policy_eval::{write_sweep_csv, CalibrationMethod};
use cfconformal::types::{split_by_treatment, Arm, Provenance};
use cfconformal::{rng, spcci, Error};

#[derive(Parser, Debug)]
#[command(name = "cfci", version, about = "Conformal intervals for counterfactual outcomes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Run the coverage/width experiment and write a report directory.
    Run(RunArgs),
    /// Validate an IHDP-format CSV.
    IngestCheck(IngestArgs),
    /// Regret bounds of threshold handover policies on the radio DGP.
    PolicySweep(CommonArgs),
    /// Calibrate once on a dataset CSV and print the widening and UCB curve.
    Calibrate(CalibrateArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct CommonArgs {
    /// Flat TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Comma-separated generator qualities (lq, mq, hq).
    #[arg(long, value_delimiter = ',', value_parser = parse_quality)]
    quality: Option<Vec<Quality>>,
    /// Output directory (run, policy-sweep) or file (simulate, calibrate).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_parser = parse_dgp)]
    dgp: Option<DgpKind>,
    #[arg(long)]
    ihdp: Option<PathBuf>,
    /// Concentration constant of the Hoeffding radius.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = parse_eval_arm)]
    eval_arm: Option<EvalArm>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_quality(s: &str) -> Result<Quality, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_dgp(s: &str) -> Result<DgpKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_eval_arm(s: &str) -> Result<EvalArm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            alpha: self.alpha,
            delta: self.delta,
            trials: self.trials,
            seed: self.seed,
            method: self.method,
            qualities: self.quality.clone(),
            n: self.n,
            dgp: self.dgp,
            ihdp_path: self.ihdp.clone(),
            c_override: self.c,
            workers: self.workers,
            eval_arm: self.eval_arm,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SimKind {
    Synthetic,
    Radio,
    IhdpLike,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    kind: SimKind,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct IngestArgs {
    path: PathBuf,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Dataset CSV (`t,y_obs,y0,y1,x1..`), or IHDP layout with `--ihdp-format`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ihdp_format: bool,
    #[command(flatten)]
    common: CommonArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> cfconformal::Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Run(a) => run(a),
        Command::IngestCheck(a) => ingest_check(a),
        Command::PolicySweep(a) => policy_sweep(a),
        Command::Calibrate(a) => calibrate(a),
    }
}

fn output(out: Option<&Path>) -> cfconformal::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| io_err(p, e))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_err(p: &Path, e: io::Error) -> Error {
    Error::Io {
        path: p.to_path_buf(),
        source: e,
    }
}

fn simulate(a: SimulateArgs) -> cfconformal::Result<()> {
    let cfg = resolve_config(a.common.config.as_deref(), &a.common.overrides())?;
    let out = output(a.common.out.as_deref())?;
    match a.kind {
        SimKind::Synthetic => write_dataset_csv(&dgp::generate_synthetic(&cfg.synthetic(cfg.base_seed), cfg.n)?, out),
        SimKind::Radio => {
            let n = a.common.n.unwrap_or(cfg.radio_n);
            write_dataset_csv(&dgp::generate_radio(&cfg.radio(cfg.base_seed), n)?, out)
        }
        SimKind::IhdpLike => {
            let ic = IhdpLikeConfig {
                n: a.common.n.unwrap_or(IHDP_POOLED_ROWS),
                seed: cfg.base_seed,
                ..IhdpLikeConfig::default()
            };
            let (d, s) = generate_ihdp_like(&ic)?;
            write_ihdp_csv(&d, Some(&s), out)
        }
    }
}

fn run(a: RunArgs) -> cfconformal::Result<()> {
    let cfg = resolve_config(a.common.config.as_deref(), &a.common.overrides())?;
    let out = a.common.out.clone().unwrap_or_else(|| PathBuf::from("cfci-report"));
    let ctx = ExperimentContext::new(cfg)?;
    let report = run_experiment(&ctx)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    for f in &report.failed_trials {
        eprintln!("trial {} failed: {}", f.trial, f.error);
    }
    emit_report(&report, &out)?;
    println!("{:<10} {:>8} {:>8} {:>6} {:>10} {:>10}", "method", "cov", "se", "cvr", "apiw", "se");
    for s in &report.summaries {
        let opt = |v: Option<f64>| v.map_or("inf".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<10} {:>8.4} {:>8.4} {:>6.3} {:>10} {:>10}",
            s.method,
            s.mean_coverage,
            s.se_coverage,
            s.cvr,
            opt(s.mean_apiw),
            opt(s.se_apiw)
        );
    }
    println!("report written to {}", out.display());
    Ok(())
}

fn ingest_check(a: IngestArgs) -> cfconformal::Result<()> {
    let bytes = fs::read(&a.path).map_err(|e| io_err(&a.path, e))?;
    let ing = parse_ihdp_csv(&bytes)?;
    let d = &ing.dataset;
    println!("rows        {}", d.len());
    println!("covariates  {}", d.dim());
    println!("treated     {} ({:.3})", d.n_treated(), d.n_treated() as f64 / d.len() as f64);
    println!("sha256      {}", ing.sha256);
    for w in &ing.warnings {
        println!("warning     {w}");
    }
    Ok(())
}

fn methods_of(m: Method) -> Vec<CalibrationMethod> {
    let mut v = Vec::new();
    if m.runs_cci() {
        v.push(CalibrationMethod::Cci);
    }
    if m.runs_spcci() {
        v.push(CalibrationMethod::Spcci);
    }
    v
}

fn policy_sweep(a: CommonArgs) -> cfconformal::Result<()> {
    let mut cfg = resolve_config(a.config.as_deref(), &a.overrides())?;
    cfg.dgp = DgpKind::Radio;
    if let Some(q) = a.quality.as_ref().and_then(|q| q.last()) {
        cfg.policy_quality = *q;
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("cfci-policy"));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    let methods = methods_of(cfg.method);
    let sweeps = radio_sweep(&cfg, rng::derive_seed(cfg.base_seed, 0), &methods, Exec::Parallel)?;
    for (m, rows) in &sweeps {
        let p = out.join(format!("sweep_{m}.csv"));
        write_sweep_csv(rows, fs::File::create(&p).map_err(|e| io_err(&p, e))?)?;
    }
    let report = run_policy_experiment(&cfg, &methods, Exec::Parallel)?;
    let p = out.join("policy_report.json");
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(&p, json).map_err(|e| io_err(&p, e))?;
    for s in &report.summaries {
        println!(
            "{}: true regret covered in {}/{} trials at theta = {}, unit coverage {:.3}, rebalanced {}",
            s.method, s.n_covered, s.n_trials, cfg.policy_theta, s.mean_unit_coverage, s.n_rebalanced
        );
    }
    println!("sweeps and report written to {}", out.display());
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> cfconformal::Result<()> {
    let cfg = resolve_config(a.common.config.as_deref(), &a.common.overrides())?;
    let data = if a.ihdp_format {
        let bytes = fs::read(&a.data).map_err(|e| io_err(&a.data, e))?;
        parse_ihdp_csv(&bytes)?.dataset
    } else {
        load_dataset_csv(&a.data, Provenance::Synthetic)?
    };
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng::stream(cfg.base_seed, 1));
    let data = data.select(&idx)?;
    let [q_part, g_part, c_part, _] = split_four(&data, cfg.splits())?;
    let gbqr = cfg.gbqr();
    let qm = fit_quantile_model(&q_part.filter_arm(Arm::Treated)?, cfg.alpha, &gbqr)?;
    // unknown assignment mechanism: constant propensity at the pooled rate
    let prop = PropensityModel::constant(data.n_treated() as f64 / data.len() as f64)?;
    let split = split_by_treatment(&c_part)?;
    let quality = cfg.qualities.last().copied().unwrap_or(Quality::Hq);
    let gen = fit_cf_generator(&g_part.filter_arm(Arm::Treated)?, quality.fraction(), &gbqr, cfg.base_seed)?;
    let cal = spcci::calibrate(&split, &qm, &gen, &prop, cfg.alpha, cfg.delta, cfg.c_override, cfg.base_seed)?;
    let cci = CciCalibrator::new(&ScoredCalibration::from_treated(&qm, &split.d1, &prop)?);
    let res = &cal.result;
    println!("n1 {} r {} c {} radius {:.6}", res.n1, res.r, res.conc_constant, res.radius);
    match res.eta_hat {
        Some(e) => println!("eta_hat {e}"),
        None => println!("eta_hat inf (no candidate meets alpha; min ucb {:.6})", res.min_ucb),
    }
    println!("cci_eta {}", cci.eta(prop.p_t1(), cfg.alpha));
    if let Some(out) = &a.common.out {
        let mut json = res.to_json()?;
        json.push('\n');
        fs::write(out, json).map_err(|e| io_err(out, e))?;
    } else {
        let mut w = csv::Writer::from_writer(io::stdout().lock());
        w.write_record(["threshold", "l_hat", "ucb"])?;
        for p in &res.ucb_curve {
            w.write_record([p.threshold.to_string(), p.l_hat.to_string(), p.ucb.to_string()])?;
        }
        w.flush().map_err(|e| io_err(Path::new("<stdout>"), e))?;
    }
    Ok(())
}
