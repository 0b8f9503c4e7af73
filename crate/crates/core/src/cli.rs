//! Command-line runner: `certify`, `simulate`, `contract`, `transport`, `malliavin`.
//!
//! Exit codes: 0 when every check passes, 1 when an inequality check fails or
//! a run aborts, 2 on configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::coupling::{burn_in_pairs, in_pool, run_ensemble, simulate_coupled, simulate_marginal, CoupledPath, CouplingError, Reflection, Scheme, SimOptions, Synchronous};
use crate::estimators::{fit_decay, malliavin_brownian_experiment, malliavin_difference_experiment, mean_curve, DifferenceOptions, DirectionalOptions, EstimatorError};
use crate::lyapunov::{build_f1_jump, build_f_brownian, certify, BrownianOptions, Certificate, CertifyOptions, DistanceFn, JumpOptions, LyapunovError};
use crate::model::{validate_assumptions, ValidationOptions};
use crate::rng::{stream, Purpose};
use crate::stats::ks_two_sample;
use crate::transport::{mgf_check, path_average, tail_check, BetaTerm, DeviationFunction, RateConstants, TransportError};

#[derive(Debug, Parser)]
#[command(name = "jumpcouple", version, about = "Coupled jump-diffusion experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Build a distance function and certify its functional inequality.
    Certify,
    /// Simulate a coupled ensemble and summarise |Z_t|.
    Simulate,
    /// Compare the simulated contraction with the certified bound.
    Contract,
    /// Deviation functions with MGF and tail checks.
    Transport,
    /// Difference-operator or directional-derivative experiments.
    Malliavin,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Certify => "certify",
            Command::Simulate => "simulate",
            Command::Contract => "contract",
            Command::Transport => "transport",
            Command::Malliavin => "malliavin",
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot write {path}: {msg}")]
    Output { path: PathBuf, msg: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeriesPoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ResultRecord {
    pub experiment_id: String,
    pub config_hash: String,
    pub command: Command,
    pub passed: bool,
    pub scalars: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<SeriesPoint>>,
    pub reports: BTreeMap<String, serde_json::Value>,
    pub artifacts: Vec<String>,
    pub wall_time: f64,
}

impl ResultRecord {
    fn new(cmd: Command, hash: &str) -> Self {
        Self {
            experiment_id: format!("{}-{}", cmd.name(), &hash[..12]),
            config_hash: hash.to_string(),
            command: cmd,
            passed: true,
            scalars: BTreeMap::new(),
            series: BTreeMap::new(),
            reports: BTreeMap::new(),
            artifacts: Vec::new(),
            wall_time: 0.0,
        }
    }

    fn report<T: Serialize>(&mut self, key: &str, v: &T) {
        self.reports.insert(key.to_string(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
    }
}

fn out_err(path: &Path, e: impl ToString) -> RunError {
    RunError::Output { path: path.to_path_buf(), msg: e.to_string() }
}

/// Pretty JSON with sorted keys.
pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), RunError> {
    let value = serde_json::to_value(v).map_err(|e| out_err(path, e))?;
    let text = serde_json::to_string_pretty(&value).map_err(|e| out_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| out_err(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| out_err(path, e))?;
    w.write_record(header).map_err(|e| out_err(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(|v| v.to_string())).map_err(|e| out_err(path, e))?;
    }
    w.flush().map_err(|e| out_err(path, e))
}

/// One `<metric>.csv` per series with columns `t, value, stderr, bound`; returns the files written.
pub fn emit_plotdata(record: &ResultRecord, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut files = Vec::new();
    for (name, pts) in &record.series {
        let path = dir.join(format!("{name}.csv"));
        write_csv(&path, &["t", "value", "stderr", "bound"], pts.iter().map(|p| vec![p.t, p.value, p.stderr, p.bound]))?;
        files.push(path);
    }
    Ok(files)
}

enum Route {
    Brownian,
    Jump,
}

fn route(cfg: &ExperimentConfig) -> Result<Route, RunError> {
    let ini = &cfg.ini;
    let has_s1 = cfg.model.diffusion.sigma1_det().abs() > 0.0;
    match ini.get("certify", "route").unwrap_or("auto") {
        "brownian" if has_s1 => Ok(Route::Brownian),
        "jump" if cfg.model.levy.is_some() => Ok(Route::Jump),
        "auto" if has_s1 => Ok(Route::Brownian),
        "auto" if cfg.model.levy.is_some() => Ok(Route::Jump),
        "brownian" | "jump" | "auto" => Err(ini.field_error("certify", "route", "the model lacks the noise this route needs").into()),
        other => Err(ini.field_error("certify", "route", format!("unknown route `{other}` (brownian, jump, auto)")).into()),
    }
}

/// Builds and certifies the distance function for the configured route.
pub fn certified_distance(cfg: &ExperimentConfig) -> Result<(DistanceFn, Certificate), RunError> {
    let ini = &cfg.ini;
    let opts = CertifyOptions { tol: ini.f64_or("certify", "tol", 1e-8)?, refine: ini.usize_or("certify", "refine", 2)?, ..CertifyOptions::default() };
    let f = match route(cfg)? {
        Route::Brownian => {
            let kappa = cfg.model.brownian_kappa().expect("σ₁ checked by route");
            let alpha = cfg.model.diffusion.alpha().unwrap_or(1.0);
            DistanceFn::Brownian(build_f_brownian(kappa, alpha, BrownianOptions::default())?)
        }
        Route::Jump => {
            let m = cfg.model.levy.as_ref().expect("Lévy part checked by route");
            let gamma = m.gamma().map_err(LyapunovError::from)?;
            DistanceFn::Jump(build_f1_jump(cfg.model.kappa.clone(), m, gamma, JumpOptions::default())?)
        }
    };
    let cert = certify(&f, &opts);
    Ok((f, cert))
}

/// `(C̃, c̃)` with `E|Z_t| ≤ C̃e^{−c̃t}|Z₀|`.
fn rate_pair(f: &DistanceFn) -> (f64, f64) {
    let (a1_ln, a2) = f.comparability_ln();
    (a2 * (-a1_ln).exp(), f.rate())
}

fn scheme_or_default(cfg: &ExperimentConfig) -> Arc<dyn Scheme> {
    cfg.scheme.clone().unwrap_or_else(|| Arc::new(Reflection::default()))
}

fn ensemble(cfg: &ExperimentConfig, scheme: &dyn Scheme) -> Result<Vec<CoupledPath>, RunError> {
    let r = &cfg.run;
    let opts = SimOptions { t_end: r.t_end, dt: r.dt, record_every: r.record_every, log_jumps: false };
    let (x0, y0) = (r.x0.clone(), r.y0.clone());
    Ok(run_ensemble(&cfg.model, scheme, |_| (x0.clone(), y0.clone()), &opts, r.n_paths, r.seed, r.workers)?)
}

fn run_certify(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<(), RunError> {
    let report = validate_assumptions(&cfg.model, ValidationOptions { seed: cfg.run.seed, ..ValidationOptions::default() });
    rec.report("assumptions", &report);
    let (f, cert) = certified_distance(cfg)?;
    rec.passed = cert.passed;
    rec.scalars.insert("max_residual".into(), cert.max_residual);
    for (k, v) in &cert.constants_used.values {
        rec.scalars.insert(k.clone(), *v);
    }
    rec.report("certificate", &cert);
    if cfg.outputs.formats.iter().any(|f| f == "csv") {
        let path = cfg.outputs.directory.join("distance.csv");
        let r_hi = 1.5 * f.affine_from().max(1.0);
        write_csv(&path, &["r", "f", "df", "d2f"], f.tabulate(r_hi, 2000).into_iter().map(|a| a.to_vec()))?;
        rec.artifacts.push(path.display().to_string());
    }
    Ok(())
}

fn run_simulate(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<(), RunError> {
    let scheme = scheme_or_default(cfg);
    let paths = ensemble(cfg, scheme.as_ref())?;
    let id = |r: f64| r;
    let curve = mean_curve(&paths, &id);
    rec.series.insert("mean_abs_z".into(), curve.iter().map(|p| SeriesPoint { t: p.t, value: p.mean, stderr: p.stderr, bound: f64::NAN }).collect());
    let coupled = paths.iter().filter(|p| p.glued).count() as f64 / paths.len().max(1) as f64;
    rec.scalars.insert("coupled_fraction".into(), coupled);
    let proposed: u64 = paths.iter().map(|p| p.proposed_jumps).sum();
    let accepted: u64 = paths.iter().map(|p| p.accepted_jumps).sum();
    rec.scalars.insert("accepted_jump_rate".into(), accepted as f64 / (paths.len().max(1) as f64 * cfg.run.t_end.max(f64::MIN_POSITIVE)));
    rec.scalars.insert("proposed_jumps".into(), proposed as f64);
    let window = (cfg.ini.f64_or("simulate", "t_lo", cfg.run.t_end / 5.0)?, cfg.ini.f64_or("simulate", "t_hi", cfg.run.t_end)?);
    if paths.len() >= 100 {
        let fit = fit_decay(&paths, &id, window)?;
        rec.scalars.insert("decay_rate".into(), fit.rate);
        rec.scalars.insert("decay_rate_stderr".into(), fit.stderr_rate);
        rec.report("decay_fit", &fit);
    }
    let threshold = crate::coupling::default_threshold(cfg.run.dt);
    rec.scalars.insert("couple_threshold".into(), threshold);
    for (i, p) in paths.iter().take(cfg.outputs.traces).enumerate() {
        let path = cfg.outputs.directory.join(format!("trace_{i}.csv"));
        let d = p.dim;
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((0..d).map(|k| format!("x{k}")));
        header.extend((0..d).map(|k| format!("y{k}")));
        header.push("abs_z".into());
        let h: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        write_csv(
            &path,
            &h,
            (0..p.len()).map(|k| {
                let mut row = vec![p.times[k]];
                row.extend_from_slice(p.x_at(k));
                row.extend_from_slice(p.y_at(k));
                row.push(p.z_norm(k));
                row
            }),
        )?;
        rec.artifacts.push(path.display().to_string());
    }
    Ok(())
}

fn run_contract(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<(), RunError> {
    let (f, cert) = certified_distance(cfg)?;
    rec.report("certificate", &cert);
    let scheme = scheme_or_default(cfg);
    let paths = ensemble(cfg, scheme.as_ref())?;
    let z0: f64 = cfg.run.x0.iter().zip(&cfg.run.y0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut passed = cert.passed;
    match &f {
        DistanceFn::Brownian(_) => {
            let (c_big, c) = rate_pair(&f);
            let id = |r: f64| r;
            let curve = mean_curve(&paths, &id);
            let pts: Vec<SeriesPoint> = curve.iter().map(|p| SeriesPoint { t: p.t, value: p.mean, stderr: p.stderr, bound: c_big * (-c * p.t).exp() * z0 }).collect();
            passed &= pts.iter().all(|p| p.value <= p.bound * (1.0 + 1e-12) + 3.0 * p.stderr);
            rec.series.insert("mean_abs_z".into(), pts);
            let window = (cfg.ini.f64_or("contract", "t_lo", 1.0f64.min(cfg.run.t_end / 2.0))?, cfg.ini.f64_or("contract", "t_hi", cfg.run.t_end)?);
            let fit = fit_decay(&paths, &id, window)?;
            let ok = fit.rate >= c - 3.0 * fit.stderr_rate;
            passed &= ok;
            rec.scalars.insert("certified_rate".into(), c);
            rec.scalars.insert("certified_prefactor".into(), c_big);
            rec.scalars.insert("fitted_rate".into(), fit.rate);
            rec.scalars.insert("fitted_rate_stderr".into(), fit.stderr_rate);
            rec.report("decay_fit", &fit);
        }
        DistanceFn::Jump(_) => {
            let fz = |r: f64| f.value(r);
            let curve = mean_curve(&paths, &fz);
            let f0 = f.value(z0);
            let c1 = f.rate();
            let pts: Vec<SeriesPoint> = curve.iter().map(|p| SeriesPoint { t: p.t, value: p.mean, stderr: p.stderr, bound: (-c1 * p.t).exp() * f0 }).collect();
            passed &= pts.iter().all(|p| p.value <= p.bound * (1.0 + 1e-12) + 3.0 * p.stderr);
            rec.series.insert("mean_f1_z".into(), pts);
            rec.scalars.insert("c1_ln".into(), f.rate_ln());
        }
    }
    rec.scalars.insert("coupled_fraction".into(), paths.iter().filter(|p| p.glued).count() as f64 / paths.len().max(1) as f64);
    if cfg.ini.get("contract", "coupling_property") == Some("true") {
        let n = cfg.run.n_paths;
        let burn = cfg.ini.f64_or("contract", "burn_in", 1.0)?;
        let pairs = burn_in_pairs(&cfg.model, &cfg.run.x0, burn, cfg.run.dt, 2 * n, cfg.run.seed, cfg.run.workers)?;
        let opts = SimOptions { t_end: cfg.run.t_end, dt: cfg.run.dt, record_every: usize::MAX, log_jumps: false };
        let ps = run_ensemble(&cfg.model, scheme.as_ref(), |i| pairs[i].clone(), &opts, 2 * n, cfg.run.seed ^ 0x5eed, cfg.run.workers)?;
        let xs: Vec<f64> = ps[..n].iter().map(|p| p.final_x()[0]).collect();
        let ys: Vec<f64> = ps[n..].iter().map(|p| p.final_y()[0]).collect();
        let ks = ks_two_sample(&xs, &ys, 1e-3);
        passed &= !ks.reject;
        rec.report("coupling_property", &ks);
    }
    rec.passed = passed;
    Ok(())
}

fn grid(hi: f64, n: usize) -> Vec<f64> {
    (1..=n).map(|k| hi * k as f64 / n as f64).collect()
}

fn run_transport(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<(), RunError> {
    let ini = &cfg.ini;
    let (f, cert) = certified_distance(cfg)?;
    rec.report("certificate", &cert);
    let (c_big, c) = rate_pair(&f);
    let k = RateConstants { c_tilde_prefactor: c_big, c_tilde: c, c_prefactor: c_big, c };
    let mut betas = Vec::new();
    if let Some(j) = &cfg.model.jump {
        betas.push(BetaTerm::from_jump(j)?);
    }
    if let Some(m) = &cfg.model.levy {
        betas.push(BetaTerm::from_levy(m)?);
    }
    let horizon = ini.f64_or("transport", "horizon", cfg.run.t_end)?;
    let s_inf = cfg.model.diffusion.sigma_inf;
    let s1 = cfg.model.diffusion.sigma1_norm();
    let kind = ini.get("transport", "kind").unwrap_or("alpha_T");
    let dev = match kind {
        "alpha_T" => DeviationFunction::alpha_t(horizon, k, s_inf, s1, betas),
        "alpha_T_path" => DeviationFunction::alpha_t_path(horizon, k, s_inf, s1, betas),
        "alpha_infty" => {
            let (d, gap) = DeviationFunction::alpha_infty(k, s_inf, s1, betas, &grid(1.0, 10))?;
            rec.scalars.insert("alpha_infty_gap".into(), gap);
            d
        }
        other => return Err(ini.field_error("transport", "kind", format!("unknown deviation kind `{other}`")).into()),
    };
    let n = ini.usize_or("transport", "n_samples", 100_000)?;
    let path_space = kind == "alpha_T_path";
    let sim_t = if kind == "alpha_infty" { ini.f64_or("transport", "horizon", cfg.run.t_end)? } else { horizon };
    let model = &cfg.model;
    let x0 = cfg.run.x0.clone();
    let dt = cfg.run.dt;
    let seed = cfg.run.seed;
    let samples: Vec<f64> = in_pool(cfg.run.workers, || {
        (0..n)
            .into_par_iter()
            .map(|i| -> Result<f64, CouplingError> {
                let mut rng = stream(seed, Purpose::Samples, i as u64);
                if path_space {
                    let opts = SimOptions { t_end: sim_t, dt, record_every: 1, log_jumps: false };
                    let p = simulate_coupled(model, &Synchronous, &x0, &x0, &opts, &mut rng)?;
                    let xs: Vec<f64> = (0..p.len()).map(|k| p.x_at(k)[0]).collect();
                    Ok(path_average(&p.times, &xs))
                } else {
                    Ok(simulate_marginal(model, &x0, sim_t, dt, &mut rng)?[0])
                }
            })
            .collect::<Result<_, _>>()
    })?;
    let lam_hi = ini.f64_or("transport", "lambda_max", 4.0)?.min(0.5 * dev.lam_max());
    let lams = grid(lam_hi, ini.usize_or("transport", "lambda_points", 10)?);
    let mgf = mgf_check(&samples, &dev, &lams, true);
    let rs = grid(ini.f64_or("transport", "r_max", 1.0)?, ini.usize_or("transport", "r_points", 10)?);
    let tail = tail_check(&samples, &dev, &rs, ini.usize_or("transport", "n_block", 10)?)?;
    rec.passed = cert.passed && mgf.passed && tail.passed;
    rec.series.insert("mgf".into(), mgf.rows.iter().map(|r| SeriesPoint { t: r.lam, value: r.empirical, stderr: r.stderr, bound: r.bound }).collect());
    rec.series.insert("tail".into(), tail.rows.iter().map(|r| SeriesPoint { t: r.r, value: r.empirical, stderr: r.wilson_hi - r.empirical, bound: r.bound }).collect());
    rec.scalars.insert("gaussian_coefficient".into(), dev.gaussian);
    rec.scalars.insert("lambda_max".into(), dev.lam_max());
    rec.report("mgf", &mgf);
    rec.report("tail", &tail);
    let table = dev.table(&grid(ini.f64_or("transport", "r_table_max", 2.0)?, 200))?;
    let path = cfg.outputs.directory.join("alpha.csv");
    write_csv(&path, &["r", "alpha"], table.into_iter().map(|(r, a)| vec![r, a]))?;
    rec.artifacts.push(path.display().to_string());
    Ok(())
}

fn run_malliavin(cfg: &ExperimentConfig, rec: &mut ResultRecord) -> Result<(), RunError> {
    let ini = &cfg.ini;
    let (f, cert) = certified_distance(cfg)?;
    rec.report("certificate", &cert);
    let (c_big, c) = rate_pair(&f);
    let first = |x: &[f64]| x[0];
    let t = ini.f64_req("malliavin", "t")?;
    let n_paths = ini.usize_or("malliavin", "n_paths", cfg.run.n_paths)?;
    match ini.get("malliavin", "mode").unwrap_or("difference") {
        "difference" => {
            let scheme = scheme_or_default(cfg);
            let horizons = ini.list_opt("malliavin", "horizons")?.ok_or_else(|| ini.missing("malliavin", "horizons"))?;
            let mark = ini.list_opt("malliavin", "mark")?.ok_or_else(|| ini.missing("malliavin", "mark"))?;
            let opts = DifferenceOptions { t, horizons, n_paths, dt: cfg.run.dt, seed: cfg.run.seed, workers: cfg.run.workers };
            let rep = malliavin_difference_experiment(&cfg.model, scheme.as_ref(), &first, &cfg.run.x0, &mark, (c_big, c), &opts)?;
            rec.passed = cert.passed && rep.passed;
            rec.series.insert("difference".into(), rep.rows.iter().map(|r| SeriesPoint { t: r.gap, value: r.estimate, stderr: r.stderr, bound: r.bound }).collect());
            rec.report("difference", &rep);
        }
        "brownian" => {
            let h = ini.f64_or("malliavin", "h", 1.0)?;
            let mut opts = DirectionalOptions::new(t, n_paths, cfg.run.dt, cfg.run.seed);
            opts.workers = cfg.run.workers;
            if let Some(e) = ini.list_opt("malliavin", "eps")? {
                opts.eps = e;
            }
            let hv = move |_t: f64, _x: &[f64], out: &mut [f64]| out.iter_mut().for_each(|v| *v = h);
            let rep = malliavin_brownian_experiment(&cfg.model, &hv, h.abs(), &first, &cfg.run.x0, (c_big, c), &opts)?;
            rec.passed = cert.passed && rep.within_bound;
            rec.scalars.insert("estimate".into(), rep.estimate);
            rec.scalars.insert("stderr".into(), rep.stderr);
            rec.scalars.insert("bound".into(), rep.bound);
            rec.report("directional", &rep);
        }
        other => return Err(ini.field_error("malliavin", "mode", format!("unknown mode `{other}` (difference, brownian)")).into()),
    }
    Ok(())
}

/// Executes one subcommand and writes its outputs.
pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<ResultRecord, RunError> {
    let start = Instant::now();
    let dir = &cfg.outputs.directory;
    fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    let mut rec = ResultRecord::new(cmd, &cfg.hash);
    match cmd {
        Command::Certify => run_certify(cfg, &mut rec)?,
        Command::Simulate => run_simulate(cfg, &mut rec)?,
        Command::Contract => run_contract(cfg, &mut rec)?,
        Command::Transport => run_transport(cfg, &mut rec)?,
        Command::Malliavin => run_malliavin(cfg, &mut rec)?,
    }
    if cfg.outputs.formats.iter().any(|f| f == "csv") {
        for p in emit_plotdata(&rec, dir)? {
            rec.artifacts.push(p.display().to_string());
        }
    }
    rec.wall_time = start.elapsed().as_secs_f64();
    if cfg.outputs.formats.iter().any(|f| f == "json") {
        let path = dir.join(format!("{}.json", cmd.name()));
        rec.artifacts.push(path.display().to_string());
        write_json(&path, &rec)?;
    }
    Ok(rec)
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn run_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let Some(path) = cli.config.as_deref() else {
        eprintln!("error: --config PATH is required");
        return 2;
    };
    let cfg = match ExperimentConfig::load(path, cli.seed, cli.workers, cli.out.clone()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 2;
        }
    };
    match run(cli.command, &cfg) {
        Ok(rec) => {
            println!("{} {}", rec.experiment_id, if rec.passed { "PASS" } else { "FAIL" });
            if rec.passed {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn main_entry() -> i32 {
    run_args(std::env::args_os())
}
