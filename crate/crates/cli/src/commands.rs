//! Subcommand bodies. Each writes its artifacts under the output directory
//! and prints one line per artifact.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hopper::analyze::{self, ComparisonTable, EnergyReport, StabilityReport};
use hopper::calibrate::{self, DropTestLog};
use hopper::integrate::Simulator;
use hopper::optimize::{solve_hop, HopProblem, HopSolution};
use hopper::{ControlPolicy, HybridGraph, ModelParams, StopCondition, Variant};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{read_text, RunConfig};
use crate::CliError;

fn slug(variant: Variant) -> &'static str {
    match variant {
        Variant::SingleSpring => "single",
        Variant::DoubleSpring => "double",
    }
}

fn tag(variant: Variant, h: f64) -> String {
    format!("{}_h{h:.3}", slug(variant))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    std::fs::create_dir_all(&cfg.out).map_err(|source| CliError::Output { path: cfg.out.clone(), source })?;
    Ok(&cfg.out)
}

fn write_text(path: PathBuf, text: &str) -> Result<(), CliError> {
    std::fs::write(&path, text).map_err(|source| CliError::Output { path: path.clone(), source })?;
    println!("{}", path.display());
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    let file = File::create(path).map_err(|source| CliError::Output { path: path.to_path_buf(), source })?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Output { path: path.to_path_buf(), source: std::io::Error::other(e) }
}

fn problem(cfg: &RunConfig, params: ModelParams, h: f64) -> HopProblem {
    let p = HopProblem::new(params, h);
    match cfg.knots {
        Some(k) => p.with_knots(k),
        None => p,
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Serialize)]
struct SolveSummary {
    #[serde(rename = "H_f")]
    h_f: f64,
    converged: bool,
    status: String,
    iterations: usize,
    cost: f64,
    peak_force: f64,
    max_equality_residual: f64,
    error: Option<String>,
}

pub fn optimize(cfg: &RunConfig) -> Result<(), CliError> {
    let heights = cfg.require_heights()?;
    let params = cfg.params_for(None);
    let variant = params.variant;
    let results: Vec<(f64, Result<HopSolution, String>)> = heights
        .par_iter()
        .map(|&h| (h, solve_hop(&problem(cfg, params, h), None).map_err(|e| e.to_string())))
        .collect();
    let dir = out_dir(cfg)?;
    let mut summary = Vec::new();
    let mut failed = 0;
    for (h, res) in &results {
        match res {
            Ok(sol) => {
                let name = tag(variant, *h);
                write_text(dir.join(format!("solution_{name}.json")), &sol.to_json().map_err(numerical)?)?;
                let path = dir.join(format!("control_{name}.csv"));
                let file = File::create(&path).map_err(|source| CliError::Output { path: path.clone(), source })?;
                sol.control.write_csv(BufWriter::new(file), Some(&params.motor)).map_err(numerical)?;
                println!("{}", path.display());
                if !sol.converged {
                    failed += 1;
                }
                summary.push(SolveSummary {
                    h_f: *h,
                    converged: sol.converged,
                    status: format!("{:?}", sol.diagnostics.status),
                    iterations: sol.diagnostics.iterations,
                    cost: sol.cost,
                    peak_force: sol.peak_force(),
                    max_equality_residual: sol.diagnostics.residuals.max_equality(),
                    error: None,
                });
            }
            Err(e) => {
                failed += 1;
                summary.push(SolveSummary {
                    h_f: *h,
                    converged: false,
                    status: "error".into(),
                    iterations: 0,
                    cost: f64::NAN,
                    peak_force: f64::NAN,
                    max_equality_residual: f64::NAN,
                    error: Some(e.clone()),
                });
            }
        }
    }
    write_json(dir.join(format!("summary_{}.json", slug(variant))), &summary)?;
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} of {} solves did not converge", results.len())));
    }
    Ok(())
}

fn load_solution(path: &Path) -> Result<HopSolution, CliError> {
    HopSolution::from_json(&read_text(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn policy_for(cfg: &RunConfig, sol: &HopSolution) -> Result<ControlPolicy, CliError> {
    match cfg.pd {
        Some(gains) => analyze::pd_policy(sol, gains).map_err(numerical),
        None => Ok(sol.policy()),
    }
}

pub fn simulate(cfg: &RunConfig, solution: &Path, dt: f64) -> Result<(), CliError> {
    if !(dt > 0.0) {
        return Err(CliError::Config(format!("dt {dt} must be positive")));
    }
    let sol = load_solution(solution)?;
    let params = sol.params;
    let policy = policy_for(cfg, &sol)?;
    let graph = HybridGraph::selected_cycle(params.variant);
    let sim = Simulator::new(&params, &graph, &policy);
    let stop = StopCondition { max_hops: cfg.hops, t_max: 5.0 * cfg.hops as f64 + 5.0, max_ground_time: 5.0 };
    let traj = sim.simulate_hybrid(&sol.apex_state(), 0.0, &stop).map_err(numerical)?;
    let samples = traj.resample(&params, &policy, dt).map_err(numerical)?;

    let dir = out_dir(cfg)?;
    let name = tag(params.variant, sol.clearance);
    let series = dir.join(format!("timeseries_{name}.csv"));
    let mut w = csv_writer(&series)?;
    let err = csv_err(&series);
    w.write_record(["t", "domain", "z_b", "y", "delta", "dz_b", "dy", "ddelta", "u", "F_ground"]).map_err(&err)?;
    for (t, s) in &samples {
        let (q, v) = (&s.state.q, &s.state.qdot);
        let mut row = vec![t.to_string(), s.state.domain.to_string()];
        row.extend([q[0], q[1], q[2], v[0], v[1], v[2], s.u, s.ground_force()].map(|x| x.to_string()));
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|source| CliError::Output { path: series.clone(), source })?;
    println!("{}", series.display());

    let portrait = dir.join(format!("phase_portrait_{name}.csv"));
    let mut w = csv_writer(&portrait)?;
    let err = csv_err(&portrait);
    w.write_record(["z_b", "dz_b"]).map_err(&err)?;
    for (_, s) in &samples {
        w.write_record([s.state.q[0].to_string(), s.state.qdot[0].to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| CliError::Output { path: portrait.clone(), source })?;
    println!("{}", portrait.display());

    let apexes = dir.join(format!("apexes_{name}.csv"));
    let mut w = csv_writer(&apexes)?;
    let err = csv_err(&apexes);
    w.write_record(["hop", "t", "foot_height", "relative_error", "y"]).map_err(&err)?;
    for (i, a) in traj.apexes.iter().enumerate() {
        let hf = params.foot_height(&a.state);
        let rel = (hf - sol.clearance) / sol.clearance;
        let row = [(i + 1).to_string(), a.t.to_string(), hf.to_string(), rel.to_string(), a.state.q[1].to_string()];
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|source| CliError::Output { path: apexes.clone(), source })?;
    println!("{}", apexes.display());
    let travel = params.mover_travel;
    if let Some((t, s)) = samples.iter().find(|(_, s)| s.state.q[1] < -1e-9 || s.state.q[1] > travel + 1e-9) {
        let hop = traj.apexes.iter().take_while(|a| a.t <= *t).count() + 1;
        return Err(CliError::Numerical(format!(
            "mover left its travel range [0, {travel}] m during hop {hop} (t = {t:.4} s, y = {:.4} m)",
            s.state.q[1]
        )));
    }
    if traj.apexes.len() < cfg.hops {
        return Err(CliError::Numerical(format!("only {} of {} hops completed", traj.apexes.len(), cfg.hops)));
    }
    Ok(())
}

pub fn stability(cfg: &RunConfig, solution: Option<&Path>) -> Result<(), CliError> {
    let sol = match solution {
        Some(path) => load_solution(path)?,
        None => {
            let [h] = cfg.require_heights()? else {
                return Err(CliError::Config("stability without --solution needs exactly one height".into()));
            };
            solve_hop(&problem(cfg, cfg.params_for(None), *h), None)
                .and_then(HopSolution::require_converged)
                .map_err(numerical)?
        }
    };
    let policy = policy_for(cfg, &sol)?;
    let report: StabilityReport =
        analyze::solution_stability(&sol.params, &policy, &sol, cfg.fd_step).map_err(numerical)?;
    let dir = out_dir(cfg)?;
    let mode = if cfg.pd.is_some() { "pd" } else { "open_loop" };
    let name = format!("{}_{mode}", tag(sol.params.variant, sol.clearance));
    write_json(dir.join(format!("stability_{name}.json")), &report)?;
    let path = dir.join(format!("eigenvalues_{name}.csv"));
    let mut w = csv_writer(&path)?;
    let err = csv_err(&path);
    w.write_record(["index", "magnitude"]).map_err(&err)?;
    for (i, m) in report.eigenvalue_magnitudes.iter().enumerate() {
        w.write_record([i.to_string(), m.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| CliError::Output { path: path.clone(), source })?;
    println!("{}", path.display());
    println!("lambda_max = {} ({})", report.lambda_max, if report.stable { "stable" } else { "not stable" });
    Ok(())
}

#[derive(Serialize)]
struct Report<'a> {
    table: &'a ComparisonTable,
    single: &'a [EnergyReport],
    double: &'a [EnergyReport],
}

pub fn report(cfg: &RunConfig, fixture: bool) -> Result<(), CliError> {
    let dir_name: &str;
    let table = if fixture {
        dir_name = "published_comparison";
        let (single, double) = analyze::published_comparison();
        let table = analyze::compare_models(&single, &double).map_err(numerical)?;
        let dir = out_dir(cfg)?;
        write_json(dir.join(format!("{dir_name}.json")), &table)?;
        table
    } else {
        dir_name = "report";
        let heights = cfg.require_heights()?;
        let jobs: Vec<(Variant, f64)> = [Variant::SingleSpring, Variant::DoubleSpring]
            .into_iter()
            .flat_map(|v| heights.iter().map(move |&h| (v, h)))
            .collect();
        let reports: Vec<Result<EnergyReport, CliError>> = jobs
            .par_iter()
            .map(|&(v, h)| {
                let params = cfg.params_for(Some(v));
                let sol = solve_hop(&problem(cfg, params, h), None)
                    .and_then(HopSolution::require_converged)
                    .map_err(|e| CliError::Numerical(format!("{} at H_f = {h}: {e}", slug(v))))?;
                analyze::energy_report(&params, &sol).map_err(numerical)
            })
            .collect();
        let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
        let (single, double) = reports.split_at(heights.len());
        let table = analyze::compare_models(single, double).map_err(numerical)?;
        let dir = out_dir(cfg)?;
        write_json(dir.join(format!("{dir_name}.json")), &Report { table: &table, single, double })?;
        table
    };
    let csv = table.to_csv_string().map_err(numerical)?;
    write_text(cfg.out.join(format!("{dir_name}.csv")), &csv)
}

pub fn fit(cfg: &RunConfig, log: &Path, initial_height: f64, free: &str) -> Result<(), CliError> {
    let file = File::open(log).map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    let data = DropTestLog::read_csv(file, initial_height)
        .map_err(|e| CliError::Config(format!("{}: {e}", log.display())))?;
    let free = calibrate::parse_free_set(free).map_err(|e| CliError::Config(e.to_string()))?;
    let guess = cfg.params_for(None);
    let report = calibrate::fit_parameters(&data, &guess, &free).map_err(numerical)?;
    let dir = out_dir(cfg)?;
    write_json(dir.join("fit.json"), &report)?;
    let path = dir.join("fit_history.csv");
    let mut w = csv_writer(&path)?;
    let err = csv_err(&path);
    w.write_record(["step", "rms"]).map_err(&err)?;
    for (i, r) in report.history.iter().enumerate() {
        w.write_record([i.to_string(), r.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|source| CliError::Output { path: path.clone(), source })?;
    println!("{}", path.display());
    println!("residual = {} m", report.residual);
    Ok(())
}

pub fn synth_log(cfg: &RunConfig, initial_height: f64, duration: f64, dt: f64, noise: f64) -> Result<(), CliError> {
    if !(duration > 0.0 && dt > 0.0 && noise >= 0.0 && initial_height >= 0.0) {
        return Err(CliError::Config("duration and dt must be positive, noise and height non-negative".into()));
    }
    let params = cfg.params_for(None);
    let log = calibrate::synthesize_drop_log(&params, initial_height, duration, dt, noise, cfg.seed)
        .map_err(numerical)?;
    let dir = out_dir(cfg)?;
    let path = dir.join("drop_log.csv");
    let file = File::create(&path).map_err(|source| CliError::Output { path: path.clone(), source })?;
    log.write_csv(BufWriter::new(file)).map_err(numerical)?;
    println!("{}", path.display());
    Ok(())
}
