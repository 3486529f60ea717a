//! Spring and damper identification from unactuated drop tests.
//!
//! The robot is released at rest from a known foot height and falls onto the
//! ground with zero motor current. A drop is simulated on the full domain
//! graph and compared to the logged channels; the free coefficients are fitted
//! by Levenberg–Marquardt on guess-normalized parameters with a
//! finite-difference Jacobian, first on growing prefixes of the log.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::Passive;
use crate::hybrid::{DomainId, HybridGraph};
use crate::integrate::{HybridTrajectory, IntegratorConfig, SimError, Simulator, StopCondition};
use crate::model::{ModelParams, ParamError, State, Variant};

type Params = ModelParams<f64>;

/// Smallest fitted value as a fraction of the guess.
const MIN_RATIO: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CalibrateError {
    #[error("residual {after:.3e} did not improve on the guess ({before:.3e})")]
    NoImprovement { before: f64, after: f64 },
    #[error("unknown parameter '{0}' (expected c_b, c_p, c_s, k_p or k_s)")]
    UnknownParameter(String),
    #[error("log: {0}")]
    InvalidLog(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Coefficients that can be identified from a drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FitParam {
    #[serde(rename = "c_b")]
    BodyDamping,
    #[serde(rename = "c_p")]
    ParallelDamping,
    #[serde(rename = "c_s")]
    SeriesDamping,
    #[serde(rename = "k_p")]
    ParallelStiffness,
    #[serde(rename = "k_s")]
    SeriesStiffness,
}

impl FitParam {
    pub const ALL: [FitParam; 5] = [
        FitParam::BodyDamping,
        FitParam::ParallelDamping,
        FitParam::SeriesDamping,
        FitParam::ParallelStiffness,
        FitParam::SeriesStiffness,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FitParam::BodyDamping => "c_b",
            FitParam::ParallelDamping => "c_p",
            FitParam::SeriesDamping => "c_s",
            FitParam::ParallelStiffness => "k_p",
            FitParam::SeriesStiffness => "k_s",
        }
    }

    pub fn get(self, p: &Params) -> f64 {
        match self {
            FitParam::BodyDamping => p.body_damping,
            FitParam::ParallelDamping => p.parallel_damping,
            FitParam::SeriesDamping => p.series_damping,
            FitParam::ParallelStiffness => p.parallel_stiffness,
            FitParam::SeriesStiffness => p.series_stiffness,
        }
    }

    pub fn set(self, p: &mut Params, value: f64) {
        match self {
            FitParam::BodyDamping => p.body_damping = value,
            FitParam::ParallelDamping => p.parallel_damping = value,
            FitParam::SeriesDamping => p.series_damping = value,
            FitParam::ParallelStiffness => p.parallel_stiffness = value,
            FitParam::SeriesStiffness => p.series_stiffness = value,
        }
    }
}

impl fmt::Display for FitParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FitParam {
    type Err = CalibrateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FitParam::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| CalibrateError::UnknownParameter(s.to_string()))
    }
}

/// Logged drop: sample times and whichever of `z_b`, `y`, `δ` were recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropTestLog {
    pub times: Vec<f64>,
    pub z_b: Option<Vec<f64>>,
    pub y: Option<Vec<f64>>,
    pub delta: Option<Vec<f64>>,
    /// Foot height above the ground at release, m.
    pub initial_height: f64,
}

impl DropTestLog {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// The first `n` samples.
    pub fn prefix(&self, n: usize) -> DropTestLog {
        let n = n.min(self.len());
        let cut = |c: &Option<Vec<f64>>| c.as_ref().map(|c| c[..n].to_vec());
        DropTestLog {
            times: self.times[..n].to_vec(),
            z_b: cut(&self.z_b),
            y: cut(&self.y),
            delta: cut(&self.delta),
            initial_height: self.initial_height,
        }
    }

    fn channels(&self) -> Vec<(usize, &Vec<f64>)> {
        [(0, &self.z_b), (1, &self.y), (2, &self.delta)]
            .into_iter()
            .filter_map(|(i, c)| c.as_ref().map(|c| (i, c)))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CalibrateError> {
        if self.times.len() < 2 {
            return Err(CalibrateError::InvalidLog("need at least two samples".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(CalibrateError::InvalidLog("times must be strictly increasing".into()));
        }
        let channels = self.channels();
        if channels.is_empty() {
            return Err(CalibrateError::InvalidLog("no position channel".into()));
        }
        if channels.iter().any(|(_, c)| c.len() != self.times.len()) {
            return Err(CalibrateError::InvalidLog("channel length differs from time column".into()));
        }
        if !(self.initial_height >= 0.0) {
            return Err(CalibrateError::InvalidLog("initial height must be non-negative".into()));
        }
        Ok(())
    }

    /// Reads a `t,z_b,y,delta` CSV; any of the position columns may be absent.
    pub fn read_csv<R: Read>(input: R, initial_height: f64) -> Result<Self, CalibrateError> {
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let t_col = col("t").ok_or_else(|| CalibrateError::InvalidLog("missing 't' column".into()))?;
        for h in headers.iter() {
            if !matches!(h.trim(), "t" | "z_b" | "y" | "delta") {
                return Err(CalibrateError::InvalidLog(format!("unexpected column '{h}'")));
            }
        }
        let cols = [col("z_b"), col("y"), col("delta")];
        let mut times = Vec::new();
        let mut data: [Option<Vec<f64>>; 3] = cols.map(|c| c.map(|_| Vec::new()));
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64, CalibrateError> {
                rec.get(i)
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| CalibrateError::InvalidLog(format!("bad number on data line {}", line + 1)))
            };
            times.push(parse(t_col)?);
            for (c, d) in cols.iter().zip(data.iter_mut()) {
                if let (Some(c), Some(d)) = (c, d) {
                    d.push(parse(*c)?);
                }
            }
        }
        let [z_b, y, delta] = data;
        let log = DropTestLog { times, z_b, y, delta, initial_height };
        log.validate()?;
        Ok(log)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), CalibrateError> {
        let mut w = csv::Writer::from_writer(out);
        let channels = self.channels();
        let names = ["z_b", "y", "delta"];
        let mut header = vec!["t"];
        header.extend(channels.iter().map(|(i, _)| names[*i]));
        w.write_record(&header)?;
        for (k, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(channels.iter().map(|(_, c)| c[k].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Held-at-rest state before release: springs balance gravity with the body
/// fixed, foot `initial_height` above the ground.
pub fn release_state(params: &Params, initial_height: f64) -> State<f64> {
    let g = params.gravity;
    let delta = -params.foot_mass * g / params.series_stiffness;
    let z_b = initial_height + params.rest_length - delta;
    match params.variant {
        Variant::DoubleSpring => {
            let y = params.mover_mass * g / params.parallel_stiffness;
            let y = y.min(params.mover_travel);
            State::new(Vector3::new(z_b, y, delta), Vector3::zeros(), DomainId::D2)
        }
        Variant::SingleSpring => State::new(Vector3::new(z_b, 0.0, delta), Vector3::zeros(), DomainId::Flight),
    }
}

fn drop_config() -> IntegratorConfig<f64> {
    IntegratorConfig { rtol: 1e-11, atol: 1e-13, ..IntegratorConfig::default() }
}

/// Unactuated drop from rest lasting `duration` seconds.
pub fn simulate_drop(params: &Params, initial_height: f64, duration: f64) -> Result<HybridTrajectory<f64>, SimError> {
    let graph = HybridGraph::full(params.variant);
    let sim = Simulator::with_config(params, &graph, &Passive, drop_config());
    let stop = StopCondition { max_hops: usize::MAX, t_max: duration, max_ground_time: duration + 1.0 };
    sim.simulate_hybrid(&release_state(params, initial_height), 0.0, &stop)
}

/// Simulated drop sampled like `log`, noise-free or with Gaussian noise of
/// standard deviation `noise` on every channel.
pub fn synthesize_drop_log(
    params: &Params,
    initial_height: f64,
    duration: f64,
    dt: f64,
    noise: f64,
    seed: u64,
) -> Result<DropTestLog, CalibrateError> {
    let n = (duration / dt).floor() as usize + 1;
    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let traj = simulate_drop(params, initial_height, times[n - 1] + dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| CalibrateError::InvalidLog(e.to_string()))?;
    let mut chans = [Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n)];
    for &t in &times {
        let s = traj.state_at_time(t).ok_or_else(|| CalibrateError::InvalidLog(format!("no state at t = {t}")))?;
        for (i, c) in chans.iter_mut().enumerate() {
            let e = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            c.push(s.q[i] + e);
        }
    }
    let [z_b, y, delta] = chans;
    Ok(DropTestLog { times, z_b: Some(z_b), y: Some(y), delta: Some(delta), initial_height })
}

/// Simulation-minus-log deviations over every logged channel, with the log
/// time axis shifted so the first sample is the release.
pub fn drop_residuals(params: &Params, log: &DropTestLog) -> Result<DVector<f64>, CalibrateError> {
    let t0 = log.times[0];
    let span = log.times[log.len() - 1] - t0;
    let traj = simulate_drop(params, log.initial_height, span * (1.0 + 1e-9) + 1e-9)?;
    let channels = log.channels();
    let mut r = DVector::zeros(channels.len() * log.len());
    let mut k = 0;
    for (j, &t) in log.times.iter().enumerate() {
        let s = traj
            .state_at_time((t - t0).min(traj.duration()))
            .ok_or_else(|| CalibrateError::InvalidLog(format!("simulation ended before t = {t}")))?;
        for (i, c) in &channels {
            r[k] = s.q[*i] - c[j];
            k += 1;
        }
    }
    Ok(r)
}

fn rms(r: &DVector<f64>) -> f64 {
    (r.norm_squared() / r.len().max(1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: Params,
    /// RMS deviation at the fitted parameters, m.
    pub residual: f64,
    pub initial_residual: f64,
    pub iterations: usize,
    /// Accepted RMS values, starting with the guess.
    pub history: Vec<f64>,
    pub free: Vec<FitParam>,
}

/// Log fractions fitted before the whole log. A long drop rings through many
/// bounces, and a guess whose stance frequency is off by a few percent lines
/// up with the wrong bounce; the short windows pull it into the right basin.
const HORIZONS: [f64; 2] = [0.2, 0.45];

/// Fits the `free` coefficients to the log, starting from `guess`.
pub fn fit_parameters(
    log: &DropTestLog,
    guess: &Params,
    free: &BTreeSet<FitParam>,
) -> Result<FitReport, CalibrateError> {
    log.validate()?;
    guess.validate()?;
    let free: Vec<FitParam> = free.iter().copied().collect();
    let r0 = drop_residuals(guess, log)?;
    let initial = rms(&r0);
    let mut report = FitReport {
        params: *guess,
        residual: initial,
        initial_residual: initial,
        iterations: 0,
        history: vec![initial],
        free: free.clone(),
    };
    if free.is_empty() {
        return Ok(report);
    }

    // Parameters are normalized by the guess. Log coordinates would flatten
    // the gradient of weakly observed dampers as they approach zero.
    let scale: Vec<f64> = free.iter().map(|f| if f.get(guess) > 0.0 { f.get(guess) } else { 1.0 }).collect();
    let fit = Fit { guess, free: &free, scale: &scale };
    let start = DVector::from_iterator(free.len(), free.iter().zip(&scale).map(|(f, s)| f.get(guess) / s));

    let mut windowed = start.clone();
    for frac in HORIZONS {
        let n = (frac * log.len() as f64).round() as usize;
        if n < 10 {
            continue;
        }
        let part = log.prefix(n);
        if let Some(r) = fit.eval(&part, &windowed) {
            windowed = fit.levenberg_marquardt(&part, windowed, r).0;
        }
    }
    // The windowed estimate is kept only if it already improves on the guess.
    let (mut theta, mut r) = (start, r0);
    if let Some(rw) = fit.eval(log, &windowed).filter(|rw| rms(rw) < initial) {
        report.history.push(rms(&rw));
        (theta, r) = (windowed, rw);
    }
    let (theta, r, steps) = fit.levenberg_marquardt(log, theta, r);
    report.history.extend(steps.iter().copied());
    report.iterations = report.history.len() - 1;
    report.params = fit.params(&theta);
    report.residual = rms(&r);
    finish(report)
}

struct Fit<'a> {
    guess: &'a Params,
    free: &'a [FitParam],
    scale: &'a [f64],
}

impl Fit<'_> {
    fn params(&self, theta: &DVector<f64>) -> Params {
        let mut p = *self.guess;
        for (k, f) in self.free.iter().enumerate() {
            f.set(&mut p, self.scale[k] * theta[k]);
        }
        p
    }

    fn eval(&self, log: &DropTestLog, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let p = self.params(theta);
        p.validate().ok()?;
        drop_residuals(&p, log).ok().filter(|r| r.iter().all(|v| v.is_finite()))
    }

    /// Damped Gauss–Newton from `theta` with residual `r`. Returns the final
    /// point, its residual, and the RMS after every accepted step.
    fn levenberg_marquardt(
        &self,
        log: &DropTestLog,
        mut theta: DVector<f64>,
        mut r: DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>, Vec<f64>) {
        let n = theta.len();
        let mut history = Vec::new();
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        let step = 1e-6;
        for _ in 0..100 {
            // Central differences, kept inside the positive orthant.
            let cols: Vec<Option<DVector<f64>>> = (0..n)
                .into_par_iter()
                .map(|k| {
                    let mut tp = theta.clone();
                    let mut tm = theta.clone();
                    let h = step * theta[k].max(1e-3);
                    tp[k] += h;
                    tm[k] = (tm[k] - h).max(MIN_RATIO);
                    let width = tp[k] - tm[k];
                    Some((self.eval(log, &tp)? - self.eval(log, &tm)?) / width)
                })
                .collect();
            let mut jac = DMatrix::zeros(r.len(), n);
            for (k, c) in cols.into_iter().enumerate() {
                match c {
                    Some(c) => jac.set_column(k, &c),
                    None => return (theta, r, history),
                }
            }
            let jtj = jac.tr_mul(&jac);
            let jtr = jac.tr_mul(&r);
            if jtr.amax() <= 1e-14 * (1.0 + cost) {
                break;
            }
            let mut accepted = false;
            for _ in 0..20 {
                let mut a = jtj.clone();
                for i in 0..n {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
                }
                let Some(dtheta) = a.cholesky().map(|c| c.solve(&(-&jtr))) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial = (&theta + &dtheta).map(|v| v.max(MIN_RATIO));
                if let Some(rt) = self.eval(log, &trial) {
                    let ct = rt.norm_squared();
                    if ct < cost {
                        let rel = (cost - ct) / cost.max(f64::MIN_POSITIVE);
                        theta = trial;
                        r = rt;
                        cost = ct;
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        history.push(rms(&r));
                        if rel < 1e-12 || dtheta.amax() < 1e-10 {
                            return (theta, r, history);
                        }
                        break;
                    }
                }
                lambda *= 10.0;
            }
            if !accepted {
                break;
            }
        }
        (theta, r, history)
    }
}

fn finish(report: FitReport) -> Result<FitReport, CalibrateError> {
    if report.residual >= report.initial_residual && report.initial_residual > 1e-12 {
        return Err(CalibrateError::NoImprovement { before: report.initial_residual, after: report.residual });
    }
    Ok(report)
}

/// Parses a comma-separated list such as `k_p,k_s,c_s`.
pub fn parse_free_set(text: &str) -> Result<BTreeSet<FitParam>, CalibrateError> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(FitParam::from_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_round_trip() {
        for p in FitParam::ALL {
            assert_eq!(p.as_str().parse::<FitParam>().unwrap(), p);
        }
        assert!(matches!("m0".parse::<FitParam>(), Err(CalibrateError::UnknownParameter(_))));
        assert_eq!(parse_free_set("k_p, k_s").unwrap().len(), 2);
    }

    #[test]
    fn release_state_is_at_requested_height() {
        let p = ModelParams::nominal(Variant::DoubleSpring);
        let s = release_state(&p, 0.25);
        assert!((p.foot_height(&s) - 0.25).abs() < 1e-15);
        assert_eq!(s.domain, DomainId::D2);
    }

    #[test]
    fn csv_round_trip_with_missing_channel() {
        let text = "t,z_b,delta\n0,0.7,-0.0004\n0.001,0.69999,-0.0004\n";
        let log = DropTestLog::read_csv(text.as_bytes(), 0.3).unwrap();
        assert!(log.y.is_none());
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn rejects_unordered_times() {
        let text = "t,z_b\n0.0,0.7\n0.0,0.7\n";
        assert!(matches!(DropTestLog::read_csv(text.as_bytes(), 0.3), Err(CalibrateError::InvalidLog(_))));
    }

    #[test]
    fn empty_free_set_returns_guess() {
        let truth = ModelParams::nominal(Variant::DoubleSpring);
        let log = synthesize_drop_log(&truth, 0.2, 0.4, 2e-3, 0.0, 0).unwrap();
        let mut guess = truth;
        guess.series_stiffness *= 1.1;
        let rep = fit_parameters(&log, &guess, &BTreeSet::new()).unwrap();
        assert_eq!(rep.params, guess);
        let r = drop_residuals(&guess, &log).unwrap();
        assert_eq!(rep.residual, rms(&r));
        assert!(rep.residual > 1e-5);
    }

    #[test]
    fn residual_ignores_time_offset() {
        let truth = ModelParams::nominal(Variant::SingleSpring);
        let mut guess = truth;
        guess.body_damping *= 1.2;
        let log = synthesize_drop_log(&truth, 0.2, 0.4, 2e-3, 0.0, 0).unwrap();
        let mut shifted = log.clone();
        shifted.times.iter_mut().for_each(|t| *t += 12.5);
        let a = drop_residuals(&guess, &log).unwrap();
        let b = drop_residuals(&guess, &shifted).unwrap();
        assert!((a - b).amax() < 1e-9);
    }
}
