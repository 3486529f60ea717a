//! Actuator force policies: open-loop playback of optimized force profiles,
//! optional PD feedback on the mover coordinate, and motor current/voltage
//! conversion.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid::{DomainId, GuardKind};
use crate::model::{MotorModel, State};
use crate::Real;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("control knots must start at t = 0 and be strictly increasing (knot {0})")]
    BadKnots(usize),
    #[error("control signal is empty")]
    Empty,
    #[error("|u| = {value} exceeds the force limit {limit} at knot {index}")]
    ForceLimit { index: usize, value: f64, limit: f64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv: missing column '{0}'")]
    MissingColumn(&'static str),
}

/// Piecewise-linear force profile over policy time, active only in the
/// domains listed in `scope`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ControlSignal<T> {
    /// `(t, u)` pairs; `t` starts at zero and strictly increases.
    pub knots: Vec<(T, T)>,
    pub scope: Vec<DomainId>,
}

impl<T: Real> ControlSignal<T> {
    pub fn new(knots: Vec<(T, T)>, scope: Vec<DomainId>) -> Result<Self, ControlError> {
        if knots.is_empty() {
            return Err(ControlError::Empty);
        }
        if knots[0].0 != T::zero() {
            return Err(ControlError::BadKnots(0));
        }
        if let Some(i) = knots.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(ControlError::BadKnots(i + 1));
        }
        Ok(Self { knots, scope })
    }

    /// A signal that never pushes.
    pub fn zero(scope: Vec<DomainId>) -> Self {
        Self { knots: vec![(T::zero(), T::zero())], scope }
    }

    pub fn is_active(&self, domain: DomainId) -> bool {
        self.scope.contains(&domain)
    }

    pub fn duration(&self) -> T {
        self.knots.last().map(|k| k.0).unwrap_or_else(T::zero)
    }

    /// Linear interpolation between knots; zero before the first and after
    /// the last knot.
    pub fn value(&self, t: T) -> T {
        let n = self.knots.len();
        if n == 0 || t < T::zero() || t > self.knots[n - 1].0 {
            return T::zero();
        }
        if n == 1 {
            return self.knots[0].1;
        }
        // First knot with time > t.
        let i = self.knots.partition_point(|k| k.0 <= t);
        if i == n {
            return self.knots[n - 1].1;
        }
        let (t0, u0) = self.knots[i - 1];
        let (t1, u1) = self.knots[i];
        u0 + (u1 - u0) * (t - t0) / (t1 - t0)
    }

    pub fn peak(&self) -> T {
        self.knots.iter().fold(T::zero(), |m, k| m.max(k.1.abs()))
    }

    pub fn check_limit(&self, limit: T) -> Result<(), ControlError> {
        match self.knots.iter().position(|k| k.1.abs() > limit) {
            Some(index) => Err(ControlError::ForceLimit {
                index,
                value: self.knots[index].1.to_f64_lossy(),
                limit: limit.to_f64_lossy(),
            }),
            None => Ok(()),
        }
    }

    /// Exact integral of `u^2` over the piecewise-linear profile.
    pub fn effort(&self) -> T {
        let three = T::lit(3.0);
        self.knots
            .windows(2)
            .map(|w| {
                let h = w[1].0 - w[0].0;
                let (a, b) = (w[0].1, w[1].1);
                h * (a * a + a * b + b * b) / three
            })
            .fold(T::zero(), |s, x| s + x)
    }

    /// Writes `t,u` rows, optionally followed by the motor current column.
    pub fn write_csv<W: Write>(&self, out: W, motor: Option<&MotorModel<T>>) -> Result<(), ControlError> {
        let mut w = csv::Writer::from_writer(out);
        if motor.is_some() {
            w.write_record(["t", "u", "I"])?;
        } else {
            w.write_record(["t", "u"])?;
        }
        for &(t, u) in &self.knots {
            let mut row = vec![fmt(t), fmt(u)];
            if let Some(m) = motor {
                row.push(fmt(u / m.force_constant));
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a `t,u` table (extra columns are ignored).
    pub fn read_csv<R: Read>(input: R, scope: Vec<DomainId>) -> Result<Self, ControlError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &'static str| headers.iter().position(|h| h.trim() == name).ok_or(ControlError::MissingColumn(name));
        let (ti, ui) = (col("t")?, col("u")?);
        let mut knots = Vec::new();
        for record in r.records() {
            let record = record?;
            let parse = |i: usize| -> Result<T, ControlError> {
                record[i].trim().parse::<f64>().map(T::lit).map_err(|_| ControlError::BadKnots(knots.len()))
            };
            knots.push((parse(ti)?, parse(ui)?));
        }
        Self::new(knots, scope)
    }
}

fn fmt<T: Real>(x: T) -> String {
    format!("{}", x.to_f64_lossy())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PdGains<T> {
    /// Proportional gain, N/m.
    pub kp: T,
    /// Derivative gain, N·s/m.
    pub kd: T,
}

/// Mover reference `(t, y, ydot)` samples, linearly interpolated and held
/// constant outside the sampled interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MoverReference<T> {
    pub samples: Vec<(T, T, T)>,
}

impl<T: Real> MoverReference<T> {
    pub fn at(&self, t: T) -> (T, T) {
        let s = &self.samples;
        match s.len() {
            0 => (T::zero(), T::zero()),
            _ if t <= s[0].0 => (s[0].1, s[0].2),
            n if t >= s[n - 1].0 => (s[n - 1].1, s[n - 1].2),
            _ => {
                let i = s.partition_point(|k| k.0 <= t);
                let (t0, y0, v0) = s[i - 1];
                let (t1, y1, v1) = s[i];
                let w = (t - t0) / (t1 - t0);
                (y0 + (y1 - y0) * w, v0 + (v1 - v0) * w)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Feedback<T> {
    pub gains: PdGains<T>,
    pub reference: MoverReference<T>,
    /// Domains in which the feedback acts.
    pub scope: Vec<DomainId>,
}

/// Feedforward playback plus optional PD feedback on `y`, saturated to the
/// force limit. Policy time restarts at every `clock_reset` event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ControlPolicy<T> {
    pub feedforward: ControlSignal<T>,
    pub feedback: Option<Feedback<T>>,
    pub clock_reset: GuardKind,
    pub force_limit: T,
}

impl<T: Real> ControlPolicy<T> {
    pub fn open_loop(feedforward: ControlSignal<T>, force_limit: T) -> Self {
        Self { feedforward, feedback: None, clock_reset: GuardKind::Touchdown, force_limit }
    }

    /// No actuation at all.
    pub fn passive(force_limit: T) -> Self {
        Self::open_loop(ControlSignal::zero(Vec::new()), force_limit)
    }

    pub fn with_feedback(mut self, feedback: Feedback<T>) -> Self {
        self.feedback = Some(feedback);
        self
    }
}

/// Actuator force for `state` at policy time `t`.
pub fn evaluate_policy<T: Real>(policy: &ControlPolicy<T>, state: &State<T>, t: T) -> T {
    let mut u = T::zero();
    if policy.feedforward.is_active(state.domain) {
        u += policy.feedforward.value(t);
    }
    if let Some(fb) = &policy.feedback {
        if fb.scope.contains(&state.domain) {
            let (y_ref, ydot_ref) = fb.reference.at(t);
            u += fb.gains.kp * (y_ref - state.q[1]) + fb.gains.kd * (ydot_ref - state.qdot[1]);
        }
    }
    let limit = policy.force_limit;
    u.max(-limit).min(limit)
}

/// Anything that produces an actuator force during simulation.
pub trait Actuation<T: Real>: Sync {
    fn force(&self, state: &State<T>, t: T) -> T;

    /// Event at which policy time restarts from zero.
    fn clock_reset(&self) -> Option<GuardKind> {
        None
    }
}

impl<T: Real> Actuation<T> for ControlPolicy<T> {
    fn force(&self, state: &State<T>, t: T) -> T {
        evaluate_policy(self, state, t)
    }

    fn clock_reset(&self) -> Option<GuardKind> {
        Some(self.clock_reset)
    }
}

impl<T: Real> Actuation<T> for ControlSignal<T> {
    fn force(&self, state: &State<T>, t: T) -> T {
        if self.is_active(state.domain) {
            self.value(t)
        } else {
            T::zero()
        }
    }
}

/// Zero actuator force.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passive;

impl<T: Real> Actuation<T> for Passive {
    fn force(&self, _state: &State<T>, _t: T) -> T {
        T::zero()
    }
}

/// Motor current and terminal voltage for force `u` at mover velocity `ydot`:
/// `I = u / k_f`, `V = I R + k_b ydot`.
pub fn force_to_current<T: Real>(motor: &MotorModel<T>, u: T, ydot: T) -> (T, T) {
    let current = u / motor.force_constant;
    (current, current * motor.resistance + motor.back_emf * ydot)
}
