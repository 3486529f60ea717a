//! Model parameters and the unpinned equations of motion.
//!
//! Generalized coordinates are `q = (z_b, y, delta)`: body height, compression
//! of the parallel spring (mover below its equilibrium, `y >= 0`), and
//! compression of the series spring, signed so that the foot height is
//! `p_f = z_b + delta - l0`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hybrid::DomainId;
use crate::Real;

const NOMINAL_JSON: &str = include_str!("../data/nominal.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Series spring only; the mover is coupled to the body by damping alone.
    SingleSpring,
    /// Series spring plus a parallel spring with a hardstop at its equilibrium.
    DoubleSpring,
}

#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("{0} must be strictly positive")]
    NonPositive(&'static str),
    #[error("{0} must be non-negative")]
    Negative(&'static str),
    #[error("total mass must exceed mover mass plus foot mass")]
    MassBudget,
    #[error("parallel stiffness must be positive for the double-spring variant and zero for the single-spring variant")]
    VariantStiffness,
    #[error("{0} is not finite")]
    NotFinite(&'static str),
    #[error("invalid parameter file: {0}")]
    Parse(String),
}

/// Linear motor constants used to convert force and mover velocity into
/// current and voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct MotorModel<T> {
    /// Force constant, N/A.
    #[serde(rename = "k_f")]
    pub force_constant: T,
    /// Back-emf constant, V·s/m.
    #[serde(rename = "k_b")]
    pub back_emf: T,
    /// Winding resistance, Ω.
    #[serde(rename = "r")]
    pub resistance: T,
}

impl<T: Real> MotorModel<T> {
    pub fn validate(&self) -> Result<(), ParamError> {
        check_positive("k_f", self.force_constant)?;
        check_positive("r", self.resistance)?;
        check_non_negative("k_b", self.back_emf)
    }

    pub fn cast<U: Real>(&self) -> MotorModel<U> {
        MotorModel {
            force_constant: U::lit(self.force_constant.to_f64_lossy()),
            back_emf: U::lit(self.back_emf.to_f64_lossy()),
            resistance: U::lit(self.resistance.to_f64_lossy()),
        }
    }
}

/// Physical parameters of the hopper. SI units throughout.
///
/// Fields are public for convenience; code that builds parameters from
/// untrusted input should call [`ModelParams::validate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ModelParams<T> {
    /// Total robot mass (body + mover + foot), kg.
    #[serde(rename = "m0")]
    pub total_mass: T,
    #[serde(rename = "mm")]
    pub mover_mass: T,
    #[serde(rename = "mf")]
    pub foot_mass: T,
    /// Viscous damping on the body's vertical motion, N·s/m.
    #[serde(rename = "c_b")]
    pub body_damping: T,
    #[serde(rename = "k_p")]
    pub parallel_stiffness: T,
    /// Damping between mover and body, N·s/m.
    #[serde(rename = "c_p")]
    pub parallel_damping: T,
    #[serde(rename = "k_s")]
    pub series_stiffness: T,
    #[serde(rename = "c_s")]
    pub series_damping: T,
    #[serde(rename = "g")]
    pub gravity: T,
    /// Rest-geometry offset: the foot touches the ground when `z_b + delta = l0`.
    #[serde(rename = "l0")]
    pub rest_length: T,
    /// Mover range of motion, m.
    #[serde(rename = "y_max")]
    pub mover_travel: T,
    /// Actuator force limit, N.
    #[serde(rename = "u_max")]
    pub force_limit: T,
    pub motor: MotorModel<T>,
    pub variant: Variant,
}

impl ModelParams<f64> {
    /// The shipped nominal parameter set for the requested variant.
    ///
    /// These are calibration values for a plausible ~2.5 kg robot, not
    /// measured hardware data. The single-spring set is the double-spring set
    /// with the parallel spring removed.
    pub fn nominal(variant: Variant) -> Self {
        let base: ModelParams<f64> =
            serde_json::from_str(NOMINAL_JSON).expect("embedded nominal parameters parse");
        base.validate().expect("embedded nominal parameters are valid");
        base.with_variant(variant)
    }

    pub fn from_json(text: &str) -> Result<Self, ParamError> {
        let params: ModelParams<f64> =
            serde_json::from_str(text).map_err(|e| ParamError::Parse(e.to_string()))?;
        params.validate()?;
        Ok(params)
    }
}

impl<T: Real> ModelParams<T> {
    pub fn validate(&self) -> Result<(), ParamError> {
        let named = [
            ("m0", self.total_mass),
            ("mm", self.mover_mass),
            ("mf", self.foot_mass),
            ("c_b", self.body_damping),
            ("k_p", self.parallel_stiffness),
            ("c_p", self.parallel_damping),
            ("k_s", self.series_stiffness),
            ("c_s", self.series_damping),
            ("g", self.gravity),
            ("l0", self.rest_length),
            ("y_max", self.mover_travel),
            ("u_max", self.force_limit),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(ParamError::NotFinite(name));
            }
        }
        check_positive("m0", self.total_mass)?;
        check_positive("mm", self.mover_mass)?;
        check_positive("mf", self.foot_mass)?;
        if self.total_mass <= self.mover_mass + self.foot_mass {
            return Err(ParamError::MassBudget);
        }
        check_positive("k_s", self.series_stiffness)?;
        check_non_negative("c_b", self.body_damping)?;
        check_non_negative("c_p", self.parallel_damping)?;
        check_non_negative("c_s", self.series_damping)?;
        check_positive("g", self.gravity)?;
        check_positive("l0", self.rest_length)?;
        check_positive("y_max", self.mover_travel)?;
        check_positive("u_max", self.force_limit)?;
        let kp_ok = match self.variant {
            Variant::DoubleSpring => self.parallel_stiffness > T::zero(),
            Variant::SingleSpring => self.parallel_stiffness == T::zero(),
        };
        if !kp_ok {
            return Err(ParamError::VariantStiffness);
        }
        self.motor.validate()
    }

    /// Same physical robot as the other variant. Converting to the
    /// single-spring variant zeroes the parallel stiffness; converting to the
    /// double-spring variant requires a positive stiffness to already be set
    /// (otherwise the result fails validation).
    pub fn with_variant(mut self, variant: Variant) -> Self {
        if variant == Variant::SingleSpring {
            self.parallel_stiffness = T::zero();
        }
        self.variant = variant;
        self
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let c = |x: T| U::lit(x.to_f64_lossy());
        ModelParams {
            total_mass: c(self.total_mass),
            mover_mass: c(self.mover_mass),
            foot_mass: c(self.foot_mass),
            body_damping: c(self.body_damping),
            parallel_stiffness: c(self.parallel_stiffness),
            parallel_damping: c(self.parallel_damping),
            series_stiffness: c(self.series_stiffness),
            series_damping: c(self.series_damping),
            gravity: c(self.gravity),
            rest_length: c(self.rest_length),
            mover_travel: c(self.mover_travel),
            force_limit: c(self.force_limit),
            motor: self.motor.cast(),
            variant: self.variant,
        }
    }

    /// Constant, symmetric positive definite inertia matrix.
    pub fn mass_matrix(&self) -> Matrix3<T> {
        let (m0, mm, mf) = (self.total_mass, self.mover_mass, self.foot_mass);
        let z = T::zero();
        Matrix3::new(m0, -mm, mf, -mm, mm, z, mf, z, mf)
    }

    /// Closed-form inverse of [`Self::mass_matrix`].
    pub fn inverse_mass_matrix(&self) -> Matrix3<T> {
        // With the body mass mb = m0 - mm - mf the inverse is
        //   [[1, 1, -1], [1, 1 + mb/mm, -1], [-1, -1, 1 + mb/mf]] / mb
        let mb = self.total_mass - self.mover_mass - self.foot_mass;
        let one = T::one();
        let a = one + mb / self.mover_mass;
        let b = one + mb / self.foot_mass;
        Matrix3::new(one, one, -one, one, a, -one, -one, -one, b) / mb
    }

    /// Input map: the actuator acts on the `y` coordinate.
    pub fn input_map(&self) -> Vector3<T> {
        Vector3::new(T::zero(), T::one(), T::zero())
    }

    /// Parallel spring force `k_p y + c_p ydot` (damping only for the
    /// single-spring variant).
    pub fn parallel_force(&self, y: T, ydot: T) -> T {
        self.parallel_stiffness * y + self.parallel_damping * ydot
    }

    pub fn series_force(&self, delta: T, delta_dot: T) -> T {
        self.series_stiffness * delta + self.series_damping * delta_dot
    }

    /// Damping, spring and gravity terms `H(q, qdot)`.
    pub fn bias(&self, q: &Vector3<T>, qdot: &Vector3<T>) -> Vector3<T> {
        let g = self.gravity;
        Vector3::new(
            self.body_damping * qdot[0] + self.total_mass * g,
            self.parallel_force(q[1], qdot[1]) - self.mover_mass * g,
            self.series_force(q[2], qdot[2]) + self.foot_mass * g,
        )
    }

    pub fn bias_vector(&self, state: &State<T>) -> Vector3<T> {
        self.bias(&state.q, &state.qdot)
    }

    pub fn foot_height_of(&self, q: &Vector3<T>) -> T {
        q[0] + q[2] - self.rest_length
    }

    pub fn foot_height(&self, state: &State<T>) -> T {
        self.foot_height_of(&state.q)
    }

    pub fn kinetic_energy(&self, qdot: &Vector3<T>) -> T {
        (qdot.transpose() * self.mass_matrix() * qdot)[0] * T::lit(0.5)
    }

    /// Gravitational plus elastic potential, datum at `q = 0`.
    pub fn potential_energy(&self, q: &Vector3<T>) -> T {
        let g = self.gravity;
        let half = T::lit(0.5);
        let gravity = self.total_mass * g * q[0] - self.mover_mass * g * q[1] + self.foot_mass * g * q[2];
        let elastic = half * self.parallel_stiffness * q[1] * q[1] + half * self.series_stiffness * q[2] * q[2];
        gravity + elastic
    }

    pub fn mechanical_energy(&self, state: &State<T>) -> T {
        self.kinetic_energy(&state.qdot) + self.potential_energy(&state.q)
    }

    /// Series spring compression when the robot stands still on the ground.
    pub fn static_series_compression(&self) -> T {
        (self.total_mass - self.foot_mass) * self.gravity / self.series_stiffness
    }
}

/// Generalized positions and velocities tagged with the active domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct State<T: Real> {
    pub q: Vector3<T>,
    pub qdot: Vector3<T>,
    pub domain: DomainId,
    /// Time since the last domain entry, s.
    pub t_local: T,
}

impl<T: Real> State<T> {
    pub fn new(q: Vector3<T>, qdot: Vector3<T>, domain: DomainId) -> Self {
        Self { q, qdot, domain, t_local: T::zero() }
    }

    pub fn body_height(&self) -> T {
        self.q[0]
    }

    pub fn mover_compression(&self) -> T {
        self.q[1]
    }

    pub fn series_compression(&self) -> T {
        self.q[2]
    }

    pub fn foot_velocity(&self) -> T {
        self.qdot[0] + self.qdot[2]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }

    /// Infinity norm over positions and velocities.
    pub fn norm_inf(&self) -> T {
        self.q.iter().chain(self.qdot.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }
}

fn check_positive<T: Real>(name: &'static str, v: T) -> Result<(), ParamError> {
    if v > T::zero() {
        Ok(())
    } else {
        Err(ParamError::NonPositive(name))
    }
}

fn check_non_negative<T: Real>(name: &'static str, v: T) -> Result<(), ParamError> {
    if v >= T::zero() {
        Ok(())
    } else {
        Err(ParamError::Negative(name))
    }
}
