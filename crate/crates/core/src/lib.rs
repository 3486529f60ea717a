//! Simulation, trajectory optimization and stability analysis for
//! vertically-constrained, three-mass, spring-driven hopping robots.
//!
//! The robot is a body carrying an actuated mover and a foot. A series spring
//! sits between body and foot; the double-spring variant adds a parallel
//! spring between body and mover, whose equilibrium is guarded by a hardstop.
//! Ground contact and the hardstop make the system hybrid: the [`hybrid`]
//! module defines domains, guards and plastic-impact resets, [`integrate`]
//! chains them into trajectories, [`optimize`] finds minimum-effort periodic
//! hops, and [`analyze`] reports Poincaré stability and energy efficiency.
//!
//! The dynamics layer (`model`, `hybrid`, `control`, `integrate`) is generic
//! over the scalar type; `f64` aliases are exported at the crate root and are
//! what the optimization and analysis layers use.

pub mod analyze;
pub mod calibrate;
pub mod control;
pub mod hybrid;
pub mod integrate;
pub mod model;
pub mod nlp;
pub mod optimize;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point scalar the dynamics are generic over.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Serialize + DeserializeOwned + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub use hybrid::{DomainId, GuardKind, HybridGraph};
pub use model::Variant;

pub type ModelParams = model::ModelParams<f64>;
pub type MotorModel = model::MotorModel<f64>;
pub type State = model::State<f64>;
pub type ControlSignal = control::ControlSignal<f64>;
pub type ControlPolicy = control::ControlPolicy<f64>;
pub type PdGains = control::PdGains<f64>;
pub type IntegratorConfig = integrate::IntegratorConfig<f64>;
pub type PhaseTrajectory = integrate::PhaseTrajectory<f64>;
pub type HybridTrajectory = integrate::HybridTrajectory<f64>;
pub type StopCondition = integrate::StopCondition<f64>;

pub type ModelParams32 = model::ModelParams<f32>;
pub type State32 = model::State<f32>;
