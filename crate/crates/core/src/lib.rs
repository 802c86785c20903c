//! Localization from spatial variations in the magnetic field.
//!
//! The crate provides analytic ground-truth fields, basis-function field
//! maps with recursive learning, magnetometer models and calibration, and
//! three Bayesian localization techniques built on one measurement model:
//! particle-filter map matching, Rao-Blackwellized particle-filter SLAM and
//! magnetometer-array dead reckoning. The [`harness`] module ties them into
//! reproducible, scenario-driven simulations.

pub mod error;
pub mod estimators;
pub mod geometry;
pub mod harness;
pub mod linalg;
pub mod map_learning;
pub mod map_model;
pub mod rng;
pub mod sensors;
pub mod truth_field;

pub use error::{Error, Result};
pub use estimators::{NavState, OdometryInput, ParticleSet};
pub use geometry::{RotationTangent, UnitOrientation};
pub use map_model::{BasisSpec, MapPosterior, MeasurementKind};
pub use sensors::{ArrayGeometry, FieldSample, SensorModel};
pub use truth_field::TruthField;

pub use nalgebra;
