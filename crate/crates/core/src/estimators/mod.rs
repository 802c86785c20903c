//! Localization techniques built on the shared map measurement model.
//!
//! * [`particle`]: map matching against a fixed map and Rao-Blackwellized
//!   particle-filter SLAM, where every particle learns its own map.
//! * [`array`]: magnetometer-array dead reckoning with a local first-order
//!   field model, joint displacement estimation between two scans, the
//!   matching Cramér-Rao bound, and velocity from the field differential.
//!
//! Navigation states use the attitude convention of [`crate::geometry`]:
//! `q` rotates body vectors into the map frame.

pub mod array;
pub mod particle;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{boxplus, exp_map, RotationTangent, UnitOrientation};

pub use array::{
    crlb_displacement, dead_reckon_step, displacement_gn, velocity_from_field, CrlbBound, DeadReckonConfig,
    DeadReckonState, DisplacementEstimate, DisplacementPrior, LocalMapState,
};
pub use particle::{
    map_match_step, mm_likelihood, slam_step, stacked_log_likelihood, systematic_resample, FilterConfig,
    Observation, Particle, ParticleSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavState {
    /// Position in the map frame, m.
    #[serde(rename = "r_m")]
    pub r: Vector3<f64>,
    /// Velocity in the map frame, m/s.
    #[serde(rename = "v_mps")]
    pub v: Vector3<f64>,
    pub q: UnitOrientation,
}

impl NavState {
    pub fn new(r: Vector3<f64>, v: Vector3<f64>, q: UnitOrientation) -> Self {
        Self { r, v, q }
    }

    pub fn at_rest(r: Vector3<f64>, q: UnitOrientation) -> Self {
        Self::new(r, Vector3::zeros(), q)
    }

    pub fn is_finite(&self) -> bool {
        self.r.iter().chain(self.v.iter()).all(|x| x.is_finite()) && self.q.components().iter().all(|x| x.is_finite())
    }
}

/// Body-frame motion over one interval with process noise on
/// `(position, attitude tangent)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryInput {
    pub dt: f64,
    pub v_body: Vector3<f64>,
    pub omega_body: Vector3<f64>,
    /// Covariance of the additive noise on `(r, ε)`; m², rad².
    pub noise_cov: Matrix6<f64>,
}

impl OdometryInput {
    pub fn new(dt: f64, v_body: Vector3<f64>, omega_body: Vector3<f64>, noise_cov: Matrix6<f64>) -> Result<Self> {
        let u = Self { dt, v_body, omega_body, noise_cov };
        u.validate()?;
        Ok(u)
    }

    pub fn noiseless(dt: f64, v_body: Vector3<f64>, omega_body: Vector3<f64>) -> Self {
        Self { dt, v_body, omega_body, noise_cov: Matrix6::zeros() }
    }

    /// Diagonal noise with per-axis position and attitude standard deviations.
    pub fn with_noise_std(mut self, position_std: f64, attitude_std: f64) -> Self {
        let (p, a) = (position_std * position_std, attitude_std * attitude_std);
        self.noise_cov = Matrix6::from_diagonal(&Vector6::new(p, p, p, a, a, a));
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::validation("odometry dt must be positive"));
        }
        if self.v_body.iter().chain(self.omega_body.iter()).any(|x| !x.is_finite()) {
            return Err(Error::validation("odometry rates must be finite"));
        }
        let q = &self.noise_cov;
        if (q - q.transpose()).amax() > 1e-12 * q.amax() {
            return Err(Error::validation("odometry noise covariance must be symmetric"));
        }
        if q.symmetric_eigenvalues().min() < -1e-12 * q.amax() {
            return Err(Error::validation("odometry noise covariance must be positive semidefinite"));
        }
        Ok(())
    }

    /// Body-frame translation `v·dt`.
    pub fn translation(&self) -> Vector3<f64> {
        self.v_body * self.dt
    }

    /// Body-frame rotation increment `ω·dt`.
    pub fn rotation(&self) -> RotationTangent {
        RotationTangent(self.omega_body * self.dt)
    }

    /// Symmetric square root of the noise covariance.
    pub fn noise_sqrt(&self) -> Matrix6<f64> {
        let eig = self.noise_cov.symmetric_eigen();
        let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        eig.eigenvectors * Matrix6::from_diagonal(&d) * eig.eigenvectors.transpose()
    }
}

/// Noise-free motion: `r' = r + R(q)·v·dt`, `q' = q ⊗ exp(ω·dt)`; the
/// velocity becomes the map-frame odometry velocity.
pub fn propagate(x: &NavState, u: &OdometryInput) -> NavState {
    NavState {
        r: x.r + x.q.rotate(&u.translation()),
        v: x.q.rotate(&u.v_body),
        q: boxplus(&x.q, &u.rotation()),
    }
}

/// [`propagate`] plus a draw from `N(0, Q)` on `(r, ε)`, with `noise_sqrt`
/// from [`OdometryInput::noise_sqrt`].
pub fn propagate_noisy<R: Rng + ?Sized>(x: &NavState, u: &OdometryInput, noise_sqrt: &Matrix6<f64>, rng: &mut R) -> NavState {
    let mut next = propagate(x, u);
    let z = Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
    let n = noise_sqrt * z;
    next.r += n.fixed_rows::<3>(0);
    let tangent = Vector3::from(n.fixed_rows::<3>(3));
    if tangent != Vector3::zeros() {
        next.q = next.q.compose(&exp_map(&RotationTangent(tangent)));
    }
    next
}
