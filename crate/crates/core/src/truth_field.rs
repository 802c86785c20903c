//! Analytic ground-truth magnetic fields: a uniform background plus a sum of
//! point dipoles, with exact Jacobians, the scalar potential of the static
//! part and an optional spatially uniform temporal disturbance.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// μ0/4π in T·m/A.
pub const MU0_OVER_4PI: f64 = 1e-7;

pub const DEFAULT_EXCLUSION_RADIUS: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DipoleSource {
    #[serde(rename = "position_m")]
    pub position: Vector3<f64>,
    #[serde(rename = "moment_am2")]
    pub moment: Vector3<f64>,
}

/// `amplitude · sin(2πt / period) · direction`, identical at every position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalDisturbance {
    #[serde(rename = "amplitude_t")]
    pub amplitude: f64,
    #[serde(rename = "period_s")]
    pub period: f64,
    pub direction: Vector3<f64>,
}

impl TemporalDisturbance {
    pub fn value(&self, t: f64) -> Vector3<f64> {
        let d = self.direction.normalize();
        d * (self.amplitude * (2.0 * std::f64::consts::PI * t / self.period).sin())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthField {
    #[serde(rename = "background_t")]
    pub background: Vector3<f64>,
    #[serde(default)]
    pub sources: Vec<DipoleSource>,
    #[serde(default)]
    pub temporal: Option<TemporalDisturbance>,
    #[serde(rename = "exclusion_radius_m", default = "default_exclusion")]
    pub exclusion_radius: f64,
}

fn default_exclusion() -> f64 {
    DEFAULT_EXCLUSION_RADIUS
}

impl TruthField {
    pub fn uniform(background: Vector3<f64>) -> Self {
        Self {
            background,
            sources: Vec::new(),
            temporal: None,
            exclusion_radius: DEFAULT_EXCLUSION_RADIUS,
        }
    }

    pub fn with_source(mut self, position: Vector3<f64>, moment: Vector3<f64>) -> Self {
        self.sources.push(DipoleSource { position, moment });
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.exclusion_radius >= 0.0) {
            return Err(Error::validation("exclusion radius must be non-negative"));
        }
        if !self.background.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("background field must be finite"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            let m = s.moment.norm();
            if !(m > 0.0 && m.is_finite()) || !s.position.iter().all(|x| x.is_finite()) {
                return Err(Error::validation(format!(
                    "dipole {i}: moment must be finite and nonzero"
                )));
            }
        }
        if let Some(td) = &self.temporal {
            if !(td.period > 0.0) || !(td.direction.norm() > 0.0) || !td.amplitude.is_finite() {
                return Err(Error::validation(
                    "temporal disturbance needs a positive period and nonzero direction",
                ));
            }
        }
        Ok(())
    }

    fn offsets(&self, r: &Vector3<f64>) -> Result<Vec<(Vector3<f64>, f64, &DipoleSource)>> {
        self.sources
            .iter()
            .map(|s| {
                let d = r - s.position;
                let n = d.norm();
                if n < self.exclusion_radius || n == 0.0 {
                    Err(Error::SourceTooClose {
                        distance: n,
                        radius: self.exclusion_radius,
                    })
                } else {
                    Ok((d, n, s))
                }
            })
            .collect()
    }

    /// Distance from `r` to the nearest source (infinite without sources).
    pub fn clearance(&self, r: &Vector3<f64>) -> f64 {
        self.sources
            .iter()
            .map(|s| (r - s.position).norm())
            .fold(f64::INFINITY, f64::min)
    }

    /// Static part of the field (background plus dipoles).
    pub fn static_field(&self, r: &Vector3<f64>) -> Result<Vector3<f64>> {
        let mut b = self.background;
        for (d, n, s) in self.offsets(r)? {
            let n2 = n * n;
            let n5 = n2 * n2 * n;
            b += (3.0 * d * s.moment.dot(&d) - s.moment * n2) * (MU0_OVER_4PI / n5);
        }
        Ok(b)
    }

    pub fn eval_field(&self, r: &Vector3<f64>, t: f64) -> Result<Vector3<f64>> {
        let mut b = self.static_field(r)?;
        if let Some(td) = &self.temporal {
            b += td.value(t);
        }
        Ok(b)
    }

    /// `J[i][j] = ∂B_i/∂r_j`. The temporal term is spatially uniform, so the
    /// Jacobian does not depend on `t`.
    pub fn eval_jacobian(&self, r: &Vector3<f64>, _t: f64) -> Result<Matrix3<f64>> {
        let mut jac = Matrix3::zeros();
        for (d, n, s) in self.offsets(r)? {
            let m = s.moment;
            let md = m.dot(&d);
            let n2 = n * n;
            let n5 = n2 * n2 * n;
            let n7 = n5 * n2;
            let term = 3.0 * (m * d.transpose() + d * m.transpose() + Matrix3::identity() * md) / n5
                - 15.0 * md * d * d.transpose() / n7;
            jac += term * MU0_OVER_4PI;
        }
        Ok(jac)
    }

    /// Scalar potential `φ` of the static field, `−∇φ = B`, gauge fixed so the
    /// background contributes `−B0·r`.
    pub fn eval_potential(&self, r: &Vector3<f64>) -> Result<f64> {
        let mut phi = -self.background.dot(r);
        for (d, n, s) in self.offsets(r)? {
            phi += MU0_OVER_4PI * s.moment.dot(&d) / (n * n * n);
        }
        Ok(phi)
    }
}
