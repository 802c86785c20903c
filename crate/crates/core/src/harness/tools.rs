//! Offline processing of logged data: map learning from a trajectory and
//! its readings, and displacement bounds from an array configuration.

use std::collections::HashMap;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::logs::TruthRow;
use crate::error::{Error, Result};
use crate::estimators::{crlb_displacement, CrlbBound};
use crate::linalg::mat3_rows;
use crate::map_learning::{resolve_kind, rls_fold, LearningRecord};
use crate::map_model::{spectral_prior, BasisKind, BasisSpec, MapPosterior};
use crate::sensors::{ArrayGeometry, FieldSample};
use crate::truth_field::TruthField;

/// Learns a map from readings taken along a known trajectory.
///
/// Every sample is paired with the truth row of the same timestamp; sensor
/// `n` sits at the array offset `d_n` rotated by the row's attitude. Spectral
/// bases use their reduced-rank GP prior, other bases an isotropic prior
/// with standard deviation `prior_std`.
pub fn learn_map_from_logs(
    spec: &BasisSpec,
    truth: &[TruthRow],
    samples: &[FieldSample],
    geom: Option<&ArrayGeometry>,
    noise_std: f64,
    prior_std: f64,
) -> Result<MapPosterior> {
    if !(noise_std > 0.0) {
        return Err(Error::validation("noise_std must be positive"));
    }
    let prior = match spec.kind {
        BasisKind::SpectralPotential(_) => spectral_prior(spec)?,
        _ if prior_std > 0.0 => MapPosterior::isotropic(spec.clone(), prior_std * prior_std)?,
        _ => return Err(Error::validation("prior_std must be positive")),
    };
    let poses: HashMap<u64, &TruthRow> = truth.iter().map(|r| (r.t.to_bits(), r)).collect();
    let records = samples
        .iter()
        .map(|s| {
            let row = poses
                .get(&s.t.to_bits())
                .ok_or_else(|| Error::validation(format!("no trajectory row at t = {} s", s.t)))?;
            let d = match geom {
                Some(g) => *g
                    .offsets()
                    .get(s.sensor_id)
                    .ok_or_else(|| Error::validation(format!("sensor id {} outside the array", s.sensor_id)))?,
                None if s.sensor_id == 0 => Vector3::zeros(),
                None => return Err(Error::validation("multi-sensor readings need an array geometry")),
            };
            let q = row.attitude();
            let kind = resolve_kind(spec, s.kind)?;
            LearningRecord::isotropic(row.position() + q.rotate(&d), q, s.value.clone(), noise_std, kind)
        })
        .collect::<Result<Vec<_>>>()?;
    rls_fold(&prior, &records)
}

/// Array, field and noise for a displacement bound. The field is either
/// given locally (`b0_t`, `gradient_t_per_m`) or evaluated from a truth
/// field at `position_m` with the array level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlbConfig {
    pub array: ArrayGeometry,
    pub noise_std_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b0_t: Option<Vector3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "optional_mat3")]
    pub gradient_t_per_m: Option<Matrix3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<TruthField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position_m: Option<Vector3<f64>>,
    /// Prior standard deviations of `(Δr, ε)`; flat when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_std: Option<[f64; 6]>,
}

mod optional_mat3 {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Rows(#[serde(with = "mat3_rows")] Matrix3<f64>);

    pub fn serialize<S: Serializer>(m: &Option<Matrix3<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        m.map(Rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Matrix3<f64>>, D::Error> {
        Ok(Option::<Rows>::deserialize(d)?.map(|r| r.0))
    }
}

impl CrlbConfig {
    pub fn evaluate(&self) -> Result<CrlbBound> {
        if !(self.noise_std_t > 0.0) {
            return Err(Error::validation("noise_std_t must be positive"));
        }
        let (b0, g) = match (&self.field, &self.position_m, &self.b0_t, &self.gradient_t_per_m) {
            (Some(f), Some(p), None, None) => {
                f.validate()?;
                (f.static_field(p)?, f.eval_jacobian(p, 0.0)?)
            }
            (None, None, b0, Some(g)) => (b0.unwrap_or_else(Vector3::zeros), *g),
            _ => {
                return Err(Error::validation(
                    "give either field and position_m, or gradient_t_per_m (with optional b0_t)",
                ))
            }
        };
        let noise = Matrix3::identity() * self.noise_std_t.powi(2);
        let prior = self
            .prior_std
            .map(|s| Matrix6::from_diagonal(&Vector6::from_iterator(s.iter().map(|x| x * x))));
        crlb_displacement(&self.array, &b0, &g, &noise, prior.as_ref())
    }
}
