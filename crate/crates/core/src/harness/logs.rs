//! Log rows, their CSV forms and run metrics.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::trajectory::TruthPose;
use crate::error::{Error, Result};
use crate::geometry::UnitOrientation;

/// One row of `truth.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub t: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
}

impl TruthRow {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    pub fn attitude(&self) -> UnitOrientation {
        UnitOrientation::new(self.qw, self.qx, self.qy, self.qz)
    }
}

impl From<&TruthPose> for TruthRow {
    fn from(p: &TruthPose) -> Self {
        let r = p.state.r;
        let [qw, qx, qy, qz] = p.state.q.components();
        Self { t: p.t, x_m: r.x, y_m: r.y, z_m: r.z, qw, qx, qy, qz }
    }
}

/// One row of `estimate.csv`. Columns that a technique does not produce
/// are left empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub t: f64,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub p_xx: Option<f64>,
    pub p_xy: Option<f64>,
    pub p_xz: Option<f64>,
    pub p_yy: Option<f64>,
    pub p_yz: Option<f64>,
    pub p_zz: Option<f64>,
    pub ess: Option<f64>,
    pub nis: Option<f64>,
}

impl EstimateRow {
    pub fn new(t: f64, r: &Vector3<f64>, q: &UnitOrientation, cov: Option<&Matrix3<f64>>) -> Self {
        let [qw, qx, qy, qz] = q.components();
        let c = |i, j| cov.map(|p| p[(i, j)]);
        Self {
            t,
            x_m: r.x,
            y_m: r.y,
            z_m: r.z,
            qw,
            qx,
            qy,
            qz,
            p_xx: c(0, 0),
            p_xy: c(0, 1),
            p_xz: c(0, 2),
            p_yy: c(1, 1),
            p_yz: c(1, 2),
            p_zz: c(2, 2),
            ess: None,
            nis: None,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.x_m, self.y_m, self.z_m)
    }

    /// Position covariance, when every entry is present.
    pub fn position_covariance(&self) -> Option<Matrix3<f64>> {
        let (xx, xy, xz) = (self.p_xx?, self.p_xy?, self.p_xz?);
        let (yy, yz, zz) = (self.p_yy?, self.p_yz?, self.p_zz?);
        Some(Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz))
    }
}

/// One row of `particles.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleRow {
    pub step: usize,
    pub t: f64,
    pub particle: usize,
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
    pub yaw_rad: f64,
    pub weight: f64,
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Accuracy and consistency of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub steps: usize,
    /// Euclidean position error per step, m.
    pub position_error_m: Vec<f64>,
    pub rmse_m: f64,
    pub final_error_m: f64,
    /// `eᵀP⁻¹e` on the position block; `null` where no positive definite
    /// covariance was reported.
    pub nees: Vec<Option<f64>>,
    /// Mean over the steps that have a NEES value.
    pub mean_nees: Option<f64>,
    pub ess: Vec<Option<f64>>,
    /// Kept out of `metrics.json` so that file is reproducible.
    #[serde(skip)]
    pub wall_clock_s: Option<f64>,
}

/// Compares an estimate log against the truth log row by row.
pub fn compute_metrics(truth: &[TruthRow], estimate: &[EstimateRow]) -> Result<RunMetrics> {
    if truth.len() != estimate.len() {
        return Err(Error::validation(format!(
            "truth has {} rows, estimate has {}",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::validation("logs are empty"));
    }
    let mut position_error_m = Vec::with_capacity(truth.len());
    let mut nees = Vec::with_capacity(truth.len());
    for (row, (a, b)) in truth.iter().zip(estimate).enumerate() {
        if a.t != b.t {
            return Err(Error::TimestampMismatch { row, truth: a.t, estimate: b.t });
        }
        let e = b.position() - a.position();
        position_error_m.push(e.norm());
        nees.push(
            b.position_covariance()
                .and_then(|p| p.cholesky())
                .map(|c| e.dot(&c.solve(&e))),
        );
    }
    let n = position_error_m.len() as f64;
    let rmse_m = (position_error_m.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let present: Vec<f64> = nees.iter().flatten().copied().collect();
    let mean_nees = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(RunMetrics {
        steps: truth.len(),
        final_error_m: *position_error_m.last().expect("non-empty"),
        position_error_m,
        rmse_m,
        nees,
        mean_nees,
        ess: estimate.iter().map(|r| r.ess).collect(),
        wall_clock_s: None,
    })
}
