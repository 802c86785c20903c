//! Magnetometer models, measurement synthesis, calibration and arrays.
//!
//! A vector magnetometer at world position `p` with attitude `q` reads
//! `y = A·C(q)·B(p) + b + e`, where `C(q)` maps the world frame into the
//! sensor frame, `A` is the soft-iron distortion, `b` the hard-iron offset
//! and `e ~ N(0, σ²I)`. A scalar magnetometer reads `‖B(p)‖ + e`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3, SVD};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::UnitOrientation;
use crate::linalg::{mat3_rows, SpdFactor};
use crate::map_model::{gradient_basis, gradient_from_params, MeasurementKind};
use crate::rng;
use crate::truth_field::TruthField;

/// Minimum number of samples accepted by [`ellipsoid_calibrate`].
pub const MIN_CALIBRATION_SAMPLES: usize = 20;
/// Quadric-fit condition number above which orientation coverage is insufficient.
pub const MAX_FIT_CONDITION: f64 = 1e10;
const PLANAR_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: MeasurementKind,
    #[serde(rename = "noise_std_t")]
    pub noise_std: f64,
    #[serde(with = "mat3_rows", default = "identity3")]
    pub affine_a: Matrix3<f64>,
    #[serde(rename = "offset_b_t", default)]
    pub offset_b: Vector3<f64>,
}

fn identity3() -> Matrix3<f64> {
    Matrix3::identity()
}

impl SensorModel {
    /// Ideal vector magnetometer with isotropic noise.
    pub fn vector(noise_std: f64) -> Self {
        Self {
            kind: MeasurementKind::VectorField,
            noise_std,
            affine_a: Matrix3::identity(),
            offset_b: Vector3::zeros(),
        }
    }

    pub fn magnitude(noise_std: f64) -> Self {
        Self {
            kind: MeasurementKind::Magnitude,
            ..Self::vector(noise_std)
        }
    }

    pub fn with_affine(mut self, a: Matrix3<f64>, b: Vector3<f64>) -> Self {
        self.affine_a = a;
        self.offset_b = b;
        self
    }

    /// A zero noise level is accepted and produces exact readings.
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::validation("noise_std_t must be finite and non-negative"));
        }
        if self.kind.is_vector() {
            if self.affine_a.iter().any(|x| !x.is_finite()) || self.affine_a.determinant().abs() <= 1e-9 {
                return Err(Error::validation("affine_a must be invertible"));
            }
            if self.offset_b.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation("offset_b_t must be finite"));
            }
        }
        Ok(())
    }

    /// Per-reading noise covariance.
    pub fn noise_cov(&self) -> DMatrix<f64> {
        let m = self.kind.dim();
        DMatrix::identity(m, m) * (self.noise_std * self.noise_std)
    }
}

/// Sensor offsets `d_n` in the body frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArrayDocument", into = "ArrayDocument")]
pub struct ArrayGeometry {
    offsets: Vec<Vector3<f64>>,
    planar: bool,
}

#[derive(Serialize, Deserialize)]
struct ArrayDocument {
    offsets_m: Vec<Vector3<f64>>,
}

impl TryFrom<ArrayDocument> for ArrayGeometry {
    type Error = Error;
    fn try_from(doc: ArrayDocument) -> Result<Self> {
        ArrayGeometry::new(doc.offsets_m)
    }
}

impl From<ArrayGeometry> for ArrayDocument {
    fn from(g: ArrayGeometry) -> Self {
        ArrayDocument { offsets_m: g.offsets }
    }
}

impl ArrayGeometry {
    pub fn new(offsets: Vec<Vector3<f64>>) -> Result<Self> {
        if offsets.len() < 2 {
            return Err(Error::validation("an array needs at least two sensors"));
        }
        if offsets.iter().any(|d| d.iter().any(|x| !x.is_finite())) {
            return Err(Error::validation("array offsets must be finite"));
        }
        let n = offsets.len() as f64;
        let mean = offsets.iter().sum::<Vector3<f64>>() / n;
        let spread = offsets.iter().map(|d| (d - mean).norm()).fold(0.0, f64::max);
        if spread == 0.0 {
            return Err(Error::validation("array offsets are all identical"));
        }
        let scatter = offsets.iter().fold(Matrix3::zeros(), |acc, d| {
            let c = d - mean;
            acc + c * c.transpose()
        });
        let eig = SymmetricEigen::new(scatter);
        let (k, _) = eig.eigenvalues.argmin();
        let normal = eig.eigenvectors.column(k).into_owned();
        let planar = offsets.iter().all(|d| (d - mean).dot(&normal).abs() <= PLANAR_TOLERANCE);
        Ok(Self { offsets, planar })
    }

    /// `nx × ny` sensors with pitch `pitch` in the body x-y plane, centered
    /// on the origin.
    pub fn planar_grid(nx: usize, ny: usize, pitch: f64) -> Result<Self> {
        let cx = (nx as f64 - 1.0) / 2.0;
        let cy = (ny as f64 - 1.0) / 2.0;
        let offsets = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| Vector3::new((i as f64 - cx) * pitch, (j as f64 - cy) * pitch, 0.0)))
            .collect();
        Self::new(offsets)
    }

    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// All offsets lie within 1e-9 m of a common plane.
    pub fn is_planar(&self) -> bool {
        self.planar
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.offsets.iter().map(|d| d * factor).collect())
    }
}

/// One magnetometer reading.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub t: f64,
    pub sensor_id: usize,
    /// Three components for vector kinds, one for magnitude; tesla.
    pub value: DVector<f64>,
    pub kind: MeasurementKind,
}

impl FieldSample {
    pub fn new(t: f64, sensor_id: usize, value: DVector<f64>, kind: MeasurementKind) -> Result<Self> {
        let s = Self { t, sensor_id, value, kind };
        s.validate()?;
        Ok(s)
    }

    pub fn vector(t: f64, sensor_id: usize, value: Vector3<f64>) -> Self {
        Self {
            t,
            sensor_id,
            value: DVector::from_column_slice(value.as_slice()),
            kind: MeasurementKind::VectorField,
        }
    }

    pub fn magnitude(t: f64, sensor_id: usize, value: f64) -> Self {
        Self {
            t,
            sensor_id,
            value: DVector::from_element(1, value),
            kind: MeasurementKind::Magnitude,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.value.len() != self.kind.dim() {
            return Err(Error::validation(format!(
                "{} sample needs {} components, got {}",
                self.kind,
                self.kind.dim(),
                self.value.len()
            )));
        }
        if !self.t.is_finite() || self.value.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("sample time and value must be finite"));
        }
        Ok(())
    }

    /// The reading as a 3-vector, for vector kinds.
    pub fn as_vector(&self) -> Option<Vector3<f64>> {
        (self.kind.is_vector() && self.value.len() == 3).then(|| Vector3::new(self.value[0], self.value[1], self.value[2]))
    }
}

/// Simulated readings of every sensor at pose `(r, q)` and time `t`.
///
/// Sensor `n` sits at `r + R(q)·d_n` and reports with id `n`; without an
/// array a single sensor with id 0 sits at `r`. Each sensor draws its noise
/// from a stream keyed by `(seed, t, n)`.
pub fn synthesize(
    field: &TruthField,
    r: &Vector3<f64>,
    q: &UnitOrientation,
    sm: &SensorModel,
    geom: Option<&ArrayGeometry>,
    t: f64,
    seed: u64,
) -> Result<Vec<FieldSample>> {
    sm.validate()?;
    let origin = [Vector3::zeros()];
    let offsets = geom.map_or(&origin[..], |g| g.offsets());
    let to_sensor = q.map_to_sensor();
    offsets
        .iter()
        .enumerate()
        .map(|(n, d)| {
            let b = field.eval_field(&(r + q.rotate(d)), t)?;
            let mut stream = rng::stream(&[seed, t.to_bits(), n as u64, rng::tag::SENSOR]);
            let mut noise = || sm.noise_std * stream.sample::<f64, _>(StandardNormal);
            Ok(match sm.kind {
                MeasurementKind::Magnitude => FieldSample::magnitude(t, n, b.norm() + noise()),
                kind => {
                    let clean = sm.affine_a * (to_sensor * b) + sm.offset_b;
                    let e = Vector3::new(noise(), noise(), noise());
                    FieldSample {
                        kind,
                        ..FieldSample::vector(t, n, clean + e)
                    }
                }
            })
        })
        .collect()
}

/// Affine calibration `y = Â·h + b̂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    #[serde(rename = "A", with = "mat3_rows")]
    pub a_hat: Matrix3<f64>,
    #[serde(rename = "b")]
    pub b_hat: Vector3<f64>,
    /// Relative spread (std / mean) of the calibrated sample norms.
    pub residual: f64,
}

impl Calibration {
    pub fn apply(&self, y: &Vector3<f64>) -> Vector3<f64> {
        self.a_hat.try_inverse().unwrap_or_else(Matrix3::identity) * (y - self.b_hat)
    }
}

/// Ellipsoid-fitting calibration with the scale fixed by `det(Â) = 1`.
pub fn ellipsoid_calibrate(samples: &[FieldSample]) -> Result<Calibration> {
    calibrate(samples, None)
}

/// Ellipsoid-fitting calibration for a known field magnitude, which fixes the
/// scale of `Â` so that calibrated readings have norm `field_norm`.
pub fn ellipsoid_calibrate_with_norm(samples: &[FieldSample], field_norm: f64) -> Result<Calibration> {
    if !(field_norm > 0.0) || !field_norm.is_finite() {
        return Err(Error::validation("field norm must be positive"));
    }
    calibrate(samples, Some(field_norm))
}

fn calibrate(samples: &[FieldSample], field_norm: Option<f64>) -> Result<Calibration> {
    let ys = samples
        .iter()
        .map(|s| {
            s.validate()?;
            s.as_vector().ok_or_else(|| Error::validation("calibration needs vector samples"))
        })
        .collect::<Result<Vec<_>>>()?;
    if ys.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::validation(format!(
            "calibration needs at least {MIN_CALIBRATION_SAMPLES} samples, got {}",
            ys.len()
        )));
    }
    // Centering and scaling keep the design matrix well conditioned.
    let mean = ys.iter().sum::<Vector3<f64>>() / ys.len() as f64;
    let scale = (ys.iter().map(|y| (y - mean).norm_squared()).sum::<f64>() / ys.len() as f64).sqrt();
    if !(scale > 0.0) {
        return Err(Error::DegenerateFit { condition: f64::INFINITY });
    }
    let design = DMatrix::from_fn(ys.len(), 10, |i, j| {
        let u = (ys[i] - mean) / scale;
        match j {
            0 => u.x * u.x,
            1 => u.y * u.y,
            2 => u.z * u.z,
            3 => 2.0 * u.x * u.y,
            4 => 2.0 * u.x * u.z,
            5 => 2.0 * u.y * u.z,
            6 => 2.0 * u.x,
            7 => 2.0 * u.y,
            8 => 2.0 * u.z,
            _ => 1.0,
        }
    });
    let svd = SVD::new(design, false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
    let mut order: Vec<usize> = (0..10).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let sv = |k: usize| svd.singular_values[order[k]];
    // The smallest singular value is the fit residual; the next one measures
    // how well the quadric is pinned down.
    let condition = sv(9) / sv(1);
    if !(condition <= MAX_FIT_CONDITION) {
        return Err(Error::DegenerateFit { condition });
    }
    let p = v_t.row(order[0]).transpose();
    let mut m = Matrix3::new(p[0], p[3], p[4], p[3], p[1], p[5], p[4], p[5], p[2]);
    let mut n = Vector3::new(p[6], p[7], p[8]);
    let mut c = p[9];
    if m.trace() < 0.0 {
        m = -m;
        n = -n;
        c = -c;
    }
    let m_inv = m.try_inverse().ok_or(Error::DegenerateFit { condition: f64::INFINITY })?;
    let u0 = -(m_inv * n);
    let k = u0.dot(&(m * u0)) - c;
    let shape = m / (k * scale * scale);
    let eig = SymmetricEigen::new(shape);
    if eig.eigenvalues.min() <= 0.0 || !k.is_finite() {
        return Err(Error::DegenerateFit { condition });
    }
    // Â ∝ shape^{-1/2}
    let inv_sqrt = eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * eig.eigenvectors.transpose();
    let inv_sqrt = 0.5 * (inv_sqrt + inv_sqrt.transpose());
    let norm = field_norm.unwrap_or_else(|| inv_sqrt.determinant().cbrt());
    let a_hat = inv_sqrt / norm;
    let b_hat = mean + scale * u0;
    let a_inv = a_hat.try_inverse().ok_or(Error::DegenerateFit { condition })?;
    let norms: Vec<f64> = ys.iter().map(|y| (a_inv * (y - b_hat)).norm()).collect();
    Ok(Calibration {
        a_hat,
        b_hat,
        residual: relative_spread(&norms),
    })
}

/// Standard deviation over mean.
pub fn relative_spread(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// First-order local field fitted across an array: `y_n = b0 + G·d_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub b0: Vector3<f64>,
    pub g: Matrix3<f64>,
    /// `[b0, gradient parameters]`.
    pub params: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Rows of the eight-parameter local model for one sensor offset.
pub fn local_regressor(d: &Vector3<f64>) -> nalgebra::SMatrix<f64, 3, 8> {
    let mut h = nalgebra::SMatrix::<f64, 3, 8>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    for (k, e) in gradient_basis().iter().enumerate() {
        h.fixed_view_mut::<3, 1>(0, 3 + k).copy_from(&(e * d));
    }
    h
}

/// Weighted least-squares fit of the eight-parameter curl- and
/// divergence-free model to one simultaneous array scan.
pub fn estimate_jacobian(samples: &[FieldSample], geom: &ArrayGeometry, noise_cov: &Matrix3<f64>) -> Result<JacobianEstimate> {
    if samples.len() != geom.len() {
        return Err(Error::validation(format!(
            "expected one sample per sensor ({}), got {}",
            geom.len(),
            samples.len()
        )));
    }
    let rf = SpdFactor::new(&DMatrix::from_column_slice(3, 3, noise_cov.as_slice()), 1e12)
        .map_err(|_| Error::validation("sensor noise covariance must be positive definite"))?;
    let r_inv = rf.inverse();
    let r_inv = Matrix3::from_fn(|i, j| r_inv[(i, j)]);
    let t0 = samples[0].t;
    let mut seen = vec![false; geom.len()];
    let mut info = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let mut eta = nalgebra::SVector::<f64, 8>::zeros();
    for s in samples {
        s.validate()?;
        let y = s.as_vector().ok_or_else(|| Error::validation("array samples must be vector readings"))?;
        if s.t != t0 {
            return Err(Error::validation("array samples must share one timestamp"));
        }
        let d = geom
            .offsets()
            .get(s.sensor_id)
            .ok_or_else(|| Error::validation(format!("sensor id {} outside the array", s.sensor_id)))?;
        if std::mem::replace(&mut seen[s.sensor_id], true) {
            return Err(Error::validation(format!("duplicate sample for sensor {}", s.sensor_id)));
        }
        let h = local_regressor(d);
        info += h.transpose() * r_inv * h;
        eta += h.transpose() * r_inv * y;
    }
    check_identifiable(&info)?;
    let cov = info.try_inverse().ok_or_else(|| Error::RankDeficient("array geometry".into()))?;
    let params = cov * eta;
    let g = gradient_from_params(&DVector::from_iterator(5, params.iter().skip(3).copied()));
    Ok(JacobianEstimate {
        b0: Vector3::new(params[0], params[1], params[2]),
        g,
        params: DVector::from_column_slice(params.as_slice()),
        cov: DMatrix::from_column_slice(8, 8, cov.as_slice()),
    })
}

fn check_identifiable(info: &nalgebra::SMatrix<f64, 8, 8>) -> Result<()> {
    let d = info.diagonal();
    if d.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::RankDeficient("array geometry leaves a parameter unobserved".into()));
    }
    let scaled = nalgebra::SMatrix::<f64, 8, 8>::from_fn(|i, j| info[(i, j)] / (d[i] * d[j]).sqrt());
    let sv = SVD::new(scaled, false, false).singular_values;
    if sv.min() < 1e-12 * sv.max() {
        return Err(Error::RankDeficient(
            "array geometry cannot identify all eight local field parameters".into(),
        ));
    }
    Ok(())
}

/// Writes samples as `t,sensor_id,kind,y1,y2,y3`.
pub fn write_samples_csv<W: Write>(out: W, samples: &[FieldSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "sensor_id", "kind", "y1", "y2", "y3"])?;
    for s in samples {
        let comp = |i: usize| s.value.get(i).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([
            s.t.to_string(),
            s.sensor_id.to_string(),
            s.kind.name().to_string(),
            comp(0),
            comp(1),
            comp(2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(input: R) -> Result<Vec<FieldSample>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|_| Error::validation(format!("row {}: column {} is not a number", row + 1, i + 1)))
        };
        let kind = MeasurementKind::parse(field(2))
            .ok_or_else(|| Error::validation(format!("row {}: unknown kind {:?}", row + 1, field(2))))?;
        let sensor_id = field(1)
            .parse()
            .map_err(|_| Error::validation(format!("row {}: bad sensor_id", row + 1)))?;
        let value = if kind.is_vector() {
            DVector::from_vec(vec![num(3)?, num(4)?, num(5)?])
        } else {
            DVector::from_element(1, num(3)?)
        };
        out.push(FieldSample::new(num(0)?, sensor_id, value, kind).map_err(|e| e.at_step(row))?);
    }
    Ok(out)
}
