//! Basis-function field maps `M(r) = Φᵀ(r)·w` and their regressors.
//!
//! Three bases are available:
//!
//! * **grid**: indicator functions on the cells of a box, either three
//!   weights per cell (vector field) or one (field magnitude). Evaluation is
//!   nearest-cell, with no blending across cell boundaries.
//! * **polynomial_cdf**: first-order expansion `B(r) = b0 + G·(r − c)` with
//!   `G` symmetric and traceless, so every weight vector describes a field
//!   that is both curl- and divergence-free. Eight weights:
//!   `[b0x, b0y, b0z, a, b, gxy, gxz, gyz]` with
//!   `G = a·diag(1,0,−1) + b·diag(0,1,−1) + gxy·(exey+eyex) + …`.
//! * **spectral**: Laplace eigenfunctions of a padded box with Dirichlet
//!   boundary conditions, weighted by the squared-exponential spectral
//!   density (reduced-rank Gaussian process). With vector output the basis
//!   models a scalar potential and the field is its negative gradient, which
//!   makes every sample curl-free; three extra linear-potential columns carry
//!   the constant field. With scalar output the basis models the field
//!   magnitude directly, plus one constant column.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::UnitOrientation;

/// Fraction of the domain extent added on each side of a spectral box.
pub const SPECTRAL_PADDING: f64 = 0.1;

/// Branch of the measurement function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementKind {
    /// The map models the vector field.
    VectorField,
    /// The map models a scalar potential; the field is `−∇M`.
    PotentialGradient,
    /// The map models the field magnitude.
    Magnitude,
}

impl MeasurementKind {
    pub fn dim(self) -> usize {
        match self {
            MeasurementKind::Magnitude => 1,
            _ => 3,
        }
    }

    pub fn is_vector(self) -> bool {
        self.dim() == 3
    }

    pub fn name(self) -> &'static str {
        match self {
            MeasurementKind::VectorField => "vector_field",
            MeasurementKind::PotentialGradient => "potential_gradient",
            MeasurementKind::Magnitude => "magnitude",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vector_field" | "vector" => Some(Self::VectorField),
            "potential_gradient" => Some(Self::PotentialGradient),
            "magnitude" | "scalar" => Some(Self::Magnitude),
            _ => None,
        }
    }
}

impl std::fmt::Display for MeasurementKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    #[serde(rename = "min_m")]
    pub min: Vector3<f64>,
    #[serde(rename = "max_m")]
    pub max: Vector3<f64>,
}

impl DomainBox {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn contains(&self, r: &Vector3<f64>) -> bool {
        (0..3).all(|k| r[k] >= self.min[k] && r[k] <= self.max[k])
    }

    pub fn center(&self) -> Vector3<f64> {
        0.5 * (self.min + self.max)
    }

    pub fn padded(&self, fraction: f64) -> Self {
        let pad = self.extent() * fraction;
        Self::new(self.min - pad, self.max + pad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldOutput {
    Vector,
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralParams {
    pub modes: [usize; 3],
    /// Squared-exponential magnitude, T·m for potentials, T for magnitude maps.
    #[serde(rename = "sigma_se")]
    pub sigma_se: f64,
    #[serde(rename = "length_scale_m")]
    pub length_scale: f64,
    /// Prior standard deviation of the constant-field columns, T.
    #[serde(rename = "sigma_lin_t")]
    pub sigma_lin: f64,
    pub output: FieldOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisKind {
    Grid {
        cells: [usize; 3],
        output: FieldOutput,
    },
    PolynomialCdf {
        #[serde(rename = "center_m")]
        center: Vector3<f64>,
    },
    SpectralPotential(SpectralParams),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub domain: DomainBox,
    #[serde(flatten)]
    pub kind: BasisKind,
}

impl BasisSpec {
    pub fn grid(domain: DomainBox, cells: [usize; 3], output: FieldOutput) -> Self {
        Self {
            domain,
            kind: BasisKind::Grid { cells, output },
        }
    }

    pub fn polynomial(domain: DomainBox, center: Vector3<f64>) -> Self {
        Self {
            domain,
            kind: BasisKind::PolynomialCdf { center },
        }
    }

    pub fn spectral(domain: DomainBox, params: SpectralParams) -> Self {
        Self {
            domain,
            kind: BasisKind::SpectralPotential(params),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.domain.extent();
        if !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) || !e.iter().all(|x| x.is_finite()) {
            return Err(Error::validation("basis domain must have positive volume"));
        }
        match &self.kind {
            BasisKind::Grid { cells, .. } => {
                if cells.iter().any(|&c| c == 0) {
                    return Err(Error::validation("grid needs at least one cell per axis"));
                }
            }
            BasisKind::PolynomialCdf { center } => {
                if !center.iter().all(|x| x.is_finite()) {
                    return Err(Error::validation("polynomial center must be finite"));
                }
            }
            BasisKind::SpectralPotential(p) => {
                if p.modes.iter().any(|&m| m == 0) {
                    return Err(Error::validation("spectral basis needs at least one mode per axis"));
                }
                if !(p.length_scale > 0.0) || !(p.sigma_se >= 0.0) || !(p.sigma_lin >= 0.0) {
                    return Err(Error::validation(
                        "spectral hyperparameters must be non-negative with positive length scale",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of weights `L`.
    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Grid { cells, output } => {
                let n = cells.iter().product::<usize>();
                match output {
                    FieldOutput::Vector => 3 * n,
                    FieldOutput::Scalar => n,
                }
            }
            BasisKind::PolynomialCdf { .. } => 8,
            BasisKind::SpectralPotential(p) => {
                let n = p.modes.iter().product::<usize>();
                n + linear_columns(p.output)
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The measurement branch this basis is built for.
    pub fn measurement_kind(&self) -> MeasurementKind {
        match &self.kind {
            BasisKind::Grid { output: FieldOutput::Vector, .. } | BasisKind::PolynomialCdf { .. } => {
                MeasurementKind::VectorField
            }
            BasisKind::SpectralPotential(SpectralParams { output: FieldOutput::Vector, .. }) => {
                MeasurementKind::PotentialGradient
            }
            _ => MeasurementKind::Magnitude,
        }
    }

    pub fn name(&self) -> &'static str {
        match &self.kind {
            BasisKind::Grid { output: FieldOutput::Vector, .. } => "grid(vector)",
            BasisKind::Grid { .. } => "grid(scalar)",
            BasisKind::PolynomialCdf { .. } => "polynomial_cdf",
            BasisKind::SpectralPotential(SpectralParams { output: FieldOutput::Vector, .. }) => {
                "spectral_potential"
            }
            BasisKind::SpectralPotential(_) => "spectral(scalar)",
        }
    }

    fn check_kind(&self, kind: MeasurementKind) -> Result<()> {
        if kind != self.measurement_kind() {
            return Err(Error::KindMismatch {
                kind: kind.name().into(),
                basis: self.name().into(),
            });
        }
        Ok(())
    }

    fn check_domain(&self, r: &Vector3<f64>) -> Result<()> {
        if matches!(self.kind, BasisKind::PolynomialCdf { .. }) || self.domain.contains(r) {
            Ok(())
        } else {
            Err(Error::OutOfDomain { x: r.x, y: r.y, z: r.z })
        }
    }

    /// True when `r` can be evaluated by this basis.
    pub fn covers(&self, r: &Vector3<f64>) -> bool {
        self.check_domain(r).is_ok()
    }

    fn grid_cell(&self, cells: &[usize; 3], r: &Vector3<f64>) -> usize {
        let e = self.domain.extent();
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let f = (r[k] - self.domain.min[k]) / e[k] * cells[k] as f64;
            idx[k] = (f.floor().max(0.0) as usize).min(cells[k] - 1);
        }
        (idx[2] * cells[1] + idx[1]) * cells[0] + idx[0]
    }

    /// Centre of grid cell `index`.
    pub fn grid_cell_center(&self, index: usize) -> Option<Vector3<f64>> {
        let BasisKind::Grid { cells, .. } = &self.kind else {
            return None;
        };
        let ix = index % cells[0];
        let iy = (index / cells[0]) % cells[1];
        let iz = index / (cells[0] * cells[1]);
        if iz >= cells[2] {
            return None;
        }
        let e = self.domain.extent();
        let i = [ix, iy, iz];
        Some(Vector3::from_fn(|k, _| {
            self.domain.min[k] + (i[k] as f64 + 0.5) * e[k] / cells[k] as f64
        }))
    }

    /// Map-frame field basis at `r`, before the sensor rotation: a
    /// `dim × L` matrix whose product with `w` is the modelled field
    /// (vector kinds) or magnitude.
    pub fn field_basis(&self, r: &Vector3<f64>) -> Result<DMatrix<f64>> {
        self.check_domain(r)?;
        let l = self.len();
        match &self.kind {
            BasisKind::Grid { cells, output } => {
                let cell = self.grid_cell(cells, r);
                match output {
                    FieldOutput::Vector => {
                        let mut h = DMatrix::zeros(3, l);
                        for k in 0..3 {
                            h[(k, 3 * cell + k)] = 1.0;
                        }
                        Ok(h)
                    }
                    FieldOutput::Scalar => {
                        let mut h = DMatrix::zeros(1, l);
                        h[(0, cell)] = 1.0;
                        Ok(h)
                    }
                }
            }
            BasisKind::PolynomialCdf { center } => {
                let d = r - center;
                let mut h = DMatrix::zeros(3, 8);
                for k in 0..3 {
                    h[(k, k)] = 1.0;
                }
                for (j, g) in gradient_basis().iter().enumerate() {
                    h.view_mut((0, 3 + j), (3, 1)).copy_from(&(g * d));
                }
                Ok(h)
            }
            BasisKind::SpectralPotential(p) => {
                let sb = SpectralBox::new(&self.domain, p);
                match p.output {
                    FieldOutput::Vector => {
                        let mut h = DMatrix::zeros(3, l);
                        sb.for_each_mode(r, |j, _value, grad| {
                            for k in 0..3 {
                                h[(k, j)] = -grad[k];
                            }
                        });
                        let n = sb.mode_count();
                        for k in 0..3 {
                            h[(k, n + k)] = 1.0;
                        }
                        Ok(h)
                    }
                    FieldOutput::Scalar => {
                        let mut h = DMatrix::zeros(1, l);
                        sb.for_each_mode(r, |j, value, _grad| h[(0, j)] = value);
                        h[(0, sb.mode_count())] = 1.0;
                        Ok(h)
                    }
                }
            }
        }
    }

    /// Scalar potential basis row `Φᵀ(r)` of a vector spectral map.
    pub fn potential_basis(&self, r: &Vector3<f64>) -> Result<DVector<f64>> {
        self.check_domain(r)?;
        let BasisKind::SpectralPotential(p @ SpectralParams { output: FieldOutput::Vector, .. }) = &self.kind
        else {
            return Err(Error::KindMismatch {
                kind: "potential".into(),
                basis: self.name().into(),
            });
        };
        let sb = SpectralBox::new(&self.domain, p);
        let mut row = DVector::zeros(self.len());
        sb.for_each_mode(r, |j, value, _| row[j] = value);
        let n = sb.mode_count();
        let c = sb.center();
        for k in 0..3 {
            row[n + k] = -(r[k] - c[k]);
        }
        Ok(row)
    }

    /// Analytic spatial Jacobian of the map-frame field for weights `w`
    /// (vector-output bases only).
    pub fn field_jacobian(&self, w: &DVector<f64>, r: &Vector3<f64>) -> Result<Matrix3<f64>> {
        self.check_domain(r)?;
        match &self.kind {
            BasisKind::PolynomialCdf { .. } => Ok(gradient_from_params(&w.rows(3, 5).into_owned())),
            BasisKind::SpectralPotential(p) if p.output == FieldOutput::Vector => {
                let sb = SpectralBox::new(&self.domain, p);
                Ok(-sb.hessian(w, r))
            }
            BasisKind::Grid { output: FieldOutput::Vector, .. } => Ok(Matrix3::zeros()),
            _ => Err(Error::KindMismatch {
                kind: "field_jacobian".into(),
                basis: self.name().into(),
            }),
        }
    }
}

fn linear_columns(output: FieldOutput) -> usize {
    match output {
        FieldOutput::Vector => 3,
        FieldOutput::Scalar => 1,
    }
}

/// Symmetric traceless basis matrices of the five gradient parameters.
pub fn gradient_basis() -> [Matrix3<f64>; 5] {
    [
        Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -1.0),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0),
        Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        Matrix3::new(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0),
    ]
}

pub fn gradient_from_params(g: &DVector<f64>) -> Matrix3<f64> {
    let (a, b) = (g[0], g[1]);
    Matrix3::new(a, g[2], g[3], g[2], b, g[4], g[3], g[4], -a - b)
}

/// Inverse of [`gradient_from_params`] for a symmetric traceless matrix
/// (the antisymmetric part and the trace are discarded).
pub fn params_from_gradient(g: &Matrix3<f64>) -> DVector<f64> {
    let t = g.trace() / 3.0;
    DVector::from_vec(vec![
        g[(0, 0)] - t,
        g[(1, 1)] - t,
        0.5 * (g[(0, 1)] + g[(1, 0)]),
        0.5 * (g[(0, 2)] + g[(2, 0)]),
        0.5 * (g[(1, 2)] + g[(2, 1)]),
    ])
}

/// Dirichlet sine eigenfunctions on the padded domain.
struct SpectralBox<'a> {
    origin: Vector3<f64>,
    size: Vector3<f64>,
    params: &'a SpectralParams,
}

impl<'a> SpectralBox<'a> {
    fn new(domain: &DomainBox, params: &'a SpectralParams) -> Self {
        let padded = domain.padded(SPECTRAL_PADDING);
        Self {
            origin: padded.min,
            size: padded.extent(),
            params,
        }
    }

    fn center(&self) -> Vector3<f64> {
        self.origin + 0.5 * self.size
    }

    fn mode_count(&self) -> usize {
        self.params.modes.iter().product()
    }

    /// Per-axis values and first derivatives, `[axis][mode]`.
    fn axis_tables(&self, r: &Vector3<f64>) -> [(Vec<f64>, Vec<f64>, Vec<f64>); 3] {
        std::array::from_fn(|k| {
            let m = self.params.modes[k];
            let len = self.size[k];
            let norm = (2.0 / len).sqrt();
            let x = r[k] - self.origin[k];
            let mut v = Vec::with_capacity(m);
            let mut d = Vec::with_capacity(m);
            let mut dd = Vec::with_capacity(m);
            for j in 1..=m {
                let f = PI * j as f64 / len;
                let (s, c) = (f * x).sin_cos();
                v.push(norm * s);
                d.push(norm * f * c);
                dd.push(-norm * f * f * s);
            }
            (v, d, dd)
        })
    }

    /// Visits modes in x-fastest order with value and gradient.
    fn for_each_mode(&self, r: &Vector3<f64>, mut f: impl FnMut(usize, f64, Vector3<f64>)) {
        let [tx, ty, tz] = self.axis_tables(r);
        let [mx, my, mz] = self.params.modes;
        let mut j = 0;
        for iz in 0..mz {
            for iy in 0..my {
                let vyz = ty.0[iy] * tz.0[iz];
                for ix in 0..mx {
                    let value = tx.0[ix] * vyz;
                    let grad = Vector3::new(
                        tx.1[ix] * vyz,
                        tx.0[ix] * ty.1[iy] * tz.0[iz],
                        tx.0[ix] * ty.0[iy] * tz.1[iz],
                    );
                    f(j, value, grad);
                    j += 1;
                }
            }
        }
    }

    /// Laplace eigenvalue of every mode, same ordering as `for_each_mode`.
    fn eigenvalues(&self) -> Vec<f64> {
        let [mx, my, mz] = self.params.modes;
        let mut out = Vec::with_capacity(self.mode_count());
        for iz in 1..=mz {
            for iy in 1..=my {
                for ix in 1..=mx {
                    let l = [ix, iy, iz];
                    out.push((0..3).map(|k| (PI * l[k] as f64 / self.size[k]).powi(2)).sum());
                }
            }
        }
        out
    }

    /// Hessian of the potential `Σ w_j φ_j(r)`; exactly symmetric.
    fn hessian(&self, w: &DVector<f64>, r: &Vector3<f64>) -> Matrix3<f64> {
        let t = self.axis_tables(r);
        let [mx, my, mz] = self.params.modes;
        let mut h = Matrix3::zeros();
        let mut j = 0;
        for iz in 0..mz {
            for iy in 0..my {
                for ix in 0..mx {
                    let i = [ix, iy, iz];
                    let wj = w[j];
                    for a in 0..3 {
                        for b in a..3 {
                            let mut p = wj;
                            for k in 0..3 {
                                let order = (a == k) as usize + (b == k) as usize;
                                p *= match order {
                                    0 => t[k].0[i[k]],
                                    1 => t[k].1[i[k]],
                                    _ => t[k].2[i[k]],
                                };
                            }
                            h[(a, b)] += p;
                        }
                    }
                    j += 1;
                }
            }
        }
        for a in 0..3 {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        h
    }
}

/// Squared-exponential spectral density in three dimensions, evaluated at
/// frequency `√λ`.
pub fn se_spectral_density(sigma: f64, length_scale: f64, lambda: f64) -> f64 {
    let l2 = length_scale * length_scale;
    sigma * sigma * (2.0 * PI * l2).powf(1.5) * (-0.5 * lambda * l2).exp()
}

/// Gaussian belief over the map weights. A missing covariance denotes a
/// deterministic map.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPosterior {
    pub spec: BasisSpec,
    pub mean: DVector<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

impl MapPosterior {
    pub fn new(spec: BasisSpec, mean: DVector<f64>, covariance: Option<DMatrix<f64>>) -> Result<Self> {
        spec.validate()?;
        let l = spec.len();
        if mean.len() != l {
            return Err(Error::validation(format!("mean has {} entries, basis has {l}", mean.len())));
        }
        if let Some(p) = &covariance {
            if p.nrows() != l || p.ncols() != l {
                return Err(Error::validation("covariance dimensions do not match basis"));
            }
        }
        Ok(Self { spec, mean, covariance })
    }

    /// Zero-mean prior with covariance `variance·I`.
    pub fn isotropic(spec: BasisSpec, variance: f64) -> Result<Self> {
        let l = spec.len();
        Self::new(spec, DVector::zeros(l), Some(DMatrix::identity(l, l) * variance))
    }

    pub fn deterministic(spec: BasisSpec, mean: DVector<f64>) -> Result<Self> {
        Self::new(spec, mean, None)
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn covariance_or_zeros(&self) -> DMatrix<f64> {
        self.covariance
            .clone()
            .unwrap_or_else(|| DMatrix::zeros(self.len(), self.len()))
    }

    /// Regressor of this map's basis.
    pub fn regressor(&self, kind: MeasurementKind, r: &Vector3<f64>, q: &UnitOrientation) -> Result<DMatrix<f64>> {
        regressor(&self.spec, kind, r, q)
    }

    pub fn to_document(&self) -> MapDocument {
        MapDocument {
            spec: self.spec.clone(),
            mean: self.mean.iter().copied().collect(),
            covariance: self.covariance.as_ref().map(|p| {
                let mut v = Vec::with_capacity(p.len());
                for i in 0..p.nrows() {
                    v.extend(p.row(i).iter().copied());
                }
                v
            }),
        }
    }

    pub fn from_document(doc: MapDocument) -> Result<Self> {
        let l = doc.spec.len();
        let covariance = match doc.covariance {
            None => None,
            Some(v) => {
                if v.len() != l * l {
                    return Err(Error::validation(format!(
                        "covariance has {} entries, expected {}",
                        v.len(),
                        l * l
                    )));
                }
                Some(DMatrix::from_row_slice(l, l, &v))
            }
        };
        Self::new(doc.spec, DVector::from_vec(doc.mean), covariance)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(s)?)
    }
}

/// On-disk form of a map: covariance row-major, omitted for deterministic maps.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapDocument {
    pub spec: BasisSpec,
    pub mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<f64>>,
}

/// Measurement regressor `H`: the expected measurement is `H·w`.
pub fn regressor(
    spec: &BasisSpec,
    kind: MeasurementKind,
    r: &Vector3<f64>,
    q: &UnitOrientation,
) -> Result<DMatrix<f64>> {
    spec.check_kind(kind)?;
    let basis = spec.field_basis(r)?;
    if kind.is_vector() {
        let c = q.map_to_sensor();
        let c = DMatrix::from_fn(3, 3, |i, j| c[(i, j)]);
        Ok(c * basis)
    } else {
        Ok(basis)
    }
}

/// Predictive mean `H·μ` and covariance `H·P·Hᵀ` of the measurement at `r`.
pub fn eval_map(
    mp: &MapPosterior,
    kind: MeasurementKind,
    r: &Vector3<f64>,
    q: &UnitOrientation,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let h = mp.regressor(kind, r, q)?;
    let mean = &h * &mp.mean;
    let cov = match &mp.covariance {
        Some(p) => {
            let ph = p * h.transpose();
            let mut s = &h * ph;
            crate::linalg::symmetrize(&mut s);
            s
        }
        None => DMatrix::zeros(h.nrows(), h.nrows()),
    };
    Ok((mean, cov))
}

/// Reduced-rank Gaussian-process prior for a spectral basis.
pub fn spectral_prior(spec: &BasisSpec) -> Result<MapPosterior> {
    spec.validate()?;
    let BasisKind::SpectralPotential(p) = &spec.kind else {
        return Err(Error::KindMismatch {
            kind: "spectral_prior".into(),
            basis: spec.name().into(),
        });
    };
    let sb = SpectralBox::new(&spec.domain, p);
    let l = spec.len();
    let mut diag = DVector::zeros(l);
    for (j, lambda) in sb.eigenvalues().into_iter().enumerate() {
        diag[j] = se_spectral_density(p.sigma_se, p.length_scale, lambda);
    }
    for j in sb.mode_count()..l {
        diag[j] = p.sigma_lin * p.sigma_lin;
    }
    MapPosterior::new(spec.clone(), DVector::zeros(l), Some(DMatrix::from_diagonal(&diag)))
}

/// Laplace eigenvalues of a spectral basis, in column order.
pub fn spectral_eigenvalues(spec: &BasisSpec) -> Option<Vec<f64>> {
    match &spec.kind {
        BasisKind::SpectralPotential(p) => Some(SpectralBox::new(&spec.domain, p).eigenvalues()),
        _ => None,
    }
}
