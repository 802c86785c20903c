//! Map-weight inference along a known trajectory.

use nalgebra::{Cholesky, DMatrix, DVector, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::UnitOrientation;
use crate::linalg::{symmetrize, SpdFactor, MAX_INNOVATION_CONDITION};
use crate::map_model::{regressor, BasisSpec, MapPosterior, MeasurementKind};

/// Prior condition number below which [`batch_map`] uses the information form.
const INFORMATION_FORM_MAX_CONDITION: f64 = 1e6;

/// One measurement taken at a known pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningRecord {
    pub r: Vector3<f64>,
    pub q: UnitOrientation,
    pub y: DVector<f64>,
    /// Measurement covariance, T².
    pub noise_cov: DMatrix<f64>,
    pub kind: MeasurementKind,
}

impl LearningRecord {
    pub fn new(
        r: Vector3<f64>,
        q: UnitOrientation,
        y: DVector<f64>,
        noise_cov: DMatrix<f64>,
        kind: MeasurementKind,
    ) -> Result<Self> {
        let rec = Self { r, q, y, noise_cov, kind };
        rec.validate()?;
        Ok(rec)
    }

    /// Isotropic noise `std²·I`.
    pub fn isotropic(r: Vector3<f64>, q: UnitOrientation, y: DVector<f64>, std: f64, kind: MeasurementKind) -> Result<Self> {
        let m = y.len();
        Self::new(r, q, y, DMatrix::identity(m, m) * (std * std), kind)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.kind.dim();
        if self.y.len() != m || self.noise_cov.nrows() != m || self.noise_cov.ncols() != m {
            return Err(Error::validation(format!(
                "{} record needs {m}-dimensional measurement and covariance",
                self.kind
            )));
        }
        if (&self.noise_cov - self.noise_cov.transpose()).amax() > 1e-12 * self.noise_cov.amax()
            || Cholesky::new(self.noise_cov.clone()).is_none()
        {
            return Err(Error::validation("measurement covariance must be symmetric positive definite"));
        }
        Ok(())
    }

    pub fn regressor(&self, spec: &BasisSpec) -> Result<DMatrix<f64>> {
        regressor(spec, resolve_kind(spec, self.kind)?, &self.r, &self.q)
    }
}

/// Vector measurements are accepted by either vector branch; the basis
/// decides which one applies.
pub fn resolve_kind(spec: &BasisSpec, kind: MeasurementKind) -> Result<MeasurementKind> {
    let natural = spec.measurement_kind();
    if kind == natural || (kind.is_vector() && natural.is_vector()) {
        Ok(natural)
    } else {
        Err(Error::KindMismatch {
            kind: kind.name().into(),
            basis: spec.name().into(),
        })
    }
}

/// Conditions `(mean, cov)` on `y = H·w + e`, `e ~ N(0, R)`, in place.
///
/// The covariance uses the Joseph-stabilized form, expanded so the cost is
/// `O(L²·m)` instead of `O(L³)`.
pub fn kalman_update(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<()> {
    kalman_update_with_likelihood(mean, cov, h, y, noise_cov).map(|_| ())
}

/// [`kalman_update`] that also returns the predictive log-density
/// `log N(y; H·mean, H·cov·Hᵀ + R)` evaluated before the update.
pub fn kalman_update_with_likelihood(
    mean: &mut DVector<f64>,
    cov: &mut DMatrix<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<f64> {
    let u = &*cov * h.transpose();
    let mut s = h * &u + noise_cov;
    symmetrize(&mut s);
    let factor = SpdFactor::new(&s, MAX_INNOVATION_CONDITION)?;
    let innovation = y - h * &*mean;
    let log_density = factor.gaussian_log_density(&innovation);
    let k = factor.solve(&u.transpose()).transpose();
    *mean += &k * innovation;
    let ku = &k * u.transpose();
    let ksk = (&k * s) * k.transpose();
    *cov -= &ku;
    *cov -= ku.transpose();
    *cov += ksk;
    symmetrize(cov);
    Ok(log_density)
}

/// Applies a pre-built regressor to a map posterior in place. Deterministic
/// maps absorb nothing.
pub fn update_with_regressor(
    mp: &mut MapPosterior,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    noise_cov: &DMatrix<f64>,
) -> Result<()> {
    match &mut mp.covariance {
        None => Ok(()),
        Some(p) => kalman_update(&mut mp.mean, p, h, y, noise_cov),
    }
}

/// One recursive least-squares step.
pub fn rls_update(mp: &MapPosterior, rec: &LearningRecord) -> Result<MapPosterior> {
    rec.validate()?;
    let h = rec.regressor(&mp.spec)?;
    let mut out = mp.clone();
    update_with_regressor(&mut out, &h, &rec.y, &rec.noise_cov)?;
    Ok(out)
}

/// Sequential RLS over a record list.
pub fn rls_fold(prior: &MapPosterior, records: &[LearningRecord]) -> Result<MapPosterior> {
    let mut mp = prior.clone();
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|e| e.at_step(i))?;
        let h = rec.regressor(&mp.spec).map_err(|e| e.at_step(i))?;
        update_with_regressor(&mut mp, &h, &rec.y, &rec.noise_cov).map_err(|e| e.at_step(i))?;
    }
    Ok(mp)
}

/// Exact Gaussian posterior from all records at once.
pub fn batch_map(spec: &BasisSpec, prior: &MapPosterior, records: &[LearningRecord]) -> Result<MapPosterior> {
    if &prior.spec != spec {
        return Err(Error::validation("prior basis does not match the requested basis"));
    }
    let Some(p0) = &prior.covariance else {
        for rec in records {
            rec.validate()?;
            rec.regressor(spec)?;
        }
        return Ok(prior.clone());
    };
    if records.is_empty() {
        return Ok(prior.clone());
    }
    let mut hs = Vec::with_capacity(records.len());
    for rec in records {
        rec.validate()?;
        hs.push(rec.regressor(spec)?);
    }
    match SpdFactor::new(p0, INFORMATION_FORM_MAX_CONDITION) {
        Ok(p0f) => information_form(prior, &p0f, records, &hs),
        Err(_) => stacked_innovation_form(prior, p0, records, &hs),
    }
}

fn information_form(
    prior: &MapPosterior,
    p0f: &SpdFactor,
    records: &[LearningRecord],
    hs: &[DMatrix<f64>],
) -> Result<MapPosterior> {
    let mut info = p0f.inverse();
    let mut eta = p0f.solve_vec(&prior.mean);
    for (rec, h) in records.iter().zip(hs) {
        let rf = SpdFactor::new(&rec.noise_cov, MAX_INNOVATION_CONDITION)?;
        let rinv_h = rf.solve(h);
        info += h.transpose() * &rinv_h;
        eta += rinv_h.transpose() * &rec.y;
    }
    symmetrize(&mut info);
    let f = Cholesky::new(info).ok_or(Error::SingularInnovation {
        condition: f64::INFINITY,
    })?;
    let mut cov = f.inverse();
    symmetrize(&mut cov);
    let mean = &cov * eta;
    MapPosterior::new(prior.spec.clone(), mean, Some(cov))
}

fn stacked_innovation_form(
    prior: &MapPosterior,
    p0: &DMatrix<f64>,
    records: &[LearningRecord],
    hs: &[DMatrix<f64>],
) -> Result<MapPosterior> {
    let m: usize = hs.iter().map(|h| h.nrows()).sum();
    let l = prior.len();
    let mut h = DMatrix::zeros(m, l);
    let mut y = DVector::zeros(m);
    let mut r = DMatrix::zeros(m, m);
    let mut k = 0;
    for (rec, hi) in records.iter().zip(hs) {
        let mi = hi.nrows();
        h.view_mut((k, 0), (mi, l)).copy_from(hi);
        y.rows_mut(k, mi).copy_from(&rec.y);
        r.view_mut((k, k), (mi, mi)).copy_from(&rec.noise_cov);
        k += mi;
    }
    let u = p0 * h.transpose();
    let mut s = &h * &u + r;
    symmetrize(&mut s);
    let f = Cholesky::new(s).ok_or(Error::SingularInnovation {
        condition: f64::INFINITY,
    })?;
    let gain_t = f.solve(&u.transpose());
    let mean = &prior.mean + gain_t.transpose() * (y - &h * &prior.mean);
    let mut cov = p0 - &u * gain_t;
    symmetrize(&mut cov);
    MapPosterior::new(prior.spec.clone(), mean, Some(cov))
}

/// `log p(y_1..y_n)` under the prior, accumulated through the prediction-error
/// decomposition `Σ log N(y_i; H_i μ_{i−1}, H_i P_{i−1} H_iᵀ + R_i)`.
pub fn log_marginal_likelihood(spec: &BasisSpec, prior: &MapPosterior, records: &[LearningRecord]) -> Result<f64> {
    if &prior.spec != spec {
        return Err(Error::validation("prior basis does not match the requested basis"));
    }
    let mut mean = prior.mean.clone();
    let mut cov = prior.covariance_or_zeros();
    let mut total = 0.0;
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|e| e.at_step(i))?;
        let h = rec.regressor(spec).map_err(|e| e.at_step(i))?;
        total += kalman_update_with_likelihood(&mut mean, &mut cov, &h, &rec.y, &rec.noise_cov).map_err(|e| e.at_step(i))?;
    }
    Ok(total)
}

/// Maximized log-likelihood of the records under `spec` with a
/// noninformative weight prior (weighted least squares).
pub fn max_log_likelihood(spec: &BasisSpec, records: &[LearningRecord]) -> Result<f64> {
    let l = spec.len();
    let m: usize = records.iter().map(|r| r.kind.dim()).sum();
    let mut a = DMatrix::zeros(m, l);
    let mut b = DVector::zeros(m);
    let mut log_norm = 0.0;
    let mut k = 0;
    for (i, rec) in records.iter().enumerate() {
        rec.validate().map_err(|e| e.at_step(i))?;
        let h = rec.regressor(spec).map_err(|e| e.at_step(i))?;
        let chol = Cholesky::new(rec.noise_cov.clone()).ok_or_else(|| Error::validation("noise covariance"))?;
        let lower = chol.l();
        let mi = h.nrows();
        let wh = lower.solve_lower_triangular(&h).ok_or_else(|| Error::validation("noise covariance"))?;
        let wy = lower.solve_lower_triangular(&rec.y).ok_or_else(|| Error::validation("noise covariance"))?;
        a.view_mut((k, 0), (mi, l)).copy_from(&wh);
        b.rows_mut(k, mi).copy_from(&wy);
        log_norm += mi as f64 * (2.0 * std::f64::consts::PI).ln()
            + lower.diagonal().iter().map(|d| 2.0 * d.ln()).sum::<f64>();
        k += mi;
    }
    let svd = SVD::new(a.clone(), true, true);
    let tol = svd.singular_values.max() * (m.max(l) as f64) * f64::EPSILON;
    let w = svd.solve(&b, tol).map_err(|e| Error::validation(e.to_string()))?;
    let rss = (a * w - b).norm_squared();
    Ok(-0.5 * (log_norm + rss))
}

/// Akaike information criterion `2L − 2·log L_max` of each candidate.
pub fn aic_scores(candidates: &[BasisSpec], records: &[LearningRecord]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|spec| Ok(2.0 * spec.len() as f64 - 2.0 * max_log_likelihood(spec, records)?))
        .collect()
}

/// Candidate with the smallest AIC; ties go to the smaller basis.
pub fn select_order_aic(candidates: &[BasisSpec], records: &[LearningRecord]) -> Result<BasisSpec> {
    if candidates.is_empty() {
        return Err(Error::validation("at least one candidate basis is required"));
    }
    let scores = aic_scores(candidates, records)?;
    let mut best = 0;
    for i in 1..candidates.len() {
        let tie = (scores[i] - scores[best]).abs() <= 1e-9 * scores[best].abs().max(1.0);
        if (tie && candidates[i].len() < candidates[best].len()) || (!tie && scores[i] < scores[best]) {
            best = i;
        }
    }
    Ok(candidates[best].clone())
}
