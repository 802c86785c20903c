//! Magnetometer-array dead reckoning.
//!
//! A rigid array reads the local field `y_n = b0 + G·d_n` (sensor frame,
//! calibrated units) where `w = [b0, g]` are the eight parameters of the
//! first-order curl- and divergence-free model. Between two poses the local
//! map moves with the body: for a body-frame translation `Δr` and rotation
//! `R_Δ`,
//!
//! ```text
//! b0' = R_Δᵀ·(b0 + G·Δr)        G' = R_Δᵀ·G·R_Δ
//! ```
//!
//! which couples the field to the displacement and makes motion observable
//! wherever `G` is informative. [`dead_reckon_step`] replaces `G·Δr` by the
//! trapezoidal `½·(G + R_Δ·G_end·R_Δᵀ)·Δr` with `G_end` fitted to the
//! incoming scan.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, SVector, Vector3, SVD};
use serde::{Deserialize, Serialize};

use super::{NavState, OdometryInput};
use crate::error::{Error, Result};
use crate::geometry::{boxplus, exp_map, right_jacobian, RotationTangent, UnitOrientation};
use crate::linalg::skew;
use crate::map_model::{gradient_basis, gradient_from_params, params_from_gradient};
use crate::sensors::{estimate_jacobian, local_regressor, ArrayGeometry, FieldSample, JacobianEstimate};

type Vector8 = SVector<f64, 8>;
type Matrix8 = SMatrix<f64, 8, 8>;
type Vector14 = SVector<f64, 14>;
type Matrix14 = SMatrix<f64, 14, 14>;

const MAX_GN_ITERATIONS: usize = 200;
const GN_STEP_TOLERANCE: f64 = 1e-10;
/// Converged once a full step would change the whitened cost by less than this.
const GN_DECREMENT_TOLERANCE: f64 = 1e-8;
const MAX_STEP_HALVINGS: usize = 30;
/// Gauss-Newton is judged slow when the decrement shrinks less than this per
/// iteration; a Newton step is then tried.
const SLOW_CONVERGENCE_RATIO: f64 = 0.25;
/// Finite-difference step in units of the marginal information scale.
const NEWTON_DIFFERENCE: f64 = 1e-3;
const MAX_SCALED_CONDITION: f64 = 1e12;
const MAX_GRADIENT_CONDITION: f64 = 1e8;

/// Local first-order field model in the current sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalMapState {
    /// `[b0 (T), gradient parameters (T/m)]`.
    pub w: Vector8,
    pub cov: Matrix8,
}

impl LocalMapState {
    pub fn b0(&self) -> Vector3<f64> {
        self.w.fixed_rows::<3>(0).into()
    }

    pub fn g(&self) -> Matrix3<f64> {
        gradient_matrix(&self.w)
    }
}

fn gradient_matrix(w: &Vector8) -> Matrix3<f64> {
    gradient_from_params(&DVector::from_iterator(5, w.iter().skip(3).copied()))
}

fn gradient_params(g: &Matrix3<f64>) -> SVector<f64, 5> {
    SVector::from_iterator(params_from_gradient(g).iter().copied())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeadReckonConfig {
    /// Random-walk scales of the local map per metre travelled, relative to
    /// `‖b0‖` and `‖G‖` respectively.
    pub q_map_scales: [f64; 2],
    /// Gate on the normalized innovation squared per measurement dimension.
    pub nees_gate: f64,
    /// Consecutive gate violations that declare divergence.
    pub gate_count: usize,
}

impl Default for DeadReckonConfig {
    fn default() -> Self {
        Self {
            q_map_scales: [0.01, 0.05],
            nees_gate: 3.0,
            gate_count: 10,
        }
    }
}

/// Joint navigation and local-map estimate with error state
/// `[δr, δθ, δw]`, where `q = q̂ ⊗ exp(δθ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeadReckonState {
    pub nav: NavState,
    pub w: Vector8,
    pub cov: Matrix14,
    /// Normalized innovation squared per dimension of the last update.
    pub nis: f64,
    over_gate: usize,
}

impl DeadReckonState {
    /// Starts from a navigation prior and a local map fitted to one scan.
    pub fn initialize(
        nav: NavState,
        nav_cov: Matrix6<f64>,
        scan: &[FieldSample],
        geom: &ArrayGeometry,
        noise_cov: &Matrix3<f64>,
    ) -> Result<Self> {
        let est = estimate_jacobian(scan, geom, noise_cov)?;
        let mut cov = Matrix14::zeros();
        cov.fixed_view_mut::<6, 6>(0, 0).copy_from(&nav_cov);
        cov.fixed_view_mut::<8, 8>(6, 6).copy_from(&Matrix8::from_iterator(est.cov.iter().copied()));
        Ok(Self {
            nav,
            w: Vector8::from_iterator(est.params.iter().copied()),
            cov,
            nis: f64::NAN,
            over_gate: 0,
        })
    }

    /// Covariance of `(δr, δθ)`.
    pub fn nav_cov(&self) -> Matrix6<f64> {
        self.cov.fixed_view::<6, 6>(0, 0).into()
    }

    pub fn local_map(&self) -> LocalMapState {
        LocalMapState {
            w: self.w,
            cov: self.cov.fixed_view::<8, 8>(6, 6).into(),
        }
    }

    /// Odometry time update with rigid transport of the local map.
    pub fn predict(&mut self, u: &OdometryInput, cfg: &DeadReckonConfig) -> Result<()> {
        self.transport(u, cfg, None)
    }

    /// Time update whose `b0` transport integrates the gradient with the
    /// trapezoidal rule, taking the end-point gradient from the fit of the
    /// scan about to be fused. Removes the leading curvature error of
    /// [`predict`](Self::predict) for larger steps.
    pub fn predict_toward(&mut self, u: &OdometryInput, end: &JacobianEstimate, cfg: &DeadReckonConfig) -> Result<()> {
        self.transport(u, cfg, Some(end))
    }

    fn transport(&mut self, u: &OdometryInput, cfg: &DeadReckonConfig, end: Option<&JacobianEstimate>) -> Result<()> {
        u.validate()?;
        let r_body = self.nav.q.rotation_matrix();
        let dr = u.translation();
        let dq = exp_map(&u.rotation());
        let rd = dq.rotation_matrix();
        let rdt = rd.transpose();
        let b0 = Vector3::from(self.w.fixed_rows::<3>(0));
        let g = gradient_matrix(&self.w);
        let g_next = rdt * g * rd;
        // db0/dG weight and the gradient seen by a body-frame displacement
        let (weight, g_path) = match end {
            Some(e) => (0.5, 0.5 * (rdt * g + e.g * rdt)),
            None => (1.0, rdt * g),
        };
        let b0_next = rdt * b0 + g_path * dr;

        let basis = gradient_basis();
        let mut f = Matrix14::identity();
        f.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r_body * skew(&dr)));
        f.fixed_view_mut::<3, 3>(3, 3).copy_from(&rdt);
        f.fixed_view_mut::<3, 3>(6, 6).copy_from(&rdt);
        for (k, e) in basis.iter().enumerate() {
            f.fixed_view_mut::<3, 1>(6, 9 + k).copy_from(&(weight * rdt * e * dr));
            f.fixed_view_mut::<5, 1>(9, 9 + k).copy_from(&gradient_params(&(rdt * e * rd)));
        }
        let mut gn = SMatrix::<f64, 14, 6>::zeros();
        gn.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        gn.fixed_view_mut::<3, 3>(3, 3).copy_from(&Matrix3::identity());
        gn.fixed_view_mut::<3, 3>(6, 0).copy_from(&(g_path * r_body.transpose()));
        gn.fixed_view_mut::<3, 3>(6, 3).copy_from(&skew(&b0_next));
        for k in 0..3 {
            let e = skew(&Vector3::ith(k, 1.0));
            gn.fixed_view_mut::<5, 1>(9, 3 + k).copy_from(&gradient_params(&(g_next * e - e * g_next)));
        }
        // Random walk in distance: the spread after one metre is the scale.
        let root_dist = dr.norm().sqrt();
        let sb = cfg.q_map_scales[0] * b0_next.norm() * root_dist;
        let sg = cfg.q_map_scales[1] * g_next.norm() * root_dist;
        let mut q_map = Matrix14::zeros();
        for i in 6..9 {
            q_map[(i, i)] = sb * sb;
        }
        for i in 9..14 {
            q_map[(i, i)] = sg * sg;
        }
        if let Some(e) = end {
            // uncertainty of the end-point gradient enters b0
            let mut jg = SMatrix::<f64, 3, 5>::zeros();
            let dr_end = rdt * dr;
            for (k, b) in basis.iter().enumerate() {
                jg.set_column(k, &(0.5 * b * dr_end));
            }
            let cg = SMatrix::<f64, 5, 5>::from_fn(|i, j| e.cov[(3 + i, 3 + j)]);
            let mut block = q_map.fixed_view_mut::<3, 3>(6, 6);
            block += jg * cg * jg.transpose();
        }
        self.cov = f * self.cov * f.transpose() + gn * u.noise_cov * gn.transpose() + q_map;
        self.cov = 0.5 * (self.cov + self.cov.transpose());

        self.nav = super::propagate(&self.nav, u);
        self.w.fixed_rows_mut::<3>(0).copy_from(&b0_next);
        self.w.fixed_rows_mut::<5>(3).copy_from(&gradient_params(&g_next));
        Ok(())
    }

    /// Fuses one simultaneous array scan.
    pub fn update(
        &mut self,
        scan: &[FieldSample],
        geom: &ArrayGeometry,
        noise_cov: &Matrix3<f64>,
        cfg: &DeadReckonConfig,
    ) -> Result<()> {
        let fit = estimate_jacobian(scan, geom, noise_cov)?;
        self.fuse(&fit, scan, geom, noise_cov, cfg)
    }

    // The scan enters through its least-squares fit, which is a sufficient
    // statistic for the eight local parameters.
    fn fuse(
        &mut self,
        fit: &JacobianEstimate,
        scan: &[FieldSample],
        geom: &ArrayGeometry,
        noise_cov: &Matrix3<f64>,
        cfg: &DeadReckonConfig,
    ) -> Result<()> {
        let z = Vector8::from_iterator(fit.params.iter().copied());
        let z_cov = Matrix8::from_iterator(fit.cov.iter().copied());
        let r_inv = noise_cov.try_inverse().ok_or_else(|| Error::validation("sensor noise covariance is singular"))?;
        let rss: f64 = scan
            .iter()
            .map(|s| {
                let h = local_regressor(&geom.offsets()[s.sensor_id]);
                let e = s.as_vector().expect("validated by the fit") - h * z;
                e.dot(&(r_inv * e))
            })
            .sum();

        let p_xw: SMatrix<f64, 14, 8> = self.cov.fixed_view::<14, 8>(0, 6).into();
        let s = self.cov.fixed_view::<8, 8>(6, 6) + z_cov;
        let s = 0.5 * (s + s.transpose());
        let chol = s.cholesky().ok_or(Error::SingularInnovation { condition: f64::INFINITY })?;
        let innovation = z - self.w;
        let k = p_xw * chol.inverse();
        let dx = k * innovation;

        let mut i_kh = Matrix14::identity();
        let mut cols = i_kh.fixed_view_mut::<14, 8>(0, 6);
        cols -= k;
        self.cov = i_kh * self.cov * i_kh.transpose() + k * z_cov * k.transpose();
        self.cov = 0.5 * (self.cov + self.cov.transpose());

        self.nav.r += dx.fixed_rows::<3>(0);
        self.nav.q = boxplus(&self.nav.q, &RotationTangent(dx.fixed_rows::<3>(3).into()));
        self.w += dx.fixed_rows::<8>(6);

        let m = (3 * scan.len()) as f64;
        self.nis = (innovation.dot(&chol.solve(&innovation)) + rss) / m;
        if self.nis > cfg.nees_gate {
            self.over_gate += 1;
            if self.over_gate >= cfg.gate_count {
                return Err(Error::FilterDivergence { steps: self.over_gate });
            }
        } else {
            self.over_gate = 0;
        }
        Ok(())
    }
}

/// One dead-reckoning recursion: odometry time update with map transport,
/// then the array measurement update.
pub fn dead_reckon_step(
    state: &DeadReckonState,
    u: &OdometryInput,
    scan: &[FieldSample],
    geom: &ArrayGeometry,
    noise_cov: &Matrix3<f64>,
    cfg: &DeadReckonConfig,
) -> Result<DeadReckonState> {
    let fit = estimate_jacobian(scan, geom, noise_cov)?;
    let mut next = state.clone();
    next.predict_toward(u, &fit, cfg)?;
    next.fuse(&fit, scan, geom, noise_cov, cfg)?;
    Ok(next)
}

/// Body-frame velocity from the field differential `G·v = Ḃ − B×ω`.
pub fn velocity_from_field(b: &Vector3<f64>, b_dot: &Vector3<f64>, g: &Matrix3<f64>, omega: &Vector3<f64>) -> Result<Vector3<f64>> {
    let svd = SVD::new(*g, true, true);
    let (lo, hi) = (svd.singular_values.min(), svd.singular_values.max());
    let condition = hi / lo;
    if !(condition < MAX_GRADIENT_CONDITION) {
        return Err(Error::SingularGradient { condition });
    }
    svd.solve(&(b_dot - b.cross(omega)), 0.0)
        .map_err(|e| Error::validation(e.to_string()))
}

/// Gaussian prior on the displacement between two scans; the rotation
/// error is a tangent at `dq_mean`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplacementPrior {
    pub dr_mean: Vector3<f64>,
    pub dq_mean: UnitOrientation,
    /// Covariance of `(Δr, ε)`; `None` is flat.
    pub cov: Option<Matrix6<f64>>,
}

impl DisplacementPrior {
    pub fn flat() -> Self {
        Self {
            dr_mean: Vector3::zeros(),
            dq_mean: UnitOrientation::identity(),
            cov: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementEstimate {
    /// Translation of the second scan, expressed in the first sensor frame.
    pub dr: Vector3<f64>,
    /// Attitude of the second sensor frame relative to the first.
    pub dq: UnitOrientation,
    /// Local map in the first sensor frame.
    pub map: LocalMapState,
    /// Laplace covariance of `(Δr, ε, w)`.
    pub cov: Matrix14,
    pub iterations: usize,
}

fn scan_values(scan: &[FieldSample], geom: &ArrayGeometry) -> Result<Vec<Vector3<f64>>> {
    if scan.len() != geom.len() {
        return Err(Error::validation("each scan needs one sample per array sensor"));
    }
    let mut out = vec![None; geom.len()];
    for s in scan {
        s.validate()?;
        let y = s.as_vector().ok_or_else(|| Error::validation("array samples must be vector readings"))?;
        let slot = out
            .get_mut(s.sensor_id)
            .ok_or_else(|| Error::validation(format!("sensor id {} outside the array", s.sensor_id)))?;
        if slot.replace(y).is_some() {
            return Err(Error::validation(format!("duplicate sample for sensor {}", s.sensor_id)));
        }
    }
    Ok(out.into_iter().map(|y| y.expect("one sample per sensor")).collect())
}

/// Two-scan model and Jacobian at `θ = (Δr, ε, w)`.
fn two_scan_model(geom: &ArrayGeometry, theta: &Vector14, dq_mean: &UnitOrientation) -> (DVector<f64>, DMatrix<f64>) {
    let n = geom.len();
    let dr = Vector3::from(theta.fixed_rows::<3>(0));
    let eps = Vector3::from(theta.fixed_rows::<3>(3));
    let w = Vector8::from(theta.fixed_rows::<8>(6));
    let b0 = Vector3::from(w.fixed_rows::<3>(0));
    let g = gradient_matrix(&w);
    let rd = boxplus(dq_mean, &RotationTangent(eps)).rotation_matrix();
    let rdt = rd.transpose();
    let c = rdt * (b0 + g * dr);
    let m = rdt * g * rd;
    let jr = right_jacobian(&eps);
    let basis = gradient_basis();
    let mut h = DVector::zeros(6 * n);
    let mut jac = DMatrix::zeros(6 * n, 14);
    for (i, d) in geom.offsets().iter().enumerate() {
        let local = local_regressor(d);
        h.fixed_rows_mut::<3>(3 * i).copy_from(&(local * w));
        jac.fixed_view_mut::<3, 8>(3 * i, 6).copy_from(&local);

        let k = 3 * (n + i);
        let md = m * d;
        h.fixed_rows_mut::<3>(k).copy_from(&(c + md));
        jac.fixed_view_mut::<3, 3>(k, 0).copy_from(&(rdt * g));
        jac.fixed_view_mut::<3, 3>(k, 3).copy_from(&((skew(&c) + skew(&md) - m * skew(d)) * jr));
        jac.fixed_view_mut::<3, 3>(k, 6).copy_from(&rdt);
        let p = dr + rd * d;
        for (j, e) in basis.iter().enumerate() {
            jac.fixed_view_mut::<3, 1>(k, 9 + j).copy_from(&(rdt * e * p));
        }
    }
    (h, jac)
}

fn whitening(noise_cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    let chol = noise_cov
        .cholesky()
        .ok_or_else(|| Error::validation("sensor noise covariance must be positive definite"))?;
    chol.l()
        .try_inverse()
        .ok_or_else(|| Error::validation("sensor noise covariance must be positive definite"))
}

/// `JᵀR⁻¹J` and `JᵀR⁻¹·res` with the noise whitened per sensor.
fn normal_equations(jac: &DMatrix<f64>, res: &DVector<f64>, white: &Matrix3<f64>) -> (Matrix14, Vector14) {
    let mut a = Matrix14::zeros();
    let mut b = Vector14::zeros();
    for i in 0..jac.nrows() / 3 {
        let wj: SMatrix<f64, 3, 14> = white * jac.fixed_view::<3, 14>(3 * i, 0);
        let wr = white * res.fixed_rows::<3>(3 * i);
        a += wj.transpose() * wj;
        b += wj.transpose() * wr;
    }
    (a, b)
}

/// Solves `A·x = b` after Jacobi scaling.
fn scaled_solve(a: &Matrix14, b: &Vector14) -> Result<Vector14> {
    let d = a.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 });
    if d.iter().any(|&x| x == 0.0) {
        return Err(Error::RankDeficient("a displacement or map parameter is unobserved".into()));
    }
    let scaled = Matrix14::from_fn(|i, j| a[(i, j)] * d[i] * d[j]);
    let sv = scaled.singular_values();
    if !(sv.max() / sv.min() < MAX_SCALED_CONDITION) {
        return Err(Error::RankDeficient(
            "the two scans cannot identify displacement and local map jointly".into(),
        ));
    }
    let x = scaled
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal equations are not positive definite".into()))?
        .solve(&b.component_mul(&d));
    Ok(x.component_mul(&d))
}

fn prior_information(prior: &DisplacementPrior) -> Result<Option<Matrix6<f64>>> {
    prior
        .cov
        .map(|p| {
            p.cholesky()
                .map(|c| c.inverse())
                .ok_or_else(|| Error::validation("displacement prior covariance must be positive definite"))
        })
        .transpose()
}

/// Prior mean minus the displacement part of `θ`.
fn prior_deviation(prior: &DisplacementPrior, theta: &Vector14) -> SVector<f64, 6> {
    let mut dev = SVector::<f64, 6>::zeros();
    dev.fixed_rows_mut::<3>(0).copy_from(&(prior.dr_mean - theta.fixed_rows::<3>(0)));
    dev.fixed_rows_mut::<3>(3).copy_from(&(-theta.fixed_rows::<3>(3)));
    dev
}

/// Newton step with the Hessian differentiated numerically from the
/// analytic gradient; `None` unless the Hessian is positive definite.
fn newton_step(
    normal: &impl Fn(&Vector14) -> (Matrix14, Vector14),
    theta: &Vector14,
    a: &Matrix14,
    b: &Vector14,
) -> Option<Vector14> {
    let mut hess = Matrix14::zeros();
    for j in 0..14 {
        let h = NEWTON_DIFFERENCE / a[(j, j)].sqrt();
        let mut up = *theta;
        up[j] += h;
        let mut down = *theta;
        down[j] -= h;
        hess.set_column(j, &((normal(&down).1 - normal(&up).1) / (2.0 * h)));
    }
    let hess = 0.5 * (hess + hess.transpose());
    let d = a.diagonal().map(|x| 1.0 / x.sqrt());
    let scaled = Matrix14::from_fn(|i, j| hess[(i, j)] * d[i] * d[j]);
    let x = scaled.cholesky()?.solve(&b.component_mul(&d));
    Some(x.component_mul(&d))
}

/// Joint Gauss-Newton estimate of the displacement between two scans and
/// the local map, with Laplace covariance.
pub fn displacement_gn(
    scan1: &[FieldSample],
    scan2: &[FieldSample],
    geom: &ArrayGeometry,
    prior: &DisplacementPrior,
    noise_cov: &Matrix3<f64>,
) -> Result<DisplacementEstimate> {
    let y1 = scan_values(scan1, geom)?;
    let y2 = scan_values(scan2, geom)?;
    let n = geom.len();
    let y = DVector::from_iterator(6 * n, y1.iter().chain(&y2).flat_map(|v| v.iter().copied()));
    let white = whitening(noise_cov)?;
    let prior_info = prior_information(prior)?;
    let fit = estimate_jacobian(scan1, geom, noise_cov)?;

    let mut theta = Vector14::zeros();
    theta.fixed_rows_mut::<3>(0).copy_from(&prior.dr_mean);
    theta.fixed_rows_mut::<8>(6).copy_from(&Vector8::from_iterator(fit.params.iter().copied()));
    let cost = |theta: &Vector14| -> f64 {
        let (h, _) = two_scan_model(geom, theta, &prior.dq_mean);
        let res = &y - h;
        let data: f64 = (0..2 * n).map(|i| (white * res.fixed_rows::<3>(3 * i)).norm_squared()).sum();
        let penalty = prior_info.as_ref().map_or(0.0, |info| {
            let dev = prior_deviation(prior, theta);
            dev.dot(&(info * dev))
        });
        data + penalty
    };
    // (JᵀR⁻¹J + prior information, negative cost gradient / 2)
    let normal = |theta: &Vector14| -> (Matrix14, Vector14) {
        let (h, jac) = two_scan_model(geom, theta, &prior.dq_mean);
        let (mut a, mut b) = normal_equations(&jac, &(&y - h), &white);
        if let Some(info) = &prior_info {
            let mut block = a.fixed_view_mut::<6, 6>(0, 0);
            block += info;
            let mut head = b.fixed_rows_mut::<6>(0);
            head += info * prior_deviation(prior, theta);
        }
        (a, b)
    };
    let mut current = cost(&theta);
    let mut last = f64::INFINITY;
    let mut previous_decrement = f64::INFINITY;
    for iteration in 1..=MAX_GN_ITERATIONS {
        let (a, b) = normal(&theta);
        let mut step = scaled_solve(&a, &b)?;
        // Newton decrement: the step measured against the current information
        let decrement = step.dot(&(a * step));
        if decrement > SLOW_CONVERGENCE_RATIO * previous_decrement {
            if let Some(newton) = newton_step(&normal, &theta, &a, &b) {
                if cost(&(theta + newton)) < cost(&(theta + step)) {
                    step = newton;
                }
            }
        }
        previous_decrement = decrement;
        let mut halvings = 0;
        let mut next = cost(&(theta + step));
        while !(next <= current) && halvings < MAX_STEP_HALVINGS {
            step *= 0.5;
            halvings += 1;
            next = cost(&(theta + step));
        }
        theta += step;
        current = next;
        // displacement part of the step, in metres and radians
        last = step.fixed_rows::<6>(0).norm();
        if decrement < GN_DECREMENT_TOLERANCE || last < GN_STEP_TOLERANCE {
            let (a, _) = normal(&theta);
            let cov = a.try_inverse().ok_or_else(|| Error::RankDeficient("singular information at the optimum".into()))?;
            let cov = 0.5 * (cov + cov.transpose());
            return Ok(DisplacementEstimate {
                dr: theta.fixed_rows::<3>(0).into(),
                dq: boxplus(&prior.dq_mean, &RotationTangent(theta.fixed_rows::<3>(3).into())),
                map: LocalMapState {
                    w: theta.fixed_rows::<8>(6).into(),
                    cov: cov.fixed_view::<8, 8>(6, 6).into(),
                },
                cov,
                iterations: iteration,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: MAX_GN_ITERATIONS,
        step: last,
    })
}

/// Lower bound on the covariance of `(Δr, ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrlbBound {
    #[serde(with = "mat6_rows")]
    pub covariance: Matrix6<f64>,
    /// The Fisher information is singular; entries touching the unbounded
    /// directions are infinite.
    pub unbounded: bool,
}

mod mat6_rows {
    use nalgebra::Matrix6;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    // Infinite entries serialize as null.
    pub fn serialize<S: Serializer>(m: &Matrix6<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Option<f64>>> = (0..6)
            .map(|i| (0..6).map(|j| m[(i, j)].is_finite().then_some(m[(i, j)])).collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix6<f64>, D::Error> {
        let rows = Vec::<Vec<Option<f64>>>::deserialize(d)?;
        Ok(Matrix6::from_fn(|i, j| {
            rows.get(i).and_then(|r| r.get(j)).copied().flatten().unwrap_or(f64::INFINITY)
        }))
    }
}

/// Inverse Fisher information of the two-scan model at zero displacement,
/// reduced to the displacement block.
pub fn crlb_displacement(
    geom: &ArrayGeometry,
    b0: &Vector3<f64>,
    g_true: &Matrix3<f64>,
    noise_cov: &Matrix3<f64>,
    prior_cov: Option<&Matrix6<f64>>,
) -> Result<CrlbBound> {
    let scale = g_true.amax().max(f64::MIN_POSITIVE);
    if (g_true - g_true.transpose()).amax() > 1e-9 * scale || g_true.trace().abs() > 1e-9 * scale {
        return Err(Error::validation("the field gradient must be symmetric and traceless"));
    }
    let white = whitening(noise_cov)?;
    let mut theta = Vector14::zeros();
    theta.fixed_rows_mut::<3>(6).copy_from(b0);
    theta.fixed_rows_mut::<5>(9).copy_from(&gradient_params(g_true));
    let (_, jac) = two_scan_model(geom, &theta, &UnitOrientation::identity());
    let (mut fim, _) = normal_equations(&jac, &DVector::zeros(6 * geom.len()), &white);
    if let Some(p) = prior_cov {
        let info = p
            .cholesky()
            .ok_or_else(|| Error::validation("prior covariance must be positive definite"))?
            .inverse();
        let mut block = fim.fixed_view_mut::<6, 6>(0, 0);
        block += info;
    }
    let d = fim.diagonal().map(|x| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 });
    let scaled = Matrix14::from_fn(|i, j| fim[(i, j)] * d[i] * d[j]);
    let eig = scaled.symmetric_eigen();
    let top = eig.eigenvalues.max();
    let mut inv = Matrix14::zeros();
    let mut null_weight = Vector14::zeros();
    for k in 0..14 {
        let v = eig.eigenvectors.column(k);
        let l = eig.eigenvalues[k];
        if l > 1e-12 * top {
            inv += v * v.transpose() / l;
        } else {
            null_weight += v.map(|x| x * x);
        }
    }
    for i in 0..14 {
        if d[i] == 0.0 {
            null_weight[i] = 1.0;
        }
    }
    let cov = Matrix14::from_fn(|i, j| inv[(i, j)] * d[i] * d[j]);
    let unbounded = null_weight.iter().any(|&x| x > 1e-12);
    let covariance = Matrix6::from_fn(|i, j| {
        if null_weight[i] > 1e-12 || null_weight[j] > 1e-12 {
            f64::INFINITY
        } else {
            cov[(i, j)]
        }
    });
    Ok(CrlbBound { covariance, unbounded })
}
