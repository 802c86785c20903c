//! End-to-end acceptance suite.
//!
//! Every criterion runs in sequence inside one test so that wall-clock
//! budgets are measured without interference, and each prints one
//! `PASS`/`FAIL` line on stderr. `MAGLOC_ACCEPTANCE=3,7` restricts the run
//! to the listed criteria.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use magloc::estimators::{
    crlb_displacement, dead_reckon_step, displacement_gn, mm_likelihood, DeadReckonConfig, DeadReckonState,
    DisplacementPrior, FilterConfig, Observation,
};
use magloc::geometry::{exp_map, log_map};
use magloc::harness::{
    compute_metrics, run_scenario_with_map, EstimateRow, EstimatorConfig, OdometryConfig, OutputConfig, Scenario,
    SensorConfig, Technique, TrajectorySpec, TruthRow,
};
use magloc::map_learning::{rls_fold, LearningRecord};
use magloc::map_model::{spectral_prior, BasisSpec, DomainBox, FieldOutput, SpectralParams};
use magloc::nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use magloc::sensors::{ellipsoid_calibrate, relative_spread, synthesize};
use magloc::{
    ArrayGeometry, FieldSample, MapPosterior, MeasurementKind, NavState, OdometryInput, ParticleSet, SensorModel,
    RotationTangent, TruthField, UnitOrientation,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

type Criterion = fn() -> Outcome;

const CRITERIA: [(&str, Criterion); 10] = [
    ("field laws", field_laws),
    ("recursive equals batch learning", rls_equals_batch),
    ("marginalized likelihood", marginalized_likelihood),
    ("multimodal corridor", multimodal_corridor),
    ("map-matching accuracy", map_matching_accuracy),
    ("SLAM loop closure", slam_loop_closure),
    ("displacement bound", displacement_bound),
    ("calibration", calibration),
    ("filter consistency", filter_consistency),
    ("determinism", determinism),
];

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<usize>> = std::env::var("MAGLOC_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (i, (name, run)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|e| Outcome::new(false, format!("panicked: {}", panic_message(&e))));
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        let line = format!(
            "acceptance {n:>2} {status} {name}: {} [{:.1} s]",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        // written to the raw handle so the line survives output capture
        writeln!(std::io::stderr(), "{line}").unwrap();
        if !outcome.pass {
            failed.push(n);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_default()
}

fn within(elapsed: Duration, budget_s: f64) -> bool {
    elapsed.as_secs_f64() < budget_s
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(gaussian(rng), gaussian(rng), gaussian(rng))
}

fn random_attitude(rng: &mut ChaCha8Rng) -> UnitOrientation {
    UnitOrientation::new(gaussian(rng), gaussian(rng), gaussian(rng), gaussian(rng))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Central-difference Jacobian `J[i][j] = ∂B_i/∂x_j`.
fn fd_jacobian(f: impl Fn(&Vector3<f64>) -> Vector3<f64>, r: &Vector3<f64>, h: f64) -> Matrix3<f64> {
    let mut j = Matrix3::zeros();
    for k in 0..3 {
        let mut e = Vector3::zeros();
        e[k] = h;
        j.set_column(k, &((f(&(r + e)) - f(&(r - e))) / (2.0 * h)));
    }
    j
}

fn curl_and_divergence(j: &Matrix3<f64>) -> (f64, f64) {
    let curl = Vector3::new(j[(2, 1)] - j[(1, 2)], j[(0, 2)] - j[(2, 0)], j[(1, 0)] - j[(0, 1)]);
    (curl.norm() / j.norm(), j.trace().abs() / j.norm())
}

// 1 -------------------------------------------------------------------------

fn field_laws() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_dipole: (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let mut field = TruthField::uniform(gaussian3(&mut rng) * 3e-5);
        for _ in 0..rng.random_range(1..=6) {
            let p = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..-0.5));
            field = field.with_source(p, gaussian3(&mut rng) * 50.0);
        }
        for _ in 0..5 {
            let r = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..1.0));
            let h = 1e-5 * field.clearance(&r);
            let j = fd_jacobian(|x| field.static_field(x).unwrap(), &r, h);
            let (c, d) = curl_and_divergence(&j);
            worst_dipole = (worst_dipole.0.max(c), worst_dipole.1.max(d));
        }
    }

    let domain = DomainBox::new(Vector3::new(-1.0, -1.0, -0.5), Vector3::new(1.0, 1.5, 0.5));
    let poly = BasisSpec::polynomial(domain.clone(), Vector3::new(0.1, 0.2, 0.0));
    let spectral = BasisSpec::spectral(
        domain.clone(),
        SpectralParams { modes: [5, 4, 3], sigma_se: 1.0, length_scale: 0.4, sigma_lin: 1.0, output: FieldOutput::Vector },
    );
    let inside = |rng: &mut ChaCha8Rng| {
        Vector3::from_fn(|k, _| rng.random_range(domain.min[k] + 0.1..domain.max[k] - 0.1))
    };
    let mut worst_poly: (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut worst_spectral: (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let w = DVector::from_fn(poly.len(), |_, _| gaussian(&mut rng));
        let r = inside(&mut rng);
        let field = |x: &Vector3<f64>| Vector3::from_iterator((poly.field_basis(x).unwrap() * &w).iter().copied());
        let (c, d) = curl_and_divergence(&fd_jacobian(field, &r, 1e-5));
        let analytic = poly.field_jacobian(&w, &r).unwrap();
        let asym = (analytic - analytic.transpose()).norm() / analytic.norm();
        worst_poly = (worst_poly.0.max(c), worst_poly.1.max(d), worst_poly.2.max(asym.max(analytic.trace().abs() / analytic.norm())));

        let w = DVector::from_fn(spectral.len(), |_, _| gaussian(&mut rng));
        let r = inside(&mut rng);
        let field = |x: &Vector3<f64>| Vector3::from_iterator((spectral.field_basis(x).unwrap() * &w).iter().copied());
        let (c, _) = curl_and_divergence(&fd_jacobian(field, &r, 1e-5));
        let analytic = spectral.field_jacobian(&w, &r).unwrap();
        let asym = (analytic - analytic.transpose()).norm() / analytic.norm();
        worst_spectral = (worst_spectral.0.max(c), worst_spectral.1.max(asym));
    }
    let elapsed = start.elapsed();
    let pass = worst_dipole.0 < 1e-8
        && worst_dipole.1 < 1e-8
        && worst_poly.0 < 1e-8
        && worst_poly.1 < 1e-8
        && worst_poly.2 < 1e-12
        && worst_spectral.0 < 1e-8
        && worst_spectral.1 < 1e-12
        && within(elapsed, 10.0);
    Outcome::new(
        pass,
        format!(
            "dipoles curl {:.1e} div {:.1e}; polynomial curl {:.1e} div {:.1e} analytic {:.1e}; spectral curl {:.1e} analytic {:.1e}",
            worst_dipole.0, worst_dipole.1, worst_poly.0, worst_poly.1, worst_poly.2, worst_spectral.0, worst_spectral.1
        ),
    )
}

// 2 -------------------------------------------------------------------------

/// Information-form posterior accumulated from scratch.
fn information_posterior(prior: &MapPosterior, records: &[LearningRecord]) -> (DVector<f64>, DMatrix<f64>) {
    let p0 = prior.covariance.as_ref().unwrap();
    let p0_inv = p0.clone().cholesky().unwrap().inverse();
    let mut info = p0_inv.clone();
    let mut eta = &p0_inv * &prior.mean;
    for rec in records {
        let h = rec.regressor(&prior.spec).unwrap();
        let r_inv = rec.noise_cov.clone().cholesky().unwrap().inverse();
        let ht_rinv = h.transpose() * r_inv;
        info += &ht_rinv * &h;
        eta += ht_rinv * &rec.y;
    }
    let chol = info.cholesky().unwrap();
    (chol.solve(&eta), chol.inverse())
}

fn random_problem(rng: &mut ChaCha8Rng) -> (MapPosterior, Vec<LearningRecord>) {
    let domain = DomainBox::new(Vector3::new(-1.0, -1.0, -0.5), Vector3::new(1.0, 1.0, 0.5));
    let spec = match rng.random_range(0..4) {
        0 => {
            let cells = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
            BasisSpec::grid(domain.clone(), cells, FieldOutput::Vector)
        }
        1 => {
            let cells = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=5)];
            BasisSpec::grid(domain.clone(), cells, FieldOutput::Scalar)
        }
        2 => BasisSpec::polynomial(domain.clone(), gaussian3(rng) * 0.1),
        _ => {
            let modes = [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=5)];
            let output = if rng.random_bool(0.5) { FieldOutput::Vector } else { FieldOutput::Scalar };
            BasisSpec::spectral(
                domain.clone(),
                SpectralParams { modes, sigma_se: 1.0, length_scale: 0.5, sigma_lin: 1.0, output },
            )
        }
    };
    let l = spec.len();
    assert!(l <= 200);
    let a = DMatrix::from_fn(l, l, |_, _| gaussian(rng));
    let p0 = (&a * a.transpose()) / l as f64 + DMatrix::identity(l, l) * 0.5;
    let prior = MapPosterior::new(spec.clone(), DVector::from_fn(l, |_, _| gaussian(rng)), Some(p0)).unwrap();
    let natural = spec.measurement_kind();
    let n = rng.random_range(1..=500);
    let records = (0..n)
        .map(|_| {
            let kind = match natural {
                MeasurementKind::Magnitude => MeasurementKind::Magnitude,
                _ if rng.random_bool(0.5) => MeasurementKind::VectorField,
                _ => MeasurementKind::PotentialGradient,
            };
            let m = kind.dim();
            let r = Vector3::from_fn(|k, _| rng.random_range(domain.min[k]..domain.max[k]));
            let b = DMatrix::from_fn(m, m, |_, _| gaussian(rng));
            let cov = (&b * b.transpose()) * 0.05 + DMatrix::identity(m, m) * 0.02;
            let y = DVector::from_fn(m, |_, _| gaussian(rng));
            LearningRecord::new(r, random_attitude(rng), y, cov, kind).unwrap()
        })
        .collect();
    (prior, records)
}

fn rls_equals_batch() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst_mean, mut worst_cov): (f64, f64) = (0.0, 0.0);
    let mut kinds = [0usize; 3];
    for _ in 0..50 {
        let (prior, records) = random_problem(&mut rng);
        for r in &records {
            kinds[match r.kind {
                MeasurementKind::VectorField => 0,
                MeasurementKind::PotentialGradient => 1,
                MeasurementKind::Magnitude => 2,
            }] += 1;
        }
        let rls = rls_fold(&prior, &records).unwrap();
        let (mean, cov) = information_posterior(&prior, &records);
        worst_mean = worst_mean.max((&rls.mean - &mean).norm() / mean.norm());
        worst_cov = worst_cov.max((rls.covariance.as_ref().unwrap() - &cov).norm() / cov.norm());
    }
    let elapsed = start.elapsed();
    Outcome::new(
        worst_mean < 1e-8 && worst_cov < 1e-8 && within(elapsed, 30.0),
        format!(
            "worst relative mean {worst_mean:.1e}, covariance {worst_cov:.1e}; records vector {} gradient {} magnitude {}",
            kinds[0], kinds[1], kinds[2]
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn marginalized_likelihood() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let cells = [rng.random_range(1..=4), rng.random_range(1..=3), 1];
        let domain = DomainBox::new(Vector3::zeros(), Vector3::new(cells[0] as f64, cells[1] as f64, 1.0));
        let spec = BasisSpec::grid(domain, cells, FieldOutput::Scalar);
        let l = spec.len();
        let a = DMatrix::from_fn(l, l, |_, _| gaussian(&mut rng));
        let p = (&a * a.transpose()) * rng.random_range(0.05..0.5) + DMatrix::identity(l, l) * 0.05;
        let mu = DVector::from_fn(l, |_, _| gaussian(&mut rng));
        let mp = MapPosterior::new(spec.clone(), mu.clone(), Some(p.clone())).unwrap();
        let cell = rng.random_range(0..l);
        let x = NavState::at_rest(spec.grid_cell_center(cell).unwrap(), random_attitude(&mut rng));
        let sr: f64 = rng.random_range(0.1..1.0);
        let y = mu[cell] + gaussian(&mut rng) * (p[(cell, cell)] + sr * sr).sqrt();
        let noise = DMatrix::from_element(1, 1, sr * sr);
        let ll = mm_likelihood(&mp, MeasurementKind::Magnitude, &x, &FieldSample::magnitude(0.0, 0, y), &noise).unwrap();

        // the reading involves one weight only; integrate it against its marginal
        let (m, v) = (mu[cell], p[(cell, cell)]);
        let half = 12.0 * v.sqrt().max(sr);
        let n = 200_000;
        let dw = 2.0 * half / n as f64;
        let total: f64 = (0..n)
            .map(|i| {
                let w = m - half + (i as f64 + 0.5) * dw;
                let prior = (-(w - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                let lik = (-(y - w).powi(2) / (2.0 * sr * sr)).exp() / (2.0 * PI * sr * sr).sqrt();
                prior * lik * dw
            })
            .sum();
        worst = worst.max((ll - total.ln()).abs());
    }
    Outcome::new(worst < 1e-6, format!("worst |Δ log-likelihood| {worst:.1e} over 20 maps"))
}

// 4 -------------------------------------------------------------------------

fn multimodal_corridor() -> Outcome {
    let start = Instant::now();
    // 28 cells of 0.5 m, mirror-symmetric about x = 7 except the four cells at each end
    let n_cells = 28;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut values = vec![0.0; n_cells];
    for i in 4..n_cells / 2 {
        let v = 5e-5 + 5e-6 * gaussian(&mut rng);
        values[i] = v;
        values[n_cells - 1 - i] = v;
    }
    for i in 0..4 {
        values[i] = 5e-5 - 8e-6 - 2e-6 * i as f64;
        values[n_cells - 1 - i] = 5e-5 + 8e-6 + 2e-6 * i as f64;
    }
    let domain = DomainBox::new(Vector3::new(0.0, -1.0, -0.5), Vector3::new(14.0, 1.0, 0.5));
    let spec = BasisSpec::grid(domain, [n_cells, 1, 1], FieldOutput::Scalar);
    let map = MapPosterior::deterministic(spec, DVector::from_vec(values.clone())).unwrap();
    let noise_std = 2e-7;
    let noise = DMatrix::from_element(1, 1, noise_std * noise_std);

    // lattice prior over position and both headings, symmetric under the mirror
    let n = 2000;
    let states = (0..n)
        .map(|i| {
            let x = ((i / 2) as f64 + 0.5) * 14.0 / (n / 2) as f64;
            NavState::at_rest(Vector3::new(x, 0.0, 0.0), UnitOrientation::from_yaw(if i % 2 == 0 { 0.0 } else { PI }))
        })
        .collect();
    let mut ps = ParticleSet::from_states(states, None).unwrap();
    let cfg = FilterConfig { n_particles: n, seed: 404, ..FilterConfig::default() };
    let u = OdometryInput::noiseless(1.0, Vector3::new(0.5, 0.0, 0.0), Vector3::zeros()).with_noise_std(0.02, 0.005);

    let x0 = 8.25;
    let split = |ps: &ParticleSet, x: f64| {
        let (mut near, mut mirror) = (0.0, 0.0);
        for p in ps.particles() {
            let w = p.log_weight.exp();
            if (p.state.r.x - x).abs() < 1.0 {
                near += w;
            } else if (p.state.r.x - (14.0 - x)).abs() < 1.0 {
                mirror += w;
            }
        }
        (near, mirror)
    };
    let mut before = (0.0, 0.0);
    let mut after = (0.0, 0.0);
    for k in 0..=10 {
        let x = x0 + 0.5 * k as f64;
        if k > 0 {
            ps.predict(&u, &cfg).unwrap();
        }
        let mut stream = magloc::rng::stream(&[404, k as u64]);
        let cell = ((x / 0.5) as usize).min(n_cells - 1);
        let y = values[cell] + noise_std * stream.sample::<f64, _>(StandardNormal);
        let reading = [FieldSample::magnitude(k as f64, 0, y)];
        ps.update_shared(&map, &Observation::new(&reading, None, &noise), &cfg).unwrap();
        if k == 5 {
            before = split(&ps, x);
        }
        if k == 10 {
            after = split(&ps, x);
        }
    }
    let share = before.0 / (before.0 + before.1);
    let elapsed = start.elapsed();
    let pass = before.0 + before.1 > 0.95 && (share - 0.5).abs() <= 0.05 && after.0 > 0.95 && within(elapsed, 60.0);
    Outcome::new(
        pass,
        format!(
            "before: clusters hold {:.3}, true share {share:.3}; after: true cluster {:.3}",
            before.0 + before.1,
            after.0
        ),
    )
}

// 5 -------------------------------------------------------------------------

/// Indoor-scale anomaly field: dipoles on a jittered lattice under the floor.
fn indoor_field(seed: u64, lo: f64, hi: f64) -> TruthField {
    dipole_lattice(seed, lo, hi, 1.2, 1.0, 60.0)
}

/// Earth background plus jittered dipoles on a square lattice `depth` below
/// the floor.
fn dipole_lattice(seed: u64, lo: f64, hi: f64, spacing: f64, depth: f64, moment: f64) -> TruthField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = TruthField::uniform(Vector3::new(1.5e-5, 2e-6, -4.5e-5));
    let n = ((hi - lo) / spacing).ceil() as usize + 1;
    for i in 0..n {
        for j in 0..n {
            let p = Vector3::new(
                lo + spacing * i as f64 + rng.random_range(-0.3..0.3),
                lo + spacing * j as f64 + rng.random_range(-0.3..0.3),
                -depth + rng.random_range(-0.2..0.2),
            );
            field = field.with_source(p, gaussian3(&mut rng) * moment);
        }
    }
    field
}

fn base_scenario(seed: u64, field: TruthField, trajectory: TrajectorySpec, model: SensorModel) -> Scenario {
    Scenario {
        seed,
        field,
        trajectory,
        sensors: SensorConfig { model, array: None, rate_hz: 5.0, reference_m: None, reference_window_s: 1.0 },
        odometry: OdometryConfig::default(),
        estimator: EstimatorConfig::default(),
        map: None,
        output: OutputConfig::default(),
    }
}

fn waypoints(points: &[(f64, f64)], speed: f64) -> TrajectorySpec {
    TrajectorySpec::Waypoints {
        waypoints_m: points.iter().map(|&(x, y)| Vector3::new(x, y, 0.0)).collect(),
        speed_mps: speed,
        yaw_rad: None,
    }
}

fn path_length(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| ((w[1].0 - w[0].0).powi(2) + (w[1].1 - w[0].1).powi(2)).sqrt()).sum()
}

/// Learns a spectral potential map from a lawnmower survey over `[lo, hi]²`.
fn survey_map(field: &TruthField, lo: f64, hi: f64, noise_std: f64) -> MapPosterior {
    let spec = BasisSpec::spectral(
        DomainBox::new(Vector3::new(lo - 1.0, lo - 1.0, -0.5), Vector3::new(hi + 1.0, hi + 1.0, 0.5)),
        SpectralParams { modes: [14, 14, 2], sigma_se: 3e-6, length_scale: 0.6, sigma_lin: 6e-5, output: FieldOutput::Vector },
    );
    let model = SensorModel::vector(noise_std);
    let mut records = Vec::new();
    let step = 0.2;
    let lines = ((hi - lo) / step).round() as usize + 1;
    for i in 0..lines {
        for j in 0..lines {
            let jj = if i % 2 == 0 { j } else { lines - 1 - j };
            let r = Vector3::new(lo + step * jj as f64, lo + step * i as f64, 0.0);
            let q = UnitOrientation::from_yaw(if i % 2 == 0 { 0.0 } else { PI });
            let y = synthesize(field, &r, &q, &model, None, (i * lines + j) as f64, 55).unwrap().remove(0).value;
            records.push(LearningRecord::isotropic(r, q, y, noise_std, MeasurementKind::VectorField).unwrap());
        }
    }
    rls_fold(&spectral_prior(&spec).unwrap(), &records).unwrap()
}

const ROOM_PATH: [(f64, f64); 13] = [
    (0.0, 0.0),
    (4.0, 0.0),
    (4.0, 4.0),
    (0.0, 4.0),
    (0.0, 0.0),
    (4.0, 4.0),
    (4.0, 0.0),
    (0.0, 4.0),
    (0.0, 2.0),
    (4.0, 2.0),
    (2.0, 4.0),
    (2.0, 0.0),
    (0.0, 0.0),
];

fn map_matching_accuracy() -> Outcome {
    let start = Instant::now();
    let field = indoor_field(505, -1.5, 5.5);
    let noise_std = 2e-7;
    let learned = survey_map(&field, -0.5, 4.5, noise_std);
    let map = MapPosterior::deterministic(learned.spec.clone(), learned.mean.clone()).unwrap();
    let mut path = ROOM_PATH.to_vec();
    path.push((0.0, 50.0 - path_length(&ROOM_PATH)));
    let length = path_length(&path);
    let mut rmse = Vec::new();
    let mut odometry_only = Vec::new();
    for seed in 0..10 {
        let mut s = base_scenario(seed, field.clone(), waypoints(&path, 1.0), SensorModel::vector(noise_std));
        s.odometry = OdometryConfig { position_noise_fraction: 0.02, position_noise_floor_m: 0.0, attitude_noise_std_rad: 0.01, heading_only: true };
        s.estimator = EstimatorConfig {
            technique: Technique::MapMatch,
            n_particles: 300,
            init_position_std_m: 0.2,
            init_yaw_std_rad: 0.05,
            noise_std_t: Some(3e-7),
            ..EstimatorConfig::default()
        };
        // a seed whose filter loses the map counts as a miss
        match run_scenario_with_map(&s, Some(&map)) {
            Ok(run) => {
                rmse.push(run.metrics.rmse_m);
                odometry_only.push(odometry_rmse(&run.simulation.truth_rows(), &run.simulation.odometry));
            }
            Err(_) => rmse.push(f64::INFINITY),
        }
    }
    let lost = rmse.iter().filter(|x| x.is_infinite()).count();
    let elapsed = start.elapsed();
    let m = median(rmse.clone());
    Outcome::new(
        m < 0.2 && (length - 50.0).abs() < 1e-9 && within(elapsed, 300.0),
        format!(
            "median RMSE {m:.3} m over {length:.0} m (worst completed seed {:.3} m, {lost} lost, odometry alone {:.2} m)",
            rmse.iter().cloned().filter(|x| x.is_finite()).fold(0.0, f64::max),
            median(odometry_only)
        ),
    )
}

/// RMSE of integrating the odometry from the true start.
fn odometry_rmse(truth: &[TruthRow], odometry: &[OdometryInput]) -> f64 {
    let mut x = NavState::at_rest(truth[0].position(), truth[0].attitude());
    let mut sum = 0.0;
    for (k, row) in truth.iter().enumerate() {
        if k > 0 {
            x = magloc::estimators::propagate(&x, &odometry[k - 1]);
        }
        sum += (x.r - row.position()).norm_squared();
    }
    (sum / truth.len() as f64).sqrt()
}

// 6 -------------------------------------------------------------------------

const SLAM_LENGTH_SCALE: f64 = 0.8;

fn slam_scenario(seed: u64, field: &TruthField, path: &[(f64, f64)]) -> Scenario {
    let spec = BasisSpec::spectral(
        DomainBox::new(Vector3::new(-1.5, -1.5, -0.5), Vector3::new(5.5, 5.5, 0.5)),
        SpectralParams {
            modes: [10, 10, 1],
            sigma_se: 1e-5,
            length_scale: SLAM_LENGTH_SCALE,
            sigma_lin: 6e-5,
            output: FieldOutput::Scalar,
        },
    );
    let mut s = base_scenario(seed, field.clone(), waypoints(path, 1.0), SensorModel::magnitude(2e-7));
    s.odometry = OdometryConfig { position_noise_fraction: 0.02, position_noise_floor_m: 0.0, attitude_noise_std_rad: 0.015, heading_only: true };
    s.estimator = EstimatorConfig {
        technique: Technique::Slam,
        n_particles: 500,
        slam_basis: Some(spec),
        noise_std_t: Some(3e-7),
        ..EstimatorConfig::default()
    };
    s
}

fn slam_loop_closure() -> Outcome {
    let start = Instant::now();
    // anomalies on the ~1 m scale the per-particle maps resolve
    let field = dipole_lattice(606, -1.5, 5.5, 2.0, 2.0, 400.0);
    let square = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0), (0.0, 0.0), (2.0, 0.0)];
    let reach = 2.0 * SLAM_LENGTH_SCALE;
    let mut closed = 0;
    let mut ratios = Vec::new();
    for seed in 0..20 {
        let run = run_scenario_with_map(&slam_scenario(seed, &field, &square), None).unwrap();
        let truth = run.simulation.truth_rows();
        // The loop closes over the approach: it opens once the final leg comes
        // within two length scales of the first leg and completes at the start.
        let final_leg = truth.iter().position(|t| (t.position() - Vector3::new(0.0, 4.0, 0.0)).norm() < 1e-9).unwrap();
        let opens = (final_leg..truth.len()).find(|&k| truth[k].position().y <= reach).unwrap();
        let done = (opens..truth.len()).find(|&k| truth[k].position().norm() < 1e-9).unwrap();
        let e = &run.metrics.position_error_m;
        let before = mean(&e[opens - 5..opens]);
        let after = mean(&e[done + 1..done + 6]);
        ratios.push(after / before);
        if after < 0.5 * before {
            closed += 1;
        }
    }

    // exploration-only control: three sides, never returning
    let open = [(0.0, 0.0), (4.0, 0.0), (4.0, 4.0), (0.0, 4.0)];
    let mut ensemble: Vec<f64> = Vec::new();
    for seed in 0..20 {
        let run = run_scenario_with_map(&slam_scenario(seed, &field, &open), None).unwrap();
        let e = &run.metrics.position_error_m;
        if ensemble.is_empty() {
            ensemble = vec![0.0; e.len()];
        }
        for (a, b) in ensemble.iter_mut().zip(e) {
            *a += b / 20.0;
        }
    }
    let quarter = ensemble.len() / 4;
    let trend: Vec<f64> = (0..4).map(|i| mean(&ensemble[i * quarter..(i + 1) * quarter])).collect();
    let monotone = trend.windows(2).all(|w| w[1] > w[0]);
    let elapsed = start.elapsed();
    Outcome::new(
        closed >= 16 && monotone && within(elapsed, 600.0),
        format!(
            "closure halves the error on {closed}/20 seeds (median after/before {:.2}); control quarter means {:.2?} m",
            median(ratios),
            trend
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn displacement_bound() -> Outcome {
    let start = Instant::now();
    let geom = ArrayGeometry::planar_grid(5, 6, 0.03).unwrap();
    let sigma = 50e-9;
    let r = Matrix3::identity() * sigma * sigma;
    // ~5 µT/m with every direction informative
    let axes = UnitOrientation::from_axis_angle(&Vector3::new(1.0, -2.0, 0.5).normalize(), 0.7).rotation_matrix();
    let g = axes * Matrix3::from_diagonal(&Vector3::new(5e-6, -2e-6, -3e-6)) * axes.transpose();
    let zero = Vector3::zeros();
    let base = crlb_displacement(&geom, &zero, &g, &r, None).unwrap();
    let wide = crlb_displacement(&geom.scaled(2.0).unwrap(), &zero, &g, &r, None).unwrap();
    let steep = crlb_displacement(&geom, &zero, &(g * 2.0), &r, None).unwrap();
    let length_ratio = (3..6).map(|i| base.covariance[(i, i)] / wide.covariance[(i, i)]).fold(f64::NAN, f64::max);
    let length_ok = (3..6).all(|i| (base.covariance[(i, i)] / wide.covariance[(i, i)] / 4.0 - 1.0).abs() < 0.05);
    let slope_ok = (0..6).all(|i| ((base.covariance[(i, i)] / steep.covariance[(i, i)]).sqrt() / 2.0 - 1.0).abs() < 0.02);

    // Monte-Carlo error of the two-scan estimate in an exactly linear field
    // with an Earth-strength background. Rotation then trades against
    // translation through `b0`, so a gyro supplies the rotation prior: its
    // mean scatters about the true (zero) rotation with the prior spread.
    // Translation stays effectively unconstrained.
    let b0 = Vector3::new(1.5e-5, 2e-6, -4.5e-5);
    let gyro_std: f64 = 1e-3;
    let prior_cov = Matrix6::from_diagonal(&Vector6::new(1e4, 1e4, 1e4, gyro_std.powi(2), gyro_std.powi(2), gyro_std.powi(2)));
    let bound = crlb_displacement(&geom, &b0, &g, &r, Some(&prior_cov)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let scan = |rng: &mut ChaCha8Rng, t: f64| -> Vec<FieldSample> {
        geom.offsets()
            .iter()
            .enumerate()
            .map(|(n, d)| FieldSample::vector(t, n, b0 + g * d + gaussian3(rng) * sigma))
            .collect()
    };
    let trials = 500;
    let mut errors = Vec::with_capacity(trials);
    let mut failures = 0;
    for _ in 0..trials {
        let prior = DisplacementPrior {
            dq_mean: exp_map(&RotationTangent::new(gaussian3(&mut rng) * gyro_std)),
            cov: Some(prior_cov),
            ..DisplacementPrior::flat()
        };
        let s1 = scan(&mut rng, 0.0);
        let s2 = scan(&mut rng, 1.0);
        match displacement_gn(&s1, &s2, &geom, &prior, &r) {
            Ok(est) => {
                let eps = log_map(&est.dq).0;
                errors.push(Vector6::new(est.dr.x, est.dr.y, est.dr.z, eps.x, eps.y, eps.z));
            }
            Err(_) => failures += 1,
        }
    }
    let n = errors.len().max(1) as f64;
    let ratios: Vec<f64> = (0..6)
        .map(|i| (errors.iter().map(|e| e[i] * e[i]).sum::<f64>() / n / bound.covariance[(i, i)]).sqrt())
        .collect();
    let mc_ok = failures == 0 && ratios.iter().all(|x| (x - 1.0).abs() < 0.25);
    let elapsed = start.elapsed();
    Outcome::new(
        length_ok && slope_ok && mc_ok && within(elapsed, 300.0),
        format!(
            "array doubling shrinks rotation variance ×{length_ratio:.3}; Monte-Carlo rms / bound {:.2?}, {failures} failed",
            ratios
        ),
    )
}

// 8 -------------------------------------------------------------------------

fn calibration() -> Outcome {
    let start = Instant::now();
    let earth = TruthField::uniform(Vector3::new(1.8e-5, -3e-6, -4.4e-5));
    let mut worst_offset: f64 = 0.0;
    let mut worst_spread: f64 = 0.0;
    let mut ok = 0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let u = random_attitude(&mut rng).rotation_matrix();
        let v = random_attitude(&mut rng).rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::new(0.7, rng.random_range(0.7..2.1), 2.1));
        let a = u * s * v.transpose();
        let b = {
            let d = gaussian3(&mut rng);
            d / d.norm() * rng.random_range(0.0..1e-5)
        };
        let model = SensorModel::vector(50e-9).with_affine(a, b);
        let samples: Vec<FieldSample> = (0..2000)
            .map(|k| {
                let q = random_attitude(&mut rng);
                synthesize(&earth, &Vector3::zeros(), &q, &model, None, k as f64, seed).unwrap().remove(0)
            })
            .collect();
        let cal = ellipsoid_calibrate(&samples).unwrap();
        let offset = (cal.b_hat - b).norm();
        let norms: Vec<f64> = samples.iter().map(|s| cal.apply(&s.as_vector().unwrap()).norm()).collect();
        let spread = relative_spread(&norms);
        worst_offset = worst_offset.max(offset);
        worst_spread = worst_spread.max(spread);
        if offset < 0.5e-6 && spread < 0.005 {
            ok += 1;
        }
    }
    Outcome::new(
        ok == 10 && within(start.elapsed(), 30.0),
        format!("{ok}/10 seeds; worst offset error {:.3} µT, worst norm spread {:.3}%", worst_offset * 1e6, worst_spread * 100.0),
    )
}

// 9 -------------------------------------------------------------------------

fn chi_square_band(dof: f64, runs: f64) -> (f64, f64) {
    let chi = ChiSquared::new(dof * runs).unwrap();
    (chi.inverse_cdf(0.025) / runs, chi.inverse_cdf(0.975) / runs)
}

fn filter_consistency() -> Outcome {
    let field = TruthField::uniform(Vector3::new(1.5e-5, 2e-6, -4.5e-5))
        .with_source(Vector3::new(0.4, 0.3, -0.6), Vector3::new(2.0, -1.0, 4.0))
        .with_source(Vector3::new(-0.5, -0.2, -0.7), Vector3::new(-1.5, 2.5, 1.0));
    let geom = ArrayGeometry::planar_grid(5, 6, 0.03).unwrap();
    let sigma = 50e-9;
    let model = SensorModel::vector(sigma);
    let noise = Matrix3::identity() * sigma * sigma;
    let cfg = DeadReckonConfig::default();
    let (runs, steps) = (50, 200);
    let (pos_std, rot_std) = (0.002, 0.002);
    let init_cov = Matrix6::from_diagonal(&Vector6::new(1e-4, 1e-4, 1e-4, 1e-4, 1e-4, 1e-4));
    let r_true = Vector3::zeros();
    let q_true = UnitOrientation::from_yaw(0.3);
    let mut per_step = vec![0.0; steps];
    for run in 0..runs {
        let mut rng = magloc::rng::stream(&[909, run as u64]);
        let init = init_cov.cholesky().unwrap().l() * Vector6::from_fn(|_, _| gaussian(&mut rng));
        let nav0 = NavState::at_rest(
            r_true + init.fixed_rows::<3>(0),
            magloc::geometry::boxplus(&q_true, &RotationTangent::new(-init.fixed_rows::<3>(3).into_owned())),
        );
        let scan0 = synthesize(&field, &r_true, &q_true, &model, Some(&geom), 0.0, run as u64).unwrap();
        let mut st = DeadReckonState::initialize(nav0, init_cov, &scan0, &geom, &noise).unwrap();
        for k in 0..steps {
            let dt = 0.1;
            let n = Vector6::from_fn(|_, _| gaussian(&mut rng));
            let u = OdometryInput::new(
                dt,
                n.fixed_rows::<3>(0) * pos_std / dt,
                n.fixed_rows::<3>(3) * rot_std / dt,
                Matrix6::from_diagonal(&Vector6::new(
                    pos_std.powi(2),
                    pos_std.powi(2),
                    pos_std.powi(2),
                    rot_std.powi(2),
                    rot_std.powi(2),
                    rot_std.powi(2),
                )),
            )
            .unwrap();
            let t = (k + 1) as f64 * dt;
            let scan = synthesize(&field, &r_true, &q_true, &model, Some(&geom), t, run as u64).unwrap();
            st = dead_reckon_step(&st, &u, &scan, &geom, &noise, &cfg).unwrap();
            let dtheta = log_map(&st.nav.q.inverse().compose(&q_true)).0;
            let e = Vector6::new(
                st.nav.r.x - r_true.x,
                st.nav.r.y - r_true.y,
                st.nav.r.z - r_true.z,
                dtheta.x,
                dtheta.y,
                dtheta.z,
            );
            let p = st.nav_cov();
            per_step[k] += e.dot(&p.cholesky().unwrap().solve(&e)) / runs as f64;
        }
    }
    let average = mean(&per_step);
    let (lo, hi) = chi_square_band(6.0, runs as f64);
    let inside = per_step.iter().filter(|&&v| v >= lo && v <= hi).count() as f64 / steps as f64;

    // metrics on synthetic Gaussian errors of known covariance
    let mut rng = ChaCha8Rng::seed_from_u64(919);
    let l = Matrix3::new(0.3, 0.0, 0.0, 0.1, 0.2, 0.0, -0.05, 0.07, 0.4);
    let p = l * l.transpose();
    let n = 10_000;
    let truth: Vec<TruthRow> = (0..n)
        .map(|k| TruthRow { t: k as f64, x_m: 0.1 * k as f64, y_m: 0.0, z_m: 0.0, qw: 1.0, qx: 0.0, qy: 0.0, qz: 0.0 })
        .collect();
    let estimate: Vec<EstimateRow> = truth
        .iter()
        .map(|t| EstimateRow::new(t.t, &(t.position() + l * gaussian3(&mut rng)), &t.attitude(), Some(&p)))
        .collect();
    let synthetic = compute_metrics(&truth, &estimate).unwrap().mean_nees.unwrap();
    let (slo, shi) = chi_square_band(3.0, n as f64);
    Outcome::new(
        average >= lo && average <= hi && synthetic >= slo && synthetic <= shi,
        format!(
            "dead-reckoning NEES {average:.2} in [{lo:.2}, {hi:.2}] over {runs}×{steps} steps ({:.0}% of steps inside); metrics NEES {synthetic:.3} in [{slo:.3}, {shi:.3}]",
            inside * 100.0
        ),
    )
}

// 10 ------------------------------------------------------------------------

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timing.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let field = indoor_field(1010, -1.0, 3.0);
    let line = TrajectorySpec::Line { start_m: Vector3::new(0.0, 0.5, 0.0), end_m: Vector3::new(2.0, 1.0, 0.0), speed_mps: 0.5 };
    let learned = survey_map(&field, -0.5, 2.5, 2e-7);
    let mut scenarios = Vec::new();

    let mut mm = base_scenario(3, field.clone(), line.clone(), SensorModel::vector(2e-7));
    mm.estimator = EstimatorConfig { n_particles: 200, init_position_std_m: 0.1, ..EstimatorConfig::default() };
    mm.output.particle_snapshot_every = 3;
    scenarios.push((mm, Some(&learned)));

    let mut slam = slam_scenario(4, &field, &[(0.0, 0.5), (2.0, 1.0)]);
    slam.estimator.n_particles = 50;
    slam.output.particle_snapshot_every = 5;
    scenarios.push((slam, None));

    // deeper sources keep the first-order local model valid along the line
    let mild = TruthField::uniform(Vector3::new(1.5e-5, 2e-6, -4.5e-5))
        .with_source(Vector3::new(1.0, 1.0, -1.5), Vector3::new(40.0, 10.0, 80.0))
        .with_source(Vector3::new(2.5, 0.0, -1.2), Vector3::new(-30.0, 50.0, 20.0));
    let mut dr = base_scenario(5, mild, line, SensorModel::vector(5e-8));
    dr.sensors.array = Some(ArrayGeometry::planar_grid(5, 6, 0.03).unwrap());
    dr.sensors.rate_hz = 10.0;
    dr.estimator = EstimatorConfig { technique: Technique::DeadReckon, init_position_std_m: 0.01, ..EstimatorConfig::default() };
    scenarios.push((dr, None));

    let mut identical = 0;
    let mut compared = 0;
    for (s, map) in &scenarios {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            run_scenario_with_map(s, *map).unwrap().write_to(d.path()).unwrap();
        }
        let (a, b) = (files_in(dirs[0].path()), files_in(dirs[1].path()));
        if !["estimate.csv", "metrics.json"].iter().all(|f| a.iter().any(|(name, _)| name == f)) {
            return Outcome::new(false, "a run wrote no estimate or metrics");
        }
        compared += a.len();
        identical += a.iter().zip(&b).filter(|(x, y)| x == y).count();
        if a.len() != b.len() {
            return Outcome::new(false, "runs wrote different file sets");
        }
    }
    Outcome::new(
        identical == compared,
        format!("{identical}/{compared} output files byte-identical across map matching, SLAM and dead reckoning"),
    )
}





