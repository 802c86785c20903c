//! Fixtures shared by the estimator benchmarks.

use magloc::estimators::{DeadReckonState, FilterConfig, Observation};
use magloc::map_learning::{rls_fold, LearningRecord};
use magloc::map_model::{BasisSpec, DomainBox, FieldOutput, SpectralParams};
use magloc::nalgebra::{DMatrix, Matrix3, Matrix6, Vector3};
use magloc::sensors::synthesize;
use magloc::{
    ArrayGeometry, FieldSample, MapPosterior, MeasurementKind, NavState, OdometryInput, ParticleSet, SensorModel,
    TruthField, UnitOrientation,
};

pub const NOISE_STD_T: f64 = 5e-8;

pub fn field() -> TruthField {
    TruthField::uniform(Vector3::new(1.5e-5, 2e-6, -4.5e-5))
        .with_source(Vector3::new(1.0, 1.0, -1.5), Vector3::new(40.0, 10.0, 80.0))
        .with_source(Vector3::new(3.5, -1.0, -1.2), Vector3::new(-30.0, 50.0, 20.0))
}

pub fn domain() -> DomainBox {
    DomainBox::new(Vector3::new(-0.5, -2.0, -0.5), Vector3::new(5.5, 2.0, 0.5))
}

pub fn spectral_spec(modes: usize) -> BasisSpec {
    BasisSpec::spectral(
        domain(),
        SpectralParams {
            modes: [modes, modes, 2],
            sigma_se: 5e-6,
            length_scale: 0.8,
            sigma_lin: 5e-5,
            output: FieldOutput::Vector,
        },
    )
}

/// Noisy vector readings on a lawnmower survey of the domain.
pub fn survey_records(n: usize) -> Vec<LearningRecord> {
    let f = field();
    let model = SensorModel::vector(NOISE_STD_T);
    (0..n)
        .map(|k| {
            let s = k as f64 / n as f64;
            let r = Vector3::new(5.0 * (s * 7.0).fract(), -1.5 + 3.0 * s, 0.0);
            let q = UnitOrientation::from_yaw(0.3 * k as f64);
            let y = synthesize(&f, &r, &q, &model, None, k as f64, 1).unwrap().remove(0).value;
            LearningRecord::isotropic(r, q, y, NOISE_STD_T, MeasurementKind::VectorField).unwrap()
        })
        .collect()
}

pub fn learned_map(modes: usize, n: usize) -> MapPosterior {
    let spec = spectral_spec(modes);
    let prior = magloc::map_model::spectral_prior(&spec).unwrap();
    rls_fold(&prior, &survey_records(n)).unwrap()
}

pub fn odometry() -> OdometryInput {
    OdometryInput::noiseless(0.1, Vector3::new(0.5, 0.0, 0.0), Vector3::zeros()).with_noise_std(0.01, 0.002)
}

pub fn particles(n: usize, map: Option<&MapPosterior>) -> ParticleSet {
    let states = (0..n)
        .map(|i| {
            let a = i as f64 * 2.399_963;
            let r = Vector3::new(1.0 + 0.1 * a.cos(), 0.1 * a.sin(), 0.0);
            NavState::at_rest(r, UnitOrientation::from_yaw(0.01 * a.sin()))
        })
        .collect();
    ParticleSet::from_states(states, map).unwrap()
}

pub fn filter_config(n: usize) -> FilterConfig {
    FilterConfig { n_particles: n, ..FilterConfig::default() }
}

pub fn reading_at(r: Vector3<f64>, geom: Option<&ArrayGeometry>) -> Vec<FieldSample> {
    synthesize(&field(), &r, &UnitOrientation::identity(), &SensorModel::vector(NOISE_STD_T), geom, 0.0, 2).unwrap()
}

pub fn noise_cov() -> DMatrix<f64> {
    DMatrix::identity(3, 3) * NOISE_STD_T.powi(2)
}

pub fn array() -> ArrayGeometry {
    ArrayGeometry::planar_grid(5, 6, 0.03).unwrap()
}

pub fn dead_reckon_state() -> DeadReckonState {
    let nav = NavState::at_rest(Vector3::new(1.0, 0.0, 0.0), UnitOrientation::identity());
    let cov = Matrix6::identity() * 1e-6;
    let scan = reading_at(nav.r, Some(&array()));
    DeadReckonState::initialize(nav, cov, &scan, &array(), &(Matrix3::identity() * NOISE_STD_T.powi(2))).unwrap()
}

pub fn observation<'a>(samples: &'a [FieldSample], geom: Option<&'a ArrayGeometry>, cov: &'a DMatrix<f64>) -> Observation<'a> {
    Observation::new(samples, geom, cov)
}
