//! Scenario-driven simulation: truth trajectories, synthetic readings,
//! estimator runs, logs and metrics.
//!
//! A [`Scenario`] is one JSON document. Every random draw is keyed by the
//! scenario seed, so a run is reproducible from the document alone and
//! [`ScenarioRun::write_to`] produces byte-identical files for identical
//! inputs. Wall-clock time goes to a separate `timing.json`.
//!
//! Readings are corrected with the known sensor affine before they reach
//! an estimator, so the estimators see `A⁻¹(y − b)` with noise covariance
//! `σ²·A⁻¹A⁻ᵀ`. When a stationary reference sensor is configured and the
//! field has a temporal disturbance, the reference's change since the first
//! sample (smoothed by a causal moving average) is removed from every rover
//! reading, rotated into the sensor frame with the estimator's predicted
//! attitude.

pub mod logs;
pub mod tools;
pub mod trajectory;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    dead_reckon_step, propagate, DeadReckonConfig, DeadReckonState, FilterConfig, NavState, Observation,
    OdometryInput, ParticleSet,
};
use crate::geometry::{boxplus, RotationTangent, UnitOrientation};
use crate::map_model::{spectral_prior, BasisKind, BasisSpec, MapPosterior};
use crate::rng;
use crate::sensors::{synthesize, write_samples_csv, ArrayGeometry, FieldSample, SensorModel};
use crate::truth_field::TruthField;

pub use logs::{compute_metrics, read_csv, write_csv, EstimateRow, ParticleRow, RunMetrics, TruthRow};
pub use tools::{learn_map_from_logs, CrlbConfig};
pub use trajectory::{odometry_from_truth, OdometryConfig, TrajectorySpec, TruthPose};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    #[default]
    MapMatch,
    Slam,
    DeadReckon,
}

impl Technique {
    pub fn name(self) -> &'static str {
        match self {
            Technique::MapMatch => "map_match",
            Technique::Slam => "slam",
            Technique::DeadReckon => "dead_reckon",
        }
    }
}

impl FromStr for Technique {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map_match" => Ok(Technique::MapMatch),
            "slam" => Ok(Technique::Slam),
            "dead_reckon" => Ok(Technique::DeadReckon),
            other => Err(Error::validation(format!(
                "unknown technique '{other}' (expected map_match, slam or dead_reckon)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub model: SensorModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub array: Option<ArrayGeometry>,
    pub rate_hz: f64,
    /// Position of a stationary, calibrated reference sensor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_m: Option<Vector3<f64>>,
    #[serde(default = "default_reference_window")]
    pub reference_window_s: f64,
}

fn default_reference_window() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub technique: Technique,
    pub n_particles: usize,
    pub ess_threshold: f64,
    pub likelihood_floor: f64,
    /// Filter seed; the scenario seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub q_map_scales: [f64; 2],
    pub nees_gate: f64,
    pub gate_count: usize,
    /// Spread of the initial belief around the true start pose.
    pub init_position_std_m: f64,
    pub init_yaw_std_rad: f64,
    /// Sensor noise assumed by the estimator; the simulated noise when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std_t: Option<f64>,
    /// Map basis learned by SLAM particles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slam_basis: Option<BasisSpec>,
    /// Prior weight standard deviation for non-spectral SLAM bases.
    pub slam_prior_std: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let f = FilterConfig::default();
        let d = DeadReckonConfig::default();
        Self {
            technique: Technique::MapMatch,
            n_particles: f.n_particles,
            ess_threshold: f.ess_threshold,
            likelihood_floor: f.likelihood_floor,
            seed: None,
            q_map_scales: d.q_map_scales,
            nees_gate: d.nees_gate,
            gate_count: d.gate_count,
            init_position_std_m: 0.0,
            init_yaw_std_rad: 0.0,
            noise_std_t: None,
            slam_basis: None,
            slam_prior_std: 1e-5,
        }
    }
}

impl EstimatorConfig {
    pub fn filter(&self, scenario_seed: u64) -> FilterConfig {
        FilterConfig {
            n_particles: self.n_particles,
            ess_threshold: self.ess_threshold,
            likelihood_floor: self.likelihood_floor,
            seed: self.seed.unwrap_or(scenario_seed),
        }
    }

    pub fn dead_reckon(&self) -> DeadReckonConfig {
        DeadReckonConfig {
            q_map_scales: self.q_map_scales,
            nees_gate: self.nees_gate,
            gate_count: self.gate_count,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Write every particle each this many steps; zero disables snapshots.
    pub particle_snapshot_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub field: TruthField,
    pub trajectory: TrajectorySpec,
    pub sensors: SensorConfig,
    #[serde(default)]
    pub odometry: OdometryConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Map JSON for map matching; relative paths resolve against the
    /// scenario file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map: Option<PathBuf>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl Scenario {
    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(s)?;
        sc.validate()?;
        Ok(sc)
    }

    /// Reads a scenario file, resolving the map path against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut sc = Self::from_json(&fs::read_to_string(path)?)?;
        if let (Some(map), Some(dir)) = (&sc.map, path.parent()) {
            if map.is_relative() {
                sc.map = Some(dir.join(map));
            }
        }
        Ok(sc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks that need no simulation.
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.trajectory.validate()?;
        self.odometry.validate()?;
        let s = &self.sensors;
        s.model.validate()?;
        if !(s.rate_hz > 0.0) || !s.rate_hz.is_finite() {
            return Err(Error::validation("rate_hz must be positive"));
        }
        if !(s.reference_window_s >= 0.0) {
            return Err(Error::validation("reference_window_s must be non-negative"));
        }
        if s.model.affine_a.try_inverse().is_none() {
            return Err(Error::validation("sensor affine matrix must be invertible"));
        }
        let e = &self.estimator;
        self.estimator.filter(self.seed).validate()?;
        if !(e.init_position_std_m >= 0.0) || !(e.init_yaw_std_rad >= 0.0) {
            return Err(Error::validation("initial spreads must be non-negative"));
        }
        if !(self.assumed_noise_std() > 0.0) {
            return Err(Error::validation("the estimator needs a positive assumed sensor noise (noise_std_t)"));
        }
        match e.technique {
            Technique::MapMatch => {}
            Technique::Slam => {
                let spec = e.slam_basis.as_ref().ok_or_else(|| Error::validation("SLAM needs slam_basis"))?;
                spec.validate()?;
                if !matches!(spec.kind, BasisKind::SpectralPotential(_)) && !(e.slam_prior_std > 0.0) {
                    return Err(Error::validation("slam_prior_std must be positive"));
                }
            }
            Technique::DeadReckon => {
                if s.array.is_none() || !s.model.kind.is_vector() {
                    return Err(Error::validation("dead reckoning needs a vector magnetometer array"));
                }
                if !(e.nees_gate > 0.0) || e.gate_count == 0 {
                    return Err(Error::validation("nees_gate and gate_count must be positive"));
                }
                if e.q_map_scales.iter().any(|x| !(*x >= 0.0)) {
                    return Err(Error::validation("q_map_scales must be non-negative"));
                }
            }
        }
        Ok(())
    }

    fn assumed_noise_std(&self) -> f64 {
        self.estimator.noise_std_t.unwrap_or(self.sensors.model.noise_std)
    }

    /// Per-sensor noise covariance of affine-corrected readings, as assumed
    /// by the estimator.
    pub fn estimator_noise_cov(&self) -> DMatrix<f64> {
        let s2 = self.assumed_noise_std().powi(2);
        let m = &self.sensors.model;
        if m.kind.is_vector() {
            let a_inv = m.affine_a.try_inverse().unwrap_or_else(Matrix3::identity);
            let c = a_inv * a_inv.transpose() * s2;
            DMatrix::from_fn(3, 3, |i, j| c[(i, j)])
        } else {
            DMatrix::from_element(1, 1, s2)
        }
    }

    fn reference_enabled(&self) -> bool {
        self.sensors.reference_m.is_some() && self.field.temporal.is_some()
    }
}

/// Truth, odometry and raw readings of one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub truth: Vec<TruthPose>,
    /// `odometry[k]` moves from `truth[k]` to `truth[k + 1]`.
    pub odometry: Vec<OdometryInput>,
    /// Rover readings per step, as reported by the (uncalibrated) sensors.
    pub scans: Vec<Vec<FieldSample>>,
    /// Reference-sensor readings per step; empty without a reference.
    pub reference: Vec<FieldSample>,
}

impl Simulation {
    pub fn truth_rows(&self) -> Vec<TruthRow> {
        self.truth.iter().map(TruthRow::from).collect()
    }

    /// Writes `truth.csv`, `measurements.csv` and, with a reference,
    /// `reference.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(fs::File::create(dir.join("truth.csv"))?, &self.truth_rows())?;
        let all: Vec<FieldSample> = self.scans.iter().flatten().cloned().collect();
        write_samples_csv(fs::File::create(dir.join("measurements.csv"))?, &all)?;
        if !self.reference.is_empty() {
            write_samples_csv(fs::File::create(dir.join("reference.csv"))?, &self.reference)?;
        }
        Ok(())
    }
}

/// Samples the trajectory, checks it against the field and map, and
/// synthesizes odometry and readings.
pub fn simulate(s: &Scenario, map: Option<&MapPosterior>) -> Result<Simulation> {
    s.validate()?;
    let truth = s.trajectory.sample(s.sensors.rate_hz)?;
    check_domain(s, &truth, map)?;
    let odometry = odometry_from_truth(&truth, &s.odometry, s.seed)?;
    let scans = truth
        .iter()
        .map(|p| synthesize(&s.field, &p.state.r, &p.state.q, &s.sensors.model, s.sensors.array.as_ref(), p.t, s.seed))
        .collect::<Result<Vec<_>>>()?;
    let reference = match s.sensors.reference_m {
        Some(r) => {
            let model = SensorModel {
                affine_a: Matrix3::identity(),
                offset_b: Vector3::zeros(),
                ..s.sensors.model.clone()
            };
            let seed = rng::stream(&[s.seed, rng::tag::REFERENCE]).next_u64();
            let id = UnitOrientation::identity();
            truth
                .iter()
                .map(|p| synthesize(&s.field, &r, &id, &model, None, p.t, seed).map(|mut v| v.remove(0)))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    Ok(Simulation { truth, odometry, scans, reference })
}

fn check_domain(s: &Scenario, truth: &[TruthPose], map: Option<&MapPosterior>) -> Result<()> {
    let origin = [Vector3::zeros()];
    let offsets = s.sensors.array.as_ref().map_or(&origin[..], |g| g.offsets());
    let slam = match s.estimator.technique {
        Technique::Slam => s.estimator.slam_basis.as_ref(),
        _ => None,
    };
    let map_spec = match s.estimator.technique {
        Technique::MapMatch => map.map(|m| &m.spec),
        _ => None,
    };
    for p in truth {
        for d in offsets {
            let x = p.state.r + p.state.q.rotate(d);
            if s.field.static_field(&x).is_err() {
                return Err(Error::validation(format!(
                    "trajectory at t = {} s enters the exclusion radius of a field source",
                    p.t
                )));
            }
            for spec in map_spec.iter().chain(slam.iter()) {
                if !spec.covers(&x) {
                    return Err(Error::validation(format!("trajectory at t = {} s leaves the map domain", p.t)));
                }
            }
        }
    }
    if let Some(r) = &s.sensors.reference_m {
        if s.field.static_field(r).is_err() {
            return Err(Error::validation("reference sensor lies inside the exclusion radius of a field source"));
        }
    }
    Ok(())
}

/// Everything a run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioRun {
    pub simulation: Simulation,
    pub estimate: Vec<EstimateRow>,
    pub particles: Vec<ParticleRow>,
    pub metrics: RunMetrics,
}

impl ScenarioRun {
    /// Writes the simulation files plus `estimate.csv`, `metrics.json`,
    /// `timing.json` and, with snapshots, `particles.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        self.simulation.write_to(dir)?;
        write_csv(fs::File::create(dir.join("estimate.csv"))?, &self.estimate)?;
        if !self.particles.is_empty() {
            write_csv(fs::File::create(dir.join("particles.csv"))?, &self.particles)?;
        }
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.metrics)? + "\n")?;
        let timing = serde_json::json!({ "wall_clock_s": self.metrics.wall_clock_s });
        fs::write(dir.join("timing.json"), serde_json::to_string_pretty(&timing)? + "\n")?;
        Ok(())
    }
}

/// Runs a scenario, loading its map file when map matching.
pub fn run_scenario(s: &Scenario) -> Result<ScenarioRun> {
    let map = match (s.estimator.technique, &s.map) {
        (Technique::MapMatch, Some(path)) => Some(MapPosterior::from_json(&fs::read_to_string(path)?)?),
        (Technique::MapMatch, None) => return Err(Error::validation("map matching needs a map")),
        _ => None,
    };
    run_scenario_with_map(s, map.as_ref())
}

/// Runs a scenario against an in-memory map; `s.map` is ignored.
pub fn run_scenario_with_map(s: &Scenario, map: Option<&MapPosterior>) -> Result<ScenarioRun> {
    let start = Instant::now();
    if s.estimator.technique == Technique::MapMatch && map.is_none() {
        return Err(Error::validation("map matching needs a map"));
    }
    let sim = simulate(s, map)?;
    let mut particles = Vec::new();
    let estimate = match s.estimator.technique {
        Technique::MapMatch | Technique::Slam => run_particles(s, &sim, map, &mut particles)?,
        Technique::DeadReckon => run_dead_reckon(s, &sim)?,
    };
    let mut metrics = compute_metrics(&sim.truth_rows(), &estimate)?;
    metrics.wall_clock_s = Some(start.elapsed().as_secs_f64());
    Ok(ScenarioRun { simulation: sim, estimate, particles, metrics })
}

/// Affine correction and reference compensation of raw readings.
struct Conditioner {
    a_inv: Matrix3<f64>,
    b: Vector3<f64>,
    /// Smoothed reference change per step.
    deltas: Vec<DVector<f64>>,
}

impl Conditioner {
    fn new(s: &Scenario, sim: &Simulation) -> Self {
        let m = &s.sensors.model;
        let deltas = if s.reference_enabled() && !sim.reference.is_empty() {
            let window = ((s.sensors.reference_window_s * s.sensors.rate_hz).round() as usize).max(1);
            let first = &sim.reference[0].value;
            let raw: Vec<DVector<f64>> = sim.reference.iter().map(|r| &r.value - first).collect();
            (0..raw.len())
                .map(|k| {
                    let lo = (k + 1).saturating_sub(window);
                    let sum = raw[lo..=k].iter().fold(DVector::zeros(first.len()), |acc, v| acc + v);
                    sum / (k + 1 - lo) as f64
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            a_inv: m.affine_a.try_inverse().unwrap_or_else(Matrix3::identity),
            b: m.offset_b,
            deltas,
        }
    }

    fn apply(&self, scan: &[FieldSample], k: usize, q: &UnitOrientation) -> Vec<FieldSample> {
        let delta = self.deltas.get(k);
        scan.iter()
            .map(|s| {
                let mut out = s.clone();
                match s.as_vector() {
                    Some(y) => {
                        let mut h = self.a_inv * (y - self.b);
                        if let Some(d) = delta {
                            h -= q.rotate_inverse(&Vector3::new(d[0], d[1], d[2]));
                        }
                        out.value = DVector::from_column_slice(h.as_slice());
                    }
                    None => {
                        if let Some(d) = delta {
                            out.value[0] -= d[0];
                        }
                    }
                }
                out
            })
            .collect()
    }
}

fn surface<T>(r: Result<T>, k: usize) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::AtStep { .. } => e,
        e => e.at_step(k),
    })
}

fn initial_particles(s: &Scenario, start: &NavState, n: usize) -> Vec<NavState> {
    let e = &s.estimator;
    let mut stream = rng::stream(&[e.seed.unwrap_or(s.seed), rng::tag::INIT]);
    (0..n)
        .map(|_| {
            let mut z = || stream.sample::<f64, _>(StandardNormal);
            let dr = Vector3::new(z(), z(), z()) * e.init_position_std_m;
            let dyaw = z() * e.init_yaw_std_rad;
            NavState::new(start.r + dr, start.v, UnitOrientation::from_yaw(dyaw).compose(&start.q))
        })
        .collect()
}

fn run_particles(
    s: &Scenario,
    sim: &Simulation,
    map: Option<&MapPosterior>,
    snapshots: &mut Vec<ParticleRow>,
) -> Result<Vec<EstimateRow>> {
    let cfg = s.estimator.filter(s.seed);
    let noise = s.estimator_noise_cov();
    let geom = s.sensors.array.as_ref();
    let cond = Conditioner::new(s, sim);
    let states = initial_particles(s, &sim.truth[0].state, cfg.n_particles);
    let (mut ps, shared) = match s.estimator.technique {
        Technique::Slam => {
            let spec = s.estimator.slam_basis.clone().expect("validated");
            let prior = match spec.kind {
                BasisKind::SpectralPotential(_) => spectral_prior(&spec)?,
                _ => MapPosterior::isotropic(spec, s.estimator.slam_prior_std.powi(2))?,
            };
            (ParticleSet::from_states(states, Some(&prior))?, None)
        }
        _ => (ParticleSet::from_states(states, None)?, map),
    };
    let every = s.output.particle_snapshot_every;
    let mut rows = Vec::with_capacity(sim.truth.len());
    for (k, pose) in sim.truth.iter().enumerate() {
        if k > 0 {
            surface(ps.predict(&sim.odometry[k - 1], &cfg), k)?;
        }
        let scan = cond.apply(&sim.scans[k], k, &ps.best().state.q);
        let obs = Observation::new(&scan, geom, &noise);
        let updated = match shared {
            Some(mp) => ps.update_shared(mp, &obs, &cfg),
            None => ps.update_own_maps(&obs, &cfg),
        };
        surface(updated, k)?;
        let cov = ps.position_covariance();
        let mut row = EstimateRow::new(pose.t, &ps.mean_position(), &ps.best().state.q, Some(&cov));
        row.ess = Some(ps.ess());
        rows.push(row);
        if every > 0 && k % every == 0 {
            snapshots.extend(ps.particles().iter().enumerate().map(|(i, p)| {
                let [w, x, y, z] = p.state.q.components();
                ParticleRow {
                    step: k,
                    t: pose.t,
                    particle: i,
                    x_m: p.state.r.x,
                    y_m: p.state.r.y,
                    z_m: p.state.r.z,
                    yaw_rad: (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z)),
                    weight: p.log_weight.exp(),
                }
            }));
        }
    }
    Ok(rows)
}

fn run_dead_reckon(s: &Scenario, sim: &Simulation) -> Result<Vec<EstimateRow>> {
    let cfg = s.estimator.dead_reckon();
    let geom = s.sensors.array.as_ref().expect("validated");
    let n = s.estimator_noise_cov();
    let noise = Matrix3::from_fn(|i, j| n[(i, j)]);
    let cond = Conditioner::new(s, sim);
    let e = &s.estimator;
    let (sp, sa) = (e.init_position_std_m, e.init_yaw_std_rad);
    let nav_cov = Matrix6::from_diagonal(&Vector6::new(sp * sp, sp * sp, sp * sp, sa * sa, sa * sa, sa * sa));
    let start = sim.truth[0].state;
    let mut stream = rng::stream(&[e.seed.unwrap_or(s.seed), rng::tag::INIT]);
    let mut z = || stream.sample::<f64, _>(StandardNormal);
    let dr = Vector3::new(z(), z(), z()) * sp;
    let dth = Vector3::new(z(), z(), z()) * sa;
    let nav = NavState::new(start.r + dr, start.v, boxplus(&start.q, &RotationTangent(dth)));
    let scan0 = cond.apply(&sim.scans[0], 0, &nav.q);
    let mut st = surface(DeadReckonState::initialize(nav, nav_cov, &scan0, geom, &noise), 0)?;
    let mut rows = Vec::with_capacity(sim.truth.len());
    for (k, pose) in sim.truth.iter().enumerate() {
        if k > 0 {
            let u = &sim.odometry[k - 1];
            let scan = cond.apply(&sim.scans[k], k, &propagate(&st.nav, u).q);
            st = surface(dead_reckon_step(&st, u, &scan, geom, &noise, &cfg), k)?;
        }
        let cov: Matrix3<f64> = st.cov.fixed_view::<3, 3>(0, 0).into();
        let mut row = EstimateRow::new(pose.t, &st.nav.r, &st.nav.q, Some(&cov));
        row.nis = st.nis.is_finite().then_some(st.nis);
        rows.push(row);
    }
    Ok(rows)
}
