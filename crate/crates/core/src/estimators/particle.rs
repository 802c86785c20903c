//! Particle filters for map matching and SLAM.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{propagate_noisy, NavState, OdometryInput};
use crate::error::{Error, Result};
use crate::linalg::{symmetrize, SpdFactor, MAX_INNOVATION_CONDITION};
use crate::map_learning::{kalman_update_with_likelihood, resolve_kind};
use crate::map_model::{regressor, BasisSpec, MapPosterior, MeasurementKind};
use crate::rng;
use crate::sensors::{ArrayGeometry, FieldSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// Resample when the effective sample size drops below this fraction of
    /// the particle count.
    pub ess_threshold: f64,
    /// Log-likelihood assigned to particles whose sensors leave the map.
    pub likelihood_floor: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 500,
            ess_threshold: 0.5,
            likelihood_floor: 1e-12_f64.ln(),
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles == 0 {
            return Err(Error::validation("n_particles must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ess_threshold) {
            return Err(Error::validation("ess_threshold must lie in [0, 1]"));
        }
        if !self.likelihood_floor.is_finite() {
            return Err(Error::validation("likelihood_floor must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Particle {
    pub state: NavState,
    /// Normalized log-weight.
    pub log_weight: f64,
    /// Private map, SLAM only.
    pub map: Option<MapPosterior>,
    /// Set when the last update fell back to the likelihood floor.
    pub flagged: bool,
}

/// Weighted hypotheses. Log-weights are kept normalized (`Σ exp = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    particles: Vec<Particle>,
    step: u64,
}

/// The readings of one time step and where they were taken.
#[derive(Clone, Copy, Debug)]
pub struct Observation<'a> {
    pub samples: &'a [FieldSample],
    /// Sensor offsets, indexed by `sensor_id`; a lone sensor sits at the body origin.
    pub geom: Option<&'a ArrayGeometry>,
    /// Per-sensor noise covariance.
    pub noise_cov: &'a DMatrix<f64>,
}

impl<'a> Observation<'a> {
    pub fn new(samples: &'a [FieldSample], geom: Option<&'a ArrayGeometry>, noise_cov: &'a DMatrix<f64>) -> Self {
        Self { samples, geom, noise_cov }
    }

    fn offset(&self, sensor_id: usize) -> Result<Vector3<f64>> {
        match self.geom {
            Some(g) => g
                .offsets()
                .get(sensor_id)
                .copied()
                .ok_or_else(|| Error::validation(format!("sensor id {sensor_id} outside the array"))),
            None if sensor_id == 0 => Ok(Vector3::zeros()),
            None => Err(Error::validation(format!("sensor id {sensor_id} without an array geometry"))),
        }
    }

    /// Stacked regressor, readings and block-diagonal noise at state `x`.
    pub fn stack(&self, spec: &BasisSpec, x: &NavState) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
        let first = self.samples.first().ok_or_else(|| Error::validation("observation without samples"))?;
        let kind = resolve_kind(spec, first.kind)?;
        let m1 = kind.dim();
        if self.noise_cov.nrows() != m1 || self.noise_cov.ncols() != m1 {
            return Err(Error::validation(format!("noise covariance must be {m1}×{m1}")));
        }
        let m = m1 * self.samples.len();
        let mut h = DMatrix::zeros(m, spec.len());
        let mut y = DVector::zeros(m);
        let mut r = DMatrix::zeros(m, m);
        for (i, s) in self.samples.iter().enumerate() {
            if resolve_kind(spec, s.kind)? != kind || s.value.len() != m1 {
                return Err(Error::validation("samples of one observation must share a kind"));
            }
            let p = x.r + x.q.rotate(&self.offset(s.sensor_id)?);
            let k = i * m1;
            h.view_mut((k, 0), (m1, spec.len())).copy_from(&regressor(spec, kind, &p, &x.q)?);
            y.rows_mut(k, m1).copy_from(&s.value);
            r.view_mut((k, k), (m1, m1)).copy_from(self.noise_cov);
        }
        Ok((h, y, r))
    }
}

/// `log N(y; H·μ, H·P·Hᵀ + R)` for one reading.
pub fn mm_likelihood(
    mp: &MapPosterior,
    kind: MeasurementKind,
    x: &NavState,
    y: &FieldSample,
    noise_cov: &DMatrix<f64>,
) -> Result<f64> {
    if resolve_kind(&mp.spec, kind)? != resolve_kind(&mp.spec, y.kind)? {
        return Err(Error::validation("sample kind differs from the requested kind"));
    }
    stacked_log_likelihood(mp, x, &Observation::new(std::slice::from_ref(y), None, noise_cov))
}

/// Map-marginalized log-likelihood of all readings of an observation; the
/// sensors of an array are jointly Gaussian through the shared map.
pub fn stacked_log_likelihood(mp: &MapPosterior, x: &NavState, obs: &Observation) -> Result<f64> {
    let (h, y, mut s) = obs.stack(&mp.spec, x)?;
    if let Some(p) = &mp.covariance {
        s += &h * p * h.transpose();
        symmetrize(&mut s);
    }
    let f = SpdFactor::new(&s, MAX_INNOVATION_CONDITION)?;
    Ok(f.gaussian_log_density(&(y - h * &mp.mean)))
}

/// Indices drawn by systematic resampling with offset `u0 ∈ [0, 1)`.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for k in 0..n {
        let target = (k as f64 + u0) / n as f64;
        while cumulative < target && i + 1 < n {
            i += 1;
            cumulative += weights[i];
        }
        out.push(i);
    }
    out
}

impl ParticleSet {
    /// Equally weighted particles, each optionally carrying a copy of `map`.
    pub fn from_states(states: Vec<NavState>, map: Option<&MapPosterior>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::validation("a particle set needs at least one particle"));
        }
        let lw = -(states.len() as f64).ln();
        let particles = states
            .into_iter()
            .map(|state| Particle {
                state,
                log_weight: lw,
                map: map.cloned(),
                flagged: false,
            })
            .collect();
        Ok(Self { particles, step: 0 })
    }

    pub fn particles(&self) -> &[Particle] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Number of completed measurement updates.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.log_weight.exp()).collect()
    }

    /// Effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights().iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean_position(&self) -> Vector3<f64> {
        self.particles.iter().map(|p| p.state.r * p.log_weight.exp()).sum()
    }

    pub fn position_covariance(&self) -> Matrix3<f64> {
        let mean = self.mean_position();
        self.particles.iter().fold(Matrix3::zeros(), |acc, p| {
            let d = p.state.r - mean;
            acc + d * d.transpose() * p.log_weight.exp()
        })
    }

    /// The highest-weight particle.
    pub fn best(&self) -> &Particle {
        self.particles
            .iter()
            .max_by(|a, b| a.log_weight.total_cmp(&b.log_weight))
            .expect("particle sets are never empty")
    }

    /// Propagates every particle through the noisy motion model. Particle
    /// `i` draws from a stream keyed by `(seed, step, i)`.
    pub fn predict(&mut self, u: &OdometryInput, cfg: &FilterConfig) -> Result<()> {
        u.validate()?;
        let sqrt_q = u.noise_sqrt();
        let step = self.step;
        self.particles.par_iter_mut().enumerate().for_each(|(i, p)| {
            let mut stream = rng::stream(&[cfg.seed, step, i as u64, rng::tag::PARTICLE]);
            p.state = propagate_noisy(&p.state, u, &sqrt_q, &mut stream);
        });
        Ok(())
    }

    /// Weights every particle against a shared map, then normalizes and
    /// resamples.
    pub fn update_shared(&mut self, mp: &MapPosterior, obs: &Observation, cfg: &FilterConfig) -> Result<()> {
        let floor = cfg.likelihood_floor;
        let lls = self
            .particles
            .par_iter()
            .map(|p| weigh(stacked_log_likelihood(mp, &p.state, obs), floor))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_step(self.step as usize))?;
        self.absorb(&lls, cfg)
    }

    /// Weights each particle by the predictive likelihood of its own map and
    /// then conditions that map on the readings.
    pub fn update_own_maps(&mut self, obs: &Observation, cfg: &FilterConfig) -> Result<()> {
        let floor = cfg.likelihood_floor;
        let lls = self
            .particles
            .par_iter_mut()
            .map(|p| {
                let mp = p.map.as_mut().ok_or_else(|| Error::validation("SLAM particles must carry a map"))?;
                let stacked = obs.stack(&mp.spec, &p.state);
                let (h, y, r) = match stacked {
                    Err(Error::OutOfDomain { .. }) => return Ok((floor, true)),
                    other => other?,
                };
                let ll = match &mut mp.covariance {
                    Some(cov) => kalman_update_with_likelihood(&mut mp.mean, cov, &h, &y, &r)?,
                    None => SpdFactor::new(&r, MAX_INNOVATION_CONDITION)?.gaussian_log_density(&(y - h * &mp.mean)),
                };
                Ok((ll, false))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_step(self.step as usize))?;
        self.absorb(&lls, cfg)
    }

    fn absorb(&mut self, lls: &[(f64, bool)], cfg: &FilterConfig) -> Result<()> {
        if lls.iter().all(|&(_, flagged)| flagged) {
            return Err(Error::AllParticlesDegenerate.at_step(self.step as usize));
        }
        for (p, &(ll, flagged)) in self.particles.iter_mut().zip(lls) {
            p.log_weight += ll;
            p.flagged = flagged;
        }
        self.normalize();
        if self.ess() < cfg.ess_threshold * self.len() as f64 {
            self.resample(cfg);
        }
        self.step += 1;
        Ok(())
    }

    fn normalize(&mut self) {
        let max = self.particles.iter().map(|p| p.log_weight).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = self.particles.iter().map(|p| (p.log_weight - max).exp()).sum();
        let lse = max + sum.ln();
        for p in &mut self.particles {
            p.log_weight -= lse;
        }
    }

    /// Systematic resampling with an offset drawn from `(seed, step)`;
    /// maps are deep-copied.
    pub fn resample(&mut self, cfg: &FilterConfig) {
        let mut stream = rng::stream(&[cfg.seed, self.step, rng::tag::RESAMPLE]);
        let u0: f64 = stream.random();
        let idx = systematic_resample(&self.weights(), u0);
        let lw = -(self.len() as f64).ln();
        self.particles = idx
            .into_iter()
            .map(|i| Particle {
                log_weight: lw,
                ..self.particles[i].clone()
            })
            .collect();
    }
}

fn weigh(ll: Result<f64>, floor: f64) -> Result<(f64, bool)> {
    match ll {
        Ok(v) => Ok((v, false)),
        Err(Error::OutOfDomain { .. }) => Ok((floor, true)),
        Err(e) => Err(e),
    }
}

/// One map-matching recursion against a fixed shared map.
pub fn map_match_step(
    ps: &ParticleSet,
    mp: &MapPosterior,
    u: &OdometryInput,
    obs: &Observation,
    cfg: &FilterConfig,
) -> Result<ParticleSet> {
    if ps.particles.iter().any(|p| p.map.is_some()) {
        return Err(Error::validation("map matching uses the shared map; particles must not carry maps"));
    }
    let mut next = ps.clone();
    next.predict(u, cfg)?;
    next.update_shared(mp, obs, cfg)?;
    Ok(next)
}

/// One Rao-Blackwellized SLAM recursion.
pub fn slam_step(ps: &ParticleSet, u: &OdometryInput, obs: &Observation, cfg: &FilterConfig) -> Result<ParticleSet> {
    let spec = ps.particles[0].map.as_ref().map(|m| &m.spec);
    if spec.is_none() || ps.particles.iter().any(|p| p.map.as_ref().map(|m| &m.spec) != spec) {
        return Err(Error::validation("every SLAM particle must carry a map with the same basis"));
    }
    let mut next = ps.clone();
    next.predict(u, cfg)?;
    next.update_own_maps(obs, cfg)?;
    Ok(next)
}
