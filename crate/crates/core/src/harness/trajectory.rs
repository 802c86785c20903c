//! Ground-truth trajectories and the odometry they induce.

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{NavState, OdometryInput};
use crate::geometry::{log_map, UnitOrientation};
use crate::rng;

/// Constant-speed paths. Yaw follows the direction of travel unless a
/// per-waypoint yaw profile is given, in which case it is interpolated
/// linearly along each segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectorySpec {
    Waypoints {
        waypoints_m: Vec<Vector3<f64>>,
        speed_mps: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        yaw_rad: Option<Vec<f64>>,
    },
    Line {
        start_m: Vector3<f64>,
        end_m: Vector3<f64>,
        speed_mps: f64,
    },
    Circle {
        center_m: Vector3<f64>,
        radius_m: f64,
        speed_mps: f64,
        #[serde(default = "one")]
        laps: f64,
    },
    /// Fixed pose for a given duration.
    Stationary {
        position_m: Vector3<f64>,
        #[serde(default)]
        yaw_rad: f64,
        duration_s: f64,
    },
}

fn one() -> f64 {
    1.0
}

/// Truth at one sample time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TruthPose {
    pub t: f64,
    pub state: NavState,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64, what: &str| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(format!("{what} must be positive")))
            }
        };
        match self {
            TrajectorySpec::Waypoints { waypoints_m, speed_mps, yaw_rad } => {
                positive(*speed_mps, "speed_mps")?;
                if waypoints_m.len() < 2 {
                    return Err(Error::validation("a waypoint trajectory needs at least two waypoints"));
                }
                if let Some(y) = yaw_rad {
                    if y.len() != waypoints_m.len() {
                        return Err(Error::validation("yaw_rad needs one entry per waypoint"));
                    }
                }
                if waypoints_m.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::validation("consecutive waypoints must differ"));
                }
                Ok(())
            }
            TrajectorySpec::Line { start_m, end_m, speed_mps } => {
                positive(*speed_mps, "speed_mps")?;
                if start_m == end_m {
                    return Err(Error::validation("line start and end must differ"));
                }
                Ok(())
            }
            TrajectorySpec::Circle { radius_m, speed_mps, laps, .. } => {
                positive(*radius_m, "radius_m")?;
                positive(*speed_mps, "speed_mps")?;
                positive(*laps, "laps")
            }
            TrajectorySpec::Stationary { duration_s, .. } => positive(*duration_s, "duration_s"),
        }
    }

    /// Poses at `t_k = k / rate_hz`, from the start to the end of the path.
    pub fn sample(&self, rate_hz: f64) -> Result<Vec<TruthPose>> {
        self.validate()?;
        if !(rate_hz > 0.0) || !rate_hz.is_finite() {
            return Err(Error::validation("rate_hz must be positive"));
        }
        let duration = self.duration();
        let n = (duration * rate_hz + 1e-9).floor() as usize;
        Ok((0..=n)
            .map(|k| {
                let t = k as f64 / rate_hz;
                TruthPose { t, state: self.at(t) }
            })
            .collect())
    }

    pub fn duration(&self) -> f64 {
        match self {
            TrajectorySpec::Waypoints { waypoints_m, speed_mps, .. } => {
                waypoints_m.windows(2).map(|w| (w[1] - w[0]).norm()).sum::<f64>() / speed_mps
            }
            TrajectorySpec::Line { start_m, end_m, speed_mps } => (end_m - start_m).norm() / speed_mps,
            TrajectorySpec::Circle { radius_m, speed_mps, laps, .. } => {
                laps * 2.0 * std::f64::consts::PI * radius_m / speed_mps
            }
            TrajectorySpec::Stationary { duration_s, .. } => *duration_s,
        }
    }

    fn at(&self, t: f64) -> NavState {
        match self {
            TrajectorySpec::Waypoints { waypoints_m, speed_mps, yaw_rad } => {
                along_waypoints(waypoints_m, *speed_mps, yaw_rad.as_deref(), t)
            }
            TrajectorySpec::Line { start_m, end_m, speed_mps } => {
                along_waypoints(&[*start_m, *end_m], *speed_mps, None, t)
            }
            TrajectorySpec::Circle { center_m, radius_m, speed_mps, .. } => {
                let th = speed_mps * t / radius_m;
                let r = center_m + Vector3::new(th.cos(), th.sin(), 0.0) * *radius_m;
                let v = Vector3::new(-th.sin(), th.cos(), 0.0) * *speed_mps;
                NavState::new(r, v, UnitOrientation::from_yaw(th + std::f64::consts::FRAC_PI_2))
            }
            TrajectorySpec::Stationary { position_m, yaw_rad, .. } => {
                NavState::at_rest(*position_m, UnitOrientation::from_yaw(*yaw_rad))
            }
        }
    }
}

fn along_waypoints(points: &[Vector3<f64>], speed: f64, yaw: Option<&[f64]>, t: f64) -> NavState {
    let mut s = speed * t;
    let last = points.len() - 2;
    for i in 0..=last {
        let seg = points[i + 1] - points[i];
        let len = seg.norm();
        if s < len || i == last {
            let f = (s / len).min(1.0);
            let heading = match yaw {
                Some(y) => y[i] + f * (y[i + 1] - y[i]),
                None if seg.x == 0.0 && seg.y == 0.0 => 0.0,
                None => seg.y.atan2(seg.x),
            };
            return NavState::new(points[i] + seg * f, seg / len * speed, UnitOrientation::from_yaw(heading));
        }
        s -= len;
    }
    unreachable!("trajectories have at least one segment")
}

/// Odometry noise: per-axis translation noise proportional to the distance
/// travelled (plus a floor), and attitude noise per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryConfig {
    pub position_noise_fraction: f64,
    pub position_noise_floor_m: f64,
    pub attitude_noise_std_rad: f64,
    /// Attitude noise about the body z axis only, as for a level ground
    /// platform whose roll and pitch are known.
    pub heading_only: bool,
}

impl Default for OdometryConfig {
    fn default() -> Self {
        Self {
            position_noise_fraction: 0.02,
            position_noise_floor_m: 0.0,
            attitude_noise_std_rad: 0.0,
            heading_only: false,
        }
    }
}

impl OdometryConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [self.position_noise_fraction, self.position_noise_floor_m, self.attitude_noise_std_rad];
        if all.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::validation("odometry noise parameters must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Exact body-frame increments between consecutive truth poses,
/// corrupted by odometry noise drawn from `(seed, k)`. The returned inputs
/// carry the matching process-noise covariance.
pub fn odometry_from_truth(poses: &[TruthPose], cfg: &OdometryConfig, seed: u64) -> Result<Vec<OdometryInput>> {
    cfg.validate()?;
    poses
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let (a, b) = (&w[0], &w[1]);
            let dt = b.t - a.t;
            let dr = a.state.q.rotate_inverse(&(b.state.r - a.state.r));
            let dth = log_map(&a.state.q.inverse().compose(&b.state.q)).0;
            let sr = cfg.position_noise_fraction * dr.norm() + cfg.position_noise_floor_m;
            let sa = cfg.attitude_noise_std_rad;
            let mut stream = rng::stream(&[seed, k as u64, rng::tag::ODOMETRY]);
            let mut z = || stream.sample::<f64, _>(StandardNormal);
            let nr = Vector3::new(z(), z(), z()) * sr;
            let na = Vector3::new(z(), z(), z()) * sa;
            let (na, tilt) = if cfg.heading_only { (Vector3::new(0.0, 0.0, na.z), 0.0) } else { (na, sa * sa) };
            let cov = Matrix6::from_diagonal(&Vector6::new(sr * sr, sr * sr, sr * sr, tilt, tilt, sa * sa));
            OdometryInput::new(dt, (dr + nr) / dt, (dth + na) / dt, cov)
        })
        .collect()
}
