//! Manipulation primitives: quintic fling, pick-and-place and drag.
//!
//! Each primitive resolves to a time-stamped gripper trajectory in world
//! coordinates which [`execute_primitive`] plays back on the simulator.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::{CameraModel, PerceptionError, Pixel};
use crate::sim::{attach_gripper, ClothState, GripperHandle, SimError, Vec3};

pub const V_MID_RANGE: (f64, f64) = (0.08, 0.5);
pub const HEIGHT_BINS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const TIME_BINS: [f64; 6] = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0];

/// Fraction of a pick-and-place spent lifting, translating and lowering.
pub const PNP_PHASES: [f64; 3] = [0.25, 0.5, 0.25];

/// Speed of the minimum-jerk profile at its midpoint, relative to
/// distance / duration.
pub const QUINTIC_MID_SPEED_FACTOR: f64 = 15.0 / 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimitiveError {
    #[error("invalid duration {0}")]
    InvalidDuration(f64),
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),
    #[error("invalid primitive parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveKind {
    DynamicQuintic,
    PickAndPlace,
    Drag,
}

/// Physical parameters a primitive runs with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ResolvedParams {
    Dynamic { v_mid: f64 },
    PickAndPlace { height: f64, time: f64 },
    Drag { time: f64 },
}

impl ResolvedParams {
    pub fn kind(&self) -> PrimitiveKind {
        match self {
            ResolvedParams::Dynamic { .. } => PrimitiveKind::DynamicQuintic,
            ResolvedParams::PickAndPlace { .. } => PrimitiveKind::PickAndPlace,
            ResolvedParams::Drag { .. } => PrimitiveKind::Drag,
        }
    }

    pub fn validate(&self) -> Result<(), PrimitiveError> {
        let in_set = |v: f64, set: &[f64]| set.iter().any(|s| (s - v).abs() < 1e-9);
        match *self {
            ResolvedParams::Dynamic { v_mid } => {
                if !(V_MID_RANGE.0 - 1e-12..=V_MID_RANGE.1 + 1e-12).contains(&v_mid) {
                    return Err(PrimitiveError::InvalidParameter(format!("v_mid {v_mid} outside [0.08, 0.5]")));
                }
            }
            ResolvedParams::PickAndPlace { height, time } => {
                if !in_set(height, &HEIGHT_BINS) {
                    return Err(PrimitiveError::InvalidParameter(format!("height {height} not a legal bin")));
                }
                if !in_set(time, &TIME_BINS) {
                    return Err(PrimitiveError::InvalidParameter(format!("time {time} not a legal bin")));
                }
            }
            ResolvedParams::Drag { time } => {
                if !in_set(time, &TIME_BINS) {
                    return Err(PrimitiveError::InvalidParameter(format!("time {time} not a legal bin")));
                }
            }
        }
        Ok(())
    }

    /// The value of the learned parameter, for logging.
    pub fn theta_value(&self, learned: ThetaParam) -> f64 {
        match (*self, learned) {
            (ResolvedParams::Dynamic { v_mid }, _) => v_mid,
            (ResolvedParams::PickAndPlace { height, .. }, ThetaParam::Height) => height,
            (ResolvedParams::PickAndPlace { time, .. }, _) => time,
            (ResolvedParams::Drag { time }, _) => time,
        }
    }
}

/// Which primitive parameter the third Q-head chooses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaParam {
    Height,
    Time,
    MidVelocity,
}

/// Primitive kind, learned parameter and the values of everything that is
/// held fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrimitiveConfig {
    pub kind: PrimitiveKind,
    pub learned: ThetaParam,
    pub fixed_height: f64,
    pub fixed_time: f64,
    /// Number of uniform bins over the v_mid range.
    pub velocity_bins: usize,
    /// Multiplies t_theta before simulation.
    pub time_scale: f64,
    /// Grasp radius as a multiple of the particle spacing.
    pub grasp_radius_factor: f64,
    pub settle_steps: u64,
    pub settle_tol: f64,
    /// Height of the gripper above the support plane while dragging (m).
    pub grasp_height_offset: f64,
}

impl Default for PrimitiveConfig {
    fn default() -> Self {
        Self {
            kind: PrimitiveKind::PickAndPlace,
            learned: ThetaParam::Height,
            fixed_height: 0.2,
            fixed_time: 10.0,
            velocity_bins: 5,
            time_scale: 0.3,
            grasp_radius_factor: 1.5,
            settle_steps: 2500,
            settle_tol: 0.02,
            grasp_height_offset: 0.0,
        }
    }
}

impl PrimitiveConfig {
    pub fn validate(&self) -> Result<(), PrimitiveError> {
        let ok = match (self.kind, self.learned) {
            (PrimitiveKind::DynamicQuintic, ThetaParam::MidVelocity) => true,
            (PrimitiveKind::PickAndPlace, ThetaParam::Height | ThetaParam::Time) => true,
            (PrimitiveKind::Drag, ThetaParam::Time) => true,
            _ => false,
        };
        if !ok {
            return Err(PrimitiveError::InvalidParameter(format!(
                "{:?} cannot learn {:?}",
                self.kind, self.learned
            )));
        }
        if self.velocity_bins < 2 {
            return Err(PrimitiveError::InvalidParameter("velocity_bins must be >= 2".into()));
        }
        if !(self.time_scale > 0.0) || !(self.grasp_radius_factor > 0.0) || !(self.settle_tol >= 0.0) {
            return Err(PrimitiveError::InvalidParameter(
                "time_scale and grasp_radius_factor must be > 0".into(),
            ));
        }
        if self.settle_steps == 0 {
            return Err(PrimitiveError::InvalidParameter("settle_steps must be > 0".into()));
        }
        self.resolve_value(self.theta_values()[0])?.validate()?;
        Ok(())
    }

    /// Values of the learned parameter, one per theta bin.
    pub fn theta_values(&self) -> Vec<f64> {
        match self.learned {
            ThetaParam::Height => HEIGHT_BINS.to_vec(),
            ThetaParam::Time => TIME_BINS.to_vec(),
            ThetaParam::MidVelocity => {
                let (lo, hi) = V_MID_RANGE;
                let k = self.velocity_bins;
                (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
            }
        }
    }

    pub fn num_bins(&self) -> usize {
        self.theta_values().len()
    }

    pub fn resolve(&self, bin: usize) -> Result<ResolvedParams, PrimitiveError> {
        let values = self.theta_values();
        let v = *values
            .get(bin)
            .ok_or_else(|| PrimitiveError::InvalidParameter(format!("theta bin {bin} out of range")))?;
        self.resolve_value(v)
    }

    pub fn resolve_value(&self, value: f64) -> Result<ResolvedParams, PrimitiveError> {
        let p = match (self.kind, self.learned) {
            (PrimitiveKind::DynamicQuintic, _) => ResolvedParams::Dynamic { v_mid: value },
            (PrimitiveKind::PickAndPlace, ThetaParam::Height) => ResolvedParams::PickAndPlace {
                height: value,
                time: self.fixed_time,
            },
            (PrimitiveKind::PickAndPlace, _) => ResolvedParams::PickAndPlace {
                height: self.fixed_height,
                time: value,
            },
            (PrimitiveKind::Drag, _) => ResolvedParams::Drag { time: value },
        };
        p.validate()?;
        Ok(p)
    }

    /// Bin whose value equals `value`, if any.
    pub fn bin_of(&self, value: f64) -> Option<usize> {
        self.theta_values().iter().position(|v| (v - value).abs() < 1e-9)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub pick_px: Pixel,
    pub place_px: Pixel,
    pub theta_bin: usize,
    pub resolved: ResolvedParams,
}

impl PrimitiveSpec {
    pub fn kind(&self) -> PrimitiveKind {
        self.resolved.kind()
    }
}

/// Minimum-jerk ease `10t^3 - 15t^4 + 6t^5` on `[0, 1]`.
pub fn quintic_ease(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// `alpha(t) = a0 + a1 t + ... + a5 t^5` sweeping `0 -> pi` over `duration`
/// with zero velocity and acceleration at both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuinticCoeffs {
    pub a: [f64; 6],
    pub duration: f64,
}

impl QuinticCoeffs {
    pub fn alpha(&self, t: f64) -> f64 {
        self.a.iter().rev().fold(0.0, |acc, &c| acc * t + c)
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        (1..6).rev().fold(0.0, |acc, i| acc * t + i as f64 * self.a[i])
    }

    pub fn alpha_ddot(&self, t: f64) -> f64 {
        (2..6).rev().fold(0.0, |acc, i| acc * t + (i * (i - 1)) as f64 * self.a[i])
    }
}

pub fn solve_quintic(duration: f64) -> Result<QuinticCoeffs, PrimitiveError> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(PrimitiveError::InvalidDuration(duration));
    }
    let t = duration;
    Ok(QuinticCoeffs {
        a: [
            0.0,
            0.0,
            0.0,
            10.0 * PI / t.powi(3),
            -15.0 * PI / t.powi(4),
            6.0 * PI / t.powi(5),
        ],
        duration,
    })
}

/// Duration for which an arc of `radius` has end-effector speed `v_mid` at
/// its midpoint.
pub fn duration_for_mid_velocity(radius: f64, v_mid: f64) -> Result<f64, PrimitiveError> {
    if !(radius > 0.0) {
        return Err(PrimitiveError::DegenerateTrajectory("zero arc radius".into()));
    }
    ResolvedParams::Dynamic { v_mid }.validate()?;
    Ok(QUINTIC_MID_SPEED_FACTOR * PI * radius / v_mid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub waypoints: Vec<(f64, Vec3)>,
    pub duration: f64,
}

impl Trajectory {
    /// Sample `path` at multiples of `dt` plus the exact end time.
    fn sample(duration: f64, dt: f64, path: impl Fn(f64) -> Vec3) -> Result<Self, PrimitiveError> {
        if !(dt > 0.0) {
            return Err(PrimitiveError::InvalidDuration(dt));
        }
        let n = (duration / dt).ceil() as usize;
        let mut waypoints = Vec::with_capacity(n + 1);
        for i in 0..n {
            let t = i as f64 * dt;
            if t < duration - 1e-9 * dt {
                waypoints.push((t, path(t)));
            }
        }
        waypoints.push((duration, path(duration)));
        Ok(Self { waypoints, duration })
    }

    pub fn start(&self) -> Vec3 {
        self.waypoints[0].1
    }

    pub fn end(&self) -> Vec3 {
        self.waypoints[self.waypoints.len() - 1].1
    }

    /// Linear interpolation between neighbouring waypoints, clamped to the
    /// ends.
    pub fn position_at(&self, t: f64) -> Vec3 {
        let w = &self.waypoints;
        if t <= w[0].0 {
            return w[0].1;
        }
        if t >= self.duration {
            return self.end();
        }
        let k = w.partition_point(|(wt, _)| *wt <= t);
        let (t0, p0) = w[k - 1];
        let (t1, p1) = w[k];
        p0 + (p1 - p0) * ((t - t0) / (t1 - t0))
    }

    /// Largest finite-difference speed between consecutive waypoints.
    pub fn max_speed(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| (w[1].1 - w[0].1).norm() / (w[1].0 - w[0].0))
            .fold(0.0, f64::max)
    }

    /// `t x y z` per line.
    pub fn write_dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (t, p) in &self.waypoints {
            writeln!(out, "{t:.6} {:.6} {:.6} {:.6}", p.x, p.y, p.z)?;
        }
        Ok(())
    }
}

/// Semicircle in the vertical plane through pick and place, swept by the
/// quintic angle profile.
pub fn sample_dynamic_trajectory(pick: Vec3, place: Vec3, v_mid: f64, dt: f64) -> Result<Trajectory, PrimitiveError> {
    let chord = place - pick;
    let horizontal = (chord.x * chord.x + chord.y * chord.y).sqrt();
    if chord.norm() < 1e-12 || horizontal < 1e-12 {
        return Err(PrimitiveError::DegenerateTrajectory("pick and place coincide in the plane".into()));
    }
    let radius = 0.5 * chord.norm();
    let duration = duration_for_mid_velocity(radius, v_mid)?;
    let coeffs = solve_quintic(duration)?;
    let centre = pick + chord * 0.5;
    let u = chord / chord.norm();
    // In-plane normal to the chord pointing upwards.
    let up = Vec3::z();
    let normal = (up - u * u.dot(&up)).normalize();
    Trajectory::sample(duration, dt, |t| {
        if t >= duration {
            return place;
        }
        if t <= 0.0 {
            return pick;
        }
        let a = coeffs.alpha(t);
        centre - u * (radius * a.cos()) + normal * (radius * a.sin())
    })
}

/// Lift by `height`, translate, lower; each phase eased by the quintic
/// profile. With `height == 0` the motion collapses to one planar translate.
pub fn sample_pnp_trajectory(
    pick: Vec3,
    place: Vec3,
    height: f64,
    t_total: f64,
    dt: f64,
) -> Result<Trajectory, PrimitiveError> {
    if !(t_total > 0.0 && t_total.is_finite()) {
        return Err(PrimitiveError::InvalidDuration(t_total));
    }
    if !(height >= 0.0) {
        return Err(PrimitiveError::InvalidParameter(format!("height {height} < 0")));
    }
    if height == 0.0 {
        if (place - pick).norm() < 1e-12 {
            return Err(PrimitiveError::DegenerateTrajectory("pick equals place with zero height".into()));
        }
        return Trajectory::sample(t_total, dt, |t| {
            if t >= t_total {
                place
            } else {
                pick + (place - pick) * quintic_ease(t / t_total)
            }
        });
    }
    let top_start = pick + Vec3::new(0.0, 0.0, height);
    let top_end = Vec3::new(place.x, place.y, pick.z + height);
    let t1 = PNP_PHASES[0] * t_total;
    let t2 = t1 + PNP_PHASES[1] * t_total;
    Trajectory::sample(t_total, dt, |t| {
        if t >= t_total {
            place
        } else if t < t1 {
            pick + (top_start - pick) * quintic_ease(t / t1)
        } else if t < t2 {
            top_start + (top_end - top_start) * quintic_ease((t - t1) / (t2 - t1))
        } else {
            top_end + (place - top_end) * quintic_ease((t - t2) / (t_total - t2))
        }
    })
}

pub fn sample_drag_trajectory(pick: Vec3, place: Vec3, t_total: f64, dt: f64) -> Result<Trajectory, PrimitiveError> {
    sample_pnp_trajectory(pick, place, 0.0, t_total, dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub grasp_success: bool,
    pub realized_max_speed: f64,
    pub sim_steps: u64,
    pub settled: bool,
}

impl ExecutionReport {
    fn missed() -> Self {
        Self {
            grasp_success: false,
            realized_max_speed: 0.0,
            sim_steps: 0,
            settled: true,
        }
    }
}

/// Build the gripper trajectory for `spec`, starting at the grasped particle.
pub fn plan_trajectory(
    start: Vec3,
    place: Vec3,
    resolved: ResolvedParams,
    cfg: &PrimitiveConfig,
    dt: f64,
) -> Result<Trajectory, PrimitiveError> {
    match resolved {
        ResolvedParams::Dynamic { v_mid } => sample_dynamic_trajectory(start, place, v_mid, dt),
        ResolvedParams::PickAndPlace { height, time } => {
            sample_pnp_trajectory(start, place, height, time * cfg.time_scale, dt)
        }
        ResolvedParams::Drag { time } => {
            let place = Vec3::new(place.x, place.y, cfg.grasp_height_offset);
            let start = Vec3::new(start.x, start.y, start.z.min(cfg.grasp_height_offset));
            sample_drag_trajectory(start, place, time * cfg.time_scale, dt)
        }
    }
}

/// Grasp at the pick pixel, play the trajectory, release and settle.
///
/// A missed grasp leaves the state untouched and reports
/// `grasp_success = false`.
pub fn execute_primitive(
    state: &ClothState,
    spec: &PrimitiveSpec,
    camera: &CameraModel,
    cfg: &PrimitiveConfig,
) -> Result<(ClothState, ExecutionReport), PrimitiveError> {
    spec.resolved.validate()?;
    let pick_w = camera.pixel_to_world(spec.pick_px)?;
    let place_w = camera.pixel_to_world(spec.place_px)?;
    let radius = cfg.grasp_radius_factor * state.spacing.max(1e-6);
    let handle = match attach_gripper(state, pick_w, radius) {
        Ok(h) => h,
        Err(SimError::GraspMiss { .. }) => return Ok((state.clone(), ExecutionReport::missed())),
        Err(e) => return Err(e.into()),
    };
    let start = state.positions[handle.particle_index];
    let dt = state.dynamics.dt;
    let traj = plan_trajectory(start, place_w, spec.resolved, cfg, dt)?;

    let mut out = state.clone();
    let mut grip = GripperHandle {
        particle_index: handle.particle_index,
        target: start,
    };
    let n = (traj.duration / dt).ceil() as u64;
    let mut max_speed: f64 = 0.0;
    let mut prev = start;
    for k in 1..=n {
        let t = (k as f64 * dt).min(traj.duration);
        grip.target = traj.position_at(t);
        max_speed = max_speed.max((grip.target - prev).norm() / dt);
        prev = grip.target;
        out.step(Some(&grip))?;
    }
    out.gripped = None;
    let settle = out.settle(cfg.settle_steps, cfg.settle_tol)?;
    Ok((
        out,
        ExecutionReport {
            grasp_success: true,
            realized_max_speed: max_speed,
            sim_steps: n + settle.steps,
            settled: settle.settled,
        },
    ))
}
