//! Mass-spring cloth with ground contact and a kinematic gripper.
//!
//! Particles live on a `rows x cols` grid (index `r * cols + c`) and are
//! connected by structural, shear and bend springs. Integration is
//! semi-implicit Euler; the outer step `dt` is split into as many substeps as
//! the stiffest mode requires, so every configuration that passes
//! [`ClothConfig::validate`] integrates stably.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::primitives::quintic_ease;

pub type Vec3 = Vector3<f64>;

pub const GRAVITY: f64 = 9.81;
/// Allowed ground penetration after any step (m).
pub const PENETRATION_TOL: f64 = 1e-4;
/// Largest `dt * omega_max` a substep may reach; semi-implicit Euler is
/// stable below 2.
const STABILITY_MARGIN: f64 = 1.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid cloth config: {0}")]
    InvalidConfig(String),
    #[error("numerical blow-up at step {step}")]
    NumericalBlowup { step: u64 },
    #[error("grasp missed: no particle within {radius} m of ({x:.4}, {y:.4})")]
    GraspMiss { x: f64, y: f64, radius: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClothConfig {
    pub rows: usize,
    pub cols: usize,
    /// Rest distance between grid neighbours (m).
    pub spacing: f64,
    /// Total cloth mass (kg).
    pub mass_total: f64,
    pub k_struct: f64,
    pub k_shear: f64,
    pub k_bend: f64,
    /// Linear velocity damping (1/s).
    pub damping: f64,
    /// Fraction of tangential velocity removed on each ground contact.
    pub friction: f64,
    pub dt: f64,
}

impl Default for ClothConfig {
    fn default() -> Self {
        let k_struct = 60.0;
        Self {
            rows: 25,
            cols: 25,
            spacing: 0.015,
            mass_total: 0.1,
            k_struct,
            k_shear: 0.5 * k_struct,
            k_bend: 0.25 * k_struct,
            damping: 1.0,
            friction: 0.2,
            dt: 1e-3,
        }
    }
}

impl ClothConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.rows < 2 || self.cols < 2 {
            return bad("rows and cols must be >= 2");
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return bad("spacing must be > 0");
        }
        if !(self.mass_total > 0.0 && self.mass_total.is_finite()) {
            return bad("mass_total must be > 0");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be > 0");
        }
        for (name, v) in [
            ("k_struct", self.k_struct),
            ("k_shear", self.k_shear),
            ("k_bend", self.k_bend),
            ("damping", self.damping),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.friction) {
            return bad("friction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Side lengths of the flat cloth (m) along x (cols) and y (rows).
    pub fn flat_size(&self) -> (f64, f64) {
        (
            (self.cols - 1) as f64 * self.spacing,
            (self.rows - 1) as f64 * self.spacing,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpringKind {
    Structural,
    Shear,
    Bend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spring {
    pub i: usize,
    pub j: usize,
    pub rest_length: f64,
    pub stiffness: f64,
    pub kind: SpringKind,
}

/// Integration constants carried by a state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub damping: f64,
    pub friction: f64,
    pub dt: f64,
    pub substeps: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClothState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub springs: Vec<Spring>,
    pub particle_mass: f64,
    pub gripped: Option<usize>,
    /// Grid shape; `(0, 0)` for loose particle sets without a surface.
    pub rows: usize,
    pub cols: usize,
    pub spacing: f64,
    pub dynamics: Dynamics,
    pub step_count: u64,
    pub settled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GripperHandle {
    pub particle_index: usize,
    pub target: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SettleReport {
    pub steps: u64,
    pub settled: bool,
}

/// Flat grid centred on the origin at `z = 0`.
pub fn build_cloth(config: &ClothConfig) -> Result<ClothState, SimError> {
    config.validate()?;
    let (rows, cols, s) = (config.rows, config.cols, config.spacing);
    let n = rows * cols;
    let x0 = -0.5 * (cols - 1) as f64 * s;
    let y0 = -0.5 * (rows - 1) as f64 * s;
    let mut positions = Vec::with_capacity(n);
    for r in 0..rows {
        for c in 0..cols {
            positions.push(Vec3::new(x0 + c as f64 * s, y0 + r as f64 * s, 0.0));
        }
    }

    let idx = |r: usize, c: usize| r * cols + c;
    let mut springs = Vec::new();
    let mut add = |i: usize, j: usize, k: f64, kind: SpringKind| {
        let rest_length = (positions[j] - positions[i]).norm();
        springs.push(Spring {
            i,
            j,
            rest_length,
            stiffness: k,
            kind,
        });
    };
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                add(idx(r, c), idx(r, c + 1), config.k_struct, SpringKind::Structural);
            }
            if r + 1 < rows {
                add(idx(r, c), idx(r + 1, c), config.k_struct, SpringKind::Structural);
            }
            if r + 1 < rows && c + 1 < cols {
                add(idx(r, c), idx(r + 1, c + 1), config.k_shear, SpringKind::Shear);
                add(idx(r, c + 1), idx(r + 1, c), config.k_shear, SpringKind::Shear);
            }
            if c + 2 < cols {
                add(idx(r, c), idx(r, c + 2), config.k_bend, SpringKind::Bend);
            }
            if r + 2 < rows {
                add(idx(r, c), idx(r + 2, c), config.k_bend, SpringKind::Bend);
            }
        }
    }

    let particle_mass = config.mass_total / n as f64;
    let substeps = required_substeps(n, &springs, particle_mass, config.dt);
    Ok(ClothState {
        velocities: vec![Vec3::zeros(); n],
        positions,
        springs,
        particle_mass,
        gripped: None,
        rows,
        cols,
        spacing: s,
        dynamics: Dynamics {
            damping: config.damping,
            friction: config.friction,
            dt: config.dt,
            substeps,
        },
        step_count: 0,
        settled: true,
    })
}

/// Largest eigenvalue of the spring-weighted graph Laplacian, by power
/// iteration. It bounds the tangent stiffness of the 3D system for springs
/// stretched up to twice their rest length.
fn laplacian_spectral_radius(n: usize, springs: &[Spring]) -> f64 {
    if springs.is_empty() || n == 0 {
        return 0.0;
    }
    // Deterministic start vector with components in every mode.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0 - 0.5 * (i % 2) as f64 * 3.0).collect();
    let mut lambda = 0.0;
    let mut w = vec![0.0; n];
    for _ in 0..200 {
        w.iter_mut().for_each(|x| *x = 0.0);
        for s in springs {
            let d = s.stiffness * (v[s.i] - v[s.j]);
            w[s.i] += d;
            w[s.j] -= d;
        }
        let norm_v: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_w: f64 = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_w == 0.0 {
            return 0.0;
        }
        let next = norm_w / norm_v;
        v.iter_mut().zip(&w).for_each(|(a, b)| *a = b / norm_w);
        if (next - lambda).abs() <= 1e-6 * next {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // Power iteration converges from below; pad for the residual.
    lambda * 1.05
}

fn required_substeps(n: usize, springs: &[Spring], mass: f64, dt: f64) -> u32 {
    let lambda = laplacian_spectral_radius(n, springs);
    let omega = (lambda / mass).sqrt();
    ((dt * omega / STABILITY_MARGIN).ceil() as u32).max(1)
}

impl ClothState {
    /// Loose particles with no springs and no surface.
    pub fn from_particles(positions: Vec<Vec3>, particle_mass: f64, damping: f64, friction: f64, dt: f64) -> Self {
        let n = positions.len();
        Self {
            velocities: vec![Vec3::zeros(); n],
            positions,
            springs: Vec::new(),
            particle_mass,
            gripped: None,
            rows: 0,
            cols: 0,
            spacing: 0.0,
            dynamics: Dynamics {
                damping,
                friction,
                dt,
                substeps: 1,
            },
            step_count: 0,
            settled: true,
        }
    }

    pub fn num_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn has_surface(&self) -> bool {
        self.rows >= 2 && self.cols >= 2 && self.rows * self.cols == self.positions.len()
    }

    /// Two triangles per grid cell, empty for loose particles.
    pub fn triangles(&self) -> Vec<[usize; 3]> {
        if !self.has_surface() {
            return Vec::new();
        }
        let mut tris = Vec::with_capacity(2 * (self.rows - 1) * (self.cols - 1));
        for r in 0..self.rows - 1 {
            for c in 0..self.cols - 1 {
                let a = r * self.cols + c;
                let b = a + 1;
                let d = a + self.cols;
                let e = d + 1;
                tris.push([a, b, e]);
                tris.push([a, e, d]);
            }
        }
        tris
    }

    pub fn max_speed(&self) -> f64 {
        self.velocities.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn min_z(&self) -> f64 {
        self.positions.iter().map(|p| p.z).fold(f64::INFINITY, f64::min)
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.positions.len().max(1) as f64;
        self.positions.iter().sum::<Vec3>() / n
    }

    pub fn translate(&mut self, offset: Vec3) {
        self.positions.iter_mut().for_each(|p| *p += offset);
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * self.particle_mass * self.velocities.iter().map(|v| v.norm_squared()).sum::<f64>()
    }

    pub fn potential_energy(&self) -> f64 {
        let gravity: f64 = self.positions.iter().map(|p| self.particle_mass * GRAVITY * p.z).sum();
        let elastic: f64 = self
            .springs
            .iter()
            .map(|s| {
                let ext = (self.positions[s.j] - self.positions[s.i]).norm() - s.rest_length;
                0.5 * s.stiffness * ext * ext
            })
            .sum();
        gravity + elastic
    }

    pub fn total_energy(&self) -> f64 {
        self.kinetic_energy() + self.potential_energy()
    }

    /// Advance by one outer step of `dt`. A gripped particle is pinned to the
    /// gripper target, linearly interpolated across substeps.
    pub fn step(&mut self, gripper: Option<&GripperHandle>) -> Result<(), SimError> {
        let Dynamics {
            damping,
            friction,
            dt,
            substeps,
        } = self.dynamics;
        let n_sub = substeps.max(1);
        let h = dt / n_sub as f64;
        let m = self.particle_mass;
        let inv_m = 1.0 / m;
        let mut forces = vec![Vec3::zeros(); self.positions.len()];

        let pin = gripper.map(|g| (g.particle_index, self.positions[g.particle_index], g.target));
        self.gripped = gripper.map(|g| g.particle_index);

        for sub in 0..n_sub {
            for (f, v) in forces.iter_mut().zip(&self.velocities) {
                *f = Vec3::new(0.0, 0.0, -GRAVITY * m) - damping * m * v;
            }
            for s in &self.springs {
                let d = self.positions[s.j] - self.positions[s.i];
                let len = d.norm();
                if len > 1e-12 {
                    let f = d * (s.stiffness * (len - s.rest_length) / len);
                    forces[s.i] += f;
                    forces[s.j] -= f;
                }
            }
            for ((x, v), f) in self.positions.iter_mut().zip(self.velocities.iter_mut()).zip(&forces) {
                *v += f * (inv_m * h);
                *x += *v * h;
                if x.z < 0.0 {
                    x.z = 0.0;
                    if v.z < 0.0 {
                        v.z = 0.0;
                    }
                    v.x *= 1.0 - friction;
                    v.y *= 1.0 - friction;
                }
            }
            if let Some((i, start, target)) = pin {
                let frac = (sub + 1) as f64 / n_sub as f64;
                let goal = if sub + 1 == n_sub { target } else { start + (target - start) * frac };
                self.velocities[i] = (goal - self.positions[i]) / h;
                self.positions[i] = goal;
            }
        }
        self.step_count += 1;
        self.settled = false;

        let finite = self
            .positions
            .iter()
            .chain(&self.velocities)
            .all(|p| p.iter().all(|c| c.is_finite()));
        if !finite {
            return Err(SimError::NumericalBlowup { step: self.step_count });
        }
        Ok(())
    }

    /// Step until the fastest particle is slower than `v_tol`.
    pub fn settle(&mut self, max_steps: u64, v_tol: f64) -> Result<SettleReport, SimError> {
        if max_steps == 0 {
            return Err(SimError::InvalidArgument("max_steps must be > 0".into()));
        }
        self.gripped = None;
        let mut steps = 0;
        while steps < max_steps {
            self.step(None)?;
            steps += 1;
            if self.max_speed() < v_tol {
                self.settled = true;
                return Ok(SettleReport { steps, settled: true });
            }
        }
        self.settled = false;
        Ok(SettleReport { steps, settled: false })
    }
}

/// Grasp the particle horizontally nearest to `world_point`, as a top-down
/// gripper would. Ties go to the lowest index.
pub fn attach_gripper(state: &ClothState, world_point: Vec3, radius: f64) -> Result<GripperHandle, SimError> {
    if !(radius > 0.0) {
        return Err(SimError::InvalidArgument("grasp radius must be > 0".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in state.positions.iter().enumerate() {
        let d2 = (p.x - world_point.x).powi(2) + (p.y - world_point.y).powi(2);
        if best.map_or(true, |(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    match best {
        Some((i, d2)) if d2.sqrt() <= radius => Ok(GripperHandle {
            particle_index: i,
            target: state.positions[i],
        }),
        _ => Err(SimError::GraspMiss {
            x: world_point.x,
            y: world_point.y,
            radius,
        }),
    }
}

/// Durations of the crumpling motion (s) and the settle budget that follows.
const CRUMPLE_LIFT_TIME: f64 = 0.5;
const CRUMPLE_MOVE_TIME: f64 = 0.4;
const CRUMPLE_LOWER_TIME: f64 = 1.2;
const CRUMPLE_SETTLE_STEPS: u64 = 4000;
const CRUMPLE_SETTLE_TOL: f64 = 5e-3;

/// Grab a particle near a random corner, lift it by about `severity` times
/// the cloth's diagonal, shift it sideways, lower it back towards the ground,
/// let go and wait for the pile to come to rest. Deterministic in `rng_seed`.
pub fn crumple(state: &ClothState, rng_seed: u64, severity: f64) -> Result<ClothState, SimError> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SimError::InvalidArgument("severity must lie in [0, 1]".into()));
    }
    let mut out = state.clone();
    if severity == 0.0 || !state.has_surface() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (rows, cols) = (state.rows, state.cols);
    let region_r = ((rows as f64 * 0.2).ceil() as usize).max(1);
    let region_c = ((cols as f64 * 0.2).ceil() as usize).max(1);
    let corner = rng.gen_range(0..4);
    let dr = rng.gen_range(0..region_r);
    let dc = rng.gen_range(0..region_c);
    let r = if corner & 1 == 0 { dr } else { rows - 1 - dr };
    let c = if corner & 2 == 0 { dc } else { cols - 1 - dc };
    let particle = r * cols + c;

    let diag = state.spacing * (((rows - 1).pow(2) + (cols - 1).pow(2)) as f64).sqrt();
    let height = severity * diag * rng.gen_range(1.0..1.5);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let reach = severity * 0.5 * diag * rng.gen_range(0.2..1.0);

    let start = out.positions[particle];
    let top = start + Vec3::new(0.0, 0.0, height);
    let across = top + Vec3::new(reach * heading.cos(), reach * heading.sin(), 0.0);
    let down = Vec3::new(across.x, across.y, start.z + (1.0 - severity) * height + severity * 0.02);
    let dt = out.dynamics.dt;
    let mut handle = GripperHandle {
        particle_index: particle,
        target: start,
    };
    for (from, to, duration) in [
        (start, top, CRUMPLE_LIFT_TIME),
        (top, across, CRUMPLE_MOVE_TIME),
        (across, down, CRUMPLE_LOWER_TIME),
    ] {
        let n = (duration / dt).round().max(1.0) as usize;
        for k in 1..=n {
            let s = quintic_ease(k as f64 / n as f64);
            handle.target = from + (to - from) * s;
            out.step(Some(&handle))?;
        }
    }
    out.gripped = None;
    out.settle(CRUMPLE_SETTLE_STEPS, CRUMPLE_SETTLE_TOL)?;
    Ok(out)
}

pub const SNAPSHOT_MAGIC: &str = "qdp-cloth-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Plain-text dump: a header `qdp-cloth-snapshot v1 <particles> <springs>`
/// followed by `x y z vx vy vz` per particle.
pub fn write_snapshot<W: Write>(state: &ClothState, mut out: W) -> std::io::Result<()> {
    let mut buf = String::new();
    let _ = writeln!(
        buf,
        "{SNAPSHOT_MAGIC} v{SNAPSHOT_VERSION} {} {}",
        state.positions.len(),
        state.springs.len()
    );
    for (p, v) in state.positions.iter().zip(&state.velocities) {
        let _ = writeln!(buf, "{:e} {:e} {:e} {:e} {:e} {:e}", p.x, p.y, p.z, v.x, v.y, v.z);
    }
    out.write_all(buf.as_bytes())
}

/// Parse a snapshot back into `(positions, velocities)`.
pub fn read_snapshot<R: BufRead>(input: R) -> Result<(Vec<Vec3>, Vec<Vec3>), SimError> {
    let err = |m: String| SimError::Snapshot(m);
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| err("empty snapshot".into()))?
        .map_err(|e| err(e.to_string()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != SNAPSHOT_MAGIC {
        return Err(err(format!("bad header `{header}`")));
    }
    if fields[1] != format!("v{SNAPSHOT_VERSION}") {
        return Err(err(format!("unsupported version {}", fields[1])));
    }
    let n: usize = fields[2].parse().map_err(|_| err("bad particle count".into()))?;
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    for line in lines.take(n) {
        let line = line.map_err(|e| err(e.to_string()))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        if vals.len() != 6 {
            return Err(err(format!("expected 6 values, got {}", vals.len())));
        }
        positions.push(Vec3::new(vals[0], vals[1], vals[2]));
        velocities.push(Vec3::new(vals[3], vals[4], vals[5]));
    }
    if positions.len() != n {
        return Err(err(format!("expected {n} particles, got {}", positions.len())));
    }
    Ok((positions, velocities))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(rows: usize, cols: usize) -> ClothConfig {
        ClothConfig {
            rows,
            cols,
            spacing: 0.1,
            ..ClothConfig::default()
        }
    }

    fn count(state: &ClothState, kind: SpringKind) -> usize {
        state.springs.iter().filter(|s| s.kind == kind).count()
    }

    /// Neighbour pairs found by testing every particle pair's grid offset.
    fn brute_force_counts(rows: usize, cols: usize) -> (usize, usize, usize) {
        let (mut st, mut sh, mut bd) = (0, 0, 0);
        let n = rows * cols;
        for a in 0..n {
            for b in a + 1..n {
                let (dr, dc) = (
                    (a / cols).abs_diff(b / cols),
                    (a % cols).abs_diff(b % cols),
                );
                match (dr, dc) {
                    (0, 1) | (1, 0) => st += 1,
                    (1, 1) => sh += 1,
                    (0, 2) | (2, 0) => bd += 1,
                    _ => {}
                }
            }
        }
        (st, sh, bd)
    }

    #[test]
    fn smallest_grid_spring_counts() {
        let s = build_cloth(&small(2, 2)).unwrap();
        assert_eq!(s.num_particles(), 4);
        assert_eq!(count(&s, SpringKind::Structural), 4);
        assert_eq!(count(&s, SpringKind::Shear), 2);
        assert_eq!(count(&s, SpringKind::Bend), 0);
    }

    #[test]
    fn spring_counts_match_enumeration() {
        for (r, c) in [(3, 3), (4, 7), (5, 2)] {
            let s = build_cloth(&small(r, c)).unwrap();
            let (st, sh, bd) = brute_force_counts(r, c);
            assert_eq!(
                (count(&s, SpringKind::Structural), count(&s, SpringKind::Shear), count(&s, SpringKind::Bend)),
                (st, sh, bd)
            );
        }
        let s = build_cloth(&small(3, 3)).unwrap();
        assert_eq!(
            (count(&s, SpringKind::Structural), count(&s, SpringKind::Shear), count(&s, SpringKind::Bend)),
            (12, 8, 6)
        );
    }

    #[test]
    fn mass_is_conserved_by_construction() {
        let cfg = ClothConfig {
            rows: 7,
            cols: 11,
            mass_total: 0.237,
            ..ClothConfig::default()
        };
        let s = build_cloth(&cfg).unwrap();
        let total = s.particle_mass * s.num_particles() as f64;
        assert!((total - 0.237).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_configs() {
        let bad = [
            ClothConfig { rows: 1, ..ClothConfig::default() },
            ClothConfig { spacing: 0.0, ..ClothConfig::default() },
            ClothConfig { mass_total: -1.0, ..ClothConfig::default() },
            ClothConfig { dt: 0.0, ..ClothConfig::default() },
            ClothConfig { k_bend: -1.0, ..ClothConfig::default() },
            ClothConfig { damping: f64::NAN, ..ClothConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(build_cloth(&cfg), Err(SimError::InvalidConfig(_))), "{cfg:?}");
        }
    }

    #[test]
    fn flat_cloth_stays_put() {
        let mut s = build_cloth(&ClothConfig::default()).unwrap();
        let start = s.positions.clone();
        for _ in 0..1000 {
            s.step(None).unwrap();
        }
        let drift = s
            .positions
            .iter()
            .zip(&start)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(drift < 1e-4, "drift {drift}");
    }

    #[test]
    fn free_particle_follows_ballistic_drop() {
        // Height error stays within 1% of the 1 m drop until contact.
        let mut s = ClothState::from_particles(vec![Vec3::new(0.0, 0.0, 1.0)], 0.01, 0.0, 0.0, 1e-3);
        let mut t = 0.0;
        loop {
            s.step(None).unwrap();
            t += 1e-3;
            let exact = 1.0 - 0.5 * GRAVITY * t * t;
            if exact <= 0.0 {
                break;
            }
            let err = (s.positions[0].z - exact).abs();
            assert!(err <= 0.01, "t={t} sim={} exact={exact}", s.positions[0].z);
        }
        for _ in 0..10 {
            s.step(None).unwrap();
        }
        assert_eq!(s.positions[0].z, 0.0);
    }

    #[test]
    fn gripped_particle_lands_on_target() {
        let mut s = build_cloth(&ClothConfig::default()).unwrap();
        let g = GripperHandle {
            particle_index: 3,
            target: Vec3::new(0.0, 0.0, 0.5),
        };
        s.step(Some(&g)).unwrap();
        assert_eq!(s.positions[3], g.target);
        assert_eq!(s.gripped, Some(3));
    }

    #[test]
    fn gripper_nearest_and_ties() {
        let s = ClothState::from_particles(
            vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.2, 0.0, 0.0)],
            0.01,
            0.0,
            0.0,
            1e-3,
        );
        assert_eq!(attach_gripper(&s, Vec3::new(0.1, 0.0, 0.0), 0.05).unwrap().particle_index, 1);
        assert_eq!(attach_gripper(&s, Vec3::new(0.05, 0.0, 0.0), 0.06).unwrap().particle_index, 0);
        assert!(matches!(
            attach_gripper(&s, Vec3::new(1.2, 0.0, 0.0), 0.05),
            Err(SimError::GraspMiss { .. })
        ));
    }

    #[test]
    fn settle_edge_cases() {
        let mut s = build_cloth(&ClothConfig::default()).unwrap();
        let rep = s.settle(100, 1e-3).unwrap();
        assert!(rep.settled && rep.steps <= 1);

        let mut s = build_cloth(&small(3, 3)).unwrap();
        s.translate(Vec3::new(0.0, 0.0, 0.05));
        let rep = s.settle(50, 0.0).unwrap();
        assert!(!rep.settled);
        assert_eq!(rep.steps, 50);
        assert!(s.settle(0, 1.0).is_err());
    }

    #[test]
    fn dropped_cloth_settles() {
        let mut s = build_cloth(&ClothConfig::default()).unwrap();
        s.translate(Vec3::new(0.0, 0.0, 0.2));
        let rep = s.settle(20_000, 1e-3).unwrap();
        assert!(rep.settled, "{rep:?}");
        assert!(s.min_z() >= -PENETRATION_TOL);
    }

    #[test]
    fn substeps_grow_with_stiffness() {
        let soft = build_cloth(&ClothConfig::default()).unwrap();
        let stiff = build_cloth(&ClothConfig {
            k_struct: 800.0,
            k_shear: 400.0,
            k_bend: 200.0,
            ..ClothConfig::default()
        })
        .unwrap();
        assert!(stiff.dynamics.substeps > soft.dynamics.substeps);
    }

    #[test]
    fn stiff_cloth_remains_stable() {
        let cfg = ClothConfig {
            k_struct: 800.0,
            k_shear: 400.0,
            k_bend: 200.0,
            mass_total: 0.05,
            ..ClothConfig::default()
        };
        let mut s = build_cloth(&cfg).unwrap();
        let g = GripperHandle {
            particle_index: 0,
            target: s.positions[0] + Vec3::new(0.0, 0.0, 0.2),
        };
        for _ in 0..300 {
            s.step(Some(&g)).unwrap();
        }
        s.settle(3000, 1e-3).unwrap();
        assert!(s.positions.iter().all(|p| p.iter().all(|c| c.is_finite() && c.abs() < 2.0)));
    }

    #[test]
    fn energy_decreases_over_windows() {
        let mut s = build_cloth(&ClothConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in s.positions.iter_mut() {
            p.x += rng.gen_range(-0.003..0.003);
            p.y += rng.gen_range(-0.003..0.003);
            p.z += rng.gen_range(0.0..0.01);
        }
        // Resolve initial contact first.
        for _ in 0..100 {
            s.step(None).unwrap();
        }
        let mut last = s.total_energy();
        for _ in 0..20 {
            for _ in 0..100 {
                s.step(None).unwrap();
                assert!(s.min_z() >= -PENETRATION_TOL);
            }
            let e = s.total_energy();
            assert!(e <= last + 1e-12, "{e} > {last}");
            last = e;
        }
    }

    #[test]
    fn rest_lengths_and_masses_are_constant() {
        let mut s = build_cloth(&small(4, 4)).unwrap();
        let before: Vec<f64> = s.springs.iter().map(|x| x.rest_length).collect();
        let g = GripperHandle {
            particle_index: 0,
            target: Vec3::new(0.0, 0.0, 0.3),
        };
        for _ in 0..200 {
            s.step(Some(&g)).unwrap();
        }
        let after: Vec<f64> = s.springs.iter().map(|x| x.rest_length).collect();
        assert_eq!(before, after);
        assert_eq!(s.num_particles(), 16);
    }

    #[test]
    fn crumple_is_deterministic_and_severity_zero_is_noop() {
        let s = build_cloth(&ClothConfig {
            rows: 12,
            cols: 12,
            ..ClothConfig::default()
        })
        .unwrap();
        let a = crumple(&s, 11, 0.8).unwrap();
        let b = crumple(&s, 11, 0.8).unwrap();
        assert_eq!(a, b);
        let z = crumple(&s, 11, 0.0).unwrap();
        assert_eq!(z.positions, s.positions);
        assert!(crumple(&s, 1, 1.5).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = build_cloth(&small(3, 4)).unwrap();
        s.translate(Vec3::new(0.0, 0.0, 0.1));
        for _ in 0..10 {
            s.step(None).unwrap();
        }
        let mut buf = Vec::new();
        write_snapshot(&s, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("qdp-cloth-snapshot v1 12 "));
        let (p, v) = read_snapshot(buf.as_slice()).unwrap();
        assert_eq!(p, s.positions);
        assert_eq!(v, s.velocities);
        assert!(read_snapshot("nope v1 1 0\n".as_bytes()).is_err());
    }
}
