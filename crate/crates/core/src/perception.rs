//! Top-view grayscale observations and the pixel-space operations built on
//! them: coverage, masks, pick snapping, pick-centred crops and rotations.
//!
//! Pixel `(row, col)` samples the world point
//! `origin + ((col - D/2) * s, (row - D/2) * s)` with `s = extent / D`, so the
//! image centre pixel `(D/2, D/2)` sits exactly on the camera origin.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{ClothState, Vec3};

/// Intensity threshold separating cloth from background.
pub const MASK_THRESHOLD: f32 = 0.5;
/// Snap radius at the reference resolution of 128 pixels.
pub const SNAP_RADIUS_AT_128: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("pixel ({row}, {col}) outside {size}x{size} image")]
    OutOfBounds { row: usize, col: usize, size: usize },
    #[error("no cloth pixel within {radius} px of ({row}, {col})")]
    OffCloth { row: usize, col: usize, radius: usize },
    #[error("invalid crop size {0}")]
    InvalidCrop(usize),
    #[error("png: {0}")]
    Png(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn index(&self, size: usize) -> usize {
        self.row * size + self.col
    }

    pub fn dist2(&self, other: Pixel) -> usize {
        self.row.abs_diff(other.row).pow(2) + self.col.abs_diff(other.col).pow(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Side of the square viewport (m).
    pub extent: f64,
    /// Pixels per side.
    pub resolution: usize,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            extent: 0.8,
            resolution: 64,
            origin_x: 0.0,
            origin_y: 0.0,
        }
    }
}

impl CameraModel {
    pub fn new(extent: f64, resolution: usize) -> Self {
        Self {
            extent,
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(PerceptionError::InvalidCamera("extent must be > 0".into()));
        }
        if self.resolution < 16 || self.resolution % 2 != 0 {
            return Err(PerceptionError::InvalidCamera("resolution must be even and >= 16".into()));
        }
        Ok(())
    }

    /// Metres per pixel.
    pub fn pixel_size(&self) -> f64 {
        self.extent / self.resolution as f64
    }

    fn sample_point(&self, row: usize, col: usize) -> (f64, f64) {
        let half = (self.resolution / 2) as f64;
        let s = self.pixel_size();
        (
            self.origin_x + (col as f64 - half) * s,
            self.origin_y + (row as f64 - half) * s,
        )
    }

    pub fn pixel_to_world(&self, p: Pixel) -> Result<Vec3, PerceptionError> {
        let d = self.resolution;
        if p.row >= d || p.col >= d {
            return Err(PerceptionError::OutOfBounds {
                row: p.row,
                col: p.col,
                size: d,
            });
        }
        let (x, y) = self.sample_point(p.row, p.col);
        Ok(Vec3::new(x, y, 0.0))
    }

    /// Nearest pixel to a world point; `None` outside the viewport.
    pub fn world_to_pixel(&self, w: Vec3) -> Option<Pixel> {
        let half = (self.resolution / 2) as f64;
        let s = self.pixel_size();
        let col = ((w.x - self.origin_x) / s + half).round();
        let row = ((w.y - self.origin_y) / s + half).round();
        let d = self.resolution as f64;
        if col < 0.0 || row < 0.0 || col >= d || row >= d {
            return None;
        }
        Some(Pixel::new(row as usize, col as usize))
    }

    /// Pixel area of a flat `rows x cols` grid with the given spacing.
    pub fn flat_area_px(&self, rows: usize, cols: usize, spacing: f64) -> f64 {
        let px = spacing / self.pixel_size();
        (rows.saturating_sub(1) * cols.saturating_sub(1)) as f64 * px * px
    }

    /// Snap radius scaled from 10 px at D = 128.
    pub fn snap_radius(&self) -> usize {
        (SNAP_RADIUS_AT_128 * self.resolution as f64 / 128.0).round() as usize
    }

    /// Pick-centred crop size.
    pub fn crop_size(&self) -> usize {
        self.resolution / 2
    }
}

/// D x D grayscale image in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub image: Vec<f32>,
    pub size: usize,
    /// Rotation applied to the rendered view (degrees).
    pub angle: f64,
    pub camera: CameraModel,
}

impl Observation {
    pub fn blank(camera: CameraModel) -> Self {
        let d = camera.resolution;
        Self {
            image: vec![0.0; d * d],
            size: d,
            angle: 0.0,
            camera,
        }
    }

    pub fn at(&self, p: Pixel) -> f32 {
        self.image[p.index(self.size)]
    }

    pub fn covered_pixels(&self) -> usize {
        self.image.iter().filter(|&&v| v > MASK_THRESHOLD).count()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn write_png(&self, path: &Path) -> Result<(), PerceptionError> {
        write_gray_png(path, self.size, &self.to_u8())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub size: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, p: Pixel) -> bool {
        self.data[p.index(self.size)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn pixels(&self) -> impl Iterator<Item = Pixel> + '_ {
        let d = self.size;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| Pixel::new(i / d, i % d))
    }

    pub fn write_png(&self, path: &Path) -> Result<(), PerceptionError> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_gray_png(path, self.size, &bytes)
    }
}

fn write_gray_png(path: &Path, size: usize, bytes: &[u8]) -> Result<(), PerceptionError> {
    let err = |e: &dyn std::fmt::Display| PerceptionError::Png(e.to_string());
    let file = std::fs::File::create(path).map_err(|e| err(&e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| err(&e))?;
    writer.write_image_data(bytes).map_err(|e| err(&e))?;
    writer.finish().map_err(|e| err(&e))?;
    Ok(())
}

pub fn render_topview(state: &ClothState, camera: &CameraModel) -> Observation {
    render_topview_with(state, camera, 1.0)
}

/// Orthographic silhouette: every mesh triangle projected onto the ground is
/// filled with `intensity`; particles that belong to no triangle are drawn as
/// disks of radius `ceil(0.75 * spacing_px)` (at least one pixel).
pub fn render_topview_with(state: &ClothState, camera: &CameraModel, intensity: f32) -> Observation {
    let mut obs = Observation::blank(*camera);
    let d = camera.resolution;
    let s = camera.pixel_size();
    let half = (d / 2) as f64;
    // Continuous pixel coordinates: col = x / s + D/2, row = y / s + D/2.
    let to_px = |p: &Vec3| ((p.y - camera.origin_y) / s + half, (p.x - camera.origin_x) / s + half);

    let tris = state.triangles();
    let mut in_face = vec![false; state.num_particles()];
    for t in &tris {
        for &i in t {
            in_face[i] = true;
        }
        let [a, b, c] = [to_px(&state.positions[t[0]]), to_px(&state.positions[t[1]]), to_px(&state.positions[t[2]])];
        fill_triangle(&mut obs.image, d, a, b, c, intensity);
    }

    let radius = if state.spacing > 0.0 {
        (0.75 * state.spacing / s).ceil().max(1.0)
    } else {
        1.0
    };
    for (p, _) in state.positions.iter().zip(&in_face).filter(|(_, &f)| !f) {
        let (pr, pc) = to_px(p);
        let r0 = (pr - radius).floor().max(0.0) as usize;
        let r1 = (pr + radius).ceil().min(d as f64 - 1.0);
        let c0 = (pc - radius).floor().max(0.0) as usize;
        let c1 = (pc + radius).ceil().min(d as f64 - 1.0);
        if r1 < 0.0 || c1 < 0.0 {
            continue;
        }
        for row in r0..=r1 as usize {
            for col in c0..=c1 as usize {
                let (dr, dc) = (row as f64 - pr, col as f64 - pc);
                if dr * dr + dc * dc <= radius * radius {
                    obs.image[row * d + col] = intensity;
                }
            }
        }
    }
    obs
}

/// Fill the pixels whose sample point lies inside triangle `abc` (given as
/// continuous `(row, col)` coordinates), edges inclusive.
fn fill_triangle(img: &mut [f32], d: usize, a: (f64, f64), b: (f64, f64), c: (f64, f64), value: f32) {
    let area = (b.1 - a.1) * (c.0 - a.0) - (b.0 - a.0) * (c.1 - a.1);
    if area.abs() < 1e-12 {
        return;
    }
    let rmin = a.0.min(b.0).min(c.0).ceil().max(0.0);
    let rmax = a.0.max(b.0).max(c.0).floor().min(d as f64 - 1.0);
    let cmin = a.1.min(b.1).min(c.1).ceil().max(0.0);
    let cmax = a.1.max(b.1).max(c.1).floor().min(d as f64 - 1.0);
    if rmin > rmax || cmin > cmax {
        return;
    }
    let edge = |p: (f64, f64), q: (f64, f64), r: f64, cc: f64| (q.1 - p.1) * (r - p.0) - (q.0 - p.0) * (cc - p.1);
    let sign = area.signum();
    for row in rmin as usize..=rmax as usize {
        let r = row as f64;
        for col in cmin as usize..=cmax as usize {
            let cc = col as f64;
            let w0 = sign * edge(b, c, r, cc);
            let w1 = sign * edge(c, a, r, cc);
            let w2 = sign * edge(a, b, r, cc);
            if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                img[row * d + col] = value;
            }
        }
    }
}

/// Covered pixels over `c_max`, clamped to `[0, 1]`.
pub fn coverage(obs: &Observation, c_max: f64) -> f64 {
    if !(c_max > 0.0) {
        return 0.0;
    }
    (obs.covered_pixels() as f64 / c_max).clamp(0.0, 1.0)
}

pub fn cloth_mask(obs: &Observation) -> Mask {
    Mask {
        size: obs.size,
        data: obs.image.iter().map(|&v| v > MASK_THRESHOLD).collect(),
    }
}

/// Keep an on-cloth pick, otherwise move it to the nearest cloth pixel within
/// `radius_px` (ties broken in row-major order).
pub fn snap_to_cloth(pick: Pixel, mask: &Mask, radius_px: usize) -> Result<Pixel, PerceptionError> {
    let d = mask.size;
    if pick.row < d && pick.col < d && mask.get(pick) {
        return Ok(pick);
    }
    let r2 = radius_px * radius_px;
    let mut best: Option<(usize, Pixel)> = None;
    let row_lo = pick.row.saturating_sub(radius_px);
    let col_lo = pick.col.saturating_sub(radius_px);
    for row in row_lo..(pick.row + radius_px + 1).min(d) {
        for col in col_lo..(pick.col + radius_px + 1).min(d) {
            let p = Pixel::new(row, col);
            let dist = p.dist2(pick);
            if dist <= r2 && mask.get(p) && best.map_or(true, |(b, _)| dist < b) {
                best = Some((dist, p));
            }
        }
    }
    best.map(|(_, p)| p).ok_or(PerceptionError::OffCloth {
        row: pick.row,
        col: pick.col,
        radius: radius_px,
    })
}

/// `crop x crop` window centred on `pick`, zero-padded outside the image.
pub fn pick_crop(obs: &Observation, pick: Pixel, crop: usize) -> Result<Vec<f32>, PerceptionError> {
    if crop == 0 || crop % 2 != 0 || crop > obs.size {
        return Err(PerceptionError::InvalidCrop(crop));
    }
    let d = obs.size as isize;
    let half = (crop / 2) as isize;
    let mut out = vec![0.0; crop * crop];
    for i in 0..crop {
        let r = pick.row as isize - half + i as isize;
        if r < 0 || r >= d {
            continue;
        }
        for j in 0..crop {
            let c = pick.col as isize - half + j as isize;
            if c >= 0 && c < d {
                out[i * crop + j] = obs.image[(r * d + c) as usize];
            }
        }
    }
    Ok(out)
}

fn rotate_coords(row: f64, col: f64, angle_deg: f64, size: usize) -> (f64, f64) {
    let centre = (size as f64 - 1.0) / 2.0;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let (y, x) = (row - centre, col - centre);
    (centre + s * x + c * y, centre + c * x - s * y)
}

/// Where pixel `p` lands when the image is rotated by `angle` degrees about
/// its centre; clamped into the image.
pub fn rotate_pixel(p: Pixel, angle: f64, size: usize) -> Pixel {
    let (r, c) = rotate_coords(p.row as f64, p.col as f64, angle, size);
    let clamp = |v: f64| v.round().clamp(0.0, size as f64 - 1.0) as usize;
    Pixel::new(clamp(r), clamp(c))
}

pub fn unrotate_pixel(p: Pixel, angle: f64, size: usize) -> Pixel {
    rotate_pixel(p, -angle, size)
}

/// Rotate about the image centre with nearest-neighbour resampling and zero
/// fill. Angles compose with any rotation already applied.
pub fn rotate_observation(obs: &Observation, angle: f64) -> Observation {
    let d = obs.size;
    let mut out = vec![0.0; d * d];
    for row in 0..d {
        for col in 0..d {
            let (r, c) = rotate_coords(row as f64, col as f64, -angle, d);
            let (r, c) = (r.round(), c.round());
            if r >= 0.0 && c >= 0.0 && r < d as f64 && c < d as f64 {
                out[row * d + col] = obs.image[r as usize * d + c as usize];
            }
        }
    }
    Observation {
        image: out,
        size: d,
        angle: obs.angle + angle,
        camera: obs.camera,
    }
}

/// Write an observation as an 8-bit PNG into any writer.
pub fn encode_png<W: Write>(obs: &Observation, out: W) -> Result<(), PerceptionError> {
    let err = |e: &dyn std::fmt::Display| PerceptionError::Png(e.to_string());
    let mut enc = png::Encoder::new(out, obs.size as u32, obs.size as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| err(&e))?;
    writer.write_image_data(&obs.to_u8()).map_err(|e| err(&e))?;
    Ok(())
}
