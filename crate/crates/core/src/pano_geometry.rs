//! Equirectangular projection, perspective cameras and crop planning.
//!
//! Conventions used throughout the crate's panoramic side:
//!
//! * world and camera frames are Y-up with +Z forward and +X to the right;
//! * longitude `θ = 2π(u + 0.5)/w − π` grows rightward, latitude
//!   `φ = π/2 − π(v + 0.5)/h` grows upward, so pixel centers sit at integer
//!   `(u, v)` and the image center looks along +Z;
//! * a [`PerspectiveCamera`] rotation maps camera coordinates to world
//!   coordinates.

use std::f64::consts::{PI, TAU};
use std::io::{BufRead, Write};

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RgbImage;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("equirect frame must be 2:1 with even sides >= 2, got {width}x{height}")]
    BadFrameShape { width: usize, height: usize },
    #[error("coordinate ({u}, {v}) outside the {w}x{h} equirect domain")]
    OutOfDomain { u: f64, v: f64, w: usize, h: usize },
    #[error("direction is not unit length (norm {0})")]
    NotUnit(f64),
    #[error("invalid camera: {0}")]
    BadCamera(String),
    #[error("invalid crop plan request: {0}")]
    BadPlan(String),
    #[error("crop plan I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("crop plan line {line}: {msg}")]
    PlanParse { line: usize, msg: String },
}

/// An equirectangular RGB panorama (`width == 2 * height`).
#[derive(Debug, Clone, PartialEq)]
pub struct EquirectFrame {
    image: RgbImage,
}

impl EquirectFrame {
    pub fn new(image: RgbImage) -> Result<Self, GeometryError> {
        let (width, height) = (image.width(), image.height());
        if width != 2 * height || height < 2 || height % 2 != 0 {
            return Err(GeometryError::BadFrameShape { width, height });
        }
        Ok(Self { image })
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }

    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn image(&self) -> &RgbImage {
        &self.image
    }

    pub fn into_image(self) -> RgbImage {
        self.image
    }

    /// Bilinear sample at continuous pixel coordinates, wrapping horizontally
    /// and clamping vertically.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        sample_wrap_clamp(&self.image, u, v)
    }
}

/// Bilinear lookup with pixel centers at integer coordinates, horizontal wrap
/// and vertical clamp.
pub fn sample_wrap_clamp(img: &RgbImage, u: f64, v: f64) -> [f32; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = (u - x0f) as f32;
    let fy = (v - y0f) as f32;
    let x0 = (x0f as i64).rem_euclid(w) as usize;
    let x1 = ((x0f as i64) + 1).rem_euclid(w) as usize;
    let y0 = (y0f as i64).clamp(0, h - 1) as usize;
    let y1 = ((y0f as i64) + 1).clamp(0, h - 1) as usize;
    let a = img.get(x0, y0);
    let b = img.get(x1, y0);
    let c = img.get(x0, y1);
    let d = img.get(x1, y1);
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let top = a[k] + (b[k] - a[k]) * fx;
        let bottom = c[k] + (d[k] - c[k]) * fx;
        out[k] = top + (bottom - top) * fy;
    }
    out
}

/// A unit direction on the sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SphericalDirection(Vector3<f64>);

impl SphericalDirection {
    pub fn new(v: Vector3<f64>) -> Result<Self, GeometryError> {
        let n = v.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Self(v))
    }

    /// Normalizes `v`; panics on a zero vector.
    pub fn normalize(v: Vector3<f64>) -> Self {
        let n = v.norm();
        assert!(n > 0.0, "cannot normalize a zero vector");
        Self(v / n)
    }

    pub fn vector(&self) -> Vector3<f64> {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }
}

/// Direction through continuous equirect pixel `(u, v)`.
///
/// `u` is periodic with period `w`, so any finite value is accepted. `v` must
/// lie in `[-0.5, h - 0.5]`, the full latitude range from zenith to nadir.
pub fn dir_from_equirect(u: f64, v: f64, w: usize, h: usize) -> Result<SphericalDirection, GeometryError> {
    let hf = h as f64;
    if !u.is_finite() || !v.is_finite() || w == 0 || h == 0 || v < -0.5 || v > hf - 0.5 {
        return Err(GeometryError::OutOfDomain { u, v, w, h });
    }
    let wf = w as f64;
    let theta = TAU * (u.rem_euclid(wf) + 0.5) / wf - PI;
    let phi = PI / 2.0 - PI * (v + 0.5) / hf;
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    Ok(SphericalDirection(Vector3::new(cp * st, sp, cp * ct)))
}

/// Continuous pixel coordinates of a direction; `u` is reported in `[0, w)`.
/// At the poles `u` is 0 by convention.
pub fn equirect_from_dir(d: &SphericalDirection, w: usize, h: usize) -> (f64, f64) {
    let (wf, hf) = (w as f64, h as f64);
    let v3 = d.vector();
    let phi = v3.y.clamp(-1.0, 1.0).asin();
    let v = (PI / 2.0 - phi) * hf / PI - 0.5;
    if v3.x == 0.0 && v3.z == 0.0 {
        return (0.0, v);
    }
    let theta = v3.x.atan2(v3.z);
    let u = ((theta + PI) * wf / TAU - 0.5).rem_euclid(wf);
    // rem_euclid can round up to exactly w for tiny negative inputs.
    let u = if u >= wf { 0.0 } else { u };
    (u, v)
}

/// Pinhole camera. Camera frame: +X right, +Y up, +Z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct PerspectiveCamera {
    fov_deg: f64,
    width: usize,
    height: usize,
    rotation: UnitQuaternion<f64>,
    position: Vector3<f64>,
}

impl PerspectiveCamera {
    pub fn new(
        fov_deg: f64,
        width: usize,
        height: usize,
        rotation: UnitQuaternion<f64>,
        position: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(GeometryError::BadCamera(format!("fov {fov_deg} outside (0, 180)")));
        }
        if width == 0 || height == 0 {
            return Err(GeometryError::BadCamera("zero-sized image".into()));
        }
        let qn = rotation.quaternion().norm();
        if (qn - 1.0).abs() > 1e-9 {
            return Err(GeometryError::BadCamera(format!("quaternion norm {qn}")));
        }
        Ok(Self { fov_deg, width, height, rotation, position })
    }

    pub fn fov_deg(&self) -> f64 {
        self.fov_deg
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn position(&self) -> Vector3<f64> {
        self.position
    }

    pub fn with_position(mut self, position: Vector3<f64>) -> Self {
        self.position = position;
        self
    }

    pub fn with_rotation(mut self, rotation: UnitQuaternion<f64>) -> Self {
        self.rotation = rotation;
        self
    }

    /// Focal length in pixels, from the horizontal field of view.
    pub fn focal(&self) -> f64 {
        (self.width as f64 / 2.0) / (self.fov_deg.to_radians() / 2.0).tan()
    }

    /// Unnormalized camera-frame ray through the center of pixel `(x, y)`.
    pub fn camera_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let f = self.focal();
        Vector3::new(
            (x as f64 + 0.5 - self.width as f64 / 2.0) / f,
            -(y as f64 + 0.5 - self.height as f64 / 2.0) / f,
            1.0,
        )
    }

    /// Unit world-frame ray through the center of pixel `(x, y)`.
    pub fn world_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        (self.rotation * self.camera_ray(x, y)).normalize()
    }
}

/// Rotation that yaws right by `yaw_deg` about +Y after pitching up by
/// `pitch_deg`.
pub fn yaw_pitch_rotation(yaw_deg: f64, pitch_deg: f64) -> UnitQuaternion<f64> {
    let yaw = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw_deg.to_radians());
    let pitch = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), -pitch_deg.to_radians());
    yaw * pitch
}

/// Samples a perspective view out of an equirect frame. The camera position
/// is ignored: a single panorama carries no parallax.
pub fn render_crop(frame: &EquirectFrame, cam: &PerspectiveCamera) -> RgbImage {
    let (fw, fh) = (frame.width(), frame.height());
    let width = cam.width();
    let rows: Vec<Vec<f32>> = (0..cam.height())
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width * 3);
            for x in 0..width {
                let d = SphericalDirection(cam.world_ray(x, y));
                let (u, v) = equirect_from_dir(&d, fw, fh);
                row.extend_from_slice(&frame.sample(u, v));
            }
            row
        })
        .collect();
    RgbImage::from_vec(width, cam.height(), rows.concat()).expect("row sizes match")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropEntry {
    pub frame_index: usize,
    pub camera: PerspectiveCamera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropPlan {
    pub entries: Vec<CropEntry>,
    pub crops_per_frame: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    pub crops_per_frame: usize,
    pub fov_deg: f64,
    pub resolution: usize,
    /// Inclusive pitch interval in degrees.
    pub pitch_range_deg: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self { crops_per_frame: 3, fov_deg: 120.0, resolution: 512, pitch_range_deg: (-20.0, 20.0) }
    }
}

/// Random crop orientations: yaw uniform in `[0, 360)`, pitch uniform in the
/// configured range, zero roll.
pub fn make_crop_plan(n_frames: usize, params: &CropParams, seed: u64) -> Result<CropPlan, GeometryError> {
    if n_frames == 0 || params.crops_per_frame == 0 {
        return Err(GeometryError::BadPlan("need at least one frame and one crop per frame".into()));
    }
    let (lo, hi) = params.pitch_range_deg;
    if !(lo <= hi && lo > -90.0 && hi < 90.0) {
        return Err(GeometryError::BadPlan(format!("pitch range ({lo}, {hi})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_frames * params.crops_per_frame);
    for frame_index in 0..n_frames {
        for _ in 0..params.crops_per_frame {
            let yaw = rng.random_range(0.0..360.0);
            let pitch = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let camera = PerspectiveCamera::new(
                params.fov_deg,
                params.resolution,
                params.resolution,
                yaw_pitch_rotation(yaw, pitch),
                Vector3::zeros(),
            )?;
            entries.push(CropEntry { frame_index, camera });
        }
    }
    Ok(CropPlan { entries, crops_per_frame: params.crops_per_frame, rng_seed: seed })
}

/// One line of the JSON-lines crop plan file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub frame_index: usize,
    /// Camera-to-panorama rotation as `[w, x, y, z]`.
    pub quaternion: [f64; 4],
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl CropPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn records(&self) -> Vec<CropRecord> {
        self.entries
            .iter()
            .map(|e| {
                let q = e.camera.rotation().quaternion();
                CropRecord {
                    frame_index: e.frame_index,
                    quaternion: [q.w, q.i, q.j, q.k],
                    fov_deg: e.camera.fov_deg(),
                    width: e.camera.width(),
                    height: e.camera.height(),
                    seed: self.rng_seed,
                }
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), GeometryError> {
        for rec in self.records() {
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, GeometryError> {
        let mut entries = Vec::new();
        let mut seed = 0;
        let mut per_frame: std::collections::BTreeMap<usize, usize> = Default::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CropRecord = serde_json::from_str(&line)
                .map_err(|e| GeometryError::PlanParse { line: i + 1, msg: e.to_string() })?;
            let [w, x, y, z] = rec.quaternion;
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
            let camera = PerspectiveCamera::new(rec.fov_deg, rec.width, rec.height, q, Vector3::zeros())
                .map_err(|e| GeometryError::PlanParse { line: i + 1, msg: e.to_string() })?;
            seed = rec.seed;
            *per_frame.entry(rec.frame_index).or_default() += 1;
            entries.push(CropEntry { frame_index: rec.frame_index, camera });
        }
        let crops_per_frame = per_frame.values().copied().next().unwrap_or(0);
        if per_frame.values().any(|&c| c != crops_per_frame) {
            return Err(GeometryError::PlanParse { line: 0, msg: "uneven crops per frame".into() });
        }
        Ok(Self { entries, crops_per_frame, rng_seed: seed })
    }
}
