//! Gaussian-splat scene reconstruction from posed perspective images.
//!
//! Cameras here follow the COLMAP/OpenCV convention: +X right, +Y down, +Z
//! forward, pixel centers at `(x + 0.5, y + 0.5)`. Poses are stored
//! world-from-camera.

mod colmap;
mod export;
mod optimize;
mod render;

pub use colmap::*;
pub use export::*;
pub use optimize::*;
pub use render::*;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::capture_prep::LossMask;
use crate::raster::{RasterError, RgbImage};

#[derive(Debug, Error)]
pub enum SplatError {
    #[error("invalid input: {0}")]
    BadInput(String),
    #[error("pixel ({x}, {y}) outside the {width}x{height} image")]
    PixelOutOfBounds { x: usize, y: usize, width: usize, height: usize },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("optimization diverged at iteration {iteration} (loss {loss})")]
    Diverged {
        iteration: usize,
        loss: f64,
        /// Scene state before the failing step.
        checkpoint: Box<GaussianScene>,
    },
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> SplatError + '_ {
    move |source| SplatError::Io { path: path.display().to_string(), source }
}

/// One anisotropic 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub position: Vector3<f64>,
    /// Per-axis standard deviation, log domain.
    pub log_scale: Vector3<f64>,
    /// `(w, x, y, z)`; normalized on use.
    pub rotation: Quaternion<f64>,
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn isotropic(position: Vector3<f64>, scale: f64, opacity: f64, color: [f64; 3]) -> Self {
        Self {
            position,
            log_scale: Vector3::repeat(scale.ln()),
            rotation: Quaternion::identity(),
            opacity_logit: logit(opacity),
            color,
        }
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scales(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn unit_rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_quaternion(self.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.log_scale.iter().all(|v| v.is_finite())
            && self.rotation.coords.iter().all(|v| v.is_finite())
            && self.opacity_logit.is_finite()
            && self.color.iter().all(|v| v.is_finite())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
    /// Factor applied to world coordinates at ingestion.
    pub scene_scale: f64,
}

impl GaussianScene {
    pub fn new(gaussians: Vec<Gaussian3D>, scene_scale: f64) -> Result<Self, SplatError> {
        let scene = Self { gaussians, scene_scale };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SplatError> {
        if self.gaussians.is_empty() {
            return Err(SplatError::BadInput("scene has no gaussians".into()));
        }
        if let Some(i) = self.gaussians.iter().position(|g| !g.is_finite()) {
            return Err(SplatError::BadInput(format!("gaussian {i} has non-finite parameters")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize) -> Self {
        Self { fx: focal, fy: focal, cx: width as f64 / 2.0, cy: height as f64 / 2.0, width, height }
    }
}

/// Intrinsics plus world-from-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatCamera {
    pub intrinsics: Intrinsics,
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl SplatCamera {
    pub fn new(intrinsics: Intrinsics, rotation: Matrix3<f64>, position: Vector3<f64>) -> Result<Self, SplatError> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) || intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(SplatError::BadInput(format!("intrinsics {intrinsics:?}")));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > 1e-6 || (rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(SplatError::BadInput(format!("rotation is not orthonormal (error {ortho:e})")));
        }
        Ok(Self { intrinsics, rotation, position })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// World-to-camera rotation.
    pub fn view_rotation(&self) -> Matrix3<f64> {
        self.rotation.transpose()
    }

    /// Unit world-space ray through the center of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Vector3<f64> {
        let k = &self.intrinsics;
        let cam = Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0);
        (self.rotation * cam).normalize()
    }

    /// Pixel coordinates and depth of a world point, if in front.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.view_rotation() * (p - self.position);
        if c.z <= 1e-9 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosedImage {
    pub name: String,
    pub image: RgbImage,
    pub camera: SplatCamera,
    /// Pixels excluded from the photometric loss are `false`.
    pub mask: Option<LossMask>,
}

impl PosedImage {
    pub fn new(name: impl Into<String>, image: RgbImage, camera: SplatCamera) -> Result<Self, SplatError> {
        if (image.width(), image.height()) != (camera.width(), camera.height()) {
            return Err(SplatError::BadInput(format!(
                "image {}x{} vs camera {}x{}",
                image.width(),
                image.height(),
                camera.width(),
                camera.height()
            )));
        }
        Ok(Self { name: name.into(), image, camera, mask: None })
    }

    pub fn with_mask(mut self, mask: LossMask) -> Result<Self, SplatError> {
        if (mask.width(), mask.height()) != (self.image.width(), self.image.height()) {
            return Err(SplatError::BadInput(format!(
                "mask {}x{} vs image {}x{}",
                mask.width(),
                mask.height(),
                self.image.width(),
                self.image.height()
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }
}

/// Line through the camera center: unit direction and moment `o x d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlueckerRay {
    pub direction: Vector3<f64>,
    pub moment: Vector3<f64>,
}

impl PlueckerRay {
    pub fn from_origin_direction(origin: &Vector3<f64>, direction: &Vector3<f64>) -> Self {
        let d = direction.normalize();
        Self { direction: d, moment: origin.cross(&d) }
    }
}

pub fn pluecker_from_pixel(camera: &SplatCamera, x: usize, y: usize) -> Result<PlueckerRay, SplatError> {
    if x >= camera.width() || y >= camera.height() {
        return Err(SplatError::PixelOutOfBounds { x, y, width: camera.width(), height: camera.height() });
    }
    Ok(PlueckerRay::from_origin_direction(&camera.position, &camera.pixel_ray(x, y)))
}

/// Channel-major `6 x H x W` ray map: direction xyz planes, then moment xyz.
pub fn pluecker_map(camera: &SplatCamera) -> Vec<f32> {
    let (w, h) = (camera.width(), camera.height());
    let plane = w * h;
    let mut out = vec![0.0f32; 6 * plane];
    for y in 0..h {
        for x in 0..w {
            let r = PlueckerRay::from_origin_direction(&camera.position, &camera.pixel_ray(x, y));
            let i = y * w + x;
            for k in 0..3 {
                out[k * plane + i] = r.direction[k] as f32;
                out[(3 + k) * plane + i] = r.moment[k] as f32;
            }
        }
    }
    out
}

/// Writes [`pluecker_map`] as little-endian f32.
pub fn write_pluecker_map(camera: &SplatCamera, path: &std::path::Path) -> Result<(), SplatError> {
    let bytes: Vec<u8> = pluecker_map(camera).iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// Stratified pick: the sequence is cut into `k` contiguous strata and one
/// index is drawn uniformly from each. Returns indices in path order.
pub fn subsample_indices(n: usize, k: usize, seed: u64) -> Result<Vec<usize>, SplatError> {
    if k > n {
        return Err(SplatError::BadInput(format!("cannot pick {k} of {n} views")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|s| {
            let lo = s * n / k;
            let hi = (s + 1) * n / k;
            if hi - lo <= 1 {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        })
        .collect())
}

pub fn subsample_views(views: &[PosedImage], k: usize, seed: u64) -> Result<Vec<PosedImage>, SplatError> {
    Ok(subsample_indices(views.len(), k, seed)?.into_iter().map(|i| views[i].clone()).collect())
}
