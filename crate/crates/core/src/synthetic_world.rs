//! Procedural ground-truth captures: a checker-textured room with a few
//! primitives, ray-cast into equirect frames along a smooth walking path.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture_prep::LossMask;
use crate::pano_geometry::{dir_from_equirect, EquirectFrame, PerspectiveCamera};
use crate::raster::RgbImage;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("camera position {0:?} is not strictly inside the room")]
    OutsideRoom([f64; 3]),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("JSON error in {path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

/// Two-color checker texture on a room face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checker {
    pub cell: f64,
    pub colors: [[f32; 3]; 2],
}

impl Checker {
    fn color(&self, a: f64, b: f64) -> [f32; 3] {
        let i = (a / self.cell).floor() as i64 + (b / self.cell).floor() as i64;
        self.colors[i.rem_euclid(2) as usize]
    }

    /// Distance from in-plane coordinates to the nearest cell boundary.
    fn edge_distance(&self, a: f64, b: f64) -> f64 {
        let da = (a / self.cell - (a / self.cell).round()).abs() * self.cell;
        let db = (b / self.cell - (b / self.cell).round()).abs() * self.cell;
        da.min(db)
    }
}

/// Axis-aligned room. Faces are ordered `-X, +X, -Y (floor), +Y (ceiling),
/// -Z, +Z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub faces: [Checker; 6],
}

impl Room {
    pub fn contains_strictly(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere { center: [f64; 3], radius: f64, albedo: [f32; 3] },
    Cuboid { center: [f64; 3], half_size: [f64; 3], albedo: [f32; 3] },
}

/// Horizontal rectangle the walker stays inside, at a fixed eye height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkArea {
    pub min_xz: [f64; 2],
    pub max_xz: [f64; 2],
    pub eye_height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: Room,
    pub primitives: Vec<Primitive>,
    pub ambient: f32,
    /// Direction towards the light; normalized on use.
    pub light_dir: [f64; 3],
    pub walk_area: WalkArea,
    pub caption: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vector3<f64>,
    /// Geometric normal facing the ray origin.
    pub normal: Vector3<f64>,
    pub albedo: [f32; 3],
    /// Distance to the nearest texture discontinuity on the hit surface
    /// (infinite for untextured primitives).
    pub edge_distance: f64,
    /// Room face index `0..6`, or `6 + i` for primitive `i`.
    pub surface: usize,
}

fn checker_pair(a: [f32; 3], b: [f32; 3]) -> Checker {
    Checker { cell: 0.5, colors: [a, b] }
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            room: Room {
                min: [-2.0, 0.0, -2.0],
                max: [2.0, 2.8, 2.0],
                faces: [
                    checker_pair([0.72, 0.36, 0.30], [0.93, 0.74, 0.62]),
                    checker_pair([0.30, 0.46, 0.72], [0.68, 0.80, 0.93]),
                    checker_pair([0.52, 0.40, 0.30], [0.84, 0.72, 0.56]),
                    checker_pair([0.92, 0.92, 0.88], [0.70, 0.72, 0.76]),
                    checker_pair([0.34, 0.60, 0.34], [0.76, 0.90, 0.66]),
                    checker_pair([0.86, 0.74, 0.30], [0.96, 0.94, 0.74]),
                ],
            },
            primitives: vec![
                Primitive::Sphere { center: [1.35, 0.5, 1.3], radius: 0.45, albedo: [0.85, 0.25, 0.2] },
                Primitive::Sphere { center: [-1.45, 1.9, -1.35], radius: 0.35, albedo: [0.25, 0.35, 0.9] },
                Primitive::Cuboid {
                    center: [-1.4, 0.4, 1.4],
                    half_size: [0.35, 0.4, 0.35],
                    albedo: [0.2, 0.7, 0.65],
                },
                Primitive::Cuboid {
                    center: [1.45, 0.3, -1.45],
                    half_size: [0.3, 0.3, 0.3],
                    albedo: [0.9, 0.6, 0.15],
                },
            ],
            ambient: 0.55,
            light_dir: [0.35, 0.8, 0.5],
            walk_area: WalkArea { min_xz: [-0.9, -0.9], max_xz: [0.9, 0.9], eye_height: 1.5 },
            caption: "a bright checkered room with two balls and two boxes".into(),
        }
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

const T_MIN: f64 = 1e-9;

impl SceneSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorldError> {
        write_json(path.as_ref(), self)
    }

    /// Nearest surface hit along `origin + t * dir` (`dir` need not be unit).
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let mut best = self.cast_room(origin, dir);
        for (i, prim) in self.primitives.iter().enumerate() {
            if let Some(mut h) = cast_primitive(prim, origin, dir) {
                h.surface = 6 + i;
                if best.as_ref().is_none_or(|b| h.t < b.t) {
                    best = Some(h);
                }
            }
        }
        best
    }

    fn cast_room(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        let room = &self.room;
        let mut best: Option<(f64, usize)> = None;
        for axis in 0..3 {
            if d[axis] == 0.0 {
                continue;
            }
            let (bound, face) =
                if d[axis] > 0.0 { (room.max[axis], 2 * axis + 1) } else { (room.min[axis], 2 * axis) };
            let t = (bound - o[axis]) / d[axis];
            if t > T_MIN && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, face));
            }
        }
        let (t, face) = best?;
        let p = o + d * t;
        let axis = face / 2;
        let mut normal = Vector3::zeros();
        normal[axis] = if face % 2 == 1 { -1.0 } else { 1.0 };
        let (a, b) = match axis {
            0 => (p.y, p.z),
            1 => (p.x, p.z),
            _ => (p.x, p.y),
        };
        let tex = &room.faces[face];
        Some(Hit {
            t,
            point: p,
            normal,
            albedo: tex.color(a, b),
            edge_distance: tex.edge_distance(a, b),
            surface: face,
        })
    }

    pub fn light(&self) -> Vector3<f64> {
        v3(self.light_dir).normalize()
    }

    /// View-independent Lambert shading of a hit.
    pub fn shade(&self, hit: &Hit) -> [f32; 3] {
        let lambert = hit.normal.dot(&self.light()).max(0.0) as f32;
        let k = self.ambient + (1.0 - self.ambient) * lambert;
        [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
    }

    /// Color seen along a ray, black if nothing is hit.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> [f32; 3] {
        self.cast(origin, dir).map(|h| self.shade(&h)).unwrap_or([0.0; 3])
    }

    fn check_pose(&self, pose: &Pose) -> Result<(), WorldError> {
        let p = pose.position_vec();
        if !self.room.contains_strictly(&p) {
            return Err(WorldError::OutsideRoom(pose.position));
        }
        Ok(())
    }
}

fn cast_primitive(prim: &Primitive, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
    match prim {
        Primitive::Sphere { center, radius, albedo } => {
            let c = v3(*center);
            let oc = o - c;
            let a = d.dot(d);
            let b = oc.dot(d);
            let cc = oc.dot(&oc) - radius * radius;
            let disc = b * b - a * cc;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > T_MIN)?;
            let p = o + d * t;
            let mut n = (p - c) / *radius;
            if n.dot(d) > 0.0 {
                n = -n;
            }
            Some(Hit { t, point: p, normal: n, albedo: *albedo, edge_distance: f64::INFINITY, surface: 0 })
        }
        Primitive::Cuboid { center, half_size, albedo } => {
            let c = v3(*center);
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0;
            let mut far_axis = 0;
            for k in 0..3 {
                let lo = c[k] - half_size[k];
                let hi = c[k] + half_size[k];
                if d[k] == 0.0 {
                    if o[k] < lo || o[k] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - o[k]) / d[k], (hi - o[k]) / d[k]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = k;
                }
                if t1 < t_far {
                    t_far = t1;
                    far_axis = k;
                }
            }
            if t_near > t_far {
                return None;
            }
            let (t, axis) = if t_near > T_MIN {
                (t_near, near_axis)
            } else if t_far > T_MIN {
                (t_far, far_axis)
            } else {
                return None;
            };
            let p = o + d * t;
            let mut n = Vector3::zeros();
            n[axis] = if p[axis] > c[axis] { 1.0 } else { -1.0 };
            if n.dot(d) > 0.0 {
                n = -n;
            }
            Some(Hit { t, point: p, normal: n, albedo: *albedo, edge_distance: f64::INFINITY, surface: 0 })
        }
    }
}

/// Camera position plus heading (degrees, rotation about +Y).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub position: [f64; 3],
    pub yaw_deg: f64,
}

impl Pose {
    pub fn position_vec(&self) -> Vector3<f64> {
        v3(self.position)
    }

    /// Rotation from the panorama's local frame to the world frame.
    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), self.yaw_deg.to_radians())
    }

    /// World camera of a crop taken with panorama-relative `rotation`.
    pub fn crop_camera(&self, local: &PerspectiveCamera) -> PerspectiveCamera {
        local.clone().with_rotation(self.rotation() * local.rotation()).with_position(self.position_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkPath {
    pub poses: Vec<Pose>,
    pub fps: f64,
}

impl WalkPath {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, WorldError> {
        read_json(path.as_ref())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WorldError> {
        write_json(path.as_ref(), self)
    }

    pub fn max_step(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position_vec() - w[0].position_vec()).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkParams {
    pub max_step: f64,
    pub fps: f64,
    /// Frames of heading smoothing (moving-average half width).
    pub yaw_smoothing: usize,
}

impl Default for WalkParams {
    fn default() -> Self {
        Self { max_step: 0.03, fps: 12.0, yaw_smoothing: 12 }
    }
}

fn catmull_rom(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], p3: [f64; 2], t: f64) -> [f64; 2] {
    let t2 = t * t;
    let t3 = t2 * t;
    let f = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b + (c - a) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t2 + (3.0 * b - a - 3.0 * c + d) * t3)
    };
    [f(p0[0], p1[0], p2[0], p3[0]), f(p0[1], p1[1], p2[1], p3[1])]
}

/// Smooth random walk through the scene's walk area.
///
/// Random waypoints are joined by a Catmull-Rom spline and resampled at a
/// constant arc-length step no larger than `0.9 * max_step`; positions are
/// finally clamped into the walk area (clamping never lengthens a step).
pub fn make_walk(scene: &SceneSpec, n_frames: usize, seed: u64, params: &WalkParams) -> Result<WalkPath, WorldError> {
    if n_frames < 2 {
        return Err(WorldError::BadParam("a walk needs at least two frames".into()));
    }
    let area = &scene.walk_area;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_way = 4 + n_frames / 32;
    let shrink = 0.85;
    let mid = [(area.min_xz[0] + area.max_xz[0]) / 2.0, (area.min_xz[1] + area.max_xz[1]) / 2.0];
    let half = [(area.max_xz[0] - area.min_xz[0]) / 2.0, (area.max_xz[1] - area.min_xz[1]) / 2.0];
    let way: Vec<[f64; 2]> = (0..n_way)
        .map(|_| {
            [
                mid[0] + half[0] * shrink * rng.random_range(-1.0..1.0),
                mid[1] + half[1] * shrink * rng.random_range(-1.0..1.0),
            ]
        })
        .collect();

    // Dense polyline along the spline.
    let per_seg = 400;
    let mut dense = Vec::with_capacity((n_way - 1) * per_seg + 1);
    for s in 0..n_way - 1 {
        let p0 = way[s.saturating_sub(1)];
        let p3 = way[(s + 2).min(n_way - 1)];
        for i in 0..per_seg {
            dense.push(catmull_rom(p0, way[s], way[s + 1], p3, i as f64 / per_seg as f64));
        }
    }
    dense.push(way[n_way - 1]);
    let mut arc = vec![0.0; dense.len()];
    for i in 1..dense.len() {
        arc[i] = arc[i - 1] + (dense[i][0] - dense[i - 1][0]).hypot(dense[i][1] - dense[i - 1][1]);
    }
    let total = *arc.last().unwrap();
    let step = (0.9 * params.max_step).min(total / (n_frames - 1) as f64);

    let mut xz = Vec::with_capacity(n_frames);
    let mut j = 0;
    for k in 0..n_frames {
        let s = step * k as f64;
        while j + 1 < arc.len() - 1 && arc[j + 1] < s {
            j += 1;
        }
        let seg = arc[j + 1] - arc[j];
        let f = if seg > 0.0 { ((s - arc[j]) / seg).clamp(0.0, 1.0) } else { 0.0 };
        let p = [
            dense[j][0] + f * (dense[j + 1][0] - dense[j][0]),
            dense[j][1] + f * (dense[j + 1][1] - dense[j][1]),
        ];
        xz.push([p[0].clamp(area.min_xz[0], area.max_xz[0]), p[1].clamp(area.min_xz[1], area.max_xz[1])]);
    }

    // Heading follows the walking direction, unwrapped then low-passed.
    let mut heading = Vec::with_capacity(n_frames);
    let mut prev = 0.0f64;
    for k in 0..n_frames {
        let (a, b) = if k + 1 < n_frames { (xz[k], xz[k + 1]) } else { (xz[k - 1], xz[k]) };
        let (dx, dz) = (b[0] - a[0], b[1] - a[1]);
        let mut h = if dx == 0.0 && dz == 0.0 { prev } else { dx.atan2(dz) };
        if k > 0 {
            while h - prev > std::f64::consts::PI {
                h -= TAU;
            }
            while h - prev < -std::f64::consts::PI {
                h += TAU;
            }
        }
        heading.push(h);
        prev = h;
    }
    let r = params.yaw_smoothing as isize;
    let poses = (0..n_frames)
        .map(|k| {
            let lo = (k as isize - r).max(0) as usize;
            let hi = ((k as isize + r) as usize).min(n_frames - 1);
            let yaw = heading[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            Pose { position: [xz[k][0], area.eye_height, xz[k][1]], yaw_deg: yaw.to_degrees() }
        })
        .collect();
    Ok(WalkPath { poses, fps: params.fps })
}

/// Ray-casts an equirect frame of height `h` (width `2h`) from `pose`.
pub fn render_equirect(scene: &SceneSpec, pose: &Pose, h: usize) -> Result<EquirectFrame, WorldError> {
    if h < 2 || h % 2 != 0 {
        return Err(WorldError::BadParam(format!("equirect height {h} must be even and >= 2")));
    }
    scene.check_pose(pose)?;
    let w = 2 * h;
    let origin = pose.position_vec();
    let rot = pose.rotation();
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w * 3);
            for x in 0..w {
                let d = dir_from_equirect(x as f64, y as f64, w, h).expect("pixel center in domain");
                row.extend_from_slice(&scene.trace(&origin, &(rot * d.vector())));
            }
            row
        })
        .collect();
    let img = RgbImage::from_vec(w, h, rows.concat()).expect("sized");
    Ok(EquirectFrame::new(img).expect("2:1 by construction"))
}

/// Direct ray-cast of a perspective camera (world rotation and position).
pub fn render_perspective(scene: &SceneSpec, cam: &PerspectiveCamera) -> RgbImage {
    let origin = cam.position();
    let width = cam.width();
    let rows: Vec<Vec<f32>> = (0..cam.height())
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(width * 3);
            for x in 0..width {
                row.extend_from_slice(&scene.trace(&origin, &cam.world_ray(x, y)));
            }
            row
        })
        .collect();
    RgbImage::from_vec(width, cam.height(), rows.concat()).expect("sized")
}

/// Ellipsoid carried with the camera, in the panorama's local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub offset: [f64; 3],
    pub radii: [f64; 3],
    pub color: [f32; 3],
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self { offset: [0.0, -0.6, -0.22], radii: [0.2, 0.38, 0.16], color: [0.18, 0.16, 0.2] }
    }
}

impl BlobSpec {
    /// Ray parameter of the first hit of a ray from the camera center along
    /// local direction `d`.
    fn hit_t(&self, d: &Vector3<f64>) -> Option<f64> {
        if self.radii.iter().any(|&r| r <= 0.0) {
            return None;
        }
        let r = v3(self.radii);
        let o = -v3(self.offset).component_div(&r);
        let dd = d.component_div(&r);
        let a = dd.dot(&dd);
        let b = o.dot(&dd);
        let c = o.dot(&o) - 1.0;
        let disc = b * b - a * c;
        if disc < 0.0 {
            return None;
        }
        let sq = disc.sqrt();
        [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > T_MIN)
    }
}

/// Paints the photographer ellipsoid into a frame rendered at `pose` and
/// returns the exclusion mask (0 exactly where painted).
pub fn composite_photographer(
    frame: &EquirectFrame,
    pose: &Pose,
    blob: &BlobSpec,
    scene: &SceneSpec,
) -> (EquirectFrame, LossMask) {
    let (w, h) = (frame.width(), frame.height());
    let origin = pose.position_vec();
    let rot = pose.rotation();
    let mut img = frame.image().clone();
    let mut mask = LossMask::ones(w, h);
    for y in 0..h {
        for x in 0..w {
            let d = dir_from_equirect(x as f64, y as f64, w, h).expect("pixel center").vector();
            let Some(t) = blob.hit_t(&d) else { continue };
            let scene_t = scene.cast(&origin, &(rot * d)).map(|h| h.t).unwrap_or(f64::INFINITY);
            if t < scene_t {
                img.set(x, y, blob.color);
                mask.set(x, y, false);
            }
        }
    }
    (EquirectFrame::new(img).expect("same shape"), mask)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, WorldError> {
    let text = fs::read_to_string(path).map_err(|source| WorldError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| WorldError::Json { path: path.display().to_string(), source })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), WorldError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|source| WorldError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pano_geometry::{equirect_from_dir, yaw_pitch_rotation, SphericalDirection};

    fn empty_room() -> SceneSpec {
        SceneSpec { primitives: vec![], ..SceneSpec::default() }
    }

    fn center_pose() -> Pose {
        Pose { position: [0.0, 1.4, 0.0], yaw_deg: 0.0 }
    }

    #[test]
    fn forward_wall_matches_analytic_hit() {
        let scene = empty_room();
        let h = 64;
        let frame = render_equirect(&scene, &center_pose(), h).unwrap();
        // Center pixel ray is exactly +Z: it meets z = 2 at (0, 1.4, 2).
        let (a, b) = (0.0f64, 1.4f64);
        let tex = &scene.room.faces[5];
        let i = (a / tex.cell).floor() as i64 + (b / tex.cell).floor() as i64;
        let albedo = tex.colors[i.rem_euclid(2) as usize];
        let lambert = (-scene.light().z).max(0.0) as f32;
        let k = scene.ambient + (1.0 - scene.ambient) * lambert;
        let expected = [albedo[0] * k, albedo[1] * k, albedo[2] * k];
        assert_eq!(frame.image().get(h, h / 2), expected);
    }

    #[test]
    fn renders_are_deterministic() {
        let scene = SceneSpec::default();
        let a = render_equirect(&scene, &center_pose(), 32).unwrap();
        let b = render_equirect(&scene, &center_pose(), 32).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sphere_occludes_wall() {
        let mut scene = empty_room();
        let wall = render_equirect(&scene, &center_pose(), 64).unwrap().image().get(64, 32);
        scene.primitives.push(Primitive::Sphere { center: [0.0, 1.4, 1.0], radius: 0.3, albedo: [1.0, 0.0, 0.0] });
        let occluded = render_equirect(&scene, &center_pose(), 64).unwrap().image().get(64, 32);
        assert_ne!(wall, occluded);
        assert_eq!(occluded[1], 0.0);
        assert!(occluded[0] > 0.5);
    }

    #[test]
    fn pose_outside_room_rejected() {
        let scene = SceneSpec::default();
        let bad = Pose { position: [0.0, 3.0, 0.0], yaw_deg: 0.0 };
        assert!(matches!(render_equirect(&scene, &bad, 16), Err(WorldError::OutsideRoom(_))));
        assert!(render_equirect(&scene, &center_pose(), 15).is_err());
    }

    #[test]
    fn walk_constraints() {
        let scene = SceneSpec::default();
        let params = WalkParams::default();
        let walk = make_walk(&scene, 128, 5, &params).unwrap();
        assert_eq!(walk.len(), 128);
        assert!(walk.max_step() <= 0.03);
        assert!(walk.max_step() > 0.0);
        for p in &walk.poses {
            assert!(scene.room.contains_strictly(&p.position_vec()));
            let a = &scene.walk_area;
            assert!(p.position[0] >= a.min_xz[0] && p.position[0] <= a.max_xz[0]);
            assert!(p.position[2] >= a.min_xz[1] && p.position[2] <= a.max_xz[1]);
        }
        assert_eq!(walk, make_walk(&scene, 128, 5, &params).unwrap());
        assert_ne!(walk, make_walk(&scene, 128, 6, &params).unwrap());
        assert!(make_walk(&scene, 1, 0, &params).is_err());
    }

    #[test]
    fn parallax_between_walk_frames() {
        let scene = SceneSpec::default();
        let walk = make_walk(&scene, 8, 1, &WalkParams::default()).unwrap();
        let a = render_equirect(&scene, &walk.poses[0], 32).unwrap();
        let mut moved = walk.poses[7];
        moved.yaw_deg = walk.poses[0].yaw_deg;
        let b = render_equirect(&scene, &moved, 32).unwrap();
        assert!(a.image().mean_abs_diff(b.image()) > 0.0);
    }

    #[test]
    fn zero_radius_blob_is_noop() {
        let scene = SceneSpec::default();
        let frame = render_equirect(&scene, &center_pose(), 32).unwrap();
        let blob = BlobSpec { radii: [0.0; 3], ..BlobSpec::default() };
        let (out, mask) = composite_photographer(&frame, &center_pose(), &blob, &scene);
        assert_eq!(out, frame);
        assert_eq!(mask, LossMask::ones(64, 32));
    }

    #[test]
    fn blob_paint_and_mask_agree_and_stay_low() {
        let scene = SceneSpec::default();
        let pose = Pose { position: [0.2, 1.5, -0.1], yaw_deg: 37.0 };
        let h = 64;
        let frame = render_equirect(&scene, &pose, h).unwrap();
        let blob = BlobSpec::default();
        let (out, mask) = composite_photographer(&frame, &pose, &blob, &scene);
        assert!(mask.count_included() < mask.bits().len(), "blob should be visible");

        // Independent bound on the silhouette: the highest elevation of any
        // surface point of the ellipsoid, from dense surface sampling.
        let (c, r) = (v3(blob.offset), v3(blob.radii));
        let mut max_elev = f64::NEG_INFINITY;
        for i in 0..=400 {
            for j in 0..800 {
                let th = std::f64::consts::PI * i as f64 / 400.0;
                let ph = TAU * j as f64 / 800.0;
                let p = c + Vector3::new(r.x * th.sin() * ph.cos(), r.y * th.cos(), r.z * th.sin() * ph.sin());
                max_elev = max_elev.max((p.y / p.norm()).asin());
            }
        }
        assert!(max_elev < 0.0);

        for y in 0..h {
            for x in 0..2 * h {
                let painted = !mask.get(x, y);
                if painted {
                    assert_eq!(out.image().get(x, y), blob.color);
                    assert!(y >= h / 2, "painted pixel in top half at row {y}");
                    let lat = std::f64::consts::FRAC_PI_2 - std::f64::consts::PI * (y as f64 + 0.5) / h as f64;
                    assert!(lat <= max_elev + 1e-3);
                } else {
                    assert_eq!(out.image().get(x, y), frame.image().get(x, y));
                }
            }
        }
    }

    #[test]
    fn perspective_ray_cast_agrees_with_crop_of_equirect() {
        // Crops of a rendered panorama against direct ray casting of the same
        // camera: the only difference is bilinear resampling.
        let scene = SceneSpec::default();
        let pose = Pose { position: [0.3, 1.5, 0.2], yaw_deg: 20.0 };
        let frame = render_equirect(&scene, &pose, 352).unwrap();
        let local = PerspectiveCamera::new(120.0, 96, 96, yaw_pitch_rotation(70.0, -10.0), Vector3::zeros()).unwrap();
        let crop = crate::pano_geometry::render_crop(&frame, &local);
        let direct = render_perspective(&scene, &pose.crop_camera(&local));
        let err = crop.mean_abs_diff(&direct);
        assert!(err <= 2.0 / 255.0, "mean abs error {err}");
    }

    #[test]
    fn surface_points_are_consistent_across_frames() {
        // A surface point away from texture edges has the same sampled color in
        // every frame that sees it.
        let scene = SceneSpec::default();
        let h = 176;
        let w = 2 * h;
        let poses = [center_pose(), Pose { position: [0.5, 1.5, -0.4], yaw_deg: 40.0 }];
        let frames: Vec<_> = poses.iter().map(|p| render_equirect(&scene, p, h).unwrap()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 500 {
            let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
            let d = poses[0].rotation() * dir_from_equirect(x as f64, y as f64, w, h).unwrap().vector();
            let hit = scene.cast(&poses[0].position_vec(), &d).unwrap();
            let to = hit.point - poses[1].position_vec();
            let dist = to.norm();
            let Some(h1) = scene.cast(&poses[1].position_vec(), &to) else { continue };
            if (h1.t * to.norm() - dist).abs() > 1e-6 {
                continue;
            }
            // Keep away from checker edges by a few pixel footprints.
            if hit.edge_distance < 4.0 * dist.max(hit.t) * std::f64::consts::PI / h as f64 {
                continue;
            }
            let local = poses[1].rotation().inverse() * to;
            let (u, v) = equirect_from_dir(&SphericalDirection::normalize(local), w, h);
            // All four bilinear taps must see the same smooth surface patch.
            let same_surface = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].iter().all(|(du, dv)| {
                let (tu, tv) = (u.floor() + du, (v.floor() + dv).clamp(0.0, h as f64 - 1.0));
                let dn = poses[1].rotation() * dir_from_equirect(tu, tv, w, h).unwrap().vector();
                scene.cast(&poses[1].position_vec(), &dn).is_some_and(|n| n.surface == hit.surface && n.normal.dot(&hit.normal) > 0.9)
            });
            if !same_surface {
                continue;
            }
            let a = frames[0].image().get(x, y);
            let b = frames[1].sample(u, v);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 4.0 / 255.0, "{a:?} vs {b:?}");
            }
            checked += 1;
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scene = SceneSpec::default();
        scene.save(dir.path().join("s.json")).unwrap();
        assert_eq!(SceneSpec::load(dir.path().join("s.json")).unwrap(), scene);
    }
}
