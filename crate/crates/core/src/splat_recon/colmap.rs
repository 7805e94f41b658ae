//! COLMAP sparse text model (`cameras.txt`, `images.txt`, `points3D.txt`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use super::{io_err, Intrinsics, PosedImage, SplatCamera, SplatError};
use crate::raster::RgbImage;

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

impl ColmapCamera {
    pub fn pinhole(id: u32, k: &Intrinsics) -> Self {
        Self { id, model: "PINHOLE".into(), width: k.width, height: k.height, params: vec![k.fx, k.fy, k.cx, k.cy] }
    }

    /// Focal lengths and principal point; distortion terms are dropped.
    pub fn intrinsics(&self) -> Result<Intrinsics, String> {
        let p = &self.params;
        let need = |n: usize| {
            if p.len() < n {
                Err(format!("model {} needs {n} params, got {}", self.model, p.len()))
            } else {
                Ok(())
            }
        };
        let (fx, fy, cx, cy) = match self.model.as_str() {
            "SIMPLE_PINHOLE" | "SIMPLE_RADIAL" | "RADIAL" | "SIMPLE_RADIAL_FISHEYE" | "RADIAL_FISHEYE" => {
                need(3)?;
                (p[0], p[0], p[1], p[2])
            }
            "PINHOLE" | "OPENCV" | "OPENCV_FISHEYE" | "FULL_OPENCV" => {
                need(4)?;
                (p[0], p[1], p[2], p[3])
            }
            other => return Err(format!("unsupported camera model {other}")),
        };
        Ok(Intrinsics { fx, fy, cx, cy, width: self.width, height: self.height })
    }
}

/// Camera-from-world pose of one registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// `(w, x, y, z)`.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
}

impl ColmapImage {
    pub fn from_world_from_camera(
        id: u32,
        camera_id: u32,
        name: impl Into<String>,
        rotation: &Matrix3<f64>,
        position: &Vector3<f64>,
    ) -> Self {
        let r_cw = rotation.transpose();
        let t = -(r_cw * position);
        let q = UnitQuaternion::from_matrix(&r_cw);
        let mut qvec = [q.w, q.i, q.j, q.k];
        if qvec[0] < 0.0 {
            qvec = qvec.map(|v| -v);
        }
        Self { id, qvec, tvec: [t.x, t.y, t.z], camera_id, name: name.into() }
    }

    /// World-from-camera rotation and camera center.
    pub fn world_from_camera(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let [w, x, y, z] = self.qvec;
        let r_cw = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)).to_rotation_matrix().into_inner();
        let r_wc = r_cw.transpose();
        let t = Vector3::from(self.tvec);
        (r_wc, -(r_wc * t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: BTreeMap<u32, ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

struct Lines<'a> {
    file: String,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(path: &Path, text: &'a str) -> Self {
        Self { file: path.display().to_string(), inner: text.lines().enumerate() }
    }

    fn err(&self, line: usize, msg: impl Into<String>) -> SplatError {
        SplatError::Parse { file: self.file.clone(), line, msg: msg.into() }
    }

    /// Next non-comment line as `(1-based line number, content)`.
    fn next_record(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            let t = l.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Some((i + 1, t));
        }
        None
    }

    /// The raw next line (may be blank), for the 2D-points line of images.txt.
    fn next_raw(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }
}

fn field<T: std::str::FromStr>(lines: &Lines, line: usize, tok: Option<&str>, what: &str) -> Result<T, SplatError> {
    let tok = tok.ok_or_else(|| lines.err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| lines.err(line, format!("bad {what} {tok:?}")))
}

fn read_text(path: &Path) -> Result<String, SplatError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub fn parse_cameras(path: &Path, text: &str) -> Result<BTreeMap<u32, ColmapCamera>, SplatError> {
    let mut lines = Lines::new(path, text);
    let mut out = BTreeMap::new();
    while let Some((n, l)) = lines.next_record() {
        let mut it = l.split_whitespace();
        let id = field(&lines, n, it.next(), "CAMERA_ID")?;
        let model: String = field(&lines, n, it.next(), "MODEL")?;
        let width = field(&lines, n, it.next(), "WIDTH")?;
        let height = field(&lines, n, it.next(), "HEIGHT")?;
        let params = it.map(|t| field(&lines, n, Some(t), "PARAM")).collect::<Result<Vec<f64>, _>>()?;
        let cam = ColmapCamera { id, model, width, height, params };
        cam.intrinsics().map_err(|m| lines.err(n, m))?;
        if out.insert(id, cam).is_some() {
            return Err(lines.err(n, format!("duplicate camera id {id}")));
        }
    }
    Ok(out)
}

pub fn parse_images(path: &Path, text: &str) -> Result<Vec<ColmapImage>, SplatError> {
    let mut lines = Lines::new(path, text);
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next_record() {
        let mut it = l.split_whitespace();
        let id = field(&lines, n, it.next(), "IMAGE_ID")?;
        let mut qvec = [0.0; 4];
        for (k, name) in ["QW", "QX", "QY", "QZ"].iter().enumerate() {
            qvec[k] = field(&lines, n, it.next(), name)?;
        }
        let mut tvec = [0.0; 3];
        for (k, name) in ["TX", "TY", "TZ"].iter().enumerate() {
            tvec[k] = field(&lines, n, it.next(), name)?;
        }
        let camera_id = field(&lines, n, it.next(), "CAMERA_ID")?;
        let name: String = field(&lines, n, it.next(), "NAME")?;
        let norm = qvec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(lines.err(n, "degenerate quaternion"));
        }
        // The POINTS2D line follows and may be blank.
        lines.next_raw();
        out.push(ColmapImage { id, qvec, tvec, camera_id, name });
    }
    Ok(out)
}

pub fn parse_points3d(path: &Path, text: &str) -> Result<Vec<ColmapPoint>, SplatError> {
    let mut lines = Lines::new(path, text);
    let mut out = Vec::new();
    while let Some((n, l)) = lines.next_record() {
        let mut it = l.split_whitespace();
        let id = field(&lines, n, it.next(), "POINT3D_ID")?;
        let mut xyz = [0.0; 3];
        for (k, name) in ["X", "Y", "Z"].iter().enumerate() {
            xyz[k] = field(&lines, n, it.next(), name)?;
        }
        let mut rgb = [0u8; 3];
        for (k, name) in ["R", "G", "B"].iter().enumerate() {
            rgb[k] = field(&lines, n, it.next(), name)?;
        }
        let error = field(&lines, n, it.next(), "ERROR")?;
        out.push(ColmapPoint { id, xyz, rgb, error });
    }
    Ok(out)
}

impl SparseModel {
    pub fn read_dir(dir: &Path) -> Result<Self, SplatError> {
        let cp = dir.join("cameras.txt");
        let ip = dir.join("images.txt");
        let pp = dir.join("points3D.txt");
        let cameras = parse_cameras(&cp, &read_text(&cp)?)?;
        let images = parse_images(&ip, &read_text(&ip)?)?;
        let points = if pp.exists() { parse_points3d(&pp, &read_text(&pp)?)? } else { Vec::new() };
        for (k, img) in images.iter().enumerate() {
            if !cameras.contains_key(&img.camera_id) {
                return Err(SplatError::Parse {
                    file: ip.display().to_string(),
                    line: 0,
                    msg: format!("image #{k} ({}) references unknown camera {}", img.name, img.camera_id),
                });
            }
        }
        Ok(Self { cameras, images, points })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), SplatError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut c = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        writeln!(c, "# Number of cameras: {}", self.cameras.len()).unwrap();
        for cam in self.cameras.values() {
            write!(c, "{} {} {} {}", cam.id, cam.model, cam.width, cam.height).unwrap();
            for p in &cam.params {
                write!(c, " {p}").unwrap();
            }
            c.push('\n');
        }
        let mut i = String::from(
            "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        writeln!(i, "# Number of images: {}", self.images.len()).unwrap();
        for img in &self.images {
            let [qw, qx, qy, qz] = img.qvec;
            let [tx, ty, tz] = img.tvec;
            writeln!(i, "{} {qw} {qx} {qy} {qz} {tx} {ty} {tz} {} {}\n", img.id, img.camera_id, img.name).unwrap();
        }
        let mut p = String::from(
            "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
        );
        writeln!(p, "# Number of points: {}", self.points.len()).unwrap();
        for pt in &self.points {
            let [x, y, z] = pt.xyz;
            let [r, g, b] = pt.rgb;
            writeln!(p, "{} {x} {y} {z} {r} {g} {b} {}", pt.id, pt.error).unwrap();
        }
        for (name, text) in [("cameras.txt", c), ("images.txt", i), ("points3D.txt", p)] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

/// `p -> (p - center) * scale`, applied to every position at ingestion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub center: Vector3<f64>,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { center: Vector3::zeros(), scale: 1.0 }
    }

    /// Centers the bounding box of `positions` and scales its largest side to 1.
    pub fn from_positions(positions: &[Vector3<f64>]) -> Self {
        if positions.is_empty() {
            return Self::identity();
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in positions {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).max();
        let scale = if extent > 1e-12 { 1.0 / extent } else { 1.0 };
        Self { center: (lo + hi) / 2.0, scale }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.center) * self.scale
    }

    pub fn apply_camera(&self, cam: &SplatCamera) -> SplatCamera {
        SplatCamera { position: self.apply(&cam.position), ..cam.clone() }
    }
}

/// A named, posed camera in the normalized frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCamera {
    pub name: String,
    pub camera: SplatCamera,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoses {
    pub cameras: Vec<NamedCamera>,
    /// Normalized sparse points with colors in [0, 1].
    pub points: Vec<(Vector3<f64>, [f64; 3])>,
    pub normalization: Normalization,
}

/// Reads a sparse model, inverts every pose to world-from-camera and
/// normalizes positions to a unit camera bounding box.
pub fn read_sparse_poses(sparse_dir: &Path) -> Result<SparsePoses, SplatError> {
    let model = SparseModel::read_dir(sparse_dir)?;
    let mut raw = Vec::with_capacity(model.images.len());
    for img in &model.images {
        let cam = &model.cameras[&img.camera_id];
        let k = cam.intrinsics().map_err(SplatError::BadInput)?;
        let (r, o) = img.world_from_camera();
        raw.push((img.name.clone(), SplatCamera::new(k, r, o)?));
    }
    let normalization = Normalization::from_positions(&raw.iter().map(|(_, c)| c.position).collect::<Vec<_>>());
    let cameras = raw
        .into_iter()
        .map(|(name, c)| NamedCamera { name, camera: normalization.apply_camera(&c) })
        .collect();
    let points = model
        .points
        .iter()
        .map(|p| (normalization.apply(&Vector3::from(p.xyz)), p.rgb.map(|c| c as f64 / 255.0)))
        .collect();
    Ok(SparsePoses { cameras, points, normalization })
}

#[derive(Debug, Clone)]
pub struct IngestedViews {
    pub views: Vec<PosedImage>,
    pub points: Vec<(Vector3<f64>, [f64; 3])>,
    pub normalization: Normalization,
    /// Image files in the image directory without a registered pose.
    pub unregistered: Vec<String>,
}

/// Pairs every registered pose with its image file under `image_dir`.
pub fn ingest_colmap_poses(sparse_dir: &Path, image_dir: &Path) -> Result<IngestedViews, SplatError> {
    let poses = read_sparse_poses(sparse_dir)?;
    let mut views = Vec::with_capacity(poses.cameras.len());
    for nc in &poses.cameras {
        let image = RgbImage::load_png(image_dir.join(&nc.name))?;
        views.push(PosedImage::new(nc.name.clone(), image, nc.camera.clone())?);
    }
    let registered: BTreeSet<&str> = poses.cameras.iter().map(|c| c.name.as_str()).collect();
    let mut unregistered = Vec::new();
    for entry in std::fs::read_dir(image_dir).map_err(io_err(image_dir))? {
        let path: PathBuf = entry.map_err(io_err(image_dir))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            if !registered.contains(name.as_str()) {
                unregistered.push(name);
            }
        }
    }
    unregistered.sort();
    Ok(IngestedViews { views, points: poses.points, normalization: poses.normalization, unregistered })
}

/// Flips y between the y-up panorama world and the y-down camera convention.
const FLIP_Y: Matrix3<f64> = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0);

/// Converts a y-up panorama point into the splat world frame.
pub fn splat_world_from_pano(p: &Vector3<f64>) -> Vector3<f64> {
    FLIP_Y * p
}

/// Splat camera for a perspective crop whose pose is given in the y-up
/// panorama world with a y-up camera frame.
pub fn splat_camera_from_pano(
    intrinsics: Intrinsics,
    rotation: &UnitQuaternion<f64>,
    position: &Vector3<f64>,
) -> Result<SplatCamera, SplatError> {
    let r = FLIP_Y * rotation.to_rotation_matrix().into_inner() * FLIP_Y;
    SplatCamera::new(intrinsics, r, splat_world_from_pano(position))
}
