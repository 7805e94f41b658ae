//! Workspace-level orchestration behind the `pipeline` binary.
//!
//! A workspace holds one scene:
//!
//! ```text
//! capture/   frame_%06d.png, mask_%06d.png, walk.json, scene.json, captions.json, manifest.json
//! crops/     crop_%06d.png, mask_%06d.png, plan.jsonl, image_list.txt
//! sparse/    cameras.txt, images.txt, points3D.txt
//! scene/     scene.bin, scene.json, pluecker/*.f32
//! reports/   pose.json, recon.json, loss.csv, eval.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture_prep::{
    self, chunk_count, clip_duration_secs, crop_mask, frame_file_name, list_frames, mask_file_name, scan_video_dir,
    CaptionSource, CaptureError, ClipConfig, LossMask,
};
use crate::eval_metrics::{self, MetricsError, MetricsReport, SceneEvalRecord};
use crate::pano_geometry::{
    make_crop_plan, render_crop, CropParams, CropPlan, CropRecord, EquirectFrame, GeometryError, PerspectiveCamera,
};
use crate::raster::{RasterError, RgbImage};
use crate::splat_recon::{
    self, export_scene, ingest_colmap_poses, rasterize, splat_camera_from_pano, splat_world_from_pano,
    subsample_indices, write_pluecker_map, ColmapCamera, ColmapImage, ColmapPoint, GaussianScene, Intrinsics,
    PosedImage, ReconConfig, SparseModel, SplatError,
};
use crate::synthetic_world::{
    composite_photographer, make_walk, render_equirect, render_perspective, BlobSpec, Pose, SceneSpec, WalkParams,
    WalkPath, WorldError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("workspace: {0}")]
    Workspace(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("COLMAP binary {binary:?} not found; install COLMAP or set colmap_mode = \"ground_truth_poses\" to use the analytic poses instead")]
    ColmapMissing { binary: String },
    #[error("COLMAP step {step} failed: {detail}")]
    ColmapFailed { step: String, detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Capture(#[from] CaptureError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Splat(#[from] SplatError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColmapMode {
    External,
    GroundTruthPoses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workspace: PathBuf,
    /// Master seed; walk, crop plan, view subsampling and optimizer seeds
    /// derive from it.
    pub seed: u64,
    pub n_frames: usize,
    pub clip_len: usize,
    pub clip_stride: usize,
    pub fps: f64,
    pub equirect_height: usize,
    pub crops_per_frame: usize,
    pub crop_fov_deg: f64,
    pub crop_resolution: usize,
    pub pitch_range_deg: (f64, f64),
    pub subsample_k: usize,
    pub heldout_views: usize,
    pub photographer: bool,
    pub bottom_band_fraction: f64,
    pub gt_points_per_crop: usize,
    pub colmap_mode: ColmapMode,
    pub colmap_binary: String,
    /// `sequential` or `exhaustive`.
    pub colmap_matcher: String,
    pub failure_threshold: f64,
    pub serve_addr: String,
    /// JSON scene description; the built-in checker room when absent.
    pub scene_spec: Option<PathBuf>,
    /// Optimizer settings; its `seed` is replaced by one derived from `seed`.
    pub reconstruction: ReconConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            workspace: PathBuf::from("workspace"),
            seed: 0,
            n_frames: 128,
            clip_len: 128,
            clip_stride: 128,
            fps: 12.0,
            equirect_height: 176,
            crops_per_frame: 3,
            crop_fov_deg: 120.0,
            crop_resolution: 128,
            pitch_range_deg: (-20.0, 20.0),
            subsample_k: 32,
            heldout_views: 8,
            photographer: true,
            bottom_band_fraction: 0.125,
            gt_points_per_crop: 64,
            colmap_mode: ColmapMode::GroundTruthPoses,
            colmap_binary: "colmap".into(),
            colmap_matcher: "sequential".into(),
            failure_threshold: eval_metrics::DEFAULT_FAILURE_THRESHOLD,
            serve_addr: "127.0.0.1:8080".into(),
            scene_spec: None,
            reconstruction: ReconConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        for (name, v) in [
            ("n_frames", self.n_frames),
            ("clip_len", self.clip_len),
            ("clip_stride", self.clip_stride),
            ("crops_per_frame", self.crops_per_frame),
            ("crop_resolution", self.crop_resolution),
            ("subsample_k", self.subsample_k),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.crop_fov_deg > 0.0 && self.crop_fov_deg < 180.0) {
            return bad(format!("crop_fov_deg {} outside (0, 180)", self.crop_fov_deg));
        }
        if !(self.fps > 0.0) {
            return bad("fps must be positive".into());
        }
        if self.equirect_height < 2 || self.equirect_height % 2 != 0 {
            return bad("equirect_height must be even and >= 2".into());
        }
        if !matches!(self.colmap_matcher.as_str(), "sequential" | "exhaustive") {
            return bad(format!("colmap_matcher {:?}", self.colmap_matcher));
        }
        self.recon_config().validate()?;
        Ok(())
    }

    pub fn walk_seed(&self) -> u64 {
        self.seed
    }

    pub fn crop_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn subsample_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn recon_config(&self) -> ReconConfig {
        ReconConfig { seed: self.seed.wrapping_add(3), ..self.reconstruction.clone() }
    }

    pub fn crop_params(&self) -> CropParams {
        CropParams {
            crops_per_frame: self.crops_per_frame,
            fov_deg: self.crop_fov_deg,
            resolution: self.crop_resolution,
            pitch_range_deg: self.pitch_range_deg,
        }
    }

    pub fn clip_config(&self) -> ClipConfig {
        ClipConfig {
            clip_len: self.clip_len,
            stride: self.clip_stride,
            fps: self.fps,
            bottom_band_fraction: self.bottom_band_fraction,
        }
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(&self.workspace)
    }

    pub fn scene(&self) -> Result<SceneSpec, PipelineError> {
        Ok(match &self.scene_spec {
            Some(p) => SceneSpec::load(p)?,
            None => SceneSpec::default(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn capture(&self) -> PathBuf {
        self.root.join("capture")
    }

    pub fn crops(&self) -> PathBuf {
        self.root.join("crops")
    }

    pub fn sparse(&self) -> PathBuf {
        self.root.join("sparse")
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn scene_bin(&self) -> PathBuf {
        self.scene().join("scene.bin")
    }

    pub fn plan_path(&self) -> PathBuf {
        self.crops().join("plan.jsonl")
    }
}

pub fn crop_file_name(index: usize) -> String {
    format!("crop_{index:06}.png")
}

/// Index encoded in a `crop_%06d.png` name.
pub fn crop_index(name: &str) -> Option<usize> {
    name.strip_prefix("crop_")?.strip_suffix(".png")?.parse().ok()
}

fn fresh_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable")).map_err(io_err(path))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Workspace(format!("{}: {e}", path.display())))
}

fn require(path: &Path, hint: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Workspace(format!("{} is missing; {hint}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSummary {
    pub n_frames: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub clips: usize,
}

/// Renders the walk through `spec` as equirect frames with photographer
/// masks, then chunks them into clips with a manifest.
pub fn cmd_synthesize(cfg: &PipelineConfig, spec: &SceneSpec) -> Result<SynthesisSummary, PipelineError> {
    cfg.validate()?;
    let ws = cfg.workspace();
    let dir = ws.capture();
    fresh_dir(&dir)?;
    let walk = if cfg.n_frames == 1 {
        let a = &spec.walk_area;
        let center = [(a.min_xz[0] + a.max_xz[0]) / 2.0, a.eye_height, (a.min_xz[1] + a.max_xz[1]) / 2.0];
        WalkPath { poses: vec![Pose { position: center, yaw_deg: 0.0 }], fps: cfg.fps }
    } else {
        make_walk(spec, cfg.n_frames, cfg.walk_seed(), &WalkParams { fps: cfg.fps, ..WalkParams::default() })?
    };
    let blob = BlobSpec::default();
    for (i, pose) in walk.poses.iter().enumerate() {
        let frame = render_equirect(spec, pose, cfg.equirect_height)?;
        let (frame, mask) = if cfg.photographer {
            composite_photographer(&frame, pose, &blob, spec)
        } else {
            let m = LossMask::ones(frame.width(), frame.height());
            (frame, m)
        };
        frame.image().save_png(dir.join(frame_file_name(i)))?;
        mask.save_png(dir.join(mask_file_name(i)))?;
    }
    walk.save(dir.join("walk.json"))?;
    spec.save(dir.join("scene.json"))?;
    let clip_cfg = cfg.clip_config();
    let windows = chunk_count(cfg.n_frames, clip_cfg.clip_len.min(cfg.n_frames), clip_cfg.stride)?;
    let captions = CaptionSource(windows.iter().map(|w| (w.id(), spec.caption.clone())).collect::<BTreeMap<_, _>>());
    captions.save(dir.join("captions.json"))?;
    let manifest = scan_video_dir(&dir, &clip_cfg)?;
    Ok(SynthesisSummary {
        n_frames: walk.len(),
        fps: cfg.fps,
        duration_s: clip_duration_secs(walk.len(), cfg.fps),
        clips: manifest.clips.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSummary {
    pub frames: usize,
    pub crops: usize,
}

/// Renders every planned perspective crop (and its loss-mask crop).
pub fn cmd_crop(cfg: &PipelineConfig) -> Result<CropSummary, PipelineError> {
    cfg.validate()?;
    let ws = cfg.workspace();
    let capture = ws.capture();
    let frames = if capture.exists() { list_frames(&capture)? } else { Vec::new() };
    if frames.is_empty() {
        return Err(PipelineError::Workspace(format!(
            "no frames in {}; run `pipeline synthesize` first",
            capture.display()
        )));
    }
    let plan = make_crop_plan(frames.len(), &cfg.crop_params(), cfg.crop_seed())?;
    let out = ws.crops();
    fresh_dir(&out)?;
    let mut current: Option<(usize, EquirectFrame, Option<LossMask>)> = None;
    for (k, entry) in plan.entries.iter().enumerate() {
        if current.as_ref().is_none_or(|c| c.0 != entry.frame_index) {
            let frame = EquirectFrame::new(RgbImage::load_png(&frames[entry.frame_index])?)?;
            let mp = capture.join(mask_file_name(entry.frame_index));
            let mask = if mp.exists() { Some(LossMask::load_png(&mp)?) } else { None };
            current = Some((entry.frame_index, frame, mask));
        }
        let (_, frame, mask) = current.as_ref().expect("loaded");
        render_crop(frame, &entry.camera).save_png(out.join(crop_file_name(k)))?;
        if let Some(m) = mask {
            crop_mask(m, &entry.camera).save_png(out.join(mask_file_name(k)))?;
        }
    }
    let plan_path = ws.plan_path();
    let file = fs::File::create(&plan_path).map_err(io_err(&plan_path))?;
    plan.write_jsonl(std::io::BufWriter::new(file))?;
    let list: String = (0..plan.len()).map(|k| crop_file_name(k) + "\n").collect();
    let list_path = out.join("image_list.txt");
    fs::write(&list_path, list).map_err(io_err(&list_path))?;
    Ok(CropSummary { frames: frames.len(), crops: plan.len() })
}

fn load_plan(ws: &Workspace) -> Result<CropPlan, PipelineError> {
    let p = ws.plan_path();
    require(&p, "run `pipeline crop` first")?;
    let file = fs::File::open(&p).map_err(io_err(&p))?;
    Ok(CropPlan::read_jsonl(std::io::BufReader::new(file))?)
}

/// World-frame (y-up) crop camera for plan record `rec` on `walk`.
pub fn world_crop_camera(rec: &CropRecord, walk: &WalkPath) -> Result<PerspectiveCamera, PipelineError> {
    let pose = walk
        .poses
        .get(rec.frame_index)
        .ok_or_else(|| PipelineError::Workspace(format!("plan references frame {} beyond the walk", rec.frame_index)))?;
    let [w, x, y, z] = rec.quaternion;
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
    let local = PerspectiveCamera::new(rec.fov_deg, rec.width, rec.height, q, Vector3::zeros())?;
    Ok(pose.crop_camera(&local))
}

fn intrinsics_of(cam: &PerspectiveCamera) -> Intrinsics {
    Intrinsics::centered(cam.focal(), cam.width(), cam.height())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSummary {
    pub mode: ColmapMode,
    pub total_images: usize,
    /// `None` when no sparse model was produced.
    pub registered_images: Option<usize>,
    pub points: usize,
}

/// Produces `sparse/` either from the analytic crop poses or by running
/// COLMAP on the crops.
pub fn cmd_pose(cfg: &PipelineConfig) -> Result<PoseSummary, PipelineError> {
    cfg.validate()?;
    let ws = cfg.workspace();
    let plan = load_plan(&ws)?;
    let summary = match cfg.colmap_mode {
        ColmapMode::GroundTruthPoses => ground_truth_poses(cfg, &ws, &plan)?,
        ColmapMode::External => run_colmap(cfg, &ws, plan.len())?,
    };
    write_json(&ws.reports().join("pose.json"), &summary)?;
    Ok(summary)
}

fn ground_truth_poses(cfg: &PipelineConfig, ws: &Workspace, plan: &CropPlan) -> Result<PoseSummary, PipelineError> {
    let capture = ws.capture();
    let walk = WalkPath::load(capture.join("walk.json"))?;
    let spec = SceneSpec::load(capture.join("scene.json"))?;
    let records = plan.records();
    let first = records.first().ok_or_else(|| PipelineError::Workspace("crop plan is empty".into()))?;
    let intr = intrinsics_of(&world_crop_camera(first, &walk)?);
    let mut model = SparseModel::default();
    model.cameras.insert(1, ColmapCamera::pinhole(1, &intr));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));
    for (k, rec) in records.iter().enumerate() {
        let cam = world_crop_camera(rec, &walk)?;
        if (rec.width, rec.height) != (intr.width, intr.height) || (cam.focal() - intr.fx).abs() > 1e-12 {
            return Err(PipelineError::Workspace("crops with differing intrinsics are not supported".into()));
        }
        let sc = splat_camera_from_pano(intr, cam.rotation(), &cam.position())?;
        let name = crop_file_name(k);
        model.images.push(ColmapImage::from_world_from_camera(k as u32 + 1, 1, name.clone(), &sc.rotation, &sc.position));
        if cfg.gt_points_per_crop == 0 {
            continue;
        }
        let img = RgbImage::load_png(ws.crops().join(&name))?;
        let mp = ws.crops().join(mask_file_name(k));
        let mask = if mp.exists() { Some(LossMask::load_png(&mp)?) } else { None };
        let mut taken = 0;
        let mut tries = 0;
        while taken < cfg.gt_points_per_crop && tries < 20 * cfg.gt_points_per_crop {
            tries += 1;
            let (x, y) = (rng.random_range(0..rec.width), rng.random_range(0..rec.height));
            if mask.as_ref().is_some_and(|m| !m.get(x, y)) {
                continue;
            }
            let Some(hit) = spec.cast(&cam.position(), &cam.world_ray(x, y)) else { continue };
            let c = img.get(x, y);
            let p = splat_world_from_pano(&hit.point);
            model.points.push(ColmapPoint {
                id: model.points.len() as u64 + 1,
                xyz: [p.x, p.y, p.z],
                rgb: c.map(crate::raster::to_u8),
                error: 0.0,
            });
            taken += 1;
        }
    }
    let sparse = ws.sparse();
    fresh_dir(&sparse)?;
    model.write_dir(&sparse)?;
    Ok(PoseSummary {
        mode: ColmapMode::GroundTruthPoses,
        total_images: plan.len(),
        registered_images: Some(model.images.len()),
        points: model.points.len(),
    })
}

fn colmap_step(cfg: &PipelineConfig, step: &str, args: &[&str]) -> Result<(), PipelineError> {
    let out = Command::new(&cfg.colmap_binary).arg(step).args(args).output().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            PipelineError::ColmapMissing { binary: cfg.colmap_binary.clone() }
        } else {
            PipelineError::ColmapFailed { step: step.into(), detail: e.to_string() }
        }
    })?;
    if !out.status.success() {
        let tail: String = String::from_utf8_lossy(&out.stderr).lines().rev().take(5).collect::<Vec<_>>().join(" | ");
        return Err(PipelineError::ColmapFailed { step: step.into(), detail: format!("{}: {tail}", out.status) });
    }
    Ok(())
}

fn run_colmap(cfg: &PipelineConfig, ws: &Workspace, total: usize) -> Result<PoseSummary, PipelineError> {
    let sparse = ws.sparse();
    fresh_dir(&sparse)?;
    let db = sparse.join("database.db");
    let models = sparse.join("models");
    fs::create_dir_all(&models).map_err(io_err(&models))?;
    let s = |p: &Path| p.display().to_string();
    let (db_s, crops_s, models_s) = (s(&db), s(&ws.crops()), s(&models));
    let list_s = s(&ws.crops().join("image_list.txt"));
    colmap_step(
        cfg,
        "feature_extractor",
        &[
            "--database_path", &db_s, "--image_path", &crops_s, "--image_list_path", &list_s,
            "--ImageReader.single_camera", "1", "--ImageReader.camera_model", "SIMPLE_PINHOLE",
            "--SiftExtraction.use_gpu", "0",
        ],
    )?;
    let matcher = format!("{}_matcher", cfg.colmap_matcher);
    colmap_step(cfg, &matcher, &["--database_path", &db_s, "--SiftMatching.use_gpu", "0"])?;
    colmap_step(cfg, "mapper", &["--database_path", &db_s, "--image_path", &crops_s, "--output_path", &models_s])?;

    // Keep the model that registered the most images.
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&models).map_err(io_err(&models))? {
        let dir = entry.map_err(io_err(&models))?.path();
        if !dir.is_dir() {
            continue;
        }
        let txt = sparse.join(format!("txt_{}", dir.file_name().expect("dir").to_string_lossy()));
        fs::create_dir_all(&txt).map_err(io_err(&txt))?;
        colmap_step(cfg, "model_converter", &["--input_path", &s(&dir), "--output_path", &s(&txt), "--output_type", "TXT"])?;
        let n = SparseModel::read_dir(&txt)?.images.len();
        if best.as_ref().is_none_or(|b| n > b.0) {
            best = Some((n, txt));
        }
    }
    let Some((registered, dir)) = best else {
        return Ok(PoseSummary { mode: ColmapMode::External, total_images: total, registered_images: None, points: 0 });
    };
    let model = SparseModel::read_dir(&dir)?;
    model.write_dir(&sparse)?;
    Ok(PoseSummary {
        mode: ColmapMode::External,
        total_images: total,
        registered_images: Some(registered),
        points: model.points.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldoutScore {
    pub name: String,
    /// Against the held-out crop, over loss-mask pixels.
    pub psnr: f64,
    /// Against a direct render of the ground-truth scene, when available.
    pub psnr_clean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    pub views_total: usize,
    pub views_used: Vec<String>,
    pub unregistered: Vec<String>,
    pub gaussians: usize,
    pub iterations: usize,
    pub final_window_loss: f64,
    pub lr_multiplier: f64,
    pub heldout: Vec<HeldoutScore>,
    pub psnr_heldout: Option<f64>,
    pub psnr_heldout_clean: Option<f64>,
}

/// Loads every registered crop with its pose and loss mask.
pub fn load_posed_crops(ws: &Workspace) -> Result<splat_recon::IngestedViews, PipelineError> {
    require(&ws.sparse().join("images.txt"), "run `pipeline pose` first")?;
    let mut ingested = ingest_colmap_poses(&ws.sparse(), &ws.crops())?;
    ingested.unregistered.retain(|n| crop_index(n).is_some());
    ingested.views.sort_by(|a, b| a.name.cmp(&b.name));
    for v in ingested.views.iter_mut() {
        if let Some(k) = crop_index(&v.name) {
            let mp = ws.crops().join(mask_file_name(k));
            if mp.exists() {
                *v = v.clone().with_mask(LossMask::load_png(&mp)?)?;
            }
        }
    }
    Ok(ingested)
}

/// Evenly spaced picks from the views not used for training.
pub fn heldout_indices(n: usize, train: &[usize], count: usize) -> Vec<usize> {
    let rest: Vec<usize> = (0..n).filter(|i| !train.contains(i)).collect();
    let m = count.min(rest.len());
    (0..m).map(|i| rest[i * rest.len() / m]).collect()
}

fn render_image(scene: &GaussianScene, view: &PosedImage, bg: [f64; 3]) -> RgbImage {
    let mut img = rasterize(scene, &view.camera, bg).to_image();
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Subsamples `k` views, optimizes a scene, exports it and scores held-out views.
pub fn cmd_reconstruct(cfg: &PipelineConfig) -> Result<ReconReport, PipelineError> {
    cfg.validate()?;
    let ws = cfg.workspace();
    let ingested = load_posed_crops(&ws)?;
    let views = &ingested.views;
    if cfg.subsample_k > views.len() {
        return Err(PipelineError::Config(format!(
            "subsample_k {} exceeds the {} registered views",
            cfg.subsample_k,
            views.len()
        )));
    }
    let train_idx = subsample_indices(views.len(), cfg.subsample_k, cfg.subsample_seed())?;
    let train: Vec<PosedImage> = train_idx.iter().map(|&i| views[i].clone()).collect();
    let rc = cfg.recon_config();
    let rec = splat_recon::reconstruct(&train, &ingested.points, ingested.normalization.scale, &rc)?;

    let scene_dir = ws.scene();
    fresh_dir(&scene_dir)?;
    export_scene(&rec.scene, &ws.scene_bin())?;
    let pl = scene_dir.join("pluecker");
    fs::create_dir_all(&pl).map_err(io_err(&pl))?;
    for v in &train {
        write_pluecker_map(&v.camera, &pl.join(v.name.replace(".png", ".f32")))?;
    }

    // Ground-truth references exist when the capture was synthesized here.
    let capture = ws.capture();
    let gt = match (WalkPath::load(capture.join("walk.json")), SceneSpec::load(capture.join("scene.json")), load_plan(&ws)) {
        (Ok(walk), Ok(spec), Ok(plan)) if cfg.colmap_mode == ColmapMode::GroundTruthPoses => {
            Some((walk, spec, plan.records()))
        }
        _ => None,
    };
    let mut heldout = Vec::new();
    for i in heldout_indices(views.len(), &train_idx, cfg.heldout_views) {
        let v = &views[i];
        let img = render_image(&rec.scene, v, rc.background);
        let psnr = match &v.mask {
            Some(m) => eval_metrics::psnr_masked(&img, &v.image, m)?,
            None => eval_metrics::psnr(&img, &v.image)?,
        };
        let psnr_clean = match (&gt, crop_index(&v.name)) {
            (Some((walk, spec, records)), Some(k)) if k < records.len() => {
                let reference = render_perspective(spec, &world_crop_camera(&records[k], walk)?);
                Some(eval_metrics::psnr(&img, &reference)?)
            }
            _ => None,
        };
        heldout.push(HeldoutScore { name: v.name.clone(), psnr, psnr_clean });
    }
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let tail = rc.window.min(rec.losses.len()).max(1);
    let report = ReconReport {
        views_total: views.len(),
        views_used: train.iter().map(|v| v.name.clone()).collect(),
        unregistered: ingested.unregistered.clone(),
        gaussians: rec.scene.len(),
        iterations: rec.losses.len(),
        final_window_loss: rec.losses.iter().rev().take(tail).sum::<f64>() / tail as f64,
        lr_multiplier: rec.lr_multiplier,
        psnr_heldout: mean(heldout.iter().map(|h| h.psnr).collect()),
        psnr_heldout_clean: if heldout.iter().all(|h| h.psnr_clean.is_some()) {
            mean(heldout.iter().filter_map(|h| h.psnr_clean).collect())
        } else {
            None
        },
        heldout,
    };
    write_json(&ws.reports().join("recon.json"), &report)?;
    let csv_path = ws.reports().join("loss.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| PipelineError::Workspace(e.to_string()))?;
    w.write_record(["iteration", "loss"]).map_err(|e| PipelineError::Workspace(e.to_string()))?;
    for (i, l) in rec.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:e}")]).map_err(|e| PipelineError::Workspace(e.to_string()))?;
    }
    w.flush().map_err(io_err(&csv_path))?;
    Ok(report)
}

/// Registration record for one workspace.
pub fn scene_record(ws: &Workspace, threshold: f64) -> Result<SceneEvalRecord, PipelineError> {
    let total = match load_plan(ws) {
        Ok(plan) => plan.len(),
        Err(_) => {
            return Err(PipelineError::Workspace(format!("{} has no crops", ws.root.display())));
        }
    };
    let sparse = ws.sparse();
    let registered = if sparse.join("images.txt").exists() {
        let model = SparseModel::read_dir(&sparse)?;
        let names: std::collections::BTreeSet<&str> = model.images.iter().map(|i| i.name.as_str()).collect();
        Some(names.len())
    } else {
        None
    };
    let psnr = read_json::<ReconReport>(&ws.reports().join("recon.json")).ok().and_then(|r| r.psnr_heldout);
    let id = ws.root.file_name().map_or_else(|| ws.root.display().to_string(), |n| n.to_string_lossy().into_owned());
    Ok(SceneEvalRecord::from_counts(id, total, registered, threshold, psnr)?)
}

/// Aggregates registration and quality metrics over completed workspaces and
/// writes `reports/eval.json` into the configured workspace.
pub fn cmd_eval(cfg: &PipelineConfig, workspaces: &[PathBuf]) -> Result<MetricsReport, PipelineError> {
    if workspaces.is_empty() {
        return Err(PipelineError::Workspace("no scene workspaces given".into()));
    }
    let records = workspaces
        .iter()
        .map(|w| scene_record(&Workspace::new(w), cfg.failure_threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let report = MetricsReport::new(records)?;
    write_json(&cfg.workspace().reports().join("eval.json"), &report)?;
    Ok(report)
}

/// One HTTP response, independent of the server plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpReply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

impl HttpReply {
    fn text(status: u16, msg: &str) -> Self {
        Self { status, content_type: "text/plain; charset=utf-8", body: msg.as_bytes().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneIndexEntry {
    pub name: String,
    pub binary: String,
    pub sidecar: String,
    pub count: usize,
    pub scene_scale: f64,
    pub version: u32,
}

/// Every exported scene under `scene/`.
pub fn scene_index(ws: &Workspace) -> Vec<SceneIndexEntry> {
    let dir = ws.scene();
    let Ok(entries) = fs::read_dir(&dir) else { return Vec::new() };
    let mut out: Vec<SceneIndexEntry> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bin"))
        .filter_map(|p| {
            let side: splat_recon::SceneSidecar = read_json(&p.with_extension("json")).ok()?;
            let stem = p.file_stem()?.to_string_lossy().into_owned();
            Some(SceneIndexEntry {
                binary: format!("/scene/{stem}.bin"),
                sidecar: format!("/scene/{stem}.json"),
                name: stem,
                count: side.count,
                scene_scale: side.scene_scale,
                version: side.version,
            })
        })
        .collect();
    out.sort_by(|a, b| a.name.cmp(&b.name));
    out
}

/// Routes `/scenes` to the scene index and everything else to files under
/// the workspace root.
pub fn handle_request(ws: &Workspace, url: &str) -> HttpReply {
    let path = url.split(['?', '#']).next().unwrap_or("");
    if path == "/scenes" || path == "/scenes/" {
        let body = serde_json::to_vec_pretty(&serde_json::json!({ "scenes": scene_index(ws) })).expect("json");
        return HttpReply { status: 200, content_type: "application/json", body };
    }
    let rel = path.trim_start_matches('/');
    if rel.is_empty() || rel.split('/').any(|c| c == ".." || c.is_empty() || c.contains('\\')) {
        return HttpReply::text(404, "not found");
    }
    let file = ws.root.join(rel);
    match fs::read(&file) {
        Ok(body) if file.is_file() => {
            let content_type = match file.extension().and_then(|e| e.to_str()) {
                Some("json") => "application/json",
                Some("png") => "image/png",
                Some("html") => "text/html; charset=utf-8",
                Some("js") => "text/javascript",
                Some("csv") | Some("txt") | Some("jsonl") => "text/plain; charset=utf-8",
                _ => "application/octet-stream",
            };
            HttpReply { status: 200, content_type, body }
        }
        _ => HttpReply::text(404, "not found"),
    }
}

/// Serves the workspace over HTTP; stops after `max_requests` when given.
pub fn serve(ws: &Workspace, server: &tiny_http::Server, max_requests: Option<usize>) -> Result<(), PipelineError> {
    let mut handled = 0;
    for request in server.incoming_requests() {
        let reply = if *request.method() == tiny_http::Method::Get {
            handle_request(ws, request.url())
        } else {
            HttpReply::text(405, "method not allowed")
        };
        let response = tiny_http::Response::from_data(reply.body)
            .with_status_code(reply.status)
            .with_header(tiny_http::Header::from_bytes("Content-Type", reply.content_type).expect("static header"))
            .with_header(tiny_http::Header::from_bytes("Access-Control-Allow-Origin", "*").expect("static header"));
        // A client hanging up early is not a server failure.
        let _ = request.respond(response);
        handled += 1;
        if max_requests.is_some_and(|m| handled >= m) {
            break;
        }
    }
    Ok(())
}

pub fn cmd_serve(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let ws = cfg.workspace();
    let server = tiny_http::Server::http(&cfg.serve_addr)
        .map_err(|e| PipelineError::Workspace(format!("cannot bind {}: {e}", cfg.serve_addr)))?;
    serve(&ws, &server, None)
}

/// Clip duration check used by the CLI summary.
pub fn nominal_duration(cfg: &PipelineConfig) -> f64 {
    capture_prep::clip_duration_secs(cfg.clip_len.min(cfg.n_frames), cfg.fps)
}
