//! Training-clip preparation: chunking, loss masks and caption ingestion.
//!
//! Mask polarity everywhere in this module (and in mask PNG files) is
//! `1 = include in the loss`, `0 = exclude`. Mask PNGs are 8-bit grayscale
//! and a sample `>= 128` means include.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pano_geometry::{equirect_from_dir, EquirectFrame, GeometryError, PerspectiveCamera, SphericalDirection};
use crate::raster::{self, RasterError, RgbImage};

#[derive(Debug, Error)]
pub enum CaptureError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    MaskMismatch(usize, usize, usize, usize),
    #[error("no masks to merge")]
    EmptyMaskList,
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("missing caption for clip {0}")]
    MissingCaption(String),
    #[error("empty caption for clip {0}")]
    EmptyCaption(String),
    #[error("frames in one clip must share dimensions")]
    FrameMismatch,
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaptureError + '_ {
    move |source| CaptureError::Io { path: path.to_path_buf(), source }
}

/// Binary per-pixel loss mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LossMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl LossMask {
    pub fn ones(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![true; width * height] }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, bits: vec![false; width * height] }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, CaptureError> {
        if bits.len() != width * height {
            return Err(CaptureError::BadParam(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    /// Thresholds an 8-bit image: `>= 128` includes.
    pub fn from_gray(img: &image::GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            bits: img.as_raw().iter().map(|&b| b >= 128).collect(),
        }
    }

    pub fn to_gray(&self) -> image::GrayImage {
        let raw = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("sized")
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        Ok(Self::from_gray(&raster::load_gray8(path)?))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), CaptureError> {
        Ok(raster::save_gray8(&self.to_gray(), path)?)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, include: bool) {
        self.bits[y * self.width + x] = include;
    }

    pub fn count_included(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resize with pixel-center mapping.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> LossMask {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        LossMask::from_fn(out_w, out_h, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx).floor() as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy).floor() as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }
}

/// Pointwise AND: a pixel stays included only if every input includes it.
pub fn merge_masks(masks: &[LossMask]) -> Result<LossMask, CaptureError> {
    let first = masks.first().ok_or(CaptureError::EmptyMaskList)?;
    let mut out = first.clone();
    for m in &masks[1..] {
        if (m.width, m.height) != (out.width, out.height) {
            return Err(CaptureError::MaskMismatch(out.width, out.height, m.width, m.height));
        }
        for (o, &b) in out.bits.iter_mut().zip(&m.bits) {
            *o &= b;
        }
    }
    Ok(out)
}

/// Number of bottom rows excluded for `band_fraction` of `height`.
pub fn bottom_band_rows(height: usize, band_fraction: f64) -> usize {
    // Tolerate products like 0.1 * 30 = 3.0000000000000004.
    let rows = (band_fraction * height as f64 - 1e-9).ceil().max(0.0) as usize;
    rows.min(height)
}

/// Perspective crop of an equirect mask, nearest-neighbour so it stays binary.
pub fn crop_mask(mask: &LossMask, cam: &PerspectiveCamera) -> LossMask {
    let (w, h) = (mask.width, mask.height);
    LossMask::from_fn(cam.width(), cam.height(), |x, y| {
        let (u, v) = equirect_from_dir(&SphericalDirection::normalize(cam.world_ray(x, y)), w, h);
        let px = (u.round() as usize) % w;
        let py = (v.round().max(0.0) as usize).min(h - 1);
        mask.get(px, py)
    })
}

/// Zeroes the bottom `ceil(band_fraction * height)` rows.
pub fn apply_bottom_band(mask: &LossMask, band_fraction: f64) -> Result<LossMask, CaptureError> {
    if !(0.0..1.0).contains(&band_fraction) {
        return Err(CaptureError::BadParam(format!("band fraction {band_fraction} outside [0, 1)")));
    }
    let rows = bottom_band_rows(mask.height, band_fraction);
    let mut out = mask.clone();
    let start = (mask.height - rows) * mask.width;
    out.bits[start..].iter_mut().for_each(|b| *b = false);
    Ok(out)
}

/// Frame window of one clip inside a longer video.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipSkeleton {
    pub index: usize,
    pub start: usize,
    pub len: usize,
}

impl ClipSkeleton {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn id(&self) -> String {
        clip_id(self.index)
    }
}

pub fn clip_id(index: usize) -> String {
    format!("clip_{index:04}")
}

/// Fully contained windows `[i * stride, i * stride + clip_len)`; a trailing
/// partial window is dropped.
pub fn chunk_video<T>(frames: &[T], clip_len: usize, stride: usize) -> Result<Vec<ClipSkeleton>, CaptureError> {
    chunk_count(frames.len(), clip_len, stride)
}

pub fn chunk_count(n_frames: usize, clip_len: usize, stride: usize) -> Result<Vec<ClipSkeleton>, CaptureError> {
    if clip_len == 0 || stride == 0 {
        return Err(CaptureError::BadParam("clip_len and stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + clip_len <= n_frames {
        out.push(ClipSkeleton { index: out.len(), start, len: clip_len });
        start += stride;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CaptureClip {
    pub id: String,
    pub frames: Vec<EquirectFrame>,
    pub fps: f64,
    pub caption: String,
    pub merged_mask: LossMask,
}

impl CaptureClip {
    pub fn new(id: impl Into<String>, frames: Vec<EquirectFrame>, fps: f64) -> Result<Self, CaptureError> {
        let first = frames.first().ok_or(CaptureError::FrameMismatch)?;
        let (w, h) = (first.width(), first.height());
        if frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(CaptureError::FrameMismatch);
        }
        Ok(Self { id: id.into(), frames, fps, caption: String::new(), merged_mask: LossMask::ones(w, h) })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        clip_duration_secs(self.frames.len(), self.fps)
    }
}

pub fn clip_duration_secs(n_frames: usize, fps: f64) -> f64 {
    n_frames as f64 / fps
}

/// Captions keyed by clip id, as stored in `captions.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaptionSource(pub BTreeMap<String, String>);

impl CaptionSource {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CaptureError::Json { path: path.into(), source })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CaptureError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("string map serializes");
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn lookup(&self, clip_id: &str) -> Result<String, CaptureError> {
        let raw = self.0.get(clip_id).ok_or_else(|| CaptureError::MissingCaption(clip_id.into()))?;
        let caption = raw.trim();
        if caption.is_empty() {
            return Err(CaptureError::EmptyCaption(clip_id.into()));
        }
        Ok(caption.to_string())
    }
}

pub fn attach_caption(mut clip: CaptureClip, captions: &CaptionSource) -> Result<CaptureClip, CaptureError> {
    clip.caption = captions.lookup(&clip.id)?;
    Ok(clip)
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.png")
}

pub fn mask_file_name(index: usize) -> String {
    format!("mask_{index:06}.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clip_len: usize,
    pub stride: usize,
    pub fps: f64,
    pub bottom_band_fraction: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { clip_len: 128, stride: 128, fps: 12.0, bottom_band_fraction: 0.125 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub start: usize,
    pub len: usize,
    pub fps: f64,
    pub duration_s: f64,
    pub caption: String,
    /// Merged loss mask of the clip, relative to the video directory.
    pub mask_file: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    /// Always `"1=include"`; recorded so readers never guess.
    pub mask_polarity: String,
    pub frame_count: usize,
    pub clips: Vec<ManifestEntry>,
}

impl ClipManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CaptureError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| CaptureError::Json { path: path.into(), source })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CaptureError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Frame files of a video directory, in index order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, CaptureError> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_file_name(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(p);
    }
    let stray = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.starts_with("frame_") && name.ends_with(".png")
        })
        .count();
    if stray != frames.len() {
        return Err(CaptureError::Layout(format!(
            "{} has {stray} frame files but only {} are contiguous from frame_000000.png",
            dir.display(),
            frames.len()
        )));
    }
    Ok(frames)
}

/// Scans a video directory, merges per-frame masks per clip, applies the
/// bottom band, attaches captions and writes merged masks plus
/// `manifest.json`. Frames are not held in memory.
pub fn scan_video_dir(dir: &Path, config: &ClipConfig) -> Result<ClipManifest, CaptureError> {
    let frames = list_frames(dir)?;
    let captions = CaptionSource::load(dir.join("captions.json"))?;
    let first = frames
        .first()
        .ok_or_else(|| CaptureError::Layout(format!("no frames in {}", dir.display())))?;
    let probe = RgbImage::load_png(first)?;
    let (w, h) = (probe.width(), probe.height());
    let clip_len = config.clip_len.min(frames.len());
    let windows = chunk_count(frames.len(), clip_len, config.stride)?;
    let mut clips = Vec::with_capacity(windows.len());
    for win in windows {
        let id = win.id();
        let caption = captions.lookup(&id)?;
        let mut masks = Vec::with_capacity(win.len);
        for i in win.range() {
            let p = dir.join(mask_file_name(i));
            let m = if p.exists() { LossMask::load_png(&p)? } else { LossMask::ones(w, h) };
            if (m.width, m.height) != (w, h) {
                return Err(CaptureError::MaskMismatch(w, h, m.width, m.height));
            }
            masks.push(m);
        }
        let merged = apply_bottom_band(&merge_masks(&masks)?, config.bottom_band_fraction)?;
        let mask_file = format!("merged_{id}.png");
        merged.save_png(dir.join(&mask_file))?;
        clips.push(ManifestEntry {
            id,
            start: win.start,
            len: win.len,
            fps: config.fps,
            duration_s: clip_duration_secs(win.len, config.fps),
            caption,
            mask_file,
            width: w,
            height: h,
        });
    }
    let manifest = ClipManifest { mask_polarity: "1=include".into(), frame_count: frames.len(), clips };
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads the frames and merged mask of one manifest entry.
pub fn load_clip(dir: &Path, entry: &ManifestEntry) -> Result<CaptureClip, CaptureError> {
    let frames = (entry.start..entry.start + entry.len)
        .map(|i| Ok(EquirectFrame::new(RgbImage::load_png(dir.join(frame_file_name(i)))?)?))
        .collect::<Result<Vec<_>, CaptureError>>()?;
    let mut clip = CaptureClip::new(entry.id.clone(), frames, entry.fps)?;
    clip.caption = entry.caption.clone();
    clip.merged_mask = LossMask::load_png(dir.join(&entry.mask_file))?;
    Ok(clip)
}
