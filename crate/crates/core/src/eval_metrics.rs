//! Registration rates, reconstruction PSNR and multi-view color consistency.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture_prep::LossMask;
use crate::pano_geometry::{dir_from_equirect, equirect_from_dir, EquirectFrame, SphericalDirection};
use crate::raster::RgbImage;
use crate::synthetic_world::{Pose, SceneSpec};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("matching rate is undefined for failed scene {0}")]
    UndefinedForFailedScene(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("invalid record: {0}")]
    BadRecord(String),
    #[error("consistency: {0}")]
    NoSamples(String),
}

/// Reported in place of +inf for identical images.
pub const PSNR_SENTINEL_DB: f64 = 99.0;
/// A scene fails when its largest model registers fewer than this fraction
/// of the input images.
pub const DEFAULT_FAILURE_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEvalRecord {
    pub scene_id: String,
    pub total_images: usize,
    pub registered_images: usize,
    pub colmap_succeeded: bool,
    pub psnr_heldout: Option<f64>,
}

impl SceneEvalRecord {
    /// Builds a record from raw registration counts, applying the failure rule.
    pub fn from_counts(
        scene_id: impl Into<String>,
        total_images: usize,
        model_registered: Option<usize>,
        threshold: f64,
        psnr_heldout: Option<f64>,
    ) -> Result<Self, MetricsError> {
        let registered_images = model_registered.unwrap_or(0);
        let r = Self {
            scene_id: scene_id.into(),
            total_images,
            registered_images,
            colmap_succeeded: scene_succeeded(total_images, model_registered, threshold),
            psnr_heldout,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.registered_images > self.total_images {
            return Err(MetricsError::BadRecord(format!(
                "{}: {} registered of {}",
                self.scene_id, self.registered_images, self.total_images
            )));
        }
        Ok(())
    }
}

/// `None` for `model_registered` means no sparse model was produced.
pub fn scene_succeeded(total_images: usize, model_registered: Option<usize>, threshold: f64) -> bool {
    match model_registered {
        None => false,
        Some(r) => total_images > 0 && (r as f64) >= threshold * total_images as f64,
    }
}

pub fn matching_rate(record: &SceneEvalRecord) -> Result<f64, MetricsError> {
    record.validate()?;
    if !record.colmap_succeeded {
        return Err(MetricsError::UndefinedForFailedScene(record.scene_id.clone()));
    }
    if record.total_images == 0 {
        return Err(MetricsError::BadRecord(format!("{}: no images", record.scene_id)));
    }
    Ok(record.registered_images as f64 / record.total_images as f64)
}

pub fn failure_rate(records: &[SceneEvalRecord]) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    Ok(records.iter().filter(|r| !r.colmap_succeeded).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub scenes: usize,
    pub failed: usize,
    pub failure_rate: f64,
    /// Mean of per-scene matching rates over succeeded scenes.
    pub matching_rate_scene_mean: Option<f64>,
    /// Registered over total images, pooled across succeeded scenes.
    pub matching_rate_pooled: Option<f64>,
    pub registered_images: usize,
    pub total_images: usize,
    pub psnr_heldout_mean: Option<f64>,
}

pub fn summarize(records: &[SceneEvalRecord]) -> Result<BatchSummary, MetricsError> {
    let fr = failure_rate(records)?;
    let ok: Vec<&SceneEvalRecord> = records.iter().filter(|r| r.colmap_succeeded).collect();
    let rates = ok.iter().map(|r| matching_rate(r)).collect::<Result<Vec<_>, _>>()?;
    let reg: usize = ok.iter().map(|r| r.registered_images).sum();
    let tot: usize = ok.iter().map(|r| r.total_images).sum();
    let psnrs: Vec<f64> = records.iter().filter_map(|r| r.psnr_heldout).collect();
    Ok(BatchSummary {
        scenes: records.len(),
        failed: records.len() - ok.len(),
        failure_rate: fr,
        matching_rate_scene_mean: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        matching_rate_pooled: (tot > 0).then(|| reg as f64 / tot as f64),
        registered_images: records.iter().map(|r| r.registered_images).sum(),
        total_images: records.iter().map(|r| r.total_images).sum(),
        psnr_heldout_mean: (!psnrs.is_empty()).then(|| psnrs.iter().sum::<f64>() / psnrs.len() as f64),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<SceneEvalRecord>,
    pub summary: BatchSummary,
}

impl MetricsReport {
    pub fn new(records: Vec<SceneEvalRecord>) -> Result<Self, MetricsError> {
        let summary = summarize(&records)?;
        Ok(Self { records, summary })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Plain-text table, one row per scene plus a summary row.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let db = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut s = String::new();
        writeln!(s, "{:<24} {:>10} {:>8} {:>9} {:>10}", "scene", "registered", "status", "MR", "PSNR(dB)").unwrap();
        for r in &self.records {
            let mr = matching_rate(r).ok();
            let status = if r.colmap_succeeded { "ok" } else { "FAILED" };
            writeln!(
                s,
                "{:<24} {:>10} {:>8} {:>9} {:>10}",
                r.scene_id,
                format!("{}/{}", r.registered_images, r.total_images),
                status,
                pct(mr),
                db(r.psnr_heldout)
            )
            .unwrap();
        }
        let m = &self.summary;
        writeln!(
            s,
            "FR {} ({}/{})  MR scene-mean {}  MR pooled {}  PSNR mean {}",
            pct(Some(m.failure_rate)),
            m.failed,
            m.scenes,
            pct(m.matching_rate_scene_mean),
            pct(m.matching_rate_pooled),
            db(m.psnr_heldout_mean)
        )
        .unwrap();
        s
    }
}

fn check_sizes(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(MetricsError::SizeMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_SENTINEL_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL_DB)
    }
}

/// `10 log10(1 / MSE)` for images in [0, 1].
pub fn psnr(render: &RgbImage, reference: &RgbImage) -> Result<f64, MetricsError> {
    check_sizes(render, reference)?;
    let n = render.data().len();
    let sse: f64 = render.data().iter().zip(reference.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(psnr_from_mse(sse / n as f64))
}

/// PSNR over the pixels a mask includes.
pub fn psnr_masked(render: &RgbImage, reference: &RgbImage, mask: &LossMask) -> Result<f64, MetricsError> {
    check_sizes(render, reference)?;
    if (mask.width(), mask.height()) != (render.width(), render.height()) {
        return Err(MetricsError::SizeMismatch(mask.width(), mask.height(), render.width(), render.height()));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for (i, &keep) in mask.bits().iter().enumerate() {
        if keep {
            for k in 0..3 {
                sse += (render.data()[3 * i + k] as f64 - reference.data()[3 * i + k] as f64).powi(2);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(MetricsError::NoSamples("mask excludes every pixel".into()));
    }
    Ok(psnr_from_mse(sse / n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub mean_abs_error: f64,
    pub samples: usize,
    pub attempts: usize,
}

/// Samples surface points seen in one frame, reprojects them into another
/// frame that also sees them, and averages the absolute color difference.
///
/// Samples near texture edges or whose bilinear footprint straddles two
/// surfaces are rejected, so renders of the ground truth score near zero.
pub fn reprojection_consistency(
    frames: &[EquirectFrame],
    poses: &[Pose],
    scene: &SceneSpec,
    n_points: usize,
    seed: u64,
) -> Result<ConsistencyReport, MetricsError> {
    if n_points == 0 {
        return Err(MetricsError::NoSamples("zero sample points requested".into()));
    }
    if frames.len() < 2 || frames.len() != poses.len() {
        return Err(MetricsError::NoSamples(format!("need >= 2 frames with poses, got {} / {}", frames.len(), poses.len())));
    }
    let max_attempts = 200 * n_points;
    // Draw candidate (source, target, pixel) triples up front so the
    // parallel evaluation stays deterministic.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<(usize, usize, usize, usize)> = (0..max_attempts)
        .map(|_| {
            let i = rng.random_range(0..frames.len());
            let mut j = rng.random_range(0..frames.len() - 1);
            if j >= i {
                j += 1;
            }
            let f = &frames[i];
            (i, j, rng.random_range(0..f.width()), rng.random_range(0..f.height()))
        })
        .collect();
    let mut errors = Vec::with_capacity(n_points);
    let mut attempts = 0;
    for chunk in candidates.chunks(4 * n_points) {
        let results: Vec<Option<f64>> =
            chunk.par_iter().map(|&(i, j, x, y)| sample_error(frames, poses, scene, i, j, x, y)).collect();
        for r in results {
            attempts += 1;
            if let Some(e) = r {
                errors.push(e);
                if errors.len() == n_points {
                    break;
                }
            }
        }
        if errors.len() == n_points {
            break;
        }
    }
    if errors.is_empty() {
        return Err(MetricsError::NoSamples(format!("no mutually visible points in {attempts} attempts")));
    }
    Ok(ConsistencyReport {
        mean_abs_error: errors.iter().sum::<f64>() / errors.len() as f64,
        samples: errors.len(),
        attempts,
    })
}

fn sample_error(
    frames: &[EquirectFrame],
    poses: &[Pose],
    scene: &SceneSpec,
    i: usize,
    j: usize,
    x: usize,
    y: usize,
) -> Option<f64> {
    let (w, h) = (frames[i].width(), frames[i].height());
    let d = poses[i].rotation() * dir_from_equirect(x as f64, y as f64, w, h).ok()?.vector();
    let hit = scene.cast(&poses[i].position_vec(), &d)?;
    let oj = poses[j].position_vec();
    let to = hit.point - oj;
    let dist = to.norm();
    let seen = scene.cast(&oj, &to)?;
    if (seen.point - hit.point).norm() > 1e-6 * dist.max(1.0) {
        return None;
    }
    let (wj, hj) = (frames[j].width(), frames[j].height());
    if hit.edge_distance < 4.0 * dist.max(hit.t) * std::f64::consts::PI / hj.min(h) as f64 {
        return None;
    }
    let local = poses[j].rotation().inverse() * to;
    let (u, v) = equirect_from_dir(&SphericalDirection::normalize(local), wj, hj);
    let same_surface = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)].iter().all(|(du, dv)| {
        let (tu, tv) = (u.floor() + du, (v.floor() + dv).clamp(0.0, hj as f64 - 1.0));
        let Ok(dir) = dir_from_equirect(tu, tv, wj, hj) else { return false };
        scene
            .cast(&oj, &(poses[j].rotation() * dir.vector()))
            .is_some_and(|n| n.surface == hit.surface && n.normal.dot(&hit.normal) > 0.9)
    });
    if !same_surface {
        return None;
    }
    let a = frames[i].image().get(x, y);
    let b = frames[j].sample(u, v);
    Some((0..3).map(|k| (a[k] as f64 - b[k] as f64).abs()).sum::<f64>() / 3.0)
}
