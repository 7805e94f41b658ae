//! Compact binary scene export: 32 bytes per Gaussian plus a JSON sidecar.

use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{io_err, logit, Gaussian3D, GaussianScene, SplatError};

pub const BYTES_PER_GAUSSIAN: usize = 32;
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub count: usize,
    pub scene_scale: f64,
    pub version: u32,
}

fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn quat_to_u8(v: f64) -> u8 {
    (v * 128.0 + 128.0).round().clamp(0.0, 255.0) as u8
}

fn quat_from_u8(b: u8) -> f64 {
    (b as f64 - 128.0) / 128.0
}

/// Serializes every Gaussian as position (3×f32), linear scale (3×f32),
/// RGBA (4×u8, alpha = opacity) and a normalized quaternion `wxyz` (4×u8).
pub fn encode_scene(scene: &GaussianScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(scene.len() * BYTES_PER_GAUSSIAN);
    for g in &scene.gaussians {
        for v in g.position.iter().chain(g.scales().iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        for c in g.color {
            out.push(unit_to_u8(c));
        }
        out.push(unit_to_u8(g.opacity()));
        let q = g.unit_rotation();
        for v in [q.w, q.i, q.j, q.k] {
            out.push(quat_to_u8(v));
        }
    }
    out
}

pub fn decode_scene(bytes: &[u8], sidecar: &SceneSidecar) -> Result<GaussianScene, SplatError> {
    if sidecar.version != SCENE_FORMAT_VERSION {
        return Err(SplatError::BadInput(format!("scene format version {}", sidecar.version)));
    }
    if bytes.len() != sidecar.count * BYTES_PER_GAUSSIAN {
        return Err(SplatError::BadInput(format!(
            "payload has {} bytes, expected {} for {} gaussians",
            bytes.len(),
            sidecar.count * BYTES_PER_GAUSSIAN,
            sidecar.count
        )));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let gaussians = bytes
        .chunks_exact(BYTES_PER_GAUSSIAN)
        .map(|c| {
            let position = Vector3::new(f(&c[0..]), f(&c[4..]), f(&c[8..]));
            let scale = Vector3::new(f(&c[12..]), f(&c[16..]), f(&c[20..]));
            let alpha = (c[27] as f64 / 255.0).clamp(1e-6, 1.0 - 1e-6);
            Gaussian3D {
                position,
                log_scale: scale.map(f64::ln),
                rotation: Quaternion::new(quat_from_u8(c[28]), quat_from_u8(c[29]), quat_from_u8(c[30]), quat_from_u8(c[31])),
                opacity_logit: logit(alpha),
                color: [c[24] as f64 / 255.0, c[25] as f64 / 255.0, c[26] as f64 / 255.0],
            }
        })
        .collect();
    Ok(GaussianScene { gaussians, scene_scale: sidecar.scene_scale })
}

/// Writes `<stem>.bin` and `<stem>.json` next to each other.
pub fn export_scene(scene: &GaussianScene, bin_path: &Path) -> Result<SceneSidecar, SplatError> {
    let sidecar = SceneSidecar { count: scene.len(), scene_scale: scene.scene_scale, version: SCENE_FORMAT_VERSION };
    std::fs::write(bin_path, encode_scene(scene)).map_err(io_err(bin_path))?;
    let json_path = bin_path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar).expect("plain struct");
    std::fs::write(&json_path, text).map_err(io_err(&json_path))?;
    Ok(sidecar)
}

pub fn import_scene(bin_path: &Path) -> Result<GaussianScene, SplatError> {
    let json_path = bin_path.with_extension("json");
    let text = std::fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let sidecar: SceneSidecar = serde_json::from_str(&text)
        .map_err(|e| SplatError::Parse { file: json_path.display().to_string(), line: e.line(), msg: e.to_string() })?;
    let bytes = std::fs::read(bin_path).map_err(io_err(bin_path))?;
    decode_scene(&bytes, &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> GaussianScene {
        let mut a = Gaussian3D::isotropic(Vector3::new(1.0, -2.0, 0.5), 0.25, 0.5, [1.0, 0.0, 0.5]);
        a.rotation = Quaternion::new(0.0, 1.0, 0.0, 0.0);
        let b = Gaussian3D::isotropic(Vector3::new(0.0, 0.0, 3.0), 0.125, 0.8, [0.2, 0.4, 0.6]);
        GaussianScene::new(vec![a, b], 0.5).unwrap()
    }

    #[test]
    fn hand_encoded_bytes() {
        let bytes = encode_scene(&fixture());
        assert_eq!(bytes.len(), 64);
        assert_eq!(&bytes[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[4..8], &(-2.0f32).to_le_bytes());
        assert_eq!(&bytes[12..16], &0.25f32.to_le_bytes());
        assert_eq!(&bytes[24..28], &[255, 0, 128, 128]);
        assert_eq!(&bytes[28..32], &[128, 255, 128, 128]);
        assert_eq!(&bytes[60..64], &[255, 128, 128, 128]);
    }

    #[test]
    fn decode_encode_is_byte_exact() {
        let bytes = encode_scene(&fixture());
        let side = SceneSidecar { count: 2, scene_scale: 0.5, version: SCENE_FORMAT_VERSION };
        let back = decode_scene(&bytes, &side).unwrap();
        assert_eq!(encode_scene(&back), bytes);
        assert!(decode_scene(&bytes[..63], &side).is_err());
        assert!(decode_scene(&bytes, &SceneSidecar { version: 9, ..side }).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bin");
        let side = export_scene(&fixture(), &path).unwrap();
        assert_eq!(side.count, 2);
        let back = import_scene(&path).unwrap();
        assert_eq!(back.scene_scale, 0.5);
        assert_eq!(encode_scene(&back), encode_scene(&fixture()));
    }
}
