// Fits Gaussians to a handful of posed renders of the checker room,
// exports the 32-byte-per-splat scene and reads it back.

use nalgebra::Vector3;
use panoworld::eval_metrics::psnr;
use panoworld::pano_geometry::{yaw_pitch_rotation, PerspectiveCamera};
use panoworld::splat_recon::{
    export_scene, import_scene, rasterize, reconstruct, splat_camera_from_pano, splat_world_from_pano, Intrinsics,
    PosedImage, ReconConfig,
};
use panoworld::synthetic_world::{render_perspective, SceneSpec};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let size = 32;
    let mut views = Vec::new();
    let mut points = Vec::new();
    for i in 0..5 {
        let q = yaw_pitch_rotation(-30.0 + 15.0 * i as f64, 0.0);
        let o = Vector3::new(0.05 * i as f64, 1.5, 0.0);
        let pc = PerspectiveCamera::new(90.0, size, size, q, o)?;
        let img = render_perspective(&spec, &pc);
        for y in (0..size).step_by(4) {
            for x in (0..size).step_by(4) {
                if let Some(hit) = spec.cast(&o, &pc.world_ray(x, y)) {
                    let c = img.get(x, y);
                    points.push((splat_world_from_pano(&hit.point), [c[0] as f64, c[1] as f64, c[2] as f64]));
                }
            }
        }
        let cam = splat_camera_from_pano(Intrinsics::centered(pc.focal(), size, size), &q, &o)?;
        views.push(PosedImage::new(format!("view_{i}"), img, cam)?);
    }

    let cfg = ReconConfig { num_gaussians: 800, iterations: 300, ..ReconConfig::default() };
    let rec = reconstruct(&views, &points, 1.0, &cfg)?;
    let render = rasterize(&rec.scene, &views[2].camera, cfg.background).to_image();
    println!(
        "{} gaussians, loss {:.5} -> {:.5}, view_2 PSNR {:.2} dB",
        rec.scene.len(),
        rec.losses[0],
        rec.losses[rec.losses.len() - 1],
        psnr(&render, &views[2].image)?
    );

    let dir = tempfile::tempdir()?;
    let bin = dir.path().join("scene.bin");
    export_scene(&rec.scene, &bin)?;
    let back = import_scene(&bin)?;
    println!("exported {} bytes, re-imported {} gaussians", std::fs::metadata(&bin)?.len(), back.len());
    assert_eq!(back.len(), rec.scene.len());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
