// Renders one panorama of the checker room and cuts a seeded crop plan out of it.
//
// ```text
// cargo run --example equirect_crops
// ```

use panoworld::pano_geometry::{dir_from_equirect, equirect_from_dir, make_crop_plan, render_crop, CropParams};
use panoworld::synthetic_world::{render_equirect, Pose, SceneSpec};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let pose = Pose { position: [0.0, spec.walk_area.eye_height, 0.0], yaw_deg: 30.0 };
    let frame = render_equirect(&spec, &pose, 64)?;
    println!("panorama {}x{}", frame.width(), frame.height());

    let d = dir_from_equirect(10.0, 20.0, frame.width(), frame.height())?;
    let (u, v) = equirect_from_dir(&d, frame.width(), frame.height());
    println!("pixel (10, 20) -> {:?} -> ({u:.3}, {v:.3})", d.vector().as_slice());

    let params = CropParams { crops_per_frame: 3, fov_deg: 120.0, resolution: 48, pitch_range_deg: (-20.0, 20.0) };
    let plan = make_crop_plan(1, &params, 7)?;
    let out = tempfile::tempdir()?;
    for (i, entry) in plan.entries.iter().enumerate() {
        let crop = render_crop(&frame, &entry.camera);
        let path = out.path().join(format!("crop_{i}.png"));
        crop.save_png(&path)?;
        println!("crop {i}: {}x{} -> {}", crop.width(), crop.height(), path.display());
    }
    assert_eq!(plan.len(), 3);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
