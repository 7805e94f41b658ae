// Runs every pipeline stage on a small workspace: synthesize, crop, pose,
// reconstruct, eval, then answers one `/scenes` request.

use panoworld::pipeline::{
    cmd_crop, cmd_eval, cmd_pose, cmd_reconstruct, cmd_synthesize, handle_request, PipelineConfig,
};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = PipelineConfig::from_toml(
        r#"
        n_frames = 8
        equirect_height = 64
        crop_resolution = 32
        subsample_k = 16
        heldout_views = 4

        [reconstruction]
        num_gaussians = 1500
        iterations = 200
        "#,
    )?;
    cfg.workspace = dir.path().to_path_buf();

    let s = cmd_synthesize(&cfg, &cfg.scene()?)?;
    println!("synthesize: {} frames, {:.2} s", s.n_frames, s.duration_s);
    let c = cmd_crop(&cfg)?;
    println!("crop: {} images", c.crops);
    let p = cmd_pose(&cfg)?;
    println!("pose: {:?}/{} registered, {} points", p.registered_images, p.total_images, p.points);
    let r = cmd_reconstruct(&cfg)?;
    println!("reconstruct: {} gaussians, held-out PSNR {:.2} dB", r.gaussians, r.psnr_heldout.unwrap_or(f64::NAN));
    let report = cmd_eval(&cfg, &[dir.path().to_path_buf()])?;
    print!("{}", report.table());

    let reply = handle_request(&cfg.workspace(), "/scenes");
    println!("GET /scenes -> {} {}", reply.status, String::from_utf8_lossy(&reply.body));
    assert_eq!(reply.status, 200);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
