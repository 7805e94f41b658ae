// Scores multi-view consistency of rendered panoramas and aggregates
// COLMAP-style registration metrics over a small batch of scenes.

use panoworld::eval_metrics::{reprojection_consistency, MetricsReport, SceneEvalRecord, DEFAULT_FAILURE_THRESHOLD};
use panoworld::pano_geometry::EquirectFrame;
use panoworld::raster::RgbImage;
use panoworld::synthetic_world::{make_walk, render_equirect, SceneSpec, WalkParams};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let walk = make_walk(&spec, 4, 5, &WalkParams::default())?;
    let mut frames = walk.poses.iter().map(|p| render_equirect(&spec, p, 64)).collect::<Result<Vec<_>, _>>()?;
    let clean = reprojection_consistency(&frames, &walk.poses, &spec, 200, 0)?;
    println!("ground truth: mean error {:.4} over {} samples", clean.mean_abs_error, clean.samples);

    // A frame with its colors inverted is no longer consistent with the rest.
    let inverted = RgbImage::from_fn(frames[1].width(), frames[1].height(), |x, y| frames[1].image().get(x, y).map(|c| 1.0 - c));
    frames[1] = EquirectFrame::new(inverted)?;
    let broken = reprojection_consistency(&frames, &walk.poses, &spec, 200, 0)?;
    println!("one inverted frame: mean error {:.4}", broken.mean_abs_error);

    let records = vec![
        SceneEvalRecord::from_counts("room_a", 384, Some(384), DEFAULT_FAILURE_THRESHOLD, Some(27.1))?,
        SceneEvalRecord::from_counts("room_b", 384, Some(363), DEFAULT_FAILURE_THRESHOLD, Some(25.4))?,
        SceneEvalRecord::from_counts("room_c", 384, Some(12), DEFAULT_FAILURE_THRESHOLD, None)?,
    ];
    let report = MetricsReport::new(records)?;
    print!("{}", report.table());
    assert!(broken.mean_abs_error > clean.mean_abs_error);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
