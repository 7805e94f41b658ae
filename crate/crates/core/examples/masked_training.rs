// Trains the small latent denoiser on a mix of masked clips and single
// panoramas and prints the loss curve.

use panoworld::capture_prep::LossMask;
use panoworld::masked_diffusion::{encode_frames, train, ConditionVocab, ImageItem, TrainConfig, VideoItem};
use panoworld::synthetic_world::{make_walk, render_equirect, SceneSpec, WalkParams};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let cfg = TrainConfig { steps: 40, batch_size: 4, ..TrainConfig::default() };
    let walk = make_walk(&spec, cfg.latent_frames, 2, &WalkParams::default())?;
    let frames = walk.poses.iter().map(|p| render_equirect(&spec, p, 32)).collect::<Result<Vec<_>, _>>()?;
    let condition = ConditionVocab::default().embed_caption(&spec.caption);

    let video = encode_frames(&frames, cfg.latent_height, cfg.latent_width)?;
    // Drop the bottom rows, where the photographer would be.
    let mask = LossMask::from_fn(cfg.latent_width, cfg.latent_height, |_, y| y + 2 < cfg.latent_height);
    let videos = vec![VideoItem { latent: video, mask, condition: condition.clone() }];
    let image = encode_frames(&frames[..1], cfg.latent_height, cfg.latent_width)?;
    let images = vec![ImageItem { latent: image, condition }];

    let report = train(&cfg, &images, &videos)?;
    for (step, loss) in report.losses.iter().step_by(10) {
        println!("step {step:3}  loss {loss:.4}");
    }
    let first = report.losses.first().map(|l| l.1).unwrap_or_default();
    let last = report.losses.last().map(|l| l.1).unwrap_or_default();
    println!("{} parameters, loss {first:.4} -> {last:.4}", report.denoiser.params.len());
    assert!(last.is_finite());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
