// Writes a short synthetic capture with photographer masks, then chunks it
// into clips with merged loss masks and a manifest.

use panoworld::capture_prep::{frame_file_name, mask_file_name, scan_video_dir, CaptionSource, ClipConfig};
use panoworld::synthetic_world::{composite_photographer, make_walk, render_equirect, BlobSpec, SceneSpec, WalkParams};

fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec::default();
    let walk = make_walk(&spec, 8, 1, &WalkParams::default())?;
    let dir = tempfile::tempdir()?;
    for (i, pose) in walk.poses.iter().enumerate() {
        let frame = render_equirect(&spec, pose, 32)?;
        let (frame, mask) = composite_photographer(&frame, pose, &BlobSpec::default(), &spec);
        frame.image().save_png(dir.path().join(frame_file_name(i)))?;
        mask.save_png(dir.path().join(mask_file_name(i)))?;
        println!("frame {i}: {} of {} pixels kept", mask.count_included(), mask.bits().len());
    }
    let captions = CaptionSource(
        ["clip_0000", "clip_0001"].iter().map(|id| (id.to_string(), spec.caption.clone())).collect(),
    );
    captions.save(dir.path().join("captions.json"))?;

    let config = ClipConfig { clip_len: 4, stride: 4, fps: 12.0, bottom_band_fraction: 0.125 };
    let manifest = scan_video_dir(dir.path(), &config)?;
    for clip in &manifest.clips {
        println!("{}: frames {}..{} ({:.3} s) \"{}\"", clip.id, clip.start, clip.start + clip.len, clip.duration_s, clip.caption);
    }
    assert_eq!(manifest.clips.len(), 2);
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
