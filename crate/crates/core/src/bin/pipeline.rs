use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use panoworld::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "pipeline", about = "Panoramic capture to Gaussian-splat scene pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// TOML config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic panoramic walk into capture/.
    Synthesize,
    /// Cut perspective crops from the captured frames.
    Crop,
    /// Write camera poses to sparse/ (ground truth or COLMAP).
    Pose,
    /// Optimize and export the Gaussian scene.
    Reconstruct,
    /// Aggregate metrics over scene workspaces (default: the configured one).
    Eval { workspaces: Vec<PathBuf> },
    /// Serve the workspace and its /scenes index over HTTP.
    Serve,
    /// Print the effective config as TOML.
    Config,
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(w) = cli.workspace {
        cfg.workspace = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let t = Instant::now();
    match cli.command {
        Cmd::Synthesize => {
            let s = pipeline::cmd_synthesize(&cfg, &cfg.scene()?)?;
            println!("{} frames at {} fps ({:.2} s), {} clip(s)", s.n_frames, s.fps, s.duration_s, s.clips);
        }
        Cmd::Crop => {
            let s = pipeline::cmd_crop(&cfg)?;
            println!("{} crops from {} frames", s.crops, s.frames);
        }
        Cmd::Pose => {
            let s = pipeline::cmd_pose(&cfg)?;
            match s.registered_images {
                Some(r) => println!("{r}/{} images registered, {} points", s.total_images, s.points),
                None => println!("no model reconstructed from {} images", s.total_images),
            }
        }
        Cmd::Reconstruct => {
            let r = pipeline::cmd_reconstruct(&cfg)?;
            println!(
                "{} gaussians, {} iterations, {} views; final loss {:.3e}",
                r.gaussians,
                r.iterations,
                r.views_used.len(),
                r.final_window_loss
            );
            for h in &r.heldout {
                match h.psnr_clean {
                    Some(c) => println!("  {}  {:.2} dB  (clean {:.2} dB)", h.name, h.psnr, c),
                    None => println!("  {}  {:.2} dB", h.name, h.psnr),
                }
            }
            if let Some(p) = r.psnr_heldout {
                println!("held-out PSNR {p:.2} dB");
            }
        }
        Cmd::Eval { workspaces } => {
            let list = if workspaces.is_empty() { vec![cfg.workspace.clone()] } else { workspaces };
            print!("{}", pipeline::cmd_eval(&cfg, &list)?.table());
        }
        Cmd::Serve => {
            println!("serving {} on http://{}/scenes", cfg.workspace.display(), cfg.serve_addr);
            pipeline::cmd_serve(&cfg)?;
        }
        Cmd::Config => print!("{}", cfg.to_toml()),
    }
    eprintln!("done in {:.1} s", t.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
