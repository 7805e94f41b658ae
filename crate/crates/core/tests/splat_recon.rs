use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use panoworld::pano_geometry::{yaw_pitch_rotation, PerspectiveCamera};
use panoworld::raster::RgbImage;
use panoworld::splat_recon::*;
use panoworld::synthetic_world::{render_perspective, SceneSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camera(w: usize, h: usize, focal: f64) -> SplatCamera {
    SplatCamera::new(Intrinsics::centered(focal, w, h), Matrix3::identity(), Vector3::zeros()).unwrap()
}

fn random_gaussian(rng: &mut ChaCha8Rng, spread: f64) -> Gaussian3D {
    let z = rng.random_range(1.5..3.0);
    Gaussian3D {
        position: Vector3::new(rng.random_range(-spread..spread) * z, rng.random_range(-spread..spread) * z, z),
        log_scale: Vector3::new(rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6)),
        rotation: Quaternion::new(
            rng.random_range(0.5..1.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        ),
        opacity_logit: logit(rng.random_range(0.3..0.75)),
        color: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
    }
}

fn random_scene(seed: u64, n: usize) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GaussianScene::new((0..n).map(|_| random_gaussian(&mut rng, 0.3)).collect(), 1.0).unwrap()
}

/// Compositing straight from the definition: every Gaussian at every pixel,
/// no tiles and no bounding boxes.
fn brute_force(scene: &GaussianScene, cam: &SplatCamera, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>) {
    let mut visible: Vec<Projected> =
        scene.gaussians.iter().filter_map(|g| project_gaussian(g, cam).visible().cloned()).collect();
    visible.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    let (w, h) = (cam.width(), cam.height());
    let mut color = vec![0.0; 3 * w * h];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut c = [0.0; 3];
            let mut t = 1.0;
            for p in &visible {
                let dx = px - p.mean[0];
                let dy = py - p.mean[1];
                let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
                let a = (p.opacity * (-0.5 * q).exp()).min(0.99);
                if a < 1.0 / 255.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += p.color[k] * a * t;
                }
                t *= 1.0 - a;
            }
            for k in 0..3 {
                color[3 * (y * w + x) + k] = c[k] + t * bg[k];
            }
            alpha[y * w + x] = 1.0 - t;
        }
    }
    (color, alpha)
}

#[test]
fn three_gaussians_match_brute_force_exactly() {
    for seed in 0..20 {
        let mut scene = random_scene(seed, 3);
        // Force heavy overlap near the image center.
        for (i, g) in scene.gaussians.iter_mut().enumerate() {
            g.position.x = 0.05 * i as f64;
            g.position.y = -0.03 * i as f64;
            g.opacity_logit = logit(0.6 + 0.15 * i as f64);
        }
        let cam = camera(40, 32, 30.0);
        let bg = [0.1, 0.0, 0.3];
        let r = rasterize(&scene, &cam, bg);
        let (color, alpha) = brute_force(&scene, &cam, bg);
        assert_eq!(r.color, color, "seed {seed}");
        assert_eq!(r.alpha, alpha, "seed {seed}");
    }
}

#[test]
fn large_scene_matches_brute_force_across_tiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let gaussians = (0..60).map(|_| random_gaussian(&mut rng, 0.8)).collect();
    let scene = GaussianScene::new(gaussians, 1.0).unwrap();
    let cam = camera(53, 37, 25.0);
    let r = rasterize(&scene, &cam, [0.0; 3]);
    let (color, _) = brute_force(&scene, &cam, [0.0; 3]);
    assert_eq!(r.color, color);
}

fn weighted_sum(scene: &GaussianScene, cam: &SplatCamera, w: &[f64]) -> f64 {
    rasterize(scene, cam, [0.2, 0.1, 0.0]).color.iter().zip(w).map(|(c, w)| c * w).sum()
}

fn param_mut(g: &mut Gaussian3D, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3..=5 => &mut g.log_scale[k - 3],
        6 => &mut g.rotation.w,
        7 => &mut g.rotation.i,
        8 => &mut g.rotation.j,
        9 => &mut g.rotation.k,
        10 => &mut g.opacity_logit,
        _ => &mut g.color[k - 11],
    }
}

fn grad_of(g: &GaussianGrad, k: usize) -> f64 {
    match k {
        0..=2 => g.position[k],
        3..=5 => g.log_scale[k - 3],
        6..=9 => g.rotation[k - 6],
        10 => g.opacity_logit,
        _ => g.color[k - 11],
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let mut scene = random_scene(100 + seed, 5);
        let cam = camera(16, 16, 14.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = rasterize_backward(&scene, &cam, [0.2, 0.1, 0.0], &w);
        let scale = grads.iter().flat_map(|g| (0..14).map(move |k| grad_of(g, k).abs())).fold(0.0, f64::max);
        let h = 1e-4;
        for i in 0..scene.len() {
            for k in 0..14 {
                let orig = *param_mut(&mut scene.gaussians[i], k);
                *param_mut(&mut scene.gaussians[i], k) = orig + h;
                let lp = weighted_sum(&scene, &cam, &w);
                *param_mut(&mut scene.gaussians[i], k) = orig - h;
                let lm = weighted_sum(&scene, &cam, &w);
                *param_mut(&mut scene.gaussians[i], k) = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let analytic = grad_of(&grads[i], k);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6 * scale);
                worst = worst.max(err);
                assert!(err < 1e-2, "seed {seed} gaussian {i} param {k}: analytic {analytic} numeric {numeric}");
            }
        }
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn directional_derivative_matches_forward() {
    for seed in 0..8 {
        let scene = random_scene(200 + seed, 5);
        let cam = camera(16, 16, 14.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..16 * 16 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = rasterize_backward(&scene, &cam, [0.2, 0.1, 0.0], &w);
        let delta: Vec<[f64; 14]> =
            (0..scene.len()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let predicted: f64 =
            grads.iter().zip(&delta).map(|(g, d)| (0..14).map(|k| grad_of(g, k) * d[k]).sum::<f64>()).sum();
        let h = 1e-5;
        let shifted = |s: f64| {
            let mut sc = scene.clone();
            for (g, d) in sc.gaussians.iter_mut().zip(&delta) {
                for k in 0..14 {
                    *param_mut(g, k) += s * d[k];
                }
            }
            weighted_sum(&sc, &cam, &w)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let err = (predicted - numeric).abs() / predicted.abs().max(numeric.abs());
        assert!(err < 1e-2, "seed {seed}: {predicted} vs {numeric}");
    }
}

#[test]
fn frustum_edge_gradients_match_finite_differences() {
    // Gaussians beyond the Jacobian clamp, partially overlapping the frame.
    let mut scene = random_scene(7, 3);
    scene.gaussians[0].position = Vector3::new(2.6, 0.2, 2.0);
    scene.gaussians[1].position = Vector3::new(-0.3, -2.7, 2.2);
    let cam = camera(16, 16, 14.0);
    let w = vec![1.0; 16 * 16 * 3];
    let grads = rasterize_backward(&scene, &cam, [0.0; 3], &w);
    let h = 1e-5;
    for i in 0..2 {
        for k in 0..6 {
            let orig = *param_mut(&mut scene.gaussians[i], k);
            *param_mut(&mut scene.gaussians[i], k) = orig + h;
            let lp = weighted_sum(&scene, &cam, &w);
            *param_mut(&mut scene.gaussians[i], k) = orig - h;
            let lm = weighted_sum(&scene, &cam, &w);
            *param_mut(&mut scene.gaussians[i], k) = orig;
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grad_of(&grads[i], k);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-2, "gaussian {i} param {k}: analytic {analytic} numeric {numeric}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_ignores_gaussian_order(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let scene = random_scene(seed, 12);
        let cam = camera(24, 20, 18.0);
        let mut shuffled = scene.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(shuffled.gaussians.as_mut_slice(), &mut rng);
        let a = rasterize(&scene, &cam, [0.0; 3]);
        let b = rasterize(&shuffled, &cam, [0.0; 3]);
        prop_assert_eq!(&a.color, &b.color);
        prop_assert!(a.alpha.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn pluecker_rays_satisfy_constraint(
        yaw in -180.0f64..180.0, pitch in -80.0f64..80.0,
        ox in -5.0f64..5.0, oy in -5.0f64..5.0, oz in -5.0f64..5.0,
        x in 0usize..32, y in 0usize..24,
    ) {
        let r = yaw_pitch_rotation(yaw, pitch).to_rotation_matrix().into_inner();
        let cam = SplatCamera::new(Intrinsics::centered(20.0, 32, 24), r, Vector3::new(ox, oy, oz)).unwrap();
        let ray = pluecker_from_pixel(&cam, x, y).unwrap();
        prop_assert!(ray.direction.dot(&ray.moment).abs() < 1e-9);
        prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
    }
}

fn room_views(n: usize, size: usize, seed: u64) -> (Vec<PosedImage>, Vec<(Vector3<f64>, [f64; 3])>) {
    let spec = SceneSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut views = Vec::new();
    let mut points = Vec::new();
    for i in 0..n {
        let q = yaw_pitch_rotation(rng.random_range(-40.0..40.0), rng.random_range(-15.0..15.0));
        let o = Vector3::new(0.1 * i as f64 - 0.2, 1.5, rng.random_range(-0.2..0.2));
        let pc = PerspectiveCamera::new(90.0, size, size, q, o).unwrap();
        let img = render_perspective(&spec, &pc);
        for _ in 0..200 {
            let (x, y) = (rng.random_range(0..size), rng.random_range(0..size));
            if let Some(hit) = spec.cast(&o, &pc.world_ray(x, y)) {
                let c = img.get(x, y);
                points.push((splat_world_from_pano(&hit.point), [c[0] as f64, c[1] as f64, c[2] as f64]));
            }
        }
        let cam = splat_camera_from_pano(Intrinsics::centered(pc.focal(), size, size), &q, &o).unwrap();
        views.push(PosedImage::new(format!("v{i}"), img, cam).unwrap());
    }
    (views, points)
}

#[test]
fn loss_windows_are_non_increasing() {
    let (views, points) = room_views(6, 40, 1);
    let cfg = ReconConfig { num_gaussians: 1500, iterations: 800, ..ReconConfig::default() };
    let rec = reconstruct(&views, &points, 1.0, &cfg).unwrap();
    let means: Vec<f64> = rec.losses.chunks(cfg.window).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "window means {means:?}");
    }
    assert!(means.last().unwrap() < &(0.5 * means[0]), "{means:?}");
    assert!(rec.scene.gaussians.iter().all(Gaussian3D::is_finite));
}

#[test]
fn optimizer_is_deterministic() {
    let (views, points) = room_views(3, 24, 2);
    let cfg = ReconConfig { num_gaussians: 300, iterations: 30, ..ReconConfig::default() };
    let a = reconstruct(&views, &points, 1.0, &cfg).unwrap();
    let b = reconstruct(&views, &points, 1.0, &cfg).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.scene, b.scene);
}

#[test]
fn optimum_is_stationary() {
    let scene = random_scene(5, 40);
    let views: Vec<PosedImage> = (0..3)
        .map(|i| {
            let r = UnitQuaternion::from_euler_angles(0.0, 0.05 * i as f64, 0.0).to_rotation_matrix().into_inner();
            let cam = SplatCamera::new(Intrinsics::centered(20.0, 24, 24), r, Vector3::new(0.1 * i as f64, 0.0, 0.0)).unwrap();
            let target = rasterize(&scene, &cam, [0.0; 3]).to_image();
            PosedImage::new(format!("{i}"), target, cam).unwrap()
        })
        .collect();
    let cfg = ReconConfig { iterations: 20, ..ReconConfig::default() };
    let rec = optimize(scene, &views, &cfg).unwrap();
    assert!(rec.losses[0] < 1e-12);
    for w in rec.losses.windows(2) {
        assert!((w[1] - w[0]).abs() < 1e-6, "{:?}", rec.losses);
    }
}

#[test]
fn solid_color_view_is_fit() {
    let color = [0.8, 0.35, 0.1];
    let img = RgbImage::filled(32, 32, color);
    let views: Vec<PosedImage> = (0..2)
        .map(|i| {
            let cam = SplatCamera::new(Intrinsics::centered(28.0, 32, 32), Matrix3::identity(), Vector3::new(0.01 * i as f64, 0.0, 0.0)).unwrap();
            PosedImage::new(format!("{i}"), img.clone(), cam).unwrap()
        })
        .collect();
    let cfg = ReconConfig { num_gaussians: 400, iterations: 600, init_scale_px: 3.0, ..ReconConfig::default() };
    let rec = reconstruct(&views, &[], 1.0, &cfg).unwrap();
    let out = rasterize(&rec.scene, &views[0].camera, cfg.background).to_image();
    let mae = out.mean_abs_diff(&img);
    assert!(mae <= 2.0 / 255.0, "mean abs error {mae}");
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

#[test]
fn colmap_fixture_positions_match_hand_inversion() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cameras.txt", "# Camera list\n1 PINHOLE 4 4 3 3 2 2\n");
    // Image 1: identity rotation, t = (1, 2, 3)  => center (-1, -2, -3).
    // Image 2: 90 deg about z, q = (cos45, 0, 0, sin45), t = (1, 0, 0).
    //   R_cw = [[0,-1,0],[1,0,0],[0,0,1]], center = -R_cwᵀ t = (0, 1, 0).
    let s = std::f64::consts::FRAC_1_SQRT_2;
    write(
        dir.path(),
        "images.txt",
        &format!(
            "# Image list with two lines of data per image:\n\
             1 1 0 0 0 1 2 3 1 a.png\n\
             \n\
             2 {s} 0 0 {s} 1 0 0 1 b.png\n\
             0.5 0.5 -1\n"
        ),
    );
    write(dir.path(), "points3D.txt", "# none\n");
    let model = SparseModel::read_dir(dir.path()).unwrap();
    let (r2, o1) = (model.images[1].world_from_camera().0, model.images[0].world_from_camera().1);
    let o2 = model.images[1].world_from_camera().1;
    assert!((o1 - Vector3::new(-1.0, -2.0, -3.0)).norm() < 1e-12);
    assert!((o2 - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    let expect_r2 = Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    assert!((r2 - expect_r2).abs().max() < 1e-12);

    // Normalized: bbox (-1..0, -2..1, -3..0), center (-0.5, -0.5, -1.5), extent 3.
    let poses = read_sparse_poses(dir.path()).unwrap();
    assert_eq!(poses.cameras.len(), 2);
    let n1 = poses.cameras[0].camera.position;
    let n2 = poses.cameras[1].camera.position;
    assert!((n1 - Vector3::new(-0.5, -1.5, -1.5) / 3.0).norm() < 1e-12);
    assert!((n2 - Vector3::new(0.5, 1.5, 1.5) / 3.0).norm() < 1e-12);

    let images = tempfile::tempdir().unwrap();
    for name in ["a.png", "b.png", "c.png"] {
        RgbImage::filled(4, 4, [0.5; 3]).save_png(images.path().join(name)).unwrap();
    }
    let ingested = ingest_colmap_poses(dir.path(), images.path()).unwrap();
    assert_eq!(ingested.views.len(), 2);
    assert_eq!(ingested.unregistered, vec!["c.png".to_string()]);
}

#[test]
fn empty_images_file_gives_zero_poses() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cameras.txt", "1 SIMPLE_PINHOLE 4 4 3 2 2\n");
    write(dir.path(), "images.txt", "# Image list\n# Number of images: 0\n");
    write(dir.path(), "points3D.txt", "");
    let poses = read_sparse_poses(dir.path()).unwrap();
    assert!(poses.cameras.is_empty());
}

#[test]
fn corrupt_sparse_dir_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "cameras.txt", "1 PINHOLE 4 4 3 3 2 2\n");
    write(dir.path(), "images.txt", "# header\n\n1 1 0 0 zero 0 0 0 1 a.png\n\n");
    write(dir.path(), "points3D.txt", "");
    match SparseModel::read_dir(dir.path()) {
        Err(SplatError::Parse { file, line, msg }) => {
            assert!(file.ends_with("images.txt"));
            assert_eq!(line, 3);
            assert!(msg.contains("QZ"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(SparseModel::read_dir(&dir.path().join("missing")), Err(SplatError::Io { .. })));
}
