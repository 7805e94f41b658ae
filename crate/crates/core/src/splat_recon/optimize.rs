//! Photometric optimization of a Gaussian scene against posed views.

use nalgebra::{Quaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{logit, rasterize, rasterize_backward, Gaussian3D, GaussianScene, PosedImage, Rendered, SplatError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconConfig {
    pub num_gaussians: usize,
    pub iterations: usize,
    pub seed: u64,
    pub init_opacity: f64,
    /// Initial isotropic footprint in pixels of the seeding view.
    pub init_scale_px: f64,
    /// Depth range for pixels without a nearby sparse point.
    pub random_depth: (f64, f64),
    /// Search radius, in pixels, for a sparse point to seed depth from.
    pub point_search_px: usize,
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    /// Loss window used by the step-size controller.
    pub window: usize,
    /// Learning-rate factor applied when a window's mean loss rises.
    pub backoff: f64,
    pub background: [f64; 3],
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            num_gaussians: 20_000,
            iterations: 4_000,
            seed: 0,
            init_opacity: 0.5,
            init_scale_px: 1.5,
            random_depth: (0.2, 2.0),
            point_search_px: 8,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            window: 100,
            backoff: 0.5,
            background: [0.0; 3],
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<(), SplatError> {
        let bad = |m: &str| Err(SplatError::BadInput(m.into()));
        if self.num_gaussians == 0 {
            return bad("num_gaussians must be positive");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must be in (0, 1)");
        }
        if !(self.random_depth.0 > 0.0 && self.random_depth.1 >= self.random_depth.0) {
            return bad("random_depth must be a positive range");
        }
        if self.window == 0 || !(self.backoff > 0.0 && self.backoff <= 1.0) {
            return bad("window must be positive and backoff in (0, 1]");
        }
        let lrs = [self.lr_position, self.lr_position_final, self.lr_scale, self.lr_rotation, self.lr_opacity, self.lr_color];
        if lrs.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        Ok(())
    }
}

/// Mean squared error over included pixels and channels, and its gradient
/// with respect to the rendered colors. Residuals are taken at the f32
/// precision of the target, so a render that reproduces it has zero gradient.
pub fn photometric_loss(rendered: &Rendered, view: &PosedImage) -> (f64, Vec<f64>) {
    let target = view.image.data();
    let n_px = rendered.width * rendered.height;
    let included = view.mask.as_ref().map_or(n_px, |m| m.count_included());
    let mut grad = vec![0.0; 3 * n_px];
    if included == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / (3 * included) as f64;
    let mut loss = 0.0;
    for i in 0..n_px {
        if let Some(m) = &view.mask {
            if !m.bits()[i] {
                continue;
            }
        }
        for k in 0..3 {
            let d = (rendered.color[3 * i + k] as f32 - target[3 * i + k]) as f64;
            loss += d * d;
            grad[3 * i + k] = 2.0 * d * norm;
        }
    }
    (loss * norm, grad)
}

const PARAMS: usize = 14;

fn pack(g: &Gaussian3D, out: &mut [f64]) {
    out[0..3].copy_from_slice(g.position.as_slice());
    out[3..6].copy_from_slice(g.log_scale.as_slice());
    out[6..10].copy_from_slice(&[g.rotation.w, g.rotation.i, g.rotation.j, g.rotation.k]);
    out[10] = g.opacity_logit;
    out[11..14].copy_from_slice(&g.color);
}

fn unpack(p: &[f64]) -> Gaussian3D {
    let q = Quaternion::new(p[6], p[7], p[8], p[9]);
    Gaussian3D {
        position: Vector3::new(p[0], p[1], p[2]),
        log_scale: Vector3::new(p[3], p[4], p[5]),
        rotation: q / q.norm(),
        opacity_logit: p[10],
        color: [p[11].clamp(0.0, 1.0), p[12].clamp(0.0, 1.0), p[13].clamp(0.0, 1.0)],
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-15;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: &[f64; PARAMS]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, ((p, &g), (m, v))) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())).enumerate() {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            let step = (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            *p -= lr[i % PARAMS] * step;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub scene: GaussianScene,
    /// Training-view loss at every iteration, before the step.
    pub losses: Vec<f64>,
    /// Final multiplier applied by the step-size controller.
    pub lr_multiplier: f64,
}

/// Adam on every Gaussian parameter, one view per iteration, views visited
/// in a reshuffled order each epoch.
pub fn optimize(scene: GaussianScene, views: &[PosedImage], config: &ReconConfig) -> Result<Reconstruction, SplatError> {
    config.validate()?;
    scene.validate()?;
    if views.is_empty() {
        return Err(SplatError::BadInput("no training views".into()));
    }
    let n = scene.len();
    let scene_scale = scene.scene_scale;
    let mut params = vec![0.0; n * PARAMS];
    for (g, chunk) in scene.gaussians.iter().zip(params.chunks_exact_mut(PARAMS)) {
        pack(g, chunk);
    }
    let mut current = scene;
    let mut adam = Adam::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0b71);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.iterations);
    let mut multiplier = 1.0;
    let mut prev_window: Option<f64> = None;
    let mut grads = vec![0.0; params.len()];

    for it in 0..config.iterations {
        if order.is_empty() {
            order = (0..views.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let view = &views[order.pop().expect("refilled")];
        let rendered = rasterize(&current, &view.camera, config.background);
        let (loss, grad_out) = photometric_loss(&rendered, view);
        if !loss.is_finite() {
            return Err(SplatError::Diverged { iteration: it, loss, checkpoint: Box::new(current) });
        }
        losses.push(loss);

        if (it + 1) % config.window == 0 {
            let mean = losses[it + 1 - config.window..].iter().sum::<f64>() / config.window as f64;
            if prev_window.is_some_and(|p| mean > p) {
                multiplier *= config.backoff;
            }
            prev_window = Some(mean);
        }

        let g = rasterize_backward(&current, &view.camera, config.background, &grad_out);
        for (gg, chunk) in g.iter().zip(grads.chunks_exact_mut(PARAMS)) {
            chunk[0..3].copy_from_slice(gg.position.as_slice());
            chunk[3..6].copy_from_slice(gg.log_scale.as_slice());
            chunk[6..10].copy_from_slice(&gg.rotation);
            chunk[10] = gg.opacity_logit;
            chunk[11..14].copy_from_slice(&gg.color);
        }

        let frac = if config.iterations > 1 { it as f64 / (config.iterations - 1) as f64 } else { 0.0 };
        let lr_pos = if config.lr_position > 0.0 && config.lr_position_final > 0.0 {
            config.lr_position * (config.lr_position_final / config.lr_position).powf(frac)
        } else {
            config.lr_position
        };
        let mut lr = [0.0; PARAMS];
        lr[0..3].fill(lr_pos);
        lr[3..6].fill(config.lr_scale);
        lr[6..10].fill(config.lr_rotation);
        lr[10] = config.lr_opacity;
        lr[11..14].fill(config.lr_color);
        for v in &mut lr {
            *v *= multiplier;
        }
        adam.step(&mut params, &grads, &lr);

        let gaussians: Vec<Gaussian3D> = params.chunks_exact(PARAMS).map(unpack).collect();
        if gaussians.iter().any(|g| !g.is_finite()) {
            return Err(SplatError::Diverged { iteration: it, loss: f64::NAN, checkpoint: Box::new(current) });
        }
        for (g, chunk) in gaussians.iter().zip(params.chunks_exact_mut(PARAMS)) {
            pack(g, chunk);
        }
        current = GaussianScene { gaussians, scene_scale };
    }
    Ok(Reconstruction { scene: current, losses, lr_multiplier: multiplier })
}

/// Per-view nearest-depth buffers from sparse points.
fn point_depth_maps(views: &[PosedImage], points: &[(Vector3<f64>, [f64; 3])]) -> Vec<Vec<f64>> {
    views
        .iter()
        .map(|v| {
            let (w, h) = (v.camera.width(), v.camera.height());
            let mut zbuf = vec![f64::INFINITY; w * h];
            for (p, _) in points {
                if let Some((x, y, z)) = v.camera.project_point(p) {
                    if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                        let i = y as usize * w + x as usize;
                        zbuf[i] = zbuf[i].min(z);
                    }
                }
            }
            zbuf
        })
        .collect()
}

fn nearest_depth(zbuf: &[f64], w: usize, h: usize, x: usize, y: usize, radius: usize) -> Option<f64> {
    for r in 0..=radius {
        let mut best: Option<f64> = None;
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                let on_ring = xx.abs_diff(x) == r || yy.abs_diff(y) == r;
                let z = zbuf[yy * w + xx];
                if on_ring && z.is_finite() {
                    best = Some(best.map_or(z, |b: f64| b.min(z)));
                }
            }
        }
        if best.is_some() {
            return best;
        }
    }
    None
}

/// Seeds Gaussians at random pixels of random views, back-projected to the
/// depth of a nearby sparse point or to a random depth.
pub fn init_gaussians(
    views: &[PosedImage],
    points: &[(Vector3<f64>, [f64; 3])],
    config: &ReconConfig,
) -> Result<GaussianScene, SplatError> {
    config.validate()?;
    if views.is_empty() {
        return Err(SplatError::BadInput("no views to seed from".into()));
    }
    let zbufs = point_depth_maps(views, points);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gaussians = Vec::with_capacity(config.num_gaussians);
    while gaussians.len() < config.num_gaussians {
        let vi = rng.random_range(0..views.len());
        let view = &views[vi];
        let (w, h) = (view.camera.width(), view.camera.height());
        let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
        let random_z = rng.random_range(config.random_depth.0..=config.random_depth.1);
        if view.mask.as_ref().is_some_and(|m| !m.get(x, y)) {
            continue;
        }
        let z = nearest_depth(&zbufs[vi], w, h, x, y, config.point_search_px).unwrap_or(random_z);
        let k = &view.camera.intrinsics;
        let ray = Vector3::new((x as f64 + 0.5 - k.cx) / k.fx, (y as f64 + 0.5 - k.cy) / k.fy, 1.0);
        let position = view.camera.position + view.camera.rotation * (ray * z);
        let c = view.image.get(x, y);
        let color = [c[0] as f64, c[1] as f64, c[2] as f64].map(|v| v.clamp(0.0, 1.0));
        let scale = z / k.fx * config.init_scale_px;
        let mut g = Gaussian3D::isotropic(position, scale, config.init_opacity, color);
        g.opacity_logit = logit(config.init_opacity);
        gaussians.push(g);
    }
    GaussianScene::new(gaussians, 1.0)
}

/// Seeds and optimizes a scene from at least two posed views.
pub fn reconstruct(
    views: &[PosedImage],
    points: &[(Vector3<f64>, [f64; 3])],
    scene_scale: f64,
    config: &ReconConfig,
) -> Result<Reconstruction, SplatError> {
    if views.len() < 2 {
        return Err(SplatError::BadInput(format!("need at least 2 views, got {}", views.len())));
    }
    let mut scene = init_gaussians(views, points, config)?;
    scene.scene_scale = scene_scale;
    optimize(scene, views, config)
}
