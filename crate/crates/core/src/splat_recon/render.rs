//! EWA splat projection, tile-binned alpha compositing and its analytic
//! backward pass.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, Vector3};
use rayon::prelude::*;

use super::{sigmoid, GaussianScene, Gaussian3D, SplatCamera};
use crate::raster::RgbImage;

/// Gaussians closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every screen-space covariance, in px².
pub const COV2D_FLOOR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
const TILE: usize = 8;
/// Screen-space Jacobians are evaluated with `x/z`, `y/z` clamped to this
/// multiple of the half-frame tangent.
const FRUSTUM_GUARD: f64 = 1.3;

/// A Gaussian after projection into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub mean: [f64; 2],
    /// `J W Σ Wᵀ Jᵀ` before the diagonal floor, as `(xx, xy, yy)`.
    pub cov_raw: [f64; 3],
    /// Covariance with the floor added.
    pub cov: [f64; 3],
    /// Inverse of `cov` as `(A, B, C)`: `q = A dx² + 2 B dx dy + C dy²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Pixel bounding box `[x0, x1) x [y0, y1)` beyond which `α < 1/255`.
    pub bbox: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Visible(Projected),
    /// Behind or too close to the camera plane.
    Culled,
}

impl Projection {
    pub fn visible(&self) -> Option<&Projected> {
        match self {
            Projection::Visible(p) => Some(p),
            Projection::Culled => None,
        }
    }
}

/// Rotation matrix of a normalized quaternion.
pub fn rotation_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R S Sᵀ Rᵀ`.
pub fn covariance_3d(g: &Gaussian3D) -> Matrix3<f64> {
    let m = rotation_matrix(&g.rotation) * Matrix3::from_diagonal(&g.scales());
    m * m.transpose()
}

struct ProjectionTerms {
    view: Matrix3<f64>,
    p_cam: Vector3<f64>,
    clamped: [bool; 2],
    xy_used: [f64; 2],
    t: Matrix2x3<f64>,
    sigma: Matrix3<f64>,
}

fn projection_terms(g: &Gaussian3D, cam: &SplatCamera) -> Option<ProjectionTerms> {
    let view = cam.view_rotation();
    let p_cam = view * (g.position - cam.position);
    let z = p_cam.z;
    if !(z > NEAR_PLANE) {
        return None;
    }
    let k = &cam.intrinsics;
    let lim = [
        FRUSTUM_GUARD * (k.width as f64 / 2.0) / k.fx,
        FRUSTUM_GUARD * (k.height as f64 / 2.0) / k.fy,
    ];
    let mut clamped = [false; 2];
    let mut xy_used = [0.0; 2];
    for a in 0..2 {
        let r = p_cam[a] / z;
        clamped[a] = r.abs() > lim[a];
        xy_used[a] = r.clamp(-lim[a], lim[a]) * z;
    }
    let j = Matrix2x3::new(k.fx / z, 0.0, -k.fx * xy_used[0] / (z * z), 0.0, k.fy / z, -k.fy * xy_used[1] / (z * z));
    let t = j * view;
    Some(ProjectionTerms { view, p_cam, clamped, xy_used, t, sigma: covariance_3d(g) })
}

/// EWA projection of one Gaussian.
pub fn project_gaussian(g: &Gaussian3D, cam: &SplatCamera) -> Projection {
    let Some(terms) = projection_terms(g, cam) else {
        return Projection::Culled;
    };
    let k = &cam.intrinsics;
    let p = terms.p_cam;
    let c2 = terms.t * terms.sigma * terms.t.transpose();
    let cov_raw = [c2[(0, 0)], 0.5 * (c2[(0, 1)] + c2[(1, 0)]), c2[(1, 1)]];
    let cov = [cov_raw[0] + COV2D_FLOOR, cov_raw[1], cov_raw[2] + COV2D_FLOOR];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];
    let mean = [k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy];
    let opacity = sigmoid(g.opacity_logit);

    let bbox = if opacity * 255.0 <= 1.0 || !det.is_finite() || det <= 0.0 {
        [0, 0, 0, 0]
    } else {
        // Outside the ellipse q = 2 ln(255 o) the kernel cannot reach 1/255.
        let q_max = 2.0 * (255.0 * opacity).ln();
        let mid = 0.5 * (cov[0] + cov[2]);
        let lambda = mid + (mid * mid - det).max(0.0).sqrt();
        let r = (q_max * lambda).sqrt() + 1.0;
        let clip = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
            // Pixel centers sit at i + 0.5.
            let a = (lo - 0.5).floor().max(0.0);
            let b = (hi - 0.5).ceil() + 1.0;
            let b = b.min(n as f64);
            if b <= a {
                (0, 0)
            } else {
                (a as usize, b as usize)
            }
        };
        let (x0, x1) = clip(mean[0] - r, mean[0] + r, k.width);
        let (y0, y1) = clip(mean[1] - r, mean[1] + r, k.height);
        [x0, x1, y0, y1]
    };
    Projection::Visible(Projected { mean, cov_raw, cov, conic, depth: p.z, opacity, color: g.color, bbox })
}

/// Kernel opacity of a projected Gaussian at pixel center `(px, py)`, before
/// the `ALPHA_MIN` cut; also reports whether `ALPHA_MAX` clamped it.
#[inline]
pub fn splat_alpha(p: &Projected, px: f64, py: f64) -> (f64, bool) {
    let dx = px - p.mean[0];
    let dy = py - p.mean[1];
    let q = p.conic[0] * dx * dx + 2.0 * p.conic[1] * dx * dy + p.conic[2] * dy * dy;
    let a = p.opacity * (-0.5 * q).exp();
    if a > ALPHA_MAX {
        (ALPHA_MAX, true)
    } else {
        (a, false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, unclamped.
    pub color: Vec<f64>,
    /// Accumulated opacity `1 - Π(1 - α)` per pixel.
    pub alpha: Vec<f64>,
}

impl Rendered {
    pub fn to_image(&self) -> RgbImage {
        RgbImage::from_vec(self.width, self.height, self.color.iter().map(|&v| v as f32).collect())
            .expect("sized")
    }
}

/// Screen-space fields read by the per-pixel loops, stored contiguously per tile.
#[derive(Clone, Copy)]
struct Splat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    bbox: [usize; 4],
    /// Beyond this Mahalanobis distance alpha is certainly below `ALPHA_MIN`.
    q_cut: f64,
}

impl Splat {
    fn new(p: &Projected) -> Self {
        let q_cut = 2.0 * (255.0 * p.opacity).ln() + 1e-6;
        Self { mean: p.mean, conic: p.conic, opacity: p.opacity, color: p.color, bbox: p.bbox, q_cut }
    }

    /// [`splat_alpha`], with far pixels short-circuited to zero.
    #[inline]
    fn alpha(&self, px: f64, py: f64) -> (f64, bool) {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        let q = self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy;
        if q > self.q_cut {
            return (0.0, false);
        }
        let a = self.opacity * (-0.5 * q).exp();
        if a > ALPHA_MAX {
            (ALPHA_MAX, true)
        } else {
            (a, false)
        }
    }

    /// Outside its bbox a splat's alpha is below `ALPHA_MIN`.
    #[inline]
    fn covers(&self, x: usize, y: usize) -> bool {
        x >= self.bbox[0] && x < self.bbox[1] && y >= self.bbox[2] && y < self.bbox[3]
    }
}

struct Binned {
    projections: Vec<Projection>,
    /// Gaussian indices per tile, front to back.
    tiles: Vec<Vec<usize>>,
    /// `tiles` with the screen-space data copied inline.
    tile_splats: Vec<Vec<Splat>>,
    tiles_x: usize,
}

fn bin(scene: &GaussianScene, cam: &SplatCamera) -> Binned {
    let projections: Vec<Projection> = scene.gaussians.par_iter().map(|g| project_gaussian(g, cam)).collect();
    let mut order: Vec<usize> = (0..projections.len())
        .filter(|&i| projections[i].visible().is_some_and(|p| p.bbox[1] > p.bbox[0] && p.bbox[3] > p.bbox[2]))
        .collect();
    let depth = |i: usize| projections[i].visible().expect("filtered").depth;
    // Ties broken by the Gaussian's parameters so input order never matters.
    order.sort_by(|&a, &b| {
        depth(a).total_cmp(&depth(b)).then_with(|| tie_key(&scene.gaussians[a]).cmp(&tie_key(&scene.gaussians[b])))
    });
    let tiles_x = cam.width().div_ceil(TILE);
    let tiles_y = cam.height().div_ceil(TILE);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for i in order {
        let b = projections[i].visible().expect("filtered").bbox;
        for ty in b[2] / TILE..=(b[3] - 1) / TILE {
            for tx in b[0] / TILE..=(b[1] - 1) / TILE {
                tiles[ty * tiles_x + tx].push(i);
            }
        }
    }
    let tile_splats = tiles
        .iter()
        .map(|list| list.iter().map(|&i| Splat::new(projections[i].visible().expect("binned"))).collect())
        .collect();
    Binned { projections, tiles, tile_splats, tiles_x }
}

fn tie_key(g: &Gaussian3D) -> [u64; 4] {
    [g.position.x.to_bits(), g.position.y.to_bits(), g.position.z.to_bits(), g.opacity_logit.to_bits()]
}

fn tile_pixels(tile: usize, tiles_x: usize, cam: &SplatCamera) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % tiles_x, tile / tiles_x);
    let (x0, y0) = (tx * TILE, ty * TILE);
    let (x1, y1) = ((x0 + TILE).min(cam.width()), (y0 + TILE).min(cam.height()));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Front-to-back alpha compositing of all Gaussians over `background`.
pub fn rasterize(scene: &GaussianScene, cam: &SplatCamera, background: [f64; 3]) -> Rendered {
    let binned = bin(scene, cam);
    let (w, h) = (cam.width(), cam.height());
    let per_tile: Vec<Vec<(usize, [f64; 3], f64)>> = binned
        .tile_splats
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            tile_pixels(tile, binned.tiles_x, cam)
                .map(|(x, y)| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut c = [0.0; 3];
                    let mut trans = 1.0;
                    for p in list {
                        if !p.covers(x, y) {
                            continue;
                        }
                        let (a, _) = p.alpha(px, py);
                        if a < ALPHA_MIN {
                            continue;
                        }
                        for k in 0..3 {
                            c[k] += p.color[k] * a * trans;
                        }
                        trans *= 1.0 - a;
                    }
                    for k in 0..3 {
                        c[k] += trans * background[k];
                    }
                    (y * w + x, c, 1.0 - trans)
                })
                .collect()
        })
        .collect();
    let mut color = vec![0.0; w * h * 3];
    let mut alpha = vec![0.0; w * h];
    for (idx, c, a) in per_tile.into_iter().flatten() {
        color[3 * idx..3 * idx + 3].copy_from_slice(&c);
        alpha[idx] = a;
    }
    Rendered { width: w, height: h, color, alpha }
}

/// Gradient of a scalar loss with respect to every Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vector3<f64>,
    pub log_scale: Vector3<f64>,
    /// `(w, x, y, z)` with respect to the raw (unnormalized) quaternion.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Default for GaussianGrad {
    fn default() -> Self {
        Self {
            position: Vector3::zeros(),
            log_scale: Vector3::zeros(),
            rotation: [0.0; 4],
            opacity_logit: 0.0,
            color: [0.0; 3],
        }
    }
}

impl GaussianGrad {
    pub fn is_zero(&self) -> bool {
        *self == GaussianGrad::default()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Analytic backward pass of [`rasterize`] for an upstream gradient on the
/// interleaved RGB output.
pub fn rasterize_backward(
    scene: &GaussianScene,
    cam: &SplatCamera,
    background: [f64; 3],
    grad_color: &[f64],
) -> Vec<GaussianGrad> {
    let binned = bin(scene, cam);
    let w = cam.width();
    assert_eq!(grad_color.len(), w * cam.height() * 3, "gradient buffer size");

    // Per-tile screen-space gradients, merged below in tile order.
    let per_tile: Vec<Vec<ScreenGrad>> = binned
        .tile_splats
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut acc = vec![ScreenGrad::default(); list.len()];
            let mut contrib: Vec<(usize, f64, f64, bool)> = Vec::new();
            for (x, y) in tile_pixels(tile, binned.tiles_x, cam) {
                let idx = y * w + x;
                let g = [grad_color[3 * idx], grad_color[3 * idx + 1], grad_color[3 * idx + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                contrib.clear();
                let mut trans = 1.0;
                for (slot, p) in list.iter().enumerate() {
                    if !p.covers(x, y) {
                        continue;
                    }
                    let (a, clamped) = p.alpha(px, py);
                    if a < ALPHA_MIN {
                        continue;
                    }
                    contrib.push((slot, a, trans, clamped));
                    trans *= 1.0 - a;
                }
                // Color of everything behind the current splat, weighted by
                // the transmittance in front of it.
                let mut behind = [trans * background[0], trans * background[1], trans * background[2]];
                for &(slot, a, t_before, clamped) in contrib.iter().rev() {
                    let p = &list[slot];
                    let sg = &mut acc[slot];
                    let mut d_alpha = 0.0;
                    for k in 0..3 {
                        sg.color[k] += g[k] * a * t_before;
                        d_alpha += g[k] * (p.color[k] * t_before - behind[k] / (1.0 - a));
                    }
                    for k in 0..3 {
                        behind[k] += p.color[k] * a * t_before;
                    }
                    if clamped {
                        continue;
                    }
                    let kernel = a / p.opacity;
                    sg.opacity += d_alpha * kernel;
                    let d_q = -0.5 * a * d_alpha;
                    let dx = px - p.mean[0];
                    let dy = py - p.mean[1];
                    sg.conic[0] += d_q * dx * dx;
                    sg.conic[1] += d_q * 2.0 * dx * dy;
                    sg.conic[2] += d_q * dy * dy;
                    sg.mean[0] += d_q * -2.0 * (p.conic[0] * dx + p.conic[1] * dy);
                    sg.mean[1] += d_q * -2.0 * (p.conic[1] * dx + p.conic[2] * dy);
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); scene.len()];
    for (list, acc) in binned.tiles.iter().zip(&per_tile) {
        for (&i, sg) in list.iter().zip(acc) {
            screen[i].add(sg);
        }
    }

    scene
        .gaussians
        .par_iter()
        .zip(&binned.projections)
        .zip(&screen)
        .map(|((g, proj), sg)| match proj {
            Projection::Visible(p) => chain_to_gaussian(g, cam, p, sg),
            Projection::Culled => GaussianGrad::default(),
        })
        .collect()
}

fn chain_to_gaussian(g: &Gaussian3D, cam: &SplatCamera, p: &Projected, sg: &ScreenGrad) -> GaussianGrad {
    let mut out = GaussianGrad { color: sg.color, ..GaussianGrad::default() };
    let o = p.opacity;
    out.opacity_logit = sg.opacity * o * (1.0 - o);
    if sg.mean == [0.0; 2] && sg.conic == [0.0; 3] {
        return out;
    }
    let terms = projection_terms(g, cam).expect("visible gaussians have projection terms");
    let k = &cam.intrinsics;

    // conic -> covariance (a, b, c), b being the shared off-diagonal entry.
    let [a, b, c] = p.cov;
    let det = a * c - b * b;
    let det2 = det * det;
    let [ga_, gb_, gc_] = sg.conic;
    let g_a = (ga_ * -(c * c) + gb_ * (b * c) + gc_ * -(b * b)) / det2;
    let g_b = (ga_ * (2.0 * b * c) - gb_ * (det + 2.0 * b * b) + gc_ * (2.0 * a * b)) / det2;
    let g_c = (ga_ * -(b * b) + gb_ * (a * b) + gc_ * -(a * a)) / det2;

    // covariance = T Σ Tᵀ.
    let t = &terms.t;
    let sigma = &terms.sigma;
    let t0 = t.row(0).transpose();
    let t1 = t.row(1).transpose();
    let g_sigma = t0 * t0.transpose() * g_a + t0 * t1.transpose() * g_b + t1 * t1.transpose() * g_c;
    let s_t0 = sigma * t0;
    let s_t1 = sigma * t1;
    let g_t0 = s_t0 * (2.0 * g_a) + s_t1 * g_b;
    let g_t1 = s_t0 * g_b + s_t1 * (2.0 * g_c);
    let mut g_t = Matrix2x3::zeros();
    g_t.set_row(0, &g_t0.transpose());
    g_t.set_row(1, &g_t1.transpose());

    // T = J W.
    let g_j = g_t * terms.view.transpose();
    let pc = terms.p_cam;
    let z = pc.z;
    let (z2, z3) = (z * z, z * z * z);
    let mut g_pc = Vector3::zeros();
    g_pc.z += g_j[(0, 0)] * (-k.fx / z2) + g_j[(1, 1)] * (-k.fy / z2);
    for (axis, f) in [(0usize, k.fx), (1usize, k.fy)] {
        let used = terms.xy_used[axis];
        let gj = g_j[(axis, 2)];
        if terms.clamped[axis] {
            g_pc.z += gj * f * used / z3;
        } else {
            g_pc[axis] += gj * (-f / z2);
            g_pc.z += gj * (2.0 * f * used / z3);
        }
    }
    // mean.
    g_pc.x += sg.mean[0] * k.fx / z;
    g_pc.y += sg.mean[1] * k.fy / z;
    g_pc.z += sg.mean[0] * (-k.fx * pc.x / z2) + sg.mean[1] * (-k.fy * pc.y / z2);
    out.position = terms.view.transpose() * g_pc;

    // Σ = M Mᵀ with M = R S.
    let r = rotation_matrix(&g.rotation);
    let s = g.scales();
    let m = r * Matrix3::from_diagonal(&s);
    let g_m = (g_sigma + g_sigma.transpose()) * m;
    let mut g_r = Matrix3::zeros();
    for i in 0..3 {
        for j in 0..3 {
            g_r[(i, j)] = g_m[(i, j)] * s[j];
            out.log_scale[j] += g_m[(i, j)] * r[(i, j)] * s[j];
        }
    }

    let n = g.rotation.norm();
    let (w, x, y, zq) = (g.rotation.w / n, g.rotation.i / n, g.rotation.j / n, g.rotation.k / n);
    let dw = Matrix3::new(0.0, -2.0 * zq, 2.0 * y, 2.0 * zq, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * zq, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * zq, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * zq, -2.0 * w, 2.0 * zq, -4.0 * y);
    let dz = Matrix3::new(-4.0 * zq, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * zq, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let gq = [g_r.dot(&dw), g_r.dot(&dx), g_r.dot(&dy), g_r.dot(&dz)];
    let qn = [w, x, y, zq];
    let proj: f64 = gq.iter().zip(&qn).map(|(a, b)| a * b).sum();
    for i in 0..4 {
        out.rotation[i] = (gq[i] - qn[i] * proj) / n;
    }
    out
}
