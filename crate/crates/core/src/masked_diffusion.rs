//! Toy-scale masked denoising-diffusion training.
//!
//! Latents are `T x C x H x W` tensors. They are cut into `p x p` patch
//! tokens, noised with the DDPM forward process, and denoised by a small
//! residual MLP conditioned on a sinusoidal timestep embedding and a scene
//! embedding. The noise-prediction loss only counts latent positions whose
//! (resized) loss mask is 1. Gradients are analytic.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture_prep::LossMask;
use crate::pano_geometry::EquirectFrame;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    BadParam(String),
    #[error("non-finite loss at step {step} (sample {sample}, t = {t}, loss = {loss})")]
    NonFinite { step: usize, sample: usize, t: usize, loss: f64 },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DiffusionError + '_ {
    move |source| DiffusionError::Io { path: path.display().to_string(), source }
}

/// `T x C x H x W` latent tensor, stored in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub t_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl LatentSequence {
    pub fn zeros(t_len: usize, channels: usize, height: usize, width: usize) -> Self {
        Self { t_len, channels, height, width, values: vec![0.0; t_len * channels * height * width] }
    }

    pub fn from_values(
        t_len: usize,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, DiffusionError> {
        if t_len == 0 || values.len() != t_len * channels * height * width {
            return Err(DiffusionError::Shape(format!(
                "{} values for {t_len}x{channels}x{height}x{width}",
                values.len()
            )));
        }
        Ok(Self { t_len, channels, height, width, values })
    }

    pub fn gaussian(t_len: usize, channels: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let values = (0..t_len * channels * height * width).map(|_| rng.sample(StandardNormal)).collect();
        Self { t_len, channels, height, width, values }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t_len, self.channels, self.height, self.width]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.channels + c) * self.height + y) * self.width + x
    }

    pub fn is_image(&self) -> bool {
        self.t_len == 1
    }

    fn same_shape(&self, other: &Self) -> Result<(), DiffusionError> {
        if self.shape() != other.shape() {
            return Err(DiffusionError::Shape(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }
}

/// Box-filtered stand-in for a latent encoder: frames are area-averaged to
/// `height x width` and mapped from `[0, 1]` to `[-1, 1]`, one channel per
/// color.
pub fn encode_frames(frames: &[EquirectFrame], height: usize, width: usize) -> Result<LatentSequence, DiffusionError> {
    let first = frames.first().ok_or_else(|| DiffusionError::BadParam("no frames".into()))?;
    let (fw, fh) = (first.width(), first.height());
    if height == 0 || width == 0 || fw % width != 0 || fh % height != 0 {
        return Err(DiffusionError::Shape(format!("{fw}x{fh} frames do not pool to {width}x{height}")));
    }
    let (bx, by) = (fw / width, fh / height);
    let mut out = LatentSequence::zeros(frames.len(), 3, height, width);
    let norm = (bx * by) as f64;
    for (t, frame) in frames.iter().enumerate() {
        if (frame.width(), frame.height()) != (fw, fh) {
            return Err(DiffusionError::Shape("frames differ in size".into()));
        }
        for y in 0..height {
            for x in 0..width {
                let mut acc = [0.0f64; 3];
                for yy in y * by..(y + 1) * by {
                    for xx in x * bx..(x + 1) * bx {
                        let px = frame.image().get(xx, yy);
                        for c in 0..3 {
                            acc[c] += px[c] as f64;
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    let i = out.index(t, c, y, x);
                    out.values[i] = 2.0 * a / norm - 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// `K x D` patch tokens of a latent, with enough shape information to undo
/// the rearrangement.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub k: usize,
    pub d: usize,
    pub patch: usize,
    pub source_shape: [usize; 4],
    pub values: Vec<f64>,
}

impl TokenGrid {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }
}

/// Token `(t, by, bx)` holds features ordered `(c, dy, dx)`.
pub fn patchify(latent: &LatentSequence, p: usize) -> Result<TokenGrid, DiffusionError> {
    let [t_len, c_len, h, w] = latent.shape();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(DiffusionError::Shape(format!("patch {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let d = c_len * p * p;
    let k = t_len * gh * gw;
    let mut values = Vec::with_capacity(k * d);
    for t in 0..t_len {
        for by in 0..gh {
            for bx in 0..gw {
                for c in 0..c_len {
                    for dy in 0..p {
                        for dx in 0..p {
                            values.push(latent.values[latent.index(t, c, by * p + dy, bx * p + dx)]);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid { k, d, patch: p, source_shape: latent.shape(), values })
}

pub fn unpatchify(tokens: &TokenGrid) -> LatentSequence {
    let [t_len, c_len, h, w] = tokens.source_shape;
    let p = tokens.patch;
    let (gh, gw) = (h / p, w / p);
    let mut out = LatentSequence::zeros(t_len, c_len, h, w);
    let mut it = tokens.values.iter();
    for t in 0..t_len {
        for by in 0..gh {
            for bx in 0..gw {
                for c in 0..c_len {
                    for dy in 0..p {
                        for dx in 0..p {
                            let i = out.index(t, c, by * p + dy, bx * p + dx);
                            out.values[i] = *it.next().expect("token count matches shape");
                        }
                    }
                }
            }
        }
    }
    out
}

/// Cumulative signal levels `ᾱ_t`, with `ᾱ_0 = 1` and strictly decreasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// DDPM linear-β schedule: `β_0 = 0`, `β_t` linear from `beta_start` to
    /// `beta_end` over `t = 1..n_steps`.
    pub fn linear_beta(n_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, DiffusionError> {
        if n_steps < 2 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::BadParam(format!(
                "schedule n={n_steps}, beta=[{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(n_steps);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for t in 1..n_steps {
            let f = (t - 1) as f64 / (n_steps - 2).max(1) as f64;
            acc *= 1.0 - (beta_start + f * (beta_end - beta_start));
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self, DiffusionError> {
        let ok = alpha_bar.first() == Some(&1.0)
            && alpha_bar.windows(2).all(|w| w[1] < w[0])
            && alpha_bar.iter().all(|&a| a > 0.0 && a <= 1.0);
        if !ok {
            return Err(DiffusionError::BadParam("alpha_bar must start at 1 and strictly decrease in (0, 1]".into()));
        }
        Ok(Self { alpha_bar })
    }

    pub fn n_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn values(&self) -> &[f64] {
        &self.alpha_bar
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear_beta(1000, 1e-4, 0.02).expect("valid defaults")
    }
}

/// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
pub fn forward_diffuse(
    x0: &LatentSequence,
    t: usize,
    eps: &LatentSequence,
    sched: &NoiseSchedule,
) -> Result<LatentSequence, DiffusionError> {
    x0.same_shape(eps)?;
    if t >= sched.n_steps() {
        return Err(DiffusionError::BadParam(format!("t = {t} beyond {} steps", sched.n_steps())));
    }
    let a = sched.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let values = x0.values.iter().zip(&eps.values).map(|(x, e)| sa * x + sn * e).collect();
    Ok(LatentSequence { values, ..x0.clone() })
}

fn check_mask(target: &LatentSequence, m: &LossMask) -> Result<(), DiffusionError> {
    if (m.width(), m.height()) != (target.width, target.height) {
        return Err(DiffusionError::Shape(format!(
            "mask {}x{} vs latent {}x{}",
            m.width(),
            m.height(),
            target.width,
            target.height
        )));
    }
    Ok(())
}

/// Masked squared error, normalized by the number of included elements
/// (mask count x channels x frames). Zero when nothing is included.
pub fn masked_loss(eps_true: &LatentSequence, eps_pred: &LatentSequence, m: &LossMask) -> Result<f64, DiffusionError> {
    Ok(masked_loss_grad(eps_true, eps_pred, m)?.0)
}

/// Masked loss and its gradient with respect to `eps_pred`. The gradient is
/// exactly `0.0` wherever the broadcast mask is 0.
pub fn masked_loss_grad(
    eps_true: &LatentSequence,
    eps_pred: &LatentSequence,
    m: &LossMask,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    eps_true.same_shape(eps_pred)?;
    check_mask(eps_true, m)?;
    let count = m.count_included() * eps_true.channels * eps_true.t_len;
    let mut grad = vec![0.0; eps_true.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let plane = eps_true.height * eps_true.width;
    let mut sum = 0.0;
    for (i, g) in grad.iter_mut().enumerate() {
        if !m.bits()[i % plane] {
            continue;
        }
        let r = eps_pred.values[i] - eps_true.values[i];
        sum += r * r;
        *g = 2.0 * r / count as f64;
    }
    Ok((sum / count as f64, grad))
}

pub fn mse(a: &LatentSequence, b: &LatentSequence) -> Result<f64, DiffusionError> {
    a.same_shape(b)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

pub fn resize_mask_nearest(m: &LossMask, out_h: usize, out_w: usize) -> Result<LossMask, DiffusionError> {
    if out_h == 0 || out_w == 0 {
        return Err(DiffusionError::BadParam("output mask dims must be >= 1".into()));
    }
    Ok(m.resize_nearest(out_w, out_h))
}

/// Fixed pseudo-random embeddings for a small vocabulary of scene tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVocab {
    tags: Vec<String>,
    table: Vec<Vec<f64>>,
    dim: usize,
}

impl ConditionVocab {
    pub fn new(tags: &[&str], dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let table = tags
            .iter()
            .map(|_| (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        Self { tags: tags.iter().map(|s| s.to_lowercase()).collect(), table, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_tag(&self, tag: &str) -> Option<&[f64]> {
        let tag = tag.to_lowercase();
        self.tags.iter().position(|t| *t == tag).map(|i| self.table[i].as_slice())
    }

    /// Mean embedding of the vocabulary tags that occur as words in
    /// `caption`; the zero vector if none do.
    pub fn embed_caption(&self, caption: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0;
        for word in caption.split(|c: char| !c.is_alphanumeric()) {
            if let Some(e) = self.embed_tag(word) {
                acc.iter_mut().zip(e).for_each(|(a, v)| *a += v);
                n += 1;
            }
        }
        if n > 0 {
            acc.iter_mut().for_each(|a| *a /= n as f64);
        }
        acc
    }
}

impl Default for ConditionVocab {
    fn default() -> Self {
        Self::new(
            &["room", "kitchen", "bedroom", "office", "forest", "street", "beach", "museum", "bright", "dark", "checkered"],
            16,
            0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Token feature size `C * p * p`.
    pub token_dim: usize,
    pub hidden: usize,
    /// Sinusoidal timestep embedding size (even).
    pub time_dim: usize,
    pub cond_dim: usize,
    /// Extra residual hidden blocks; 0 gives a two-layer network.
    pub blocks: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wt: usize,
    wc: usize,
    blocks: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl DenoiserConfig {
    fn layout(&self) -> Layout {
        let (d, h) = (self.token_dim, self.hidden);
        let w1 = 0;
        let b1 = w1 + h * d;
        let wt = b1 + h;
        let wc = wt + h * self.time_dim;
        let blocks = wc + h * self.cond_dim;
        let w2 = blocks + self.blocks * (h * h + h);
        let b2 = w2 + d * h;
        Layout { w1, b1, wt, wc, blocks, w2, b2, total: b2 + d }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Sinusoidal embedding of a diffusion step.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Residual MLP over token features:
///
/// ```text
/// a0   = tanh(W1 x + b1 + Wt emb(t) + Wc c)
/// a_l  = a_{l-1} + tanh(Wl a_{l-1} + bl)
/// out  = x + W2 a_L + b2
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
}

struct TokenTrace {
    acts: Vec<Vec<f64>>,
    block_tanh: Vec<Vec<f64>>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, DiffusionError> {
        if config.token_dim == 0 || config.hidden == 0 || config.time_dim % 2 != 0 {
            return Err(DiffusionError::BadParam(format!("denoiser config {config:?}")));
        }
        let lay = config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; lay.total];
        let mut fill = |start: usize, rows: usize, cols: usize, params: &mut Vec<f64>| {
            let s = 1.0 / (cols.max(1) as f64).sqrt();
            for p in &mut params[start..start + rows * cols] {
                *p = s * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let (d, h) = (config.token_dim, config.hidden);
        fill(lay.w1, h, d, &mut params);
        fill(lay.wt, h, config.time_dim, &mut params);
        fill(lay.wc, h, config.cond_dim, &mut params);
        for l in 0..config.blocks {
            fill(lay.blocks + l * (h * h + h), h, h, &mut params);
        }
        fill(lay.w2, d, h, &mut params);
        // Start close to the identity map on x.
        params[lay.w2..lay.w2 + d * h].iter_mut().for_each(|p| *p *= 0.1);
        Ok(Self { config, params })
    }

    fn context(&self, cond: &[f64], t: usize) -> Vec<f64> {
        let c = &self.config;
        let lay = c.layout();
        let emb = timestep_embedding(t, c.time_dim);
        let mut ctx = self.params[lay.b1..lay.b1 + c.hidden].to_vec();
        for (j, out) in ctx.iter_mut().enumerate() {
            let wt = &self.params[lay.wt + j * c.time_dim..lay.wt + (j + 1) * c.time_dim];
            let wc = &self.params[lay.wc + j * c.cond_dim..lay.wc + (j + 1) * c.cond_dim];
            *out += dot(wt, &emb) + dot(wc, cond);
        }
        ctx
    }

    fn forward_token(&self, x: &[f64], ctx: &[f64], out: &mut [f64]) -> TokenTrace {
        let c = &self.config;
        let lay = c.layout();
        let (d, h) = (c.token_dim, c.hidden);
        let mut a: Vec<f64> = (0..h)
            .map(|j| (dot(&self.params[lay.w1 + j * d..lay.w1 + (j + 1) * d], x) + ctx[j]).tanh())
            .collect();
        let mut acts = vec![a.clone()];
        let mut block_tanh = Vec::with_capacity(c.blocks);
        for l in 0..c.blocks {
            let base = lay.blocks + l * (h * h + h);
            let th: Vec<f64> = (0..h)
                .map(|j| (dot(&self.params[base + j * h..base + (j + 1) * h], &a) + self.params[base + h * h + j]).tanh())
                .collect();
            a = a.iter().zip(&th).map(|(x, y)| x + y).collect();
            block_tanh.push(th);
            acts.push(a.clone());
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o = x[i] + dot(&self.params[lay.w2 + i * h..lay.w2 + (i + 1) * h], &a) + self.params[lay.b2 + i];
        }
        TokenTrace { acts, block_tanh }
    }

    /// Noise prediction for every token; output shape equals input shape.
    pub fn forward(&self, tokens: &TokenGrid, cond: &[f64], t: usize) -> Result<TokenGrid, DiffusionError> {
        self.check_inputs(tokens, cond)?;
        let ctx = self.context(cond, t);
        let mut out = tokens.clone();
        for i in 0..tokens.k {
            let d = tokens.d;
            self.forward_token(tokens.row(i), &ctx, &mut out.values[i * d..(i + 1) * d]);
        }
        Ok(out)
    }

    fn check_inputs(&self, tokens: &TokenGrid, cond: &[f64]) -> Result<(), DiffusionError> {
        if tokens.d != self.config.token_dim {
            return Err(DiffusionError::Shape(format!("token dim {} vs {}", tokens.d, self.config.token_dim)));
        }
        if cond.len() != self.config.cond_dim {
            return Err(DiffusionError::Shape(format!("condition dim {} vs {}", cond.len(), self.config.cond_dim)));
        }
        Ok(())
    }

    /// Parameter gradient given the upstream gradient on the output tokens.
    pub fn backward(&self, tokens: &TokenGrid, cond: &[f64], t: usize, grad_out: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        self.check_inputs(tokens, cond)?;
        let c = &self.config;
        let lay = c.layout();
        let (d, h) = (c.token_dim, c.hidden);
        let emb = timestep_embedding(t, c.time_dim);
        let ctx = self.context(cond, t);
        let mut grad = vec![0.0; lay.total];
        let mut gctx = vec![0.0; h];
        let mut scratch = vec![0.0; d];
        for i in 0..tokens.k {
            let x = tokens.row(i);
            let go = &grad_out[i * d..(i + 1) * d];
            let trace = self.forward_token(x, &ctx, &mut scratch);
            let a_last = trace.acts.last().expect("at least one activation");
            let mut ga = vec![0.0; h];
            for (r, &g) in go.iter().enumerate() {
                grad[lay.b2 + r] += g;
                for j in 0..h {
                    grad[lay.w2 + r * h + j] += g * a_last[j];
                    ga[j] += g * self.params[lay.w2 + r * h + j];
                }
            }
            for l in (0..c.blocks).rev() {
                let base = lay.blocks + l * (h * h + h);
                let a_in = &trace.acts[l];
                let th = &trace.block_tanh[l];
                let mut ga_in = ga.clone();
                for j in 0..h {
                    let gz = ga[j] * (1.0 - th[j] * th[j]);
                    grad[base + h * h + j] += gz;
                    for k in 0..h {
                        grad[base + j * h + k] += gz * a_in[k];
                        ga_in[k] += gz * self.params[base + j * h + k];
                    }
                }
                ga = ga_in;
            }
            let a0 = &trace.acts[0];
            for j in 0..h {
                let gz = ga[j] * (1.0 - a0[j] * a0[j]);
                gctx[j] += gz;
                for (k, &xv) in x.iter().enumerate() {
                    grad[lay.w1 + j * d + k] += gz * xv;
                }
            }
        }
        for j in 0..h {
            grad[lay.b1 + j] += gctx[j];
            for (k, &e) in emb.iter().enumerate() {
                grad[lay.wt + j * c.time_dim + k] += gctx[j] * e;
            }
            for (k, &cv) in cond.iter().enumerate() {
                grad[lay.wc + j * c.cond_dim + k] += gctx[j] * cv;
            }
        }
        Ok(grad)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub latent: LatentSequence,
    /// Loss mask on the latent grid, broadcast over channels and frames.
    pub mask: LossMask,
    pub condition: Vec<f64>,
    pub kind: SampleKind,
}

impl TrainingSample {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        check_mask(&self.latent, &self.mask)?;
        if self.kind == SampleKind::Image
            && (self.latent.t_len != 1 || self.mask.count_included() != self.mask.bits().len())
        {
            return Err(DiffusionError::BadParam("image samples are single-frame with an all-ones mask".into()));
        }
        Ok(())
    }
}

/// Single panorama treated as a one-frame video.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageItem {
    pub latent: LatentSequence,
    pub condition: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoItem {
    pub latent: LatentSequence,
    /// Merged clip mask at any resolution; resized to the latent grid.
    pub mask: LossMask,
    pub condition: Vec<f64>,
}

/// Seeded stream of mixed image/video batches: each sample is an image with
/// probability `image_fraction`.
pub struct MixedBatchSampler<'a> {
    images: &'a [ImageItem],
    videos: &'a [VideoItem],
    image_fraction: f64,
    rng: ChaCha8Rng,
}

impl<'a> MixedBatchSampler<'a> {
    pub fn new(
        images: &'a [ImageItem],
        videos: &'a [VideoItem],
        image_fraction: f64,
        seed: u64,
    ) -> Result<Self, DiffusionError> {
        if images.is_empty() || videos.is_empty() {
            return Err(DiffusionError::BadParam("image and video pools must be non-empty".into()));
        }
        if !(0.0..=1.0).contains(&image_fraction) {
            return Err(DiffusionError::BadParam(format!("image fraction {image_fraction}")));
        }
        Ok(Self { images, videos, image_fraction, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_sample(&mut self) -> Result<TrainingSample, DiffusionError> {
        if self.rng.random_bool(self.image_fraction) {
            let item = &self.images[self.rng.random_range(0..self.images.len())];
            let l = &item.latent;
            if l.t_len != 1 {
                return Err(DiffusionError::Shape(format!("image latent with {} frames", l.t_len)));
            }
            Ok(TrainingSample {
                latent: l.clone(),
                mask: LossMask::ones(l.width, l.height),
                condition: item.condition.clone(),
                kind: SampleKind::Image,
            })
        } else {
            let item = &self.videos[self.rng.random_range(0..self.videos.len())];
            let l = &item.latent;
            Ok(TrainingSample {
                latent: l.clone(),
                mask: resize_mask_nearest(&item.mask, l.height, l.width)?,
                condition: item.condition.clone(),
                kind: SampleKind::Video,
            })
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Vec<TrainingSample>, DiffusionError> {
        if batch_size < 3 {
            return Err(DiffusionError::BadParam("batch size must be >= 3".into()));
        }
        (0..batch_size).map(|_| self.next_sample()).collect()
    }
}

/// One mixed batch with the default one-third image share.
pub fn mixed_batch_sampler(
    images: &[ImageItem],
    videos: &[VideoItem],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TrainingSample>, DiffusionError> {
    MixedBatchSampler::new(images, videos, 1.0 / 3.0, seed)?.next_batch(batch_size)
}

/// Loss and parameter gradient for one sample at a fixed step and noise.
pub fn sample_loss_grad(
    denoiser: &Denoiser,
    sample: &TrainingSample,
    t: usize,
    eps: &LatentSequence,
    sched: &NoiseSchedule,
    patch: usize,
) -> Result<(f64, Vec<f64>), DiffusionError> {
    let xt = forward_diffuse(&sample.latent, t, eps, sched)?;
    let tokens = patchify(&xt, patch)?;
    let pred = unpatchify(&denoiser.forward(&tokens, &sample.condition, t)?);
    let (loss, g_pred) = masked_loss_grad(eps, &pred, &sample.mask)?;
    let g_lat = LatentSequence { values: g_pred, ..pred };
    let g_tokens = patchify(&g_lat, patch)?;
    let grad = denoiser.backward(&tokens, &sample.condition, t, &g_tokens.values)?;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Mean batch loss before the update.
    pub loss: f64,
}

/// One gradient-descent step on the batch-mean masked loss, with `t`
/// uniform over the schedule and standard-normal noise per sample.
pub fn train_step(
    denoiser: &mut Denoiser,
    batch: &[TrainingSample],
    sched: &NoiseSchedule,
    lr: f64,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<StepReport, DiffusionError> {
    if !(lr >= 0.0) {
        return Err(DiffusionError::BadParam(format!("learning rate {lr}")));
    }
    if batch.is_empty() {
        return Err(DiffusionError::BadParam("empty batch".into()));
    }
    // Draw all randomness serially so parallel evaluation stays deterministic.
    let draws: Vec<(usize, LatentSequence)> = batch
        .iter()
        .map(|s| {
            let [t_len, c, h, w] = s.latent.shape();
            (rng.random_range(0..sched.n_steps()), LatentSequence::gaussian(t_len, c, h, w, rng))
        })
        .collect();
    let results: Vec<Result<(f64, Vec<f64>), DiffusionError>> = batch
        .par_iter()
        .zip(&draws)
        .map(|(s, (t, eps))| {
            s.validate()?;
            sample_loss_grad(denoiser, s, *t, eps, sched, patch)
        })
        .collect();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; denoiser.params.len()];
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(DiffusionError::NonFinite { step: 0, sample: i, t: draws[i].0, loss: l });
        }
        loss += l / n;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / n);
    }
    if lr > 0.0 {
        denoiser.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(StepReport { loss })
}

/// Declarative training configuration (TOML).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub latent_frames: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub patch: usize,
    pub hidden: usize,
    pub time_dim: usize,
    pub cond_dim: usize,
    pub blocks: usize,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub image_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_frames: 4,
            latent_channels: 3,
            latent_height: 8,
            latent_width: 16,
            patch: 2,
            hidden: 32,
            time_dim: 16,
            cond_dim: 16,
            blocks: 1,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            lr: 0.05,
            batch_size: 6,
            steps: 200,
            image_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, DiffusionError> {
        toml::from_str(text).map_err(|e| DiffusionError::Format { path: "<toml>".into(), msg: e.to_string() })
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            token_dim: self.latent_channels * self.patch * self.patch,
            hidden: self.hidden,
            time_dim: self.time_dim,
            cond_dim: self.cond_dim,
            blocks: self.blocks,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear_beta(self.schedule_steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub denoiser: Denoiser,
    /// `(step, loss)` pairs.
    pub losses: Vec<(usize, f64)>,
}

/// Runs `config.steps` steps over mixed batches from the two pools.
pub fn train(config: &TrainConfig, images: &[ImageItem], videos: &[VideoItem]) -> Result<TrainReport, DiffusionError> {
    let sched = config.schedule()?;
    let mut denoiser = Denoiser::new(config.denoiser_config(), config.seed)?;
    let mut sampler = MixedBatchSampler::new(images, videos, config.image_fraction, config.seed ^ 0x5eed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = sampler.next_batch(config.batch_size)?;
        let report = train_step(&mut denoiser, &batch, &sched, config.lr, config.patch, &mut rng).map_err(|e| match e {
            DiffusionError::NonFinite { sample, t, loss, .. } => DiffusionError::NonFinite { step, sample, t, loss },
            other => other,
        })?;
        losses.push((step, report.loss));
    }
    Ok(TrainReport { denoiser, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: DenoiserConfig,
    pub param_count: usize,
    pub step: usize,
}

/// Writes `<stem>.bin` (little-endian f64 parameters) and `<stem>.json`.
pub fn save_checkpoint(denoiser: &Denoiser, step: usize, stem: &Path) -> Result<(), DiffusionError> {
    let header = CheckpointHeader {
        version: 1,
        config: denoiser.config.clone(),
        param_count: denoiser.params.len(),
        step,
    };
    let json = stem.with_extension("json");
    fs::write(&json, serde_json::to_string_pretty(&header).expect("header serializes")).map_err(io_err(&json))?;
    let bin = stem.with_extension("bin");
    let bytes: Vec<u8> = denoiser.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(io_err(&bin))
}

pub fn load_checkpoint(stem: &Path) -> Result<(Denoiser, usize), DiffusionError> {
    let json = stem.with_extension("json");
    let text = fs::read_to_string(&json).map_err(io_err(&json))?;
    let header: CheckpointHeader = serde_json::from_str(&text)
        .map_err(|e| DiffusionError::Format { path: json.display().to_string(), msg: e.to_string() })?;
    let bin = stem.with_extension("bin");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != header.param_count * 8 || header.config.param_count() != header.param_count {
        return Err(DiffusionError::Format {
            path: bin.display().to_string(),
            msg: format!("{} bytes for {} parameters", bytes.len(), header.param_count),
        });
    }
    let params = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((Denoiser { config: header.config, params }, header.step))
}

/// Loss curve as `step,loss` CSV.
pub fn write_loss_csv(losses: &[(usize, f64)], out: impl Write) -> Result<(), DiffusionError> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| DiffusionError::Io { path: "<csv>".into(), source: std::io::Error::other(e) };
    w.write_record(["step", "loss"]).map_err(to_io)?;
    for (step, loss) in losses {
        w.write_record([step.to_string(), format!("{loss:.9}")]).map_err(to_io)?;
    }
    w.flush().map_err(|source| DiffusionError::Io { path: "<csv>".into(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patchify_shapes() {
        let x = LatentSequence::gaussian(1, 3, 8, 8, &mut rng(0));
        let tok = patchify(&x, 4).unwrap();
        assert_eq!((tok.k, tok.d), (4, 48));
        let whole = patchify(&x, 8).unwrap();
        assert_eq!((whole.k, whole.d), (1, 3 * 64));
        assert!(patchify(&x, 3).is_err());
        assert_eq!(unpatchify(&tok), x);
    }

    #[test]
    fn forward_diffuse_examples() {
        let sched = NoiseSchedule::default();
        let x0 = LatentSequence::gaussian(2, 3, 4, 4, &mut rng(1));
        let eps = LatentSequence::gaussian(2, 3, 4, 4, &mut rng(2));
        assert_eq!(sched.alpha_bar(0), 1.0);
        assert_eq!(forward_diffuse(&x0, 0, &eps, &sched).unwrap(), x0);
        let zero = LatentSequence::zeros(2, 3, 4, 4);
        let xt = forward_diffuse(&x0, 500, &zero, &sched).unwrap();
        let s = sched.alpha_bar(500).sqrt();
        for (a, b) in xt.values.iter().zip(&x0.values) {
            assert_eq!(*a, s * b);
        }
        assert!(forward_diffuse(&x0, 1000, &eps, &sched).is_err());
        assert!(forward_diffuse(&x0, 1, &LatentSequence::zeros(1, 3, 4, 4), &sched).is_err());
    }

    #[test]
    fn forward_diffuse_preserves_unit_variance() {
        let sched = NoiseSchedule::default();
        let mut r = rng(3);
        let n = 100_000;
        let x0 = LatentSequence::gaussian(1, 1, 1, n, &mut r);
        let eps = LatentSequence::gaussian(1, 1, 1, n, &mut r);
        for t in [1, 250, 999] {
            let xt = forward_diffuse(&x0, t, &eps, &sched).unwrap();
            let mean = xt.values.iter().sum::<f64>() / n as f64;
            let var = xt.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::default();
        assert_eq!(s.n_steps(), 1000);
        assert!(s.values().windows(2).all(|w| w[1] < w[0]));
        assert!(s.values().iter().all(|&a| a > 0.0 && a <= 1.0));
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.5]).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err());
    }

    #[test]
    fn masked_loss_examples() {
        let a = LatentSequence::from_values(1, 1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = LatentSequence::zeros(1, 1, 1, 2);
        let m = LossMask::from_bits(2, 1, vec![true, false]).unwrap();
        assert_eq!(masked_loss(&a, &b, &m).unwrap(), 1.0);

        let x = LatentSequence::gaussian(3, 2, 4, 5, &mut rng(4));
        let y = LatentSequence::gaussian(3, 2, 4, 5, &mut rng(5));
        let ones = LossMask::ones(5, 4);
        assert!((masked_loss(&x, &y, &ones).unwrap() - mse(&x, &y).unwrap()).abs() < 1e-15);

        let (l, g) = masked_loss_grad(&x, &y, &LossMask::zeros(5, 4)).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(masked_loss(&x, &y, &LossMask::ones(4, 4)).is_err());
    }

    #[test]
    fn resize_mask_examples() {
        let m = LossMask::from_bits(2, 2, vec![true, false, false, true]).unwrap();
        let r = resize_mask_nearest(&m, 4, 4).unwrap();
        assert_eq!(r.count_included(), 8);
        assert!(r.get(1, 1) && !r.get(2, 1) && r.get(3, 3));
        assert_eq!(resize_mask_nearest(&m, 2, 2).unwrap(), m);
        assert!(resize_mask_nearest(&m, 0, 2).is_err());
    }

    fn pools(n_img: usize, n_vid: usize) -> (Vec<ImageItem>, Vec<VideoItem>) {
        let vocab = ConditionVocab::default();
        let mut r = rng(6);
        let images = (0..n_img)
            .map(|_| ImageItem { latent: LatentSequence::gaussian(1, 3, 4, 8, &mut r), condition: vocab.embed_caption("bright room") })
            .collect();
        let videos = (0..n_vid)
            .map(|i| {
                let mut mask = LossMask::ones(16, 8);
                mask.set(i % 16, 7, false);
                VideoItem {
                    latent: LatentSequence::gaussian(3, 3, 4, 8, &mut r),
                    mask,
                    condition: vocab.embed_caption("dark kitchen"),
                }
            })
            .collect();
        (images, videos)
    }

    #[test]
    fn sampler_mixes_one_third_images() {
        let (images, videos) = pools(3, 5);
        let mut s = MixedBatchSampler::new(&images, &videos, 1.0 / 3.0, 42).unwrap();
        let n = 30_000;
        let mut n_img = 0;
        for _ in 0..n {
            let sample = s.next_sample().unwrap();
            sample.validate().unwrap();
            if sample.kind == SampleKind::Image {
                n_img += 1;
                assert_eq!(sample.mask.count_included(), 32);
            }
        }
        let frac = n_img as f64 / n as f64;
        assert!((0.32..=0.35).contains(&frac), "image fraction {frac}");
    }

    #[test]
    fn sampler_determinism_and_errors() {
        let (images, videos) = pools(2, 2);
        let a = mixed_batch_sampler(&images, &videos, 3, 9).unwrap();
        assert_eq!(a, mixed_batch_sampler(&images, &videos, 3, 9).unwrap());
        for s in &a {
            assert_eq!((s.mask.width(), s.mask.height()), (s.latent.width, s.latent.height));
        }
        assert!(mixed_batch_sampler(&[], &videos, 3, 0).is_err());
        assert!(mixed_batch_sampler(&images, &[], 3, 0).is_err());
        assert!(mixed_batch_sampler(&images, &videos, 2, 0).is_err());
    }

    #[test]
    fn zero_lr_leaves_params_bit_exact() {
        let (images, videos) = pools(2, 2);
        let batch = mixed_batch_sampler(&images, &videos, 4, 1).unwrap();
        let cfg = DenoiserConfig { token_dim: 12, hidden: 8, time_dim: 8, cond_dim: 16, blocks: 1 };
        let mut d = Denoiser::new(cfg, 0).unwrap();
        let before = d.params.clone();
        train_step(&mut d, &batch, &NoiseSchedule::default(), 0.0, 2, &mut rng(0)).unwrap();
        assert_eq!(d.params, before);
    }

    #[test]
    fn checkpoint_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig { token_dim: 12, hidden: 4, time_dim: 4, cond_dim: 3, blocks: 2 };
        let d = Denoiser::new(cfg, 5).unwrap();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&d, 17, &stem).unwrap();
        let (back, step) = load_checkpoint(&stem).unwrap();
        assert_eq!((back, step), (d, 17));
        fs::write(stem.with_extension("bin"), [0u8; 7]).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(DiffusionError::Format { .. })));

        let mut buf = Vec::new();
        write_loss_csv(&[(0, 1.5), (1, 0.25)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,1.500000000\n1,0.250000000\n");
    }

    #[test]
    fn config_from_toml() {
        let cfg = TrainConfig::from_toml("lr = 0.01\npatch = 4\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.patch, 4);
        assert_eq!(cfg.hidden, TrainConfig::default().hidden);
        assert!(TrainConfig::from_toml("lr = \"fast\"").is_err());
    }

    #[test]
    fn caption_embedding_uses_vocab_words() {
        let v = ConditionVocab::default();
        assert!(v.embed_caption("nothing known").iter().all(|&x| x == 0.0));
        assert_eq!(v.embed_caption("A Kitchen!"), v.embed_tag("kitchen").unwrap().to_vec());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(t in 1usize..3, c in 1usize..4, gh in 1usize..4, gw in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let x = LatentSequence::gaussian(t, c, gh * p, gw * p, &mut rng(seed));
            let tok = patchify(&x, p).unwrap();
            prop_assert_eq!(tok.k, t * gh * gw);
            prop_assert_eq!(tok.d, c * p * p);
            prop_assert_eq!(unpatchify(&tok), x);
        }

        #[test]
        fn denoiser_output_shape(t in 1usize..3, gh in 1usize..3, gw in 1usize..3, blocks in 0usize..3, seed in 0u64..100) {
            let p = 2;
            let cfg = DenoiserConfig { token_dim: 3 * p * p, hidden: 5, time_dim: 4, cond_dim: 2, blocks };
            let d = Denoiser::new(cfg, seed).unwrap();
            let x = LatentSequence::gaussian(t, 3, gh * p, gw * p, &mut rng(seed));
            let tok = patchify(&x, p).unwrap();
            let out = d.forward(&tok, &[0.1, -0.2], 7).unwrap();
            prop_assert_eq!(unpatchify(&out).shape(), x.shape());
        }

        #[test]
        fn forward_diffuse_is_linear(scale in -3.0f64..3.0, t in 0usize..1000, seed in 0u64..100) {
            let sched = NoiseSchedule::default();
            let x0 = LatentSequence::gaussian(1, 2, 3, 3, &mut rng(seed));
            let eps = LatentSequence::gaussian(1, 2, 3, 3, &mut rng(seed + 1));
            let scaled = |l: &LatentSequence| LatentSequence { values: l.values.iter().map(|v| v * scale).collect(), ..l.clone() };
            let a = forward_diffuse(&scaled(&x0), t, &scaled(&eps), &sched).unwrap();
            let b = forward_diffuse(&x0, t, &eps, &sched).unwrap();
            for (u, v) in a.values.iter().zip(&b.values) {
                prop_assert!((u - scale * v).abs() <= 1e-12 * (1.0 + v.abs()));
            }
        }

        #[test]
        fn masked_gradient_is_local(bits in proptest::collection::vec(any::<bool>(), 12), seed in 0u64..1000) {
            let m = LossMask::from_bits(4, 3, bits).unwrap();
            let a = LatentSequence::gaussian(2, 3, 3, 4, &mut rng(seed));
            let b = LatentSequence::gaussian(2, 3, 3, 4, &mut rng(seed + 7));
            let (_, g) = masked_loss_grad(&a, &b, &m).unwrap();
            for (i, gv) in g.iter().enumerate() {
                if !m.bits()[i % 12] {
                    prop_assert_eq!(*gv, 0.0);
                }
            }
        }
    }
}
