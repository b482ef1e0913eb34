//! The Gaussian refiner: multi-scale render errors are lifted onto Gaussian
//! centers, mixed by one attention block, and combined with each Gaussian's
//! raw attributes and its anchor's feature. Tokens are serialized along a
//! Morton curve and attended in fixed windows; a zero-initialized head emits
//! an additive update in raw parameter space.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, Tensor, Var};
use crate::cameras::CameraView;
use crate::error::{Error, Result};
use crate::features::{self, SCALE_FACTOR};
use crate::image::Image;
use crate::linalg::Vec3;
use crate::nn;
use crate::raster::{self, RasterSettings};
use crate::scene::{GaussianScene, RAW_DIM};

/// Difference channels before projection: 3 scales × RGB.
pub const BASE_ERROR_CHANNELS: usize = 9;
pub const ERROR_SCALES: [usize; 3] = [2, 4, 8];
pub const MORTON_BITS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub error_dim: usize,
    pub width: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub window: usize,
    /// Repeated refinement passes at inference.
    pub passes: usize,
    pub projection_seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self { error_dim: 24, width: 64, blocks: 2, ffn_mult: 2, window: 64, passes: 1, projection_seed: 0x5eed }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.error_dim < BASE_ERROR_CHANNELS {
            return Err(Error::Config(format!("error_dim must be at least {BASE_ERROR_CHANNELS}")));
        }
        if self.width == 0 || self.window == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("refiner width, window and ffn multiplier must be positive".into()));
        }
        Ok(())
    }
}

/// Fixed `9×D` matrix with orthonormal rows (Gram-Schmidt on seeded normals).
pub fn projection_matrix(seed: u64, dim: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < BASE_ERROR_CHANNELS {
        let mut v = nn::normal_tensor(&mut rng, 1, dim, 1.0).data;
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Tensor { rows: BASE_ERROR_CHANNELS, cols: dim, data: rows.concat() }
}

/// Error features of one view at quarter resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMap {
    pub h: usize,
    pub w: usize,
    /// `(h·w)×D`.
    pub data: Tensor,
}

fn area_pool(img: &Image, s: usize) -> (usize, usize, Vec<[f64; 3]>) {
    let (w, h) = (img.width / s, img.height / s);
    let mut out = vec![[0.0; 3]; w * h];
    let inv = 1.0 / (s * s) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for dy in 0..s {
                for dx in 0..s {
                    let p = img.get(x * s + dx, y * s + dy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            out[y * w + x] = acc.map(|a| a * inv);
        }
    }
    (w, h, out)
}

/// `(h/4·w/4)×9` pooled differences `gt − rendered` at scales 1/2, 1/4, 1/8,
/// bilinearly resampled to quarter resolution.
pub fn base_error_channels(rendered: &Image, gt: &Image) -> Result<Tensor> {
    if rendered.width != gt.width || rendered.height != gt.height {
        return Err(Error::Shape("rendered and reference images differ in size".into()));
    }
    let s_max = *ERROR_SCALES.last().unwrap();
    if !gt.width.is_multiple_of(s_max) || !gt.height.is_multiple_of(s_max) {
        return Err(Error::Shape(format!("error features need sides divisible by {s_max}")));
    }
    let (qw, qh) = (gt.width / SCALE_FACTOR, gt.height / SCALE_FACTOR);
    let mut out = Tensor::zeros(qw * qh, BASE_ERROR_CHANNELS);
    for (si, &s) in ERROR_SCALES.iter().enumerate() {
        let (w, h, a) = area_pool(gt, s);
        let (_, _, b) = area_pool(rendered, s);
        let diff: Vec<[f64; 3]> = a.iter().zip(&b).map(|(x, y)| [x[0] - y[0], x[1] - y[1], x[2] - y[2]]).collect();
        let ratio = SCALE_FACTOR as f64 / s as f64;
        for qy in 0..qh {
            for qx in 0..qw {
                // centre of the quarter cell, in units of the source cells
                let fx = (qx as f64 + 0.5) * ratio - 0.5;
                let fy = (qy as f64 + 0.5) * ratio - 0.5;
                let taps = features::bilinear_taps(fx, fy, h, w, 0);
                for c in 0..3 {
                    out.data[(qy * qw + qx) * BASE_ERROR_CHANNELS + si * 3 + c] = taps.iter().map(|(r, wt)| wt * diff[*r][c]).sum();
                }
            }
        }
    }
    Ok(out)
}

pub fn error_features(rendered: &Image, gt: &Image, projection: &Tensor) -> Result<ErrorMap> {
    let base = base_error_channels(rendered, gt)?;
    Ok(ErrorMap { h: gt.height / SCALE_FACTOR, w: gt.width / SCALE_FACTOR, data: crate::autodiff::matmul(&base, projection) })
}

/// Mean of bilinear error samples over the views where each center is
/// visible. Returns `M×D` features and the per-row visible counts.
pub fn lift_errors(maps: &[ErrorMap], centers_world: &[Vec3], views: &[CameraView], tau: f64) -> Result<(Tensor, Vec<usize>)> {
    if maps.len() != views.len() || maps.is_empty() {
        return Err(Error::Shape("one error map per view is required".into()));
    }
    let d = maps[0].data.cols;
    let rows = crate::parallel::map_indexed(centers_world.len(), |i| {
        let mut acc = vec![0.0; d];
        let mut count = 0usize;
        for (m, v) in maps.iter().zip(views) {
            if let Some((u, vv)) = features::visible_at(centers_world[i], v, tau) {
                let s = SCALE_FACTOR as f64;
                let taps = features::bilinear_taps(u / s, vv / s, m.h, m.w, 0);
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += taps.iter().map(|(r, wt)| wt * m.data.at(*r, j)).sum::<f64>();
                }
                count += 1;
            }
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        (acc, count)
    });
    let counts = rows.iter().map(|r| r.1).collect();
    let data = rows.into_iter().flat_map(|r| r.0).collect();
    Ok((Tensor { rows: centers_world.len(), cols: d, data }, counts))
}

/// Interleaves three 10-bit grid coordinates: x → bit 3i, y → 3i+1, z → 3i+2.
pub fn morton_code(ix: u32, iy: u32, iz: u32) -> u64 {
    let mut code = 0u64;
    for i in 0..MORTON_BITS {
        code |= (((ix >> i) & 1) as u64) << (3 * i);
        code |= (((iy >> i) & 1) as u64) << (3 * i + 1);
        code |= (((iz >> i) & 1) as u64) << (3 * i + 2);
    }
    code
}

fn quantize_axis(v: f64) -> u32 {
    let cells = (1u32 << MORTON_BITS) as f64;
    let q = ((v + 1.0) * 0.5 * cells).floor();
    q.clamp(0.0, cells - 1.0) as u32
}

/// Serialization order of normalized points; ties keep index order.
pub fn morton_order(points: &[Vec3]) -> Vec<usize> {
    let codes: Vec<u64> = points.iter().map(|p| morton_code(quantize_axis(p[0]), quantize_axis(p[1]), quantize_axis(p[2]))).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by_key(|&i| (codes[i], i));
    order
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inv[i] = pos;
    }
    inv
}

fn ser_block(i: usize) -> String {
    format!("ref.ser{i}")
}

pub fn init_refiner(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &RefinerConfig, feature_dim: usize) {
    nn::init_block(p, rng, "ref.err", cfg.error_dim, cfg.ffn_mult, true);
    nn::init_linear(p, rng, "ref.in", RAW_DIM + feature_dim + cfg.error_dim, cfg.width, 1.0);
    for i in 0..cfg.blocks {
        nn::init_block(p, rng, &ser_block(i), cfg.width, cfg.ffn_mult, false);
    }
    nn::init_linear(p, rng, "ref.head", cfg.width, RAW_DIM, 0.0);
}

/// One attention block over all error tokens.
pub fn error_attention(g: &mut Graph, errors: Var) -> Result<Var> {
    nn::block(g, errors, "ref.err", None)
}

/// Additive raw update for every Gaussian. `raw` is `M×14` (anchor-major,
/// `per_anchor` rows per anchor), `anchor_feats` is `N×C`, `eps` is `M×D`.
pub fn serialized_update(
    g: &mut Graph,
    raw: Var,
    anchor_feats: Var,
    eps: Var,
    means: &[Vec3],
    per_anchor: usize,
    cfg: &RefinerConfig,
) -> Result<Var> {
    let m = g.value(raw).rows;
    if g.value(eps).rows != m || means.len() != m || g.value(anchor_feats).rows * per_anchor != m {
        return Err(Error::Shape("refiner token counts disagree".into()));
    }
    let parent: Vec<usize> = (0..m).map(|j| j / per_anchor).collect();
    let shared = g.gather_rows(anchor_feats, &parent)?;
    let x = g.concat_cols(&[raw, shared, eps])?;
    let x = nn::linear(g, x, "ref.in")?;
    let order = morton_order(means);
    let mut h = g.gather_rows(x, &order)?;
    for i in 0..cfg.blocks {
        h = nn::block(g, h, &ser_block(i), Some(cfg.window))?;
    }
    let delta = nn::linear(g, h, "ref.head")?;
    g.gather_rows(delta, &inverse_permutation(&order))
}

/// Error tokens of a scene against reference views (no gradient).
pub fn scene_error_tokens(scene: &GaussianScene, views: &[CameraView], settings: &RasterSettings, cfg: &RefinerConfig, tau: f64) -> Result<Tensor> {
    let proj = projection_matrix(cfg.projection_seed, cfg.error_dim);
    let gs = scene.gaussians();
    let mut maps = Vec::with_capacity(views.len());
    for v in views {
        let r = raster::render_gaussians(&gs, &scene.normalization, &v.intrinsics, &v.extrinsics, settings)?;
        maps.push(error_features(&r.rgb, &v.image, &proj)?);
    }
    let centers: Vec<Vec3> = gs.iter().map(|g| scene.normalization.denormalize(g.mean)).collect();
    Ok(lift_errors(&maps, &centers, views, tau)?.0)
}

/// Builds `raw + δ` on the graph for fixed error tokens and anchor features.
pub fn refine_graph(
    g: &mut Graph,
    scene: &GaussianScene,
    anchor_feats: Var,
    errors: &Tensor,
    cfg: &RefinerConfig,
) -> Result<Var> {
    let raw = g.input(crate::decoder::raw_to_tensor(&scene.raw));
    let e = g.input(errors.clone());
    let eps = error_attention(g, e)?;
    let means: Vec<Vec3> = scene.gaussians().iter().map(|x| x.mean).collect();
    let delta = serialized_update(g, raw, anchor_feats, eps, &means, scene.gaussians_per_anchor, cfg)?;
    g.add(raw, delta)
}

/// Runs `passes` refinement passes, re-rendering before each one.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    scene: &GaussianScene,
    anchor_features: &Tensor,
    views: &[CameraView],
    params: &ParamSet,
    cfg: &RefinerConfig,
    settings: &RasterSettings,
    tau: f64,
    passes: usize,
) -> Result<GaussianScene> {
    let mut current = scene.clone();
    for _ in 0..passes {
        let errors = scene_error_tokens(&current, views, settings, cfg, tau)?;
        let mut g = Graph::new(params);
        let f = g.input(anchor_features.clone());
        let out = refine_graph(&mut g, &current, f, &errors, cfg)?;
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite("refined parameters".into()));
        }
        current = current.with_raw(crate::decoder::raw_from_tensor(g.value(out)))?;
    }
    Ok(current)
}

/// World-space centers of a scene's Gaussians.
pub fn world_centers(scene: &GaussianScene) -> Vec<Vec3> {
    scene.gaussians().iter().map(|g| scene.normalization.denormalize(g.mean)).collect()
}
