//! Per-view input stacking, the strided convolutional encoder and lifting of
//! feature maps onto anchors.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamSet, PoolingMode, Taps, Tensor, Var};
use crate::cameras::{self, CameraView};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::nn;

pub const INPUT_CHANNELS: usize = 10;
/// Input pixels per feature cell along each axis.
pub const SCALE_FACTOR: usize = 4;

/// Which input groups are fed to the encoder; masked channels are zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelMask {
    pub rgb: bool,
    pub depth: bool,
    pub ray: bool,
}

impl Default for ChannelMask {
    fn default() -> Self {
        Self { rgb: true, depth: true, ray: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Relative depth tolerance of the visibility test.
    pub tau: f64,
    pub pooling: PoolingMode,
    pub channels: ChannelMask,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { feature_dim: 32, hidden_dim: 16, tau: 0.05, pooling: PoolingMode::Avg, channels: ChannelMask::default() }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("feature widths must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("visibility tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// `(H·W)×10` rows of `[rgb, depth / half_extent, plücker ray]`.
pub fn stack_inputs(view: &CameraView, half_extent: f64, mask: ChannelMask) -> Tensor {
    let (w, h) = (view.width(), view.height());
    let mut t = Tensor::zeros(w * h, INPUT_CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let row = &mut t.data[(y * w + x) * INPUT_CHANNELS..(y * w + x + 1) * INPUT_CHANNELS];
            if mask.rgb {
                row[..3].copy_from_slice(&view.image.get(x, y));
            }
            if mask.depth {
                row[3] = view.depth.get(x, y) / half_extent;
            }
            if mask.ray {
                let r = cameras::ray_embedding(x as f64, y as f64, &view.intrinsics, &view.extrinsics);
                row[4..].copy_from_slice(&r);
            }
        }
    }
    t
}

pub fn init_encoder(p: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: &FeatureConfig) {
    nn::init_linear(p, rng, "enc.conv1", 9 * INPUT_CHANNELS, cfg.hidden_dim, 1.0);
    nn::init_linear(p, rng, "enc.conv2", 9 * cfg.hidden_dim, cfg.feature_dim, 1.0);
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(SCALE_FACTOR) || !w.is_multiple_of(SCALE_FACTOR) || h == 0 || w == 0 {
        return Err(Error::Shape(format!("encoder input {w}x{h} must have sides divisible by {SCALE_FACTOR}")));
    }
    Ok(())
}

/// Two stride-2 3×3 convolutions with a GELU in between.
pub fn encode(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    check_dims(h, w)?;
    let c1 = g.im2col(x, h, w)?;
    let f1 = nn::linear(g, c1, "enc.conv1")?;
    let f1 = g.gelu(f1);
    let c2 = g.im2col(f1, h / 2, w / 2)?;
    nn::linear(g, c2, "enc.conv2")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `(h·w)×C`, row-major over cells.
    pub data: Tensor,
    pub h: usize,
    pub w: usize,
    pub scale_factor: usize,
    pub view_id: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.cols
    }
}

pub fn encode_view(stacked: &Tensor, h: usize, w: usize, params: &ParamSet, view_id: usize) -> Result<FeatureMap> {
    if stacked.shape() != (h * w, INPUT_CHANNELS) {
        return Err(Error::Shape(format!("stacked input {:?} for a {w}x{h} view", stacked.shape())));
    }
    let mut g = Graph::new(params);
    let x = g.input(stacked.clone());
    let f = encode(&mut g, x, h, w)?;
    Ok(FeatureMap { data: g.value(f).clone(), h: h / SCALE_FACTOR, w: w / SCALE_FACTOR, scale_factor: SCALE_FACTOR, view_id })
}

/// Depth-consistency visibility of a world point in a view.
pub fn visibility(p: Vec3, view: &CameraView, tau: f64) -> bool {
    visible_at(p, view, tau).is_some()
}

/// Projected `(u, v)` when the point passes the visibility test.
pub fn visible_at(p: Vec3, view: &CameraView, tau: f64) -> Option<(f64, f64)> {
    let pr = cameras::project_point(p, &view.intrinsics, &view.extrinsics);
    if pr.behind || !pr.u.is_finite() || !pr.v.is_finite() {
        return None;
    }
    let (x, y) = (pr.u.round(), pr.v.round());
    if x < 0.0 || y < 0.0 || x >= view.width() as f64 || y >= view.height() as f64 {
        return None;
    }
    let d = view.depth.get(x as usize, y as usize);
    if !(d > 0.0) || (d - pr.z).abs() / pr.z > tau {
        return None;
    }
    Some((pr.u, pr.v))
}

/// Bilinear taps at feature coordinates `(fx, fy)` of an `fh×fw` grid whose
/// rows start at `offset`. Coordinates are clamped to the grid.
pub fn bilinear_taps(fx: f64, fy: f64, fh: usize, fw: usize, offset: usize) -> Taps {
    let axis = |f: f64, n: usize| -> (usize, usize, f64) {
        let f = f.clamp(0.0, (n - 1) as f64);
        if n == 1 {
            return (0, 0, 0.0);
        }
        let i0 = (f.floor() as usize).min(n - 2);
        (i0, i0 + 1, f - i0 as f64)
    };
    let (x0, x1, tx) = axis(fx, fw);
    let (y0, y1, ty) = axis(fy, fh);
    [
        (offset + y0 * fw + x0, (1.0 - tx) * (1.0 - ty)),
        (offset + y0 * fw + x1, tx * (1.0 - ty)),
        (offset + y1 * fw + x0, (1.0 - tx) * ty),
        (offset + y1 * fw + x1, tx * ty),
    ]
}

/// Taps for one world point over all views whose maps are stacked row-wise
/// in view order. Only views passing the visibility test contribute.
pub fn point_taps(p: Vec3, views: &[CameraView], tau: f64) -> Vec<Taps> {
    let mut offset = 0;
    let mut out = Vec::new();
    for v in views {
        let (fh, fw) = (v.height() / SCALE_FACTOR, v.width() / SCALE_FACTOR);
        if let Some((u, vv)) = visible_at(p, v, tau) {
            let s = SCALE_FACTOR as f64;
            out.push(bilinear_taps(u / s, vv / s, fh, fw, offset));
        }
        offset += fh * fw;
    }
    out
}

/// Pooled feature of one world-space anchor and the number of views that saw it.
pub fn aggregate_anchor(anchor: Vec3, maps: &[FeatureMap], views: &[CameraView], mode: PoolingMode, tau: f64) -> Result<(Vec<f64>, usize)> {
    if maps.len() != views.len() || maps.is_empty() {
        return Err(Error::Shape("one feature map per view is required".into()));
    }
    let c = maps[0].channels();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    for (m, v) in maps.iter().zip(views) {
        if let Some((u, vv)) = visible_at(anchor, v, tau) {
            let s = m.scale_factor as f64;
            let taps = bilinear_taps(u / s, vv / s, m.h, m.w, 0);
            samples.push((0..c).map(|j| taps.iter().map(|(r, w)| w * m.data.at(*r, j)).sum()).collect());
        }
    }
    let count = samples.len();
    if count == 0 {
        return Ok((vec![0.0; c], 0));
    }
    let out = match mode {
        PoolingMode::Avg => (0..c).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / count as f64).collect(),
        PoolingMode::Max => (0..c).map(|j| samples.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max)).collect(),
        PoolingMode::Fifo => samples.swap_remove(0),
    };
    Ok((out, count))
}

/// Builds the encoder over all views and pools onto world-space anchors.
/// Returns the pooled `N×C` node.
pub fn lift_to_anchors(g: &mut Graph, views: &[CameraView], anchors_world: &[Vec3], half_extent: f64, cfg: &FeatureConfig) -> Result<Var> {
    let mut maps = Vec::with_capacity(views.len());
    for v in views {
        let x = g.input(stack_inputs(v, half_extent, cfg.channels));
        maps.push(encode(g, x, v.height(), v.width())?);
    }
    let stacked = if maps.len() == 1 { maps[0] } else { g.concat_rows(&maps)? };
    let taps = crate::parallel::map_indexed(anchors_world.len(), |i| point_taps(anchors_world[i], views, cfg.tau));
    g.anchor_pool(stacked, taps, cfg.pooling)
}
