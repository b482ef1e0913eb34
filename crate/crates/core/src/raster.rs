//! Tile-based differentiable Gaussian splatting on the CPU.
//!
//! Gaussians are projected with the EWA approximation, binned into square
//! tiles, depth sorted per tile (ties by id) and alpha composited front to
//! back. The footprint of a splat is truncated at three standard deviations
//! with the kernel shifted so it reaches zero exactly at the cutoff; this
//! keeps the image continuous in every parameter and makes the tile binning
//! exact. Compositing stops once transmittance drops below [`T_MIN`]. The
//! projection Jacobian is evaluated at image-plane slopes clamped to a guard
//! band around the frustum.
//!
//! The backward pass recomputes each pixel's contribution list and walks it
//! back to front. Per-tile gradient partials are reduced in tile order so the
//! result is bit-identical for any number of workers.

use crate::cameras::{Extrinsics, Intrinsics};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::linalg::{self, Mat3, Vec3};
use crate::parallel;
use crate::scene::{self, ActivatedGrad, ActivationConfig, Gaussian, GaussianScene, RawGaussian, SceneNormalization, SH_C0};

/// Dilation added to the projected covariance diagonal (pixels²).
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;
/// Footprint cutoff in standard deviations.
pub const CUTOFF_SIGMA: f64 = 3.0;
const DEPTH_EPS: f64 = 1e-8;

/// `exp(−CUTOFF_SIGMA²/2)`, the kernel value at the cutoff.
const KERNEL_FLOOR: f64 = 0.011108996538242306;

#[inline]
fn kernel_floor() -> f64 {
    KERNEL_FLOOR
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSettings {
    pub tile_size: usize,
    pub background: Vec3,
    pub z_near: f64,
}

impl Default for RasterSettings {
    fn default() -> Self {
        Self { tile_size: 16, background: [0.0; 3], z_near: crate::cameras::Z_NEAR }
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Dilated image-space covariance `(xx, xy, yy)`.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same layout.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: Vec3,
    pub opacity: f64,
    pub gaussian_id: usize,
    /// Inclusive pixel range `[x0, x1] × [y0, y1]` covered by the footprint.
    pub pixel_rect: [usize; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: DepthMap,
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }
}

/// Upstream gradients on a [`RenderOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
}

impl RenderGrad {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { rgb: vec![0.0; width * height * 3], depth: vec![0.0; width * height], alpha: None }
    }
}

/// World-space mean and covariance of a normalized-units Gaussian.
fn world_moments(g: &Gaussian, norm: &SceneNormalization) -> (Vec3, Mat3) {
    let mean = norm.denormalize(g.mean);
    let h2 = norm.half_extent * norm.half_extent;
    let cov = g.covariance().map(|row| row.map(|v| v * h2));
    (mean, cov)
}

/// Image-plane slopes `x/z`, `y/z` beyond which the Jacobian is evaluated at
/// the clamped slope (1.3× the half field of view), so Gaussians far outside
/// the frustum do not blow up into screen-filling splats.
const GUARD_BAND: f64 = 1.3;

/// Clamped slopes and whether each one was clamped.
fn guarded_slopes(t: Vec3, k: &Intrinsics) -> ([f64; 2], [bool; 2]) {
    let lim = [GUARD_BAND * 0.5 * k.width as f64 / k.fx, GUARD_BAND * 0.5 * k.height as f64 / k.fy];
    let mut r = [t[0] / t[2], t[1] / t[2]];
    let mut clamped = [false; 2];
    for a in 0..2 {
        if r[a].abs() > lim[a] {
            r[a] = lim[a].copysign(r[a]);
            clamped[a] = true;
        }
    }
    (r, clamped)
}

fn perspective_jacobian(t: Vec3, k: &Intrinsics) -> [[f64; 3]; 2] {
    let iz = 1.0 / t[2];
    let (r, _) = guarded_slopes(t, k);
    [[k.fx * iz, 0.0, -k.fx * r[0] * iz], [0.0, k.fy * iz, -k.fy * r[1] * iz]]
}

/// `J·M·Jᵀ` for a 2×3 `J` and symmetric 3×3 `M`, as `(xx, xy, yy)`.
fn jmjt(j: &[[f64; 3]; 2], m: &Mat3) -> [f64; 3] {
    let jm: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|k| j[r][k] * m[k][c]).sum()));
    let e = |r: usize, c: usize| (0..3).map(|k| jm[r][k] * j[c][k]).sum::<f64>();
    [e(0, 0), e(0, 1), e(1, 1)]
}

/// Covariance in camera coordinates, `Rᵀ·Σ·R`.
fn camera_covariance(cov: &Mat3, e: &Extrinsics) -> Mat3 {
    let r = &e.rotation;
    linalg::mat_mul(&linalg::transpose(r), &linalg::mat_mul(cov, r))
}

/// EWA projection; `None` when behind the camera or entirely off-image.
pub fn project_gaussian(
    g: &Gaussian,
    norm: &SceneNormalization,
    k: &Intrinsics,
    e: &Extrinsics,
    z_near: f64,
) -> Option<Splat2D> {
    let (mean, cov) = world_moments(g, norm);
    let t = e.world_to_camera(mean);
    if !(t[2] > z_near) {
        return None;
    }
    let j = perspective_jacobian(t, k);
    let m = camera_covariance(&cov, e);
    let c = jmjt(&j, &m);
    let cov2d = [c[0] + LOW_PASS, c[1], c[2] + LOW_PASS];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];
    let u = k.fx * t[0] / t[2] + k.cx;
    let v = k.fy * t[1] / t[2] + k.cy;
    let rx = CUTOFF_SIGMA * cov2d[0].sqrt();
    let ry = CUTOFF_SIGMA * cov2d[2].sqrt();
    let (w, h) = (k.width as f64, k.height as f64);
    let x0 = (u - rx).ceil().max(0.0);
    let x1 = (u + rx).floor().min(w - 1.0);
    let y0 = (v - ry).ceil().max(0.0);
    let y1 = (v + ry).floor().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some(Splat2D {
        mean2d: [u, v],
        cov2d,
        conic,
        depth: t[2],
        color: g.color(),
        opacity: g.opacity,
        gaussian_id: 0,
        pixel_rect: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Compositing weight of a splat at pixel offset `(dx, dy)`; also returns
/// the untruncated kernel value and whether the opacity clamp is active.
#[inline]
pub fn splat_weight(s: &Splat2D, dx: f64, dy: f64) -> Option<(f64, f64, bool)> {
    let rho = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
    if rho >= CUTOFF_SIGMA * CUTOFF_SIGMA {
        return None;
    }
    let g = (-0.5 * rho).exp();
    let floor = kernel_floor();
    let shaped = (g - floor) / (1.0 - floor);
    let w = s.opacity * shaped;
    if w <= 0.0 {
        return None;
    }
    if w > ALPHA_MAX {
        Some((ALPHA_MAX, g, true))
    } else {
        Some((w, g, false))
    }
}

struct Binned {
    splats: Vec<Splat2D>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn check_finite(gs: &[Gaussian]) -> Result<()> {
    for (i, g) in gs.iter().enumerate() {
        let ok = g.mean.iter().chain(&g.scale).chain(&g.rotation).chain(&g.sh).all(|v| v.is_finite()) && g.opacity.is_finite();
        if !ok {
            return Err(Error::NonFiniteGaussian(i));
        }
    }
    Ok(())
}

fn bin(gs: &[Gaussian], norm: &SceneNormalization, k: &Intrinsics, e: &Extrinsics, settings: &RasterSettings) -> Binned {
    let ts = settings.tile_size.max(1);
    let tiles_x = k.width.div_ceil(ts);
    let tiles_y = k.height.div_ceil(ts);
    let mut splats = Vec::new();
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    for (id, g) in gs.iter().enumerate() {
        if let Some(mut s) = project_gaussian(g, norm, k, e, settings.z_near) {
            s.gaussian_id = id;
            let idx = splats.len() as u32;
            let [x0, x1, y0, y1] = s.pixel_rect;
            for ty in y0 / ts..=y1 / ts {
                for tx in x0 / ts..=x1 / ts {
                    tiles[ty * tiles_x + tx].push(idx);
                }
            }
            splats.push(s);
        }
    }
    for list in &mut tiles {
        list.sort_by(|&a, &b| {
            let (sa, sb) = (&splats[a as usize], &splats[b as usize]);
            sa.depth.total_cmp(&sb.depth).then(sa.gaussian_id.cmp(&sb.gaussian_id))
        });
    }
    Binned { splats, tiles, tiles_x, tiles_y }
}

/// Cheap rejection by the footprint rectangle; exact because the 3σ
/// ellipse lies inside it.
#[inline]
fn covers(s: &Splat2D, x: usize, y: usize) -> bool {
    let [x0, x1, y0, y1] = s.pixel_rect;
    x >= x0 && x <= x1 && y >= y0 && y <= y1
}

fn tile_pixels(tile: usize, b: &Binned, ts: usize, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = (tile % b.tiles_x, tile / b.tiles_x);
    let (x0, y0) = (tx * ts, ty * ts);
    let (x1, y1) = ((x0 + ts).min(w), (y0 + ts).min(h));
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Per-pixel compositing result.
#[derive(Clone, Copy)]
struct PixelOut {
    color: Vec3,
    depth_sum: f64,
    transmittance: f64,
}

/// The splats of one tile, copied into depth order for locality.
fn tile_splats(b: &Binned, tile: usize) -> Vec<Splat2D> {
    b.tiles[tile].iter().map(|&i| b.splats[i as usize]).collect()
}

fn composite_pixel(list: &[Splat2D], x: usize, y: usize) -> PixelOut {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut depth_sum = 0.0;
    for s in list {
        if !covers(s, x, y) {
            continue;
        }
        let Some((w, _, _)) = splat_weight(s, x as f64 - s.mean2d[0], y as f64 - s.mean2d[1]) else {
            continue;
        };
        let wt = w * t;
        for c in 0..3 {
            color[c] += s.color[c] * wt;
        }
        depth_sum += s.depth * wt;
        t *= 1.0 - w;
        if t < T_MIN {
            break;
        }
    }
    PixelOut { color, depth_sum, transmittance: t }
}

/// Renders activated Gaussians (normalized units) from one camera.
pub fn render_gaussians(
    gs: &[Gaussian],
    norm: &SceneNormalization,
    k: &Intrinsics,
    e: &Extrinsics,
    settings: &RasterSettings,
) -> Result<RenderOutput> {
    check_finite(gs)?;
    let (w, h) = (k.width, k.height);
    let ts = settings.tile_size.max(1);
    let binned = bin(gs, norm, k, e, settings);
    let per_tile = parallel::map_indexed(binned.tiles.len(), |tile| {
        let local = tile_splats(&binned, tile);
        tile_pixels(tile, &binned, ts, w, h)
            .map(|(x, y)| (x, y, composite_pixel(&local, x, y)))
            .collect::<Vec<_>>()
    });
    let mut rgb = Image::new(w, h);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut alpha = vec![0.0; w * h];
    let bg = settings.background;
    for tile in per_tile {
        for (x, y, p) in tile {
            let a = 1.0 - p.transmittance;
            rgb.set(x, y, std::array::from_fn(|c| p.color[c] + p.transmittance * bg[c]));
            alpha[y * w + x] = a;
            if a > 0.0 {
                depth.set(x, y, p.depth_sum / a.max(DEPTH_EPS));
            }
        }
    }
    Ok(RenderOutput { rgb, depth, alpha })
}

/// Renders a stored scene into a camera view.
pub fn render(scene: &GaussianScene, k: &Intrinsics, e: &Extrinsics, settings: &RasterSettings) -> Result<RenderOutput> {
    if scene.num_gs() == 0 {
        return Err(Error::Precondition("cannot render an empty scene".into()));
    }
    render_gaussians(&scene.gaussians(), &scene.normalization, k, e, settings)
}

/// Number of splats binned to each tile, row-major over tiles.
pub fn tile_counts(gs: &[Gaussian], norm: &SceneNormalization, k: &Intrinsics, e: &Extrinsics, settings: &RasterSettings) -> Vec<usize> {
    bin(gs, norm, k, e, settings).tiles.iter().map(Vec::len).collect()
}

/// Image-space gradient of one splat:
/// `[u, v, conic_xx, conic_xy, conic_yy, opacity, r, g, b, depth]`.
type SplatGrad = [f64; 10];

struct Contribution {
    local: usize,
    w: f64,
    t: f64,
    kernel: f64,
    clamped: bool,
}

fn backward_tile(b: &Binned, tile: usize, ts: usize, w: usize, h: usize, bg: Vec3, grad: &RenderGrad) -> Vec<SplatGrad> {
    let list = tile_splats(b, tile);
    let mut out = vec![[0.0; 10]; list.len()];
    let mut contribs: Vec<Contribution> = Vec::new();
    let floor = kernel_floor();
    for (x, y) in tile_pixels(tile, b, ts, w, h) {
        let p = y * w + x;
        let g_rgb = [grad.rgb[3 * p], grad.rgb[3 * p + 1], grad.rgb[3 * p + 2]];
        let g_depth = grad.depth[p];
        let g_alpha_ext = grad.alpha.as_ref().map_or(0.0, |a| a[p]);
        if g_rgb == [0.0; 3] && g_depth == 0.0 && g_alpha_ext == 0.0 {
            continue;
        }
        contribs.clear();
        let mut t = 1.0;
        let mut depth_sum = 0.0;
        for (local, s) in list.iter().enumerate() {
            if !covers(s, x, y) {
                continue;
            }
            let Some((wgt, kernel, clamped)) = splat_weight(s, x as f64 - s.mean2d[0], y as f64 - s.mean2d[1]) else {
                continue;
            };
            contribs.push(Contribution { local, w: wgt, t, kernel, clamped });
            depth_sum += s.depth * wgt * t;
            t *= 1.0 - wgt;
            if t < T_MIN {
                break;
            }
        }
        if contribs.is_empty() {
            continue;
        }
        let a = 1.0 - t;
        let (g_sz, g_a_depth) = if a > DEPTH_EPS {
            (g_depth / a, -g_depth * depth_sum / (a * a))
        } else if a > 0.0 {
            (g_depth / DEPTH_EPS, 0.0)
        } else {
            (0.0, 0.0)
        };
        let g_a = g_a_depth + g_alpha_ext - (g_rgb[0] * bg[0] + g_rgb[1] * bg[1] + g_rgb[2] * bg[2]);
        let mut suffix = 0.0;
        for c in contribs.iter().rev() {
            let s = &list[c.local];
            let e_k = g_rgb[0] * s.color[0] + g_rgb[1] * s.color[1] + g_rgb[2] * s.color[2] + g_sz * s.depth + g_a;
            let wt = c.w * c.t;
            let g_w = e_k * c.t - suffix / (1.0 - c.w);
            suffix += e_k * wt;
            let acc = &mut out[c.local];
            for ch in 0..3 {
                acc[6 + ch] += g_rgb[ch] * wt;
            }
            acc[9] += g_sz * wt;
            if c.clamped {
                continue;
            }
            let shaped = (c.kernel - floor) / (1.0 - floor);
            acc[5] += g_w * shaped;
            let g_kernel = g_w * s.opacity / (1.0 - floor);
            let g_rho = -0.5 * c.kernel * g_kernel;
            let dx = x as f64 - s.mean2d[0];
            let dy = y as f64 - s.mean2d[1];
            acc[2] += g_rho * dx * dx;
            acc[3] += g_rho * 2.0 * dx * dy;
            acc[4] += g_rho * dy * dy;
            acc[0] -= g_rho * 2.0 * (s.conic[0] * dx + s.conic[1] * dy);
            acc[1] -= g_rho * 2.0 * (s.conic[1] * dx + s.conic[2] * dy);
        }
    }
    out
}

/// Pulls an image-space splat gradient back to the activated attributes.
fn splat_backward(
    g: &Gaussian,
    s: &Splat2D,
    sg: &SplatGrad,
    norm: &SceneNormalization,
    k: &Intrinsics,
    e: &Extrinsics,
) -> ActivatedGrad {
    let (mean, cov) = world_moments(g, norm);
    let t = e.world_to_camera(mean);
    let jac = perspective_jacobian(t, k);
    let m = camera_covariance(&cov, e);

    // conic = cov2d⁻¹  ⇒  dcov2d = −conic · dconic · conic (symmetric form)
    let q = [[s.conic[0], s.conic[1]], [s.conic[1], s.conic[2]]];
    let gq = [[sg[2], 0.5 * sg[3]], [0.5 * sg[3], sg[4]]];
    let mut gcov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for a in 0..2 {
                for bb in 0..2 {
                    acc += q[i][a] * gq[a][bb] * q[bb][j];
                }
            }
            gcov[i][j] = -acc;
        }
    }
    // cov2d = J·M·Jᵀ + dilation
    let jm: [[f64; 3]; 2] = std::array::from_fn(|r| std::array::from_fn(|c| (0..3).map(|kk| jac[r][kk] * m[kk][c]).sum()));
    let mut g_j = [[0.0; 3]; 2];
    for r in 0..2 {
        for c in 0..3 {
            g_j[r][c] = 2.0 * (gcov[r][0] * jm[0][c] + gcov[r][1] * jm[1][c]);
        }
    }
    let mut g_m = [[0.0; 3]; 3];
    for a in 0..3 {
        for bb in 0..3 {
            g_m[a][bb] = (0..2).map(|r| (0..2).map(|c| jac[r][a] * gcov[r][c] * jac[c][bb]).sum::<f64>()).sum();
        }
    }
    // M = Rᵀ·Σ·R  ⇒  dΣ = R·dM·Rᵀ
    let r = &e.rotation;
    let g_sigma = linalg::mat_mul(r, &linalg::mat_mul(&g_m, &linalg::transpose(r)));
    // Σ = Rq·diag(S²)·Rqᵀ with S = h·s
    let h = norm.half_extent;
    let rq = linalg::quat_to_mat(g.rotation);
    let big_s = g.scale.map(|v| v * h);
    let mut g_rq = [[0.0; 3]; 3];
    for i in 0..3 {
        for c in 0..3 {
            g_rq[i][c] = 2.0 * (0..3).map(|kk| g_sigma[i][kk] * rq[kk][c]).sum::<f64>() * big_s[c] * big_s[c];
        }
    }
    let mut g_scale = [0.0; 3];
    for c in 0..3 {
        let diag: f64 = (0..3).map(|i| (0..3).map(|kk| rq[i][c] * g_sigma[i][kk] * rq[kk][c]).sum::<f64>()).sum();
        g_scale[c] = 2.0 * big_s[c] * diag * h;
    }
    let g_rot = linalg::quat_to_mat_backward(g.rotation, &g_rq);

    // camera-space mean
    let iz = 1.0 / t[2];
    let (fx, fy) = (k.fx, k.fy);
    // J[a][2] = −f·r_a/z with r_a = x_a/z unless clamped (then constant)
    let (slope, clamped) = guarded_slopes(t, k);
    let f = [fx, fy];
    let mut g_t = [0.0; 3];
    g_t[0] = sg[0] * fx * iz;
    g_t[1] = sg[1] * fy * iz;
    g_t[2] = -sg[0] * fx * t[0] * iz * iz - sg[1] * fy * t[1] * iz * iz + g_j[0][0] * (-fx * iz * iz) + g_j[1][1] * (-fy * iz * iz) + sg[9];
    for a in 0..2 {
        if clamped[a] {
            g_t[2] += g_j[a][2] * f[a] * slope[a] * iz * iz;
        } else {
            g_t[a] += g_j[a][2] * (-f[a] * iz * iz);
            g_t[2] += g_j[a][2] * (2.0 * f[a] * t[a] * iz * iz * iz);
        }
    }
    let g_mean_world = linalg::mat_vec(r, g_t);
    let g_offset = g_mean_world.map(|v| v * h);

    let mut g_sh = [0.0; 3];
    for c in 0..3 {
        let lin = 0.5 + SH_C0 * g.sh[c];
        if lin > 0.0 && lin < 1.0 {
            g_sh[c] = sg[6 + c] * SH_C0;
        }
    }
    ActivatedGrad { offset: g_offset, opacity: sg[5], scale: g_scale, rotation: g_rot, sh: g_sh }
}

/// Gradient of a loss with respect to the activated attributes of every
/// Gaussian, given upstream image gradients. Culled Gaussians get zeros.
pub fn render_backward_gaussians(
    gs: &[Gaussian],
    norm: &SceneNormalization,
    k: &Intrinsics,
    e: &Extrinsics,
    settings: &RasterSettings,
    grad: &RenderGrad,
) -> Result<Vec<ActivatedGrad>> {
    let (w, h) = (k.width, k.height);
    if grad.rgb.len() != w * h * 3 || grad.depth.len() != w * h || grad.alpha.as_ref().is_some_and(|a| a.len() != w * h) {
        return Err(Error::Shape(format!("gradient images do not match the {w}x{h} camera")));
    }
    check_finite(gs)?;
    let ts = settings.tile_size.max(1);
    let binned = bin(gs, norm, k, e, settings);
    let partials =
        parallel::map_indexed(binned.tiles.len(), |tile| backward_tile(&binned, tile, ts, w, h, settings.background, grad));
    let mut splat_grads = vec![[0.0; 10]; binned.splats.len()];
    for (tile, part) in partials.iter().enumerate() {
        for (local, g) in part.iter().enumerate() {
            let acc = &mut splat_grads[binned.tiles[tile][local] as usize];
            for i in 0..10 {
                acc[i] += g[i];
            }
        }
    }
    let mut out = vec![ActivatedGrad::default(); gs.len()];
    for (s, sg) in binned.splats.iter().zip(&splat_grads) {
        if sg.iter().all(|v| *v == 0.0) {
            continue;
        }
        out[s.gaussian_id] = splat_backward(&gs[s.gaussian_id], s, sg, norm, k, e);
    }
    let _ = binned.tiles_y;
    Ok(out)
}

/// Gradient with respect to raw parameters (activation chain included).
#[allow(clippy::too_many_arguments)]
pub fn render_backward(
    anchors: &[Vec3],
    raw: &[RawGaussian],
    per_anchor: usize,
    act: &ActivationConfig,
    norm: &SceneNormalization,
    k: &Intrinsics,
    e: &Extrinsics,
    settings: &RasterSettings,
    grad: &RenderGrad,
) -> Result<Vec<[f64; scene::RAW_DIM]>> {
    let gs = scene::activate_all(anchors, raw, per_anchor, act);
    let ag = render_backward_gaussians(&gs, norm, k, e, settings, grad)?;
    Ok(raw.iter().zip(&ag).map(|(r, g)| scene::activate_backward(r, act, g)).collect())
}
