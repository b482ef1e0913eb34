//! Losses and evaluation metrics.
//!
//! Every differentiable loss comes with a hand-written gradient. SSIM uses an
//! 11×11 Gaussian window (σ = 1.5) applied separably; at image borders the
//! window is truncated and renormalized, so constant images give the
//! closed-form value everywhere.

use serde::{Deserialize, Serialize};

use crate::cameras::CameraView;
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::raster::{RenderGrad, RenderOutput};
use crate::scene::{ActivatedGrad, Gaussian};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
/// Rendered alpha above which a pixel's expected depth is supervised.
pub const DEPTH_ALPHA_MIN: f64 = 0.5;
pub const DELTA1_THRESHOLD: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_i: f64,
    pub gamma_ssim: f64,
    /// Kept for completeness; no perceptual term is computed.
    pub gamma_lpips: f64,
    pub lambda_d: f64,
    pub lambda_alpha: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_i: 200.0, gamma_ssim: 0.2, gamma_lpips: 0.2, lambda_d: 100.0, lambda_alpha: 0.1, lambda_s: 1e4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_i, self.gamma_ssim, self.gamma_lpips, self.lambda_d, self.lambda_alpha, self.lambda_s];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn same_shape(x: &Image, y: &Image) -> Result<()> {
    if x.width != y.width || x.height != y.height {
        return Err(Error::Shape(format!("images {}x{} and {}x{} differ", x.width, x.height, y.width, y.height)));
    }
    Ok(())
}

/// Mean absolute difference and its gradient with respect to `x`.
pub fn l1(x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    same_shape(x, y)?;
    let n = x.data.len() as f64;
    let mut sum = 0.0;
    let grad = x
        .data
        .iter()
        .zip(&y.data)
        .map(|(a, b)| {
            let d = a - b;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, grad))
}

/// Row-normalized truncated Gaussian filter along one axis of length `n`.
struct Filter1d {
    n: usize,
    weights: Vec<Vec<(usize, f64)>>,
}

impl Filter1d {
    fn new(n: usize) -> Self {
        let r = SSIM_RADIUS as isize;
        let weights = (0..n as isize)
            .map(|q| {
                let taps: Vec<(usize, f64)> = (q - r..=q + r)
                    .filter(|p| *p >= 0 && *p < n as isize)
                    .map(|p| (p as usize, (-((p - q) as f64).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()))
                    .collect();
                let total: f64 = taps.iter().map(|t| t.1).sum();
                taps.into_iter().map(|(p, w)| (p, w / total)).collect()
            })
            .collect();
        Self { n, weights }
    }
}

/// Separable 2D filter on a single-channel `h×w` plane; `transpose` applies
/// the adjoint operator.
struct Window {
    fx: Filter1d,
    fy: Filter1d,
}

impl Window {
    fn new(w: usize, h: usize) -> Self {
        Self { fx: Filter1d::new(w), fy: Filter1d::new(h) }
    }

    fn apply(&self, src: &[f64], transpose: bool) -> Vec<f64> {
        let (w, h) = (self.fx.n, self.fy.n);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for (q, taps) in self.fx.weights.iter().enumerate() {
                for &(p, wt) in taps {
                    if transpose {
                        tmp[y * w + p] += wt * src[y * w + q];
                    } else {
                        tmp[y * w + q] += wt * src[y * w + p];
                    }
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for (q, taps) in self.fy.weights.iter().enumerate() {
            for &(p, wt) in taps {
                for x in 0..w {
                    if transpose {
                        out[p * w + x] += wt * tmp[q * w + x];
                    } else {
                        out[q * w + x] += wt * tmp[p * w + x];
                    }
                }
            }
        }
        out
    }
}

fn channel(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> Result<(f64, Vec<f64>)> {
    same_shape(x, y)?;
    let (w, h) = (x.width, x.height);
    let win = Window::new(w, h);
    let n = (w * h * 3) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; w * h * 3] } else { Vec::new() };
    for c in 0..3 {
        let xc = channel(x, c);
        let yc = channel(y, c);
        let mx = win.apply(&xc, false);
        let my = win.apply(&yc, false);
        let xx = win.apply(&xc.iter().map(|v| v * v).collect::<Vec<_>>(), false);
        let yy = win.apply(&yc.iter().map(|v| v * v).collect::<Vec<_>>(), false);
        let xy = win.apply(&xc.iter().zip(&yc).map(|(a, b)| a * b).collect::<Vec<_>>(), false);
        let mut ga = vec![0.0; w * h];
        let mut gb = vec![0.0; w * h];
        let mut gc = vec![0.0; w * h];
        for i in 0..w * h {
            let sxx = xx[i] - mx[i] * mx[i];
            let syy = yy[i] - my[i] * my[i];
            let sxy = xy[i] - mx[i] * my[i];
            let a1 = 2.0 * mx[i] * my[i] + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mx[i] * mx[i] + my[i] * my[i] + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            if want_grad {
                let d_mx = 2.0 * my[i] * a2 / (b1 * b2) - s * 2.0 * mx[i] / b1;
                let d_sxx = -s / b2;
                let d_sxy = 2.0 * a1 / (b1 * b2);
                ga[i] = (d_mx - 2.0 * mx[i] * d_sxx - my[i] * d_sxy) / n;
                gb[i] = d_sxx / n;
                gc[i] = d_sxy / n;
            }
        }
        if want_grad {
            let ta = win.apply(&ga, true);
            let tb = win.apply(&gb, true);
            let tc = win.apply(&gc, true);
            for i in 0..w * h {
                grad[3 * i + c] = ta[i] + 2.0 * xc[i] * tb[i] + yc[i] * tc[i];
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean SSIM over pixels and channels.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    Ok(ssim_impl(x, y, false)?.0)
}

/// SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Vec<f64>)> {
    ssim_impl(x, y, true)
}

/// `ℓ1 + γ·(1 − SSIM)` and its gradient with respect to `pred`.
pub fn render_loss(pred: &Image, target: &Image, w: &LossWeights) -> Result<(f64, Vec<f64>)> {
    let (l, gl) = l1(pred, target)?;
    let (s, gs) = ssim_with_grad(pred, target)?;
    let grad = gl.iter().zip(&gs).map(|(a, b)| a - w.gamma_ssim * b).collect();
    Ok((l + w.gamma_ssim * (1.0 - s), grad))
}

/// Pixels with valid ground-truth depth and rendered alpha above
/// [`DEPTH_ALPHA_MIN`].
pub fn depth_mask(render: &RenderOutput, gt: &DepthMap) -> Vec<bool> {
    gt.data.iter().zip(&render.alpha).map(|(d, a)| *d > 0.0 && *a > DEPTH_ALPHA_MIN).collect()
}

/// Masked mean absolute depth error and its gradient; zero on an empty mask.
pub fn depth_loss(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if pred.data.len() != gt.data.len() || mask.len() != gt.data.len() {
        return Err(Error::Shape("depth maps and mask differ in size".into()));
    }
    let count = mask.iter().filter(|m| **m).count();
    let mut grad = vec![0.0; pred.data.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for i in 0..mask.len() {
        if mask[i] {
            let d = pred.data[i] - gt.data[i];
            sum += d.abs();
            grad[i] = if d > 0.0 { 1.0 / n } else if d < 0.0 { -1.0 / n } else { 0.0 };
        }
    }
    Ok((sum / n, grad))
}

/// Mean of `1 − α`.
pub fn opacity_reg(alpha: &[f64]) -> f64 {
    if alpha.is_empty() {
        return 0.0;
    }
    alpha.iter().map(|a| 1.0 - a).sum::<f64>() / alpha.len() as f64
}

/// Mean of the per-Gaussian scale product.
pub fn scale_reg(scales: &[[f64; 3]]) -> f64 {
    if scales.is_empty() {
        return 0.0;
    }
    scales.iter().map(|s| s[0] * s[1] * s[2]).sum::<f64>() / scales.len() as f64
}

/// Weighted contributions; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub render: f64,
    pub depth: f64,
    pub opacity: f64,
    pub scale: f64,
    pub total: f64,
}

impl LossTerms {
    fn finish(mut self) -> Self {
        self.total = self.render + self.depth + self.opacity + self.scale;
        self
    }
}

/// Loss value plus gradients on each render and on each Gaussian.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub terms: LossTerms,
    pub renders: Vec<RenderGrad>,
    pub gaussians: Vec<ActivatedGrad>,
}

/// The full training objective. `masks` freezes the depth supervision mask
/// (one per view); when `None` it is derived from the renders.
pub fn total_loss(
    renders: &[RenderOutput],
    views: &[CameraView],
    gaussians: &[Gaussian],
    w: &LossWeights,
    masks: Option<&[Vec<bool>]>,
) -> Result<LossGrad> {
    if renders.len() != views.len() {
        return Err(Error::Shape(format!("{} renders for {} views", renders.len(), views.len())));
    }
    let mut terms = LossTerms::default();
    let mut grads = Vec::with_capacity(views.len());
    for (i, (r, v)) in renders.iter().zip(views).enumerate() {
        let (li, gi) = render_loss(&r.rgb, &v.image, w)?;
        let mask = match masks {
            Some(m) => m[i].clone(),
            None => depth_mask(r, &v.depth),
        };
        let (ld, gd) = depth_loss(&r.depth, &v.depth, &mask)?;
        terms.render += w.lambda_i * li;
        terms.depth += w.lambda_d * ld;
        grads.push(RenderGrad {
            rgb: gi.into_iter().map(|g| w.lambda_i * g).collect(),
            depth: gd.into_iter().map(|g| w.lambda_d * g).collect(),
            alpha: None,
        });
    }
    let n = gaussians.len().max(1) as f64;
    let alphas: Vec<f64> = gaussians.iter().map(|g| g.opacity).collect();
    let scales: Vec<[f64; 3]> = gaussians.iter().map(|g| g.scale).collect();
    terms.opacity = w.lambda_alpha * opacity_reg(&alphas);
    terms.scale = w.lambda_s * scale_reg(&scales);
    let gaussian_grads = gaussians
        .iter()
        .map(|g| {
            let s = g.scale;
            ActivatedGrad {
                opacity: -w.lambda_alpha / n,
                scale: [s[1] * s[2], s[0] * s[2], s[0] * s[1]].map(|v| w.lambda_s * v / n),
                ..Default::default()
            }
        })
        .collect();
    Ok(LossGrad { terms: terms.finish(), renders: grads, gaussians: gaussian_grads })
}

/// Rendering-only objective `λ_I Σ ℓ_I`, used when the decoder is frozen.
pub fn render_only_loss(renders: &[RenderOutput], views: &[CameraView], w: &LossWeights) -> Result<(f64, Vec<RenderGrad>)> {
    if renders.len() != views.len() {
        return Err(Error::Shape(format!("{} renders for {} views", renders.len(), views.len())));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(views.len());
    for (r, v) in renders.iter().zip(views) {
        let (li, gi) = render_loss(&r.rgb, &v.image, w)?;
        total += w.lambda_i * li;
        let (wd, hd) = (r.rgb.width, r.rgb.height);
        grads.push(RenderGrad {
            rgb: gi.into_iter().map(|g| w.lambda_i * g).collect(),
            depth: vec![0.0; wd * hd],
            alpha: None,
        });
    }
    Ok((total, grads))
}

/// PSNR in dB for signals in `[0, 1]`; identical inputs give `+∞`.
pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    same_shape(x, y)?;
    let mse = x.data.iter().zip(&y.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn masked_pairs<'a>(pred: &'a [f64], gt: &'a [f64], mask: &'a [bool]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::Shape("depth maps and mask differ in size".into()));
    }
    let pairs: Vec<(f64, f64)> = (0..gt.len()).filter(|&i| mask[i]).map(|i| (pred[i], gt[i])).collect();
    if pairs.is_empty() {
        return Err(Error::UndefinedMetric("empty depth mask".into()));
    }
    if pairs.iter().any(|p| !(p.1 > 0.0)) {
        return Err(Error::UndefinedMetric("non-positive reference depth inside mask".into()));
    }
    Ok(pairs)
}

/// Mean of `|D̂ − D| / D` over the mask.
pub fn absrel(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = masked_pairs(pred, gt, mask)?;
    Ok(pairs.iter().map(|(p, g)| (p - g).abs() / g).sum::<f64>() / pairs.len() as f64)
}

/// Fraction of masked pixels with `max(D̂/D, D/D̂) < 1.25`.
pub fn delta1(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = masked_pairs(pred, gt, mask)?;
    let ok = pairs.iter().filter(|(p, g)| *p > 0.0 && (p / g).max(g / p) < DELTA1_THRESHOLD).count();
    Ok(ok as f64 / pairs.len() as f64)
}

mod inf_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Str(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric value '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub name: String,
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub delta1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "inf_float")]
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub delta1: f64,
    pub num_gs: usize,
    pub recon_time_s: f64,
    pub views: Vec<ViewMetrics>,
}

impl MetricsReport {
    /// Aggregates are plain means of the per-view values.
    pub fn from_views(views: Vec<ViewMetrics>, num_gs: usize, recon_time_s: f64) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::UndefinedMetric("no views to evaluate".into()));
        }
        let n = views.len() as f64;
        let mean = |f: fn(&ViewMetrics) -> f64| views.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            psnr: mean(|v| v.psnr),
            ssim: mean(|v| v.ssim),
            absrel: mean(|v| v.absrel),
            delta1: mean(|v| v.delta1),
            num_gs,
            recon_time_s,
            views,
        })
    }

    pub fn has_nan(&self) -> bool {
        [self.psnr, self.ssim, self.absrel, self.delta1].iter().any(|v| v.is_nan())
            || self.views.iter().any(|v| [v.psnr, v.ssim, v.absrel, v.delta1].iter().any(|x| x.is_nan()))
    }
}

/// Metrics of one rendered view against ground truth. Depth metrics use
/// pixels with valid ground truth.
pub fn view_metrics(name: &str, rgb: &Image, depth: &DepthMap, gt: &CameraView) -> Result<ViewMetrics> {
    let mask: Vec<bool> = gt.depth.data.iter().map(|d| *d > 0.0).collect();
    Ok(ViewMetrics {
        name: name.to_string(),
        psnr: psnr(rgb, &gt.image)?,
        ssim: ssim(rgb, &gt.image)?,
        absrel: absrel(&depth.data, &gt.depth.data, &mask)?,
        delta1: delta1(&depth.data, &gt.depth.data, &mask)?,
    })
}

/// PSNR of the constant mean-color image (over input views) against a view.
pub fn mean_color_psnr(inputs: &[CameraView], target: &Image) -> Result<f64> {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for v in inputs {
        let m = v.image.mean_color();
        let px = (v.image.width * v.image.height) as f64;
        for c in 0..3 {
            acc[c] += m[c] * px;
        }
        n += px;
    }
    let mean = acc.map(|a| a / n.max(1.0));
    psnr(&Image::filled(target.width, target.height, mean), target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, seed: u64) -> Image {
        let mut s = seed;
        let mut im = Image::new(w, h);
        for v in im.data.iter_mut() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            *v = ((s >> 11) as f64) / ((1u64 << 53) as f64);
        }
        im
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = img(13, 9, 3);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
        let s = ssim(&Image::filled(16, 16, [0.0; 3]), &Image::filled(16, 16, [1.0; 3])).unwrap();
        assert!((s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12);
        let y = img(13, 9, 4);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn render_loss_closed_form() {
        let w = LossWeights::default();
        let a = Image::filled(12, 12, [0.4; 3]);
        let b = Image::filled(12, 12, [0.5; 3]);
        let (l, _) = render_loss(&a, &b, &w).unwrap();
        let (m1, m2) = (0.4f64, 0.5f64);
        let s = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((l - (0.1 + 0.2 * (1.0 - s))).abs() < 1e-12);
        assert_eq!(render_loss(&a, &a, &w).unwrap().0, 0.0);
    }

    #[test]
    fn render_loss_gradient_matches_differences() {
        let w = LossWeights::default();
        let x = img(14, 12, 7);
        let y = img(14, 12, 8);
        let (_, g) = render_loss(&x, &y, &w).unwrap();
        for &i in &[0usize, 5, 77, 250, 503] {
            let h = 1e-6;
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let fd = (render_loss(&xp, &y, &w).unwrap().0 - render_loss(&xm, &y, &w).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs().max(1e-6) < 1e-3, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(opacity_reg(&[1.0, 1.0]), 0.0);
        assert_eq!(opacity_reg(&[0.5; 4]), 0.5);
        assert!((opacity_reg(&[0.2, 0.8]) - 0.5).abs() < 1e-15);
        assert!((scale_reg(&[[0.1; 3]; 3]) - 1e-3).abs() < 1e-15);
        assert_eq!(scale_reg(&[[1.0; 3]]), 1.0);
        assert_eq!(scale_reg(&[[1.0; 3], [0.5; 3]]), 0.5625);
    }

    #[test]
    fn metric_examples() {
        let a = Image::filled(4, 4, [0.0; 3]);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = Image::filled(4, 4, [0.5; 3]);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((absrel(&[1.0, 2.0], &[2.0, 2.0], &[true, true]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(delta1(&[1.0, 1.3], &[1.0, 1.0], &[true, true]).unwrap(), 0.5);
        assert_eq!(delta1(&[1.0, 1.0], &[1.0, 1.3], &[true, true]).unwrap(), 0.5);
        assert!(matches!(absrel(&[1.0], &[1.0], &[false]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn report_serializes_inf() {
        let v = ViewMetrics { name: "a".into(), psnr: f64::INFINITY, ssim: 1.0, absrel: 0.0, delta1: 1.0 };
        let r = MetricsReport::from_views(vec![v], 8, 0.0).unwrap();
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"psnr\":\"inf\""));
        let back: MetricsReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
