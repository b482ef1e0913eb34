//! The anchor-aligned Gaussian representation.
//!
//! Every anchor owns `k` Gaussians (four by default), stored anchor-major so
//! Gaussian `j` belongs to anchor `j / k`. Parameters are kept in raw
//! (pre-activation) form; activations map them onto the constrained domain:
//!
//! | attribute | raw | activated |
//! |-----------|-----|-----------|
//! | center    | `δ` | `A + b·tanh(δ)` |
//! | opacity   | `a` | `sigmoid(a)` |
//! | scale     | `s` | `clamp(exp(s), s_min, s_max)` |
//! | rotation  | `r` | `r / ‖r‖` |
//! | color     | `c` | `clamp(0.5 + C₀·c, 0, 1)` |

pub mod ply;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorSet, ClipBounds};
use crate::error::{Error, Result};
use crate::linalg::{self, Mat3, Vec3};

/// Degree-0 spherical harmonic constant `Y₀⁰`.
pub const SH_C0: f64 = 0.28209479177387814;
/// Number of raw scalars per Gaussian.
pub const RAW_DIM: usize = 14;
/// Default offset bound in normalized scene units.
pub const OFFSET_BOUND: f64 = 10.0 / 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalization {
    pub center: Vec3,
    pub half_extent: f64,
}

impl SceneNormalization {
    pub fn from_bounds(bounds: &ClipBounds) -> Self {
        let center = std::array::from_fn(|a| 0.5 * (bounds.min[a] + bounds.max[a]));
        let ext = bounds.extent();
        let half = 0.5 * ext[0].max(ext[1]).max(ext[2]);
        Self { center, half_extent: if half > 0.0 { half } else { 1e-6 } }
    }

    #[inline]
    pub fn normalize(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| (p[a] - self.center[a]) / self.half_extent)
    }

    #[inline]
    pub fn denormalize(&self, p: Vec3) -> Vec3 {
        std::array::from_fn(|a| p[a] * self.half_extent + self.center[a])
    }
}

/// Box-midpoint normalization of a point set into `[-1, 1]³`.
pub fn normalize_scene(points: &[Vec3]) -> Result<(SceneNormalization, Vec<Vec3>)> {
    if points.is_empty() {
        return Err(Error::Precondition("normalize_scene needs at least one point".into()));
    }
    let mut bounds = ClipBounds { min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] };
    for p in points {
        for a in 0..3 {
            bounds.min[a] = bounds.min[a].min(p[a]);
            bounds.max[a] = bounds.max[a].max(p[a]);
        }
    }
    let norm = SceneNormalization::from_bounds(&bounds);
    Ok((norm, points.iter().map(|&p| norm.normalize(p)).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActivationConfig {
    pub offset_bound: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        Self { offset_bound: OFFSET_BOUND, scale_min: 1e-4, scale_max: 0.5 }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.offset_bound > 0.0 && self.scale_min > 0.0 && self.scale_min < self.scale_max) {
            return Err(Error::Config("activation bounds must satisfy b > 0 and 0 < s_min < s_max".into()));
        }
        Ok(())
    }
}

/// Unconstrained parameters of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RawGaussian {
    pub offset: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec3,
}

impl RawGaussian {
    /// Layout: offset(3) opacity(1) scale(3) rotation(4) sh(3).
    pub fn to_array(&self) -> [f64; RAW_DIM] {
        let mut a = [0.0; RAW_DIM];
        a[0..3].copy_from_slice(&self.offset);
        a[3] = self.opacity;
        a[4..7].copy_from_slice(&self.scale);
        a[7..11].copy_from_slice(&self.rotation);
        a[11..14].copy_from_slice(&self.sh);
        a
    }

    pub fn from_slice(a: &[f64]) -> Self {
        Self {
            offset: [a[0], a[1], a[2]],
            opacity: a[3],
            scale: [a[4], a[5], a[6]],
            rotation: [a[7], a[8], a[9], a[10]],
            sh: [a[11], a[12], a[13]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Rounds every value to the nearest float32.
    pub fn quantized(&self) -> Self {
        Self::from_slice(&self.to_array().map(|v| v as f32 as f64))
    }
}

/// Activated attributes of one Gaussian (center offset relative to its anchor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Activated {
    pub offset: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec3,
    /// Set when the raw rotation was numerically zero and identity was substituted.
    pub degenerate_rotation: bool,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activate(raw: &RawGaussian, act: &ActivationConfig) -> Activated {
    let offset = raw.offset.map(|d| act.offset_bound * d.tanh());
    let opacity = sigmoid(raw.opacity);
    let scale = raw.scale.map(|s| s.exp().clamp(act.scale_min, act.scale_max));
    let n = raw.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (rotation, degenerate_rotation) = if n < 1e-12 {
        ([1.0, 0.0, 0.0, 0.0], true)
    } else {
        (raw.rotation.map(|v| v / n), false)
    };
    Activated { offset, opacity, scale, rotation, sh: raw.sh, degenerate_rotation }
}

/// Gradient with respect to the activated attributes of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActivatedGrad {
    pub offset: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec3,
}

/// Chain rule through [`activate`]; returns the gradient in raw layout.
pub fn activate_backward(raw: &RawGaussian, act: &ActivationConfig, g: &ActivatedGrad) -> [f64; RAW_DIM] {
    let mut out = [0.0; RAW_DIM];
    for a in 0..3 {
        let t = raw.offset[a].tanh();
        out[a] = g.offset[a] * act.offset_bound * (1.0 - t * t);
    }
    let s = sigmoid(raw.opacity);
    out[3] = g.opacity * s * (1.0 - s);
    for a in 0..3 {
        let e = raw.scale[a].exp();
        out[4 + a] = if e > act.scale_min && e < act.scale_max { g.scale[a] * e } else { 0.0 };
    }
    let n = raw.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n >= 1e-12 {
        let q = raw.rotation.map(|v| v / n);
        let dot: f64 = (0..4).map(|i| q[i] * g.rotation[i]).sum();
        for i in 0..4 {
            out[7 + i] = (g.rotation[i] - q[i] * dot) / n;
        }
    }
    out[11..14].copy_from_slice(&g.sh);
    out
}

/// `μ = A + δμ`.
#[inline]
pub fn compose_center(anchor: Vec3, offset: Vec3) -> Vec3 {
    linalg::add(anchor, offset)
}

/// `Σ = R(q)·diag(s²)·R(q)ᵀ`.
pub fn covariance(s: Vec3, q: [f64; 4]) -> Mat3 {
    let r = linalg::quat_to_mat(q);
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| r[i][k] * s[k] * s[k] * r[j][k]).sum();
        }
    }
    out
}

pub fn sh_to_rgb(sh: Vec3) -> Vec3 {
    sh.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0))
}

/// A fully activated Gaussian in normalized scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: Vec3,
    pub opacity: f64,
    pub scale: Vec3,
    pub rotation: [f64; 4],
    pub sh: Vec3,
    pub anchor_id: usize,
}

impl Gaussian {
    pub fn color(&self) -> Vec3 {
        sh_to_rgb(self.sh)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance(self.scale, self.rotation)
    }
}

/// Activates anchor-major raw parameters into Gaussians.
pub fn activate_all(anchors: &[Vec3], raw: &[RawGaussian], per_anchor: usize, act: &ActivationConfig) -> Vec<Gaussian> {
    raw.iter()
        .enumerate()
        .map(|(j, r)| {
            let a = activate(r, act);
            let anchor_id = j / per_anchor;
            Gaussian {
                mean: compose_center(anchors[anchor_id], a.offset),
                opacity: a.opacity,
                scale: a.scale,
                rotation: a.rotation,
                sh: a.sh,
                anchor_id,
            }
        })
        .collect()
}

/// Raw starting values for `k` Gaussians around one anchor: identity
/// rotation, scale `init_scale`, neutral opacity and color, and offsets that
/// walk the cube corners (a tetrahedron first) so siblings start apart.
pub fn seed_pattern(k: usize, init_scale: f64) -> Vec<RawGaussian> {
    const CORNERS: [[f64; 3]; 8] = [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [-1.0, -1.0, -1.0],
        [-1.0, 1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, -1.0],
    ];
    let ls = init_scale.ln();
    (0..k)
        .map(|i| {
            let mag = if k == 1 { 0.0 } else { 0.3 / (1 + i / 8) as f64 };
            RawGaussian {
                offset: CORNERS[i % 8].map(|c| c * mag),
                opacity: 0.0,
                scale: [ls; 3],
                rotation: [1.0, 0.0, 0.0, 0.0],
                sh: [0.0; 3],
            }
        })
        .collect()
}

/// Immutable scene: anchors plus `k` Gaussians per anchor in raw form.
///
/// Raw values and anchor positions are held at float32 precision so that a
/// scene survives a PLY round trip bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub anchors: Vec<Vec3>,
    pub raw: Vec<RawGaussian>,
    pub gaussians_per_anchor: usize,
    pub normalization: SceneNormalization,
    pub activation: ActivationConfig,
}

impl GaussianScene {
    pub fn new(
        anchors: Vec<Vec3>,
        raw: Vec<RawGaussian>,
        gaussians_per_anchor: usize,
        normalization: SceneNormalization,
        activation: ActivationConfig,
    ) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::Precondition("a scene needs at least one anchor".into()));
        }
        if gaussians_per_anchor == 0 || raw.len() != anchors.len() * gaussians_per_anchor {
            return Err(Error::Shape(format!(
                "{} gaussians for {} anchors at {} per anchor",
                raw.len(),
                anchors.len(),
                gaussians_per_anchor
            )));
        }
        if let Some(j) = raw.iter().position(|r| !r.is_finite()) {
            return Err(Error::NonFiniteGaussian(j));
        }
        Ok(Self {
            anchors: anchors.into_iter().map(|p| p.map(|v| v as f32 as f64)).collect(),
            raw: raw.iter().map(RawGaussian::quantized).collect(),
            gaussians_per_anchor,
            normalization,
            activation,
        })
    }

    pub fn from_anchor_set(anchors: &AnchorSet, raw: Vec<RawGaussian>, per_anchor: usize, act: ActivationConfig) -> Result<Self> {
        Self::new(anchors.positions.clone(), raw, per_anchor, anchors.normalization, act)
    }

    pub fn num_gs(&self) -> usize {
        self.raw.len()
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn gaussians(&self) -> Vec<Gaussian> {
        activate_all(&self.anchors, &self.raw, self.gaussians_per_anchor, &self.activation)
    }

    /// Largest `‖μ − A‖∞` over the scene.
    pub fn max_offset(&self) -> f64 {
        self.gaussians()
            .iter()
            .map(|g| {
                let a = self.anchors[g.anchor_id];
                (0..3).map(|i| (g.mean[i] - a[i]).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    pub fn with_raw(&self, raw: Vec<RawGaussian>) -> Result<Self> {
        Self::new(self.anchors.clone(), raw, self.gaussians_per_anchor, self.normalization, self.activation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_raw_activation() {
        let a = activate(&RawGaussian::default(), &ActivationConfig::default());
        assert_eq!(a.offset, [0.0; 3]);
        assert_eq!(a.opacity, 0.5);
        assert_eq!(a.scale, [0.5; 3]);
        assert_eq!(a.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert!(a.degenerate_rotation);
        assert_eq!(a.sh, [0.0; 3]);
    }

    #[test]
    fn offset_saturates_at_bound() {
        let act = ActivationConfig::default();
        let raw = RawGaussian { offset: [1e6, 40.0, f64::MAX], rotation: [1.0, 0.0, 0.0, 0.0], ..Default::default() };
        let a = activate(&raw, &act);
        assert_eq!(a.offset, [10.0 / 128.0; 3]);
        let raw = RawGaussian { offset: [-1e6, 3.0, -0.5], rotation: [1.0, 0.0, 0.0, 0.0], ..Default::default() };
        assert!(activate(&raw, &act).offset.iter().all(|o| o.abs() <= 10.0 / 128.0));
    }

    #[test]
    fn compose_center_examples() {
        assert_eq!(compose_center([0.3, 0.1, -0.2], [0.0; 3]), [0.3, 0.1, -0.2]);
        assert_eq!(compose_center([0.5, 0.0, 0.0], [10.0 / 128.0, 0.0, 0.0]), [0.578125, 0.0, 0.0]);
    }

    #[test]
    fn covariance_examples() {
        let c = covariance([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(c, [[1.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 9.0]]);
        let h = 0.5f64.sqrt();
        let c = covariance([1.0, 2.0, 3.0], [h, 0.0, 0.0, h]);
        let expect = [[4.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 9.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((c[i][j] - expect[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sh_color_examples() {
        assert_eq!(sh_to_rgb([0.0; 3]), [0.5; 3]);
        let v = sh_to_rgb([0.5 / SH_C0; 3]);
        assert!(v.iter().all(|c| (c - 1.0).abs() < 1e-15));
        assert_eq!(sh_to_rgb([-10.0; 3]), [0.0; 3]);
    }

    #[test]
    fn normalization_examples() {
        let pts = vec![[0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [1.0, 0.5, 2.0]];
        let (n, out) = normalize_scene(&pts).unwrap();
        assert_eq!(n.center, [1.0; 3]);
        assert_eq!(n.half_extent, 1.0);
        assert!(out.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let (n, out) = normalize_scene(&[[3.0, -1.0, 2.0]]).unwrap();
        assert_eq!(out[0], [0.0; 3]);
        assert_eq!(n.half_extent, 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..100).map(|_| std::array::from_fn(|_| rng.random_range(-7.0..3.0))).collect();
        let (n, out) = normalize_scene(&pts).unwrap();
        for (p, q) in pts.iter().zip(&out) {
            let back = n.denormalize(*q);
            assert!((0..3).all(|a| (back[a] - p[a]).abs() < 1e-12));
        }
    }

    #[test]
    fn activation_backward_matches_finite_differences() {
        let act = ActivationConfig::default();
        let raw = RawGaussian {
            offset: [0.3, -1.2, 0.05],
            opacity: -0.4,
            scale: [-2.0, -3.5, -1.1],
            rotation: [0.8, 0.3, -0.2, 0.4],
            sh: [0.1, -0.7, 0.9],
        };
        let g = ActivatedGrad {
            offset: [0.7, -0.2, 1.3],
            opacity: 0.9,
            scale: [-0.5, 1.2, 0.3],
            rotation: [0.2, -0.9, 0.4, 0.6],
            sh: [1.0, 2.0, -3.0],
        };
        let f = |r: &RawGaussian| {
            let a = activate(r, &act);
            let mut s = a.opacity * g.opacity;
            for i in 0..3 {
                s += a.offset[i] * g.offset[i] + a.scale[i] * g.scale[i] + a.sh[i] * g.sh[i];
            }
            for i in 0..4 {
                s += a.rotation[i] * g.rotation[i];
            }
            s
        };
        let analytic = activate_backward(&raw, &act, &g);
        let base = raw.to_array();
        for k in 0..RAW_DIM {
            let h = 1e-6;
            let mut p = base;
            let mut m = base;
            p[k] += h;
            m[k] -= h;
            let fd = (f(&RawGaussian::from_slice(&p)) - f(&RawGaussian::from_slice(&m))) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-6, "param {k}: fd {fd} analytic {}", analytic[k]);
        }
    }

    #[test]
    fn scene_enforces_cardinality() {
        let norm = SceneNormalization { center: [0.0; 3], half_extent: 1.0 };
        let act = ActivationConfig::default();
        assert!(GaussianScene::new(vec![], vec![], 4, norm, act).is_err());
        assert!(GaussianScene::new(vec![[0.0; 3]], vec![RawGaussian::default(); 3], 4, norm, act).is_err());
        let s = GaussianScene::new(vec![[0.0; 3]], vec![RawGaussian::default(); 4], 4, norm, act).unwrap();
        assert_eq!(s.num_gs(), 4);
        let mut bad = vec![RawGaussian::default(); 4];
        bad[2].sh[1] = f64::NAN;
        assert!(matches!(GaussianScene::new(vec![[0.0; 3]], bad, 4, norm, act), Err(Error::NonFiniteGaussian(2))));
    }
}
