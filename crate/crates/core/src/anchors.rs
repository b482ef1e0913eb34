//! Sparse anchor selection from dense back-projected depth: robust clipping,
//! scene normalization, a voxel-occupancy budget and exact farthest point
//! sampling.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::cameras::{self, CameraView};
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::scene::SceneNormalization;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl ClipBounds {
    #[inline]
    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    pub fn extent(&self) -> Vec3 {
        std::array::from_fn(|a| self.max[a] - self.min[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Pixel stride for back-projection.
    pub stride: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub clip_margin: f64,
    /// Voxel edge = (normalized cube edge) / `voxel_divisions`.
    pub voxel_divisions: usize,
    /// Upper bound on the number of anchors.
    pub cap: usize,
    /// FPS start index; defaults to the point nearest the centroid.
    pub seed_index: Option<usize>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { stride: 1, clip_lo: 0.01, clip_hi: 0.99, clip_margin: 0.05, voxel_divisions: 64, cap: 65_536, seed_index: None }
    }
}

impl AnchorConfig {
    pub fn voxel_size(&self) -> f64 {
        2.0 / self.voxel_divisions as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.cap == 0 || self.voxel_divisions == 0 {
            return Err(Error::Config("anchor stride, cap and voxel_divisions must be positive".into()));
        }
        if !(0.0 <= self.clip_lo && self.clip_lo < self.clip_hi && self.clip_hi <= 1.0) || self.clip_margin < 0.0 {
            return Err(Error::Config("clip percentiles must satisfy 0 <= lo < hi <= 1, margin >= 0".into()));
        }
        Ok(())
    }
}

/// Anchors in normalized scene coordinates with their aggregated features.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub positions: Vec<Vec3>,
    /// Row-major N×`feature_dim`; empty until features are lifted.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub source_count: usize,
    pub normalization: SceneNormalization,
    pub voxel_size: f64,
    pub seed_index: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_features(&self) -> bool {
        self.feature_dim > 0 && self.features.len() == self.len() * self.feature_dim
    }

    pub fn world_position(&self, i: usize) -> Vec3 {
        self.normalization.denormalize(self.positions[i])
    }

    /// Copy with anchors reordered so that new anchor `i` is old anchor `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> AnchorSet {
        let c = self.feature_dim;
        let mut features = Vec::with_capacity(self.features.len());
        if self.has_features() {
            for &p in perm {
                features.extend_from_slice(&self.features[p * c..(p + 1) * c]);
            }
        }
        AnchorSet { positions: perm.iter().map(|&p| self.positions[p]).collect(), features, ..self.clone() }
    }
}

/// Per-axis nearest-rank percentiles, widened by `margin` of the axis extent.
pub fn robust_bounds(points: &[Vec3], lo_pct: f64, hi_pct: f64, margin: f64) -> Result<ClipBounds> {
    if points.len() < 2 {
        return Err(Error::Precondition("robust_bounds needs at least two points".into()));
    }
    if !(0.0 <= lo_pct && lo_pct < hi_pct && hi_pct <= 1.0) {
        return Err(Error::Precondition(format!("invalid percentiles {lo_pct}..{hi_pct}")));
    }
    let n = points.len();
    let rank = |p: f64| ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    let mut axis = vec![0.0; n];
    for a in 0..3 {
        for (dst, p) in axis.iter_mut().zip(points) {
            *dst = p[a];
        }
        axis.sort_by(f64::total_cmp);
        let (lo, hi) = (axis[rank(lo_pct)], axis[rank(hi_pct)]);
        let pad = (hi - lo) * margin;
        let pad = if hi - lo > 0.0 { pad } else { 1e-6 };
        min[a] = lo - pad;
        max[a] = hi + pad;
    }
    Ok(ClipBounds { min, max })
}

/// Keeps points inside the closed box, preserving order.
pub fn clip_points(points: &[Vec3], bounds: &ClipBounds) -> Result<(Vec<Vec3>, usize)> {
    let kept: Vec<Vec3> = points.iter().copied().filter(|p| bounds.contains(*p)).collect();
    if kept.is_empty() {
        return Err(Error::EmptyAnchors(format!(
            "all {} points fall outside the clip box {:?}..{:?}",
            points.len(),
            bounds.min,
            bounds.max
        )));
    }
    let n = kept.len();
    Ok((kept, n))
}

#[inline]
pub fn voxel_index(p: Vec3, origin: Vec3, voxel_size: f64) -> [i64; 3] {
    std::array::from_fn(|a| ((p[a] - origin[a]) / voxel_size).floor() as i64)
}

/// `min(cap, occupied voxels)`.
pub fn voxel_budget(points: &[Vec3], origin: Vec3, voxel_size: f64, cap: usize) -> Result<usize> {
    if !(voxel_size > 0.0) || cap == 0 {
        return Err(Error::Precondition("voxel_size must be positive and cap at least 1".into()));
    }
    let occupied: HashSet<[i64; 3]> = points.iter().map(|&p| voxel_index(p, origin, voxel_size)).collect();
    Ok(occupied.len().min(cap))
}

#[inline]
fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Exact farthest point sampling in selection order. Ties go to the lowest index.
pub fn fps(points: &[Vec3], k: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::InvalidBudget { requested: k, available: n });
    }
    if seed_index >= n {
        return Err(Error::Precondition(format!("seed index {seed_index} out of range for {n} points")));
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    while selected.len() < k {
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, (p, md)) in points.iter().zip(min_d.iter_mut()).enumerate() {
            let d = dist2(*p, c);
            if d < *md {
                *md = d;
            }
            if *md > best_d {
                best_d = *md;
                best = i;
            }
        }
        current = best;
        selected.push(current);
    }
    Ok(selected)
}

/// Index of the point nearest the centroid (lowest index on ties).
pub fn centroid_seed(points: &[Vec3]) -> usize {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let c = c.map(|v| v / n);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let d = dist2(*p, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Back-projection → clipping → normalization → voxel budget → FPS.
pub fn build_anchors(views: &[CameraView], config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    let mut dense = Vec::new();
    for view in views {
        dense.extend(cameras::backproject_view(view, config.stride)?);
    }
    if dense.is_empty() {
        return Err(Error::EmptyAnchors("no view has valid depth".into()));
    }
    anchors_from_points(&dense, config)
}

/// The point-cloud half of [`build_anchors`].
pub fn anchors_from_points(points: &[Vec3], config: &AnchorConfig) -> Result<AnchorSet> {
    config.validate()?;
    if points.is_empty() {
        return Err(Error::EmptyAnchors("empty point set".into()));
    }
    let bounds = if points.len() >= 2 {
        robust_bounds(points, config.clip_lo, config.clip_hi, config.clip_margin)?
    } else {
        ClipBounds { min: points[0].map(|v| v - 1e-6), max: points[0].map(|v| v + 1e-6) }
    };
    let (kept, _) = clip_points(points, &bounds)?;
    let normalization = SceneNormalization::from_bounds(&bounds);
    let normalized: Vec<Vec3> = kept.iter().map(|&p| normalization.normalize(p)).collect();
    let origin = normalization.normalize(bounds.min);
    let budget = voxel_budget(&normalized, origin, config.voxel_size(), config.cap)?;
    let seed_index = config.seed_index.unwrap_or_else(|| centroid_seed(&normalized));
    let order = fps(&normalized, budget, seed_index)?;
    Ok(AnchorSet {
        // anchors live in single-precision storage
        positions: order.iter().map(|&i| normalized[i].map(|v| v as f32 as f64)).collect(),
        features: Vec::new(),
        feature_dim: 0,
        source_count: points.len(),
        normalization,
        voxel_size: config.voxel_size(),
        seed_index,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnchorSidecar {
    pub source_count: usize,
    pub voxel_size: f64,
    pub seed: usize,
    pub normalization: SceneNormalization,
}

/// Binary little-endian PLY with `x y z` float32 (normalized coordinates).
pub fn write_anchor_ply(anchors: &AnchorSet) -> (Vec<u8>, AnchorSidecar) {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        anchors.len()
    )
    .into_bytes();
    for p in &anchors.positions {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let sidecar = AnchorSidecar {
        source_count: anchors.source_count,
        voxel_size: anchors.voxel_size,
        seed: anchors.seed_index,
        normalization: anchors.normalization,
    };
    (out, sidecar)
}

pub fn read_anchor_ply(bytes: &[u8], sidecar: &AnchorSidecar) -> Result<AnchorSet> {
    let ply = crate::scene::ply::parse(bytes)?;
    let xs = ply.column("x")?;
    let ys = ply.column("y")?;
    let zs = ply.column("z")?;
    if xs.is_empty() {
        return Err(Error::Ply("anchor file has no vertices".into()));
    }
    Ok(AnchorSet {
        positions: (0..xs.len()).map(|i| [xs[i], ys[i], zs[i]]).collect(),
        features: Vec::new(),
        feature_dim: 0,
        source_count: sidecar.source_count,
        normalization: sidecar.normalization,
        voxel_size: sidecar.voxel_size,
        seed_index: sidecar.seed,
    })
}
