#![allow(dead_code)]

use asplat::cameras::{Extrinsics, Intrinsics};
use asplat::linalg::Vec3;
use asplat::scene::{ActivationConfig, RawGaussian, SceneNormalization};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod oracle;

pub struct RandomScene {
    pub anchors: Vec<Vec3>,
    pub raw: Vec<RawGaussian>,
    pub per_anchor: usize,
    pub norm: SceneNormalization,
    pub act: ActivationConfig,
    pub k: Intrinsics,
    pub e: Extrinsics,
}

pub fn random_raw(rng: &mut ChaCha8Rng, scale_lo: f64, scale_hi: f64) -> RawGaussian {
    let mut r = || rng.random_range(-1.0..1.0);
    RawGaussian {
        offset: [r(), r(), r()],
        opacity: 2.0 * r(),
        scale: [0.0; 3],
        rotation: [1.0 + 0.5 * r(), r(), r(), r()],
        sh: [1.5 * r(), 1.5 * r(), 1.5 * r()],
    }
    .with_scale(rng, scale_lo, scale_hi)
}

trait WithScale {
    fn with_scale(self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self;
}

impl WithScale for RawGaussian {
    fn with_scale(mut self, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Self {
        for s in &mut self.scale {
            *s = rng.random_range(lo.ln()..hi.ln());
        }
        self
    }
}

/// Gaussians in front of a slightly rotated camera at 64×64.
pub fn random_scene(rng: &mut ChaCha8Rng, anchors: usize, per_anchor: usize, w: usize, h: usize) -> RandomScene {
    let pts = (0..anchors)
        .map(|_| [rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-0.5..0.5)])
        .collect();
    let raw = (0..anchors * per_anchor).map(|_| random_raw(rng, 0.02, 0.12)).collect();
    let f = rng.random_range(0.8..1.2) * w as f64;
    let k = Intrinsics::new(f, f, (w as f64 - 1.0) / 2.0 + 0.3, (h as f64 - 1.0) / 2.0 - 0.2, w, h).unwrap();
    let eye = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), -0.5];
    let e = Extrinsics::look_at(eye, [0.0, 0.0, 2.0], [0.0, 1.0, 0.0]);
    RandomScene {
        anchors: pts,
        raw,
        per_anchor,
        norm: SceneNormalization { center: [0.0, 0.0, 2.0], half_extent: 1.3 },
        act: ActivationConfig::default(),
        k,
        e,
    }
}
