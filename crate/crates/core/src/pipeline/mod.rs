//! End-to-end orchestration: direct fitting, two-stage training, rendering,
//! evaluation and ablation sweeps.

pub mod ablate;
pub mod eval;
pub mod fit;
pub mod render;
pub mod train;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cameras::CameraView;
use crate::error::{Error, Result};
use crate::linalg::Vec3;
use crate::manifest::NamedView;
use crate::objectives::{self, LossTerms, LossWeights, MetricsReport};
use crate::raster::{self, RasterSettings, RenderOutput};
use crate::scene::{self, ActivationConfig, GaussianScene, RawGaussian, SceneNormalization, RAW_DIM};

/// Wall-clock seconds per reconstruction stage. File I/O is excluded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub anchoring: f64,
    pub decoding: f64,
    pub refining: f64,
    pub rendering: f64,
}

impl StageTimings {
    /// Reconstruction time: everything before the final render.
    pub fn reconstruction(&self) -> f64 {
        self.anchoring + self.decoding + self.refining
    }
}

/// Runs `f` and adds its wall time to `slot`.
pub fn timed<T>(slot: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *slot += t.elapsed().as_secs_f64();
    out
}

/// Everything needed to render and differentiate a set of raw Gaussians.
#[derive(Debug, Clone, Copy)]
pub struct SceneFrame<'a> {
    pub anchors: &'a [Vec3],
    pub per_anchor: usize,
    pub activation: &'a ActivationConfig,
    pub normalization: &'a SceneNormalization,
    pub settings: &'a RasterSettings,
}

impl<'a> SceneFrame<'a> {
    pub fn of(scene: &'a GaussianScene, settings: &'a RasterSettings) -> Self {
        Self {
            anchors: &scene.anchors,
            per_anchor: scene.gaussians_per_anchor,
            activation: &scene.activation,
            normalization: &scene.normalization,
            settings,
        }
    }

    pub fn render_all(&self, raw: &[RawGaussian], views: &[CameraView]) -> Result<Vec<RenderOutput>> {
        let gs = scene::activate_all(self.anchors, raw, self.per_anchor, self.activation);
        views
            .iter()
            .map(|v| raster::render_gaussians(&gs, self.normalization, &v.intrinsics, &v.extrinsics, self.settings))
            .collect()
    }

    /// The full objective over `views` and its gradient w.r.t. `raw` as an
    /// `M×14` tensor. Gradient contributions are summed view by view, then
    /// the regularizers, in that fixed order.
    pub fn total_loss(&self, raw: &[RawGaussian], views: &[CameraView], w: &LossWeights, masks: Option<&[Vec<bool>]>) -> Result<(LossTerms, Tensor)> {
        let gs = scene::activate_all(self.anchors, raw, self.per_anchor, self.activation);
        let renders = self.render_all(raw, views)?;
        let lg = objectives::total_loss(&renders, views, &gs, w, masks)?;
        let mut grad = Tensor::zeros(raw.len(), RAW_DIM);
        for (v, rg) in views.iter().zip(&lg.renders) {
            let ag = raster::render_backward_gaussians(&gs, self.normalization, &v.intrinsics, &v.extrinsics, self.settings, rg)?;
            accumulate(&mut grad, raw, self.activation, &ag);
        }
        accumulate(&mut grad, raw, self.activation, &lg.gaussians);
        Ok((lg.terms, grad))
    }

    /// `λ_I Σ ℓ_I` and its gradient w.r.t. `raw`.
    pub fn render_loss(&self, raw: &[RawGaussian], views: &[CameraView], w: &LossWeights) -> Result<(f64, Tensor)> {
        let gs = scene::activate_all(self.anchors, raw, self.per_anchor, self.activation);
        let renders = self.render_all(raw, views)?;
        let (loss, grads) = objectives::render_only_loss(&renders, views, w)?;
        let mut grad = Tensor::zeros(raw.len(), RAW_DIM);
        for (v, rg) in views.iter().zip(&grads) {
            let ag = raster::render_backward_gaussians(&gs, self.normalization, &v.intrinsics, &v.extrinsics, self.settings, rg)?;
            accumulate(&mut grad, raw, self.activation, &ag);
        }
        Ok((loss, grad))
    }
}

fn accumulate(grad: &mut Tensor, raw: &[RawGaussian], act: &ActivationConfig, ag: &[scene::ActivatedGrad]) {
    for (j, (r, g)) in raw.iter().zip(ag).enumerate() {
        let d = scene::activate_backward(r, act, g);
        for (dst, v) in grad.data[j * RAW_DIM..(j + 1) * RAW_DIM].iter_mut().zip(d) {
            *dst += v;
        }
    }
}

/// Renders every named view and scores it against its ground truth.
pub fn evaluate(scene: &GaussianScene, views: &[NamedView], settings: &RasterSettings, recon_time_s: f64) -> Result<MetricsReport> {
    if views.is_empty() {
        return Err(Error::Precondition("no views to evaluate".into()));
    }
    let gs = scene.gaussians();
    let mut out = Vec::with_capacity(views.len());
    for nv in views {
        let v = &nv.view;
        let r = raster::render_gaussians(&gs, &scene.normalization, &v.intrinsics, &v.extrinsics, settings)?;
        out.push(objectives::view_metrics(&nv.name, &r.rgb, &r.depth, v)?);
    }
    MetricsReport::from_views(out, scene.num_gs(), recon_time_s)
}

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub scene: usize,
    pub total: f64,
    pub render: f64,
    pub depth: f64,
    pub opacity: f64,
    pub scale: f64,
}

impl TraceRow {
    pub fn new(step: usize, scene: usize, t: &LossTerms) -> Self {
        Self { step, scene, total: t.total, render: t.render, depth: t.depth, opacity: t.opacity, scale: t.scale }
    }

    pub const CSV_HEADER: &'static str = "step,scene,total,render,depth,opacity,scale";

    pub fn csv(&self) -> String {
        format!("{},{},{:e},{:e},{:e},{:e},{:e}", self.step, self.scene, self.total, self.render, self.depth, self.opacity, self.scale)
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TraceRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

fn check_finite(step: usize, terms: &LossTerms, grad: &Tensor) -> Result<()> {
    if !terms.total.is_finite() || !grad.is_finite() {
        return Err(Error::Divergence { step, detail: format!("loss {} with finite gradient: {}", terms.total, grad.is_finite()) });
    }
    Ok(())
}
