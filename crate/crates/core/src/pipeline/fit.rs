//! Direct per-scene optimization of raw Gaussian parameters (no networks).

use crate::anchors::{self, AnchorSet};
use crate::autodiff::ParamSet;
use crate::cameras::CameraView;
use crate::config::{FitConfig, RunConfig};
use crate::decoder::{raw_from_tensor, raw_to_tensor};
use crate::error::Result;
use crate::features;
use crate::linalg::Vec3;
use crate::manifest::LoadedScene;
use crate::objectives::{self, MetricsReport};
use crate::optim::{Adam, AdamConfig};
use crate::scene::{self, GaussianScene, RawGaussian, RAW_DIM};

use super::{check_finite, timed, SceneFrame, StageTimings, TraceRow};

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub scene: GaussianScene,
    pub report: MetricsReport,
    /// Mean over novel views of the constant mean-color PSNR.
    pub baseline_psnr: f64,
    pub trace: Vec<TraceRow>,
    pub timings: StageTimings,
}

/// Mean distance from each anchor to its nearest neighbour.
pub fn mean_spacing(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 0.05;
    }
    let d = crate::parallel::map_indexed(points.len(), |i| {
        let p = points[i];
        points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    });
    d.iter().sum::<f64>() / d.len() as f64
}

/// Color of the first input view that sees `p` (world space), if any.
fn observed_color(p: Vec3, views: &[CameraView], tau: f64) -> Option<[f64; 3]> {
    views.iter().find_map(|v| {
        let (u, w) = features::visible_at(p, v, tau)?;
        let x = (u.round() as usize).min(v.width() - 1);
        let y = (w.round() as usize).min(v.height() - 1);
        Some(v.image.get(x, y))
    })
}

/// Starting raw parameters: the sibling pattern at a scale tied to anchor
/// spacing, colored by the pixel each anchor was seen at.
pub fn init_raw(anchors: &AnchorSet, views: &[CameraView], per_anchor: usize, fit: &FitConfig, tau: f64) -> Vec<RawGaussian> {
    let scale = (fit.init_scale_factor * mean_spacing(&anchors.positions)).max(1e-3);
    let pattern = scene::seed_pattern(per_anchor, scale);
    let mut raw = Vec::with_capacity(anchors.len() * per_anchor);
    for i in 0..anchors.len() {
        let sh = observed_color(anchors.world_position(i), views, tau)
            .map(|c| c.map(|v| (v.clamp(0.02, 0.98) - 0.5) / scene::SH_C0))
            .unwrap_or([0.0; 3]);
        raw.extend(pattern.iter().map(|r| RawGaussian { sh, ..*r }));
    }
    raw
}

fn column_rates(fit: &FitConfig) -> Vec<f64> {
    let mut c = vec![0.0; RAW_DIM];
    c[0..3].fill(fit.lr_offset);
    c[3] = fit.lr_opacity;
    c[4..7].fill(fit.lr_scale);
    c[7..11].fill(fit.lr_rotation);
    c[11..14].fill(fit.lr_sh);
    c
}

/// Fits a scene to `views`. `on_step` sees every trace row as it is produced.
pub fn fit_views(views: &[CameraView], cfg: &RunConfig, mut on_step: impl FnMut(&TraceRow)) -> Result<(GaussianScene, Vec<TraceRow>, StageTimings)> {
    cfg.validate()?;
    let mut timings = StageTimings::default();
    let k = cfg.decoder.gaussians_per_anchor;
    let anchor_set = timed(&mut timings.anchoring, || anchors::build_anchors(views, &cfg.anchors))?;
    let init = init_raw(&anchor_set, views, k, &cfg.fit, cfg.features.tau);
    let base = GaussianScene::from_anchor_set(&anchor_set, init, k, cfg.activation)?;
    let settings = cfg.raster.settings();
    let frame = SceneFrame::of(&base, &settings);

    let mut params = ParamSet::new();
    params.insert("raw", raw_to_tensor(&base.raw));
    let mut opt = Adam::new(AdamConfig { eps: cfg.fit.adam_eps, ..cfg.train.stage1 }, &params);
    opt.column_lr[0] = Some(column_rates(&cfg.fit));
    let mut trace = Vec::with_capacity(cfg.fit.steps);
    timed(&mut timings.decoding, || -> Result<()> {
        for step in 0..cfg.fit.steps {
            let raw = raw_from_tensor(params.tensor(0));
            let (terms, grad) = frame.total_loss(&raw, views, &cfg.loss, None)?;
            check_finite(step, &terms, &grad)?;
            let row = TraceRow::new(step, 0, &terms);
            on_step(&row);
            trace.push(row);
            opt.update(&mut params, &[grad])?;
        }
        Ok(())
    })?;
    let scene = base.with_raw(raw_from_tensor(params.tensor(0)))?;
    Ok((scene, trace, timings))
}

/// Fits on the input split and evaluates on the novel split.
pub fn fit(loaded: &LoadedScene, cfg: &RunConfig, on_step: impl FnMut(&TraceRow)) -> Result<FitOutput> {
    let inputs = loaded.input_views();
    let (scene, trace, timings) = fit_views(&inputs, cfg, on_step)?;
    let eval_views = if loaded.novel.is_empty() { &loaded.inputs } else { &loaded.novel };
    let mut rendering = 0.0;
    let report = timed(&mut rendering, || super::evaluate(&scene, eval_views, &cfg.raster.settings(), timings.reconstruction()))?;
    let timings = StageTimings { rendering, ..timings };
    let mut baseline = 0.0;
    for nv in eval_views {
        baseline += objectives::mean_color_psnr(&inputs, &nv.view.image)?;
    }
    Ok(FitOutput { scene, report, baseline_psnr: baseline / eval_views.len() as f64, trace, timings })
}
