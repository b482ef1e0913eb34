//! Rendering requested views from a stored scene or a trained model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::{self, NamedView, Split};
use crate::raster;
use crate::scene::{ply, GaussianScene};

use super::train::{self, STAGE1_SECTION, STAGE2_SECTION};
use super::{timed, StageTimings};

pub const REPORT_FILE: &str = "render.json";

/// Where the Gaussians come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    /// A stored scene (`.ply` plus its `.json` sidecar).
    Ply(PathBuf),
    /// Feed-forward reconstruction from the scene's input views.
    Model { stage1: PathBuf, stage2: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct RenderRequest {
    pub scene_dir: PathBuf,
    pub source: Source,
    pub split: Split,
    /// Refinement passes; defaults to the config value.
    pub passes: Option<usize>,
    pub dump_tiles: bool,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderReport {
    pub num_gs: usize,
    pub num_anchors: usize,
    pub refine_passes: usize,
    pub max_offset: f64,
    pub views: Vec<String>,
    pub timings: StageTimings,
}

/// Renders `views` into `out` as `<name>.png` and `<name>.pfm`; returns the
/// time spent rendering (file writes excluded).
pub fn write_views(scene: &GaussianScene, views: &[NamedView], cfg: &RunConfig, out: &Path, dump_tiles: bool) -> Result<f64> {
    let settings = cfg.raster.settings();
    let gs = scene.gaussians();
    let mut secs = 0.0;
    for nv in views {
        let v = &nv.view;
        let r = timed(&mut secs, || raster::render_gaussians(&gs, &scene.normalization, &v.intrinsics, &v.extrinsics, &settings))?;
        r.rgb.write_png(&out.join(format!("{}.png", nv.name)))?;
        r.depth.write_pfm(&out.join(format!("{}.pfm", nv.name)))?;
        if dump_tiles {
            let counts = raster::tile_counts(&gs, &scene.normalization, &v.intrinsics, &v.extrinsics, &settings);
            let doc = serde_json::json!({
                "tile_size": settings.tile_size,
                "tiles_x": v.width().div_ceil(settings.tile_size),
                "tiles_y": v.height().div_ceil(settings.tile_size),
                "counts": counts,
            });
            std::fs::write(out.join(format!("{}.tiles.json", nv.name)), serde_json::to_string(&doc)? + "\n")?;
        }
    }
    Ok(secs)
}

/// Builds the scene for a request. The returned timings cover
/// reconstruction only.
pub fn build_scene(req: &RenderRequest, cfg: &RunConfig) -> Result<(GaussianScene, usize, StageTimings)> {
    match &req.source {
        Source::Ply(path) => Ok((ply::load(path)?, 0, StageTimings::default())),
        Source::Model { stage1, stage2 } => {
            let loaded = manifest::load_scene(&req.scene_dir)?;
            let p1 = train::load_weights(stage1, STAGE1_SECTION)
                .map_err(|e| Error::Checkpoint(format!("feed-forward rendering needs a stage-1 checkpoint: {e}")))?;
            let p2 = stage2.as_ref().map(|p| train::load_weights(p, STAGE2_SECTION)).transpose()?;
            let passes = if p2.is_some() { req.passes.unwrap_or(cfg.refiner.passes) } else { 0 };
            let (base, refined, t) = train::reconstruct(&loaded.input_views(), &p1, p2.as_ref(), passes, cfg)?;
            Ok((refined.unwrap_or(base), passes, t))
        }
    }
}

pub fn render_cmd(req: &RenderRequest, cfg: &RunConfig) -> Result<RenderReport> {
    cfg.validate()?;
    let loaded = manifest::load_scene(&req.scene_dir)?;
    let views = match req.split {
        Split::Input => &loaded.inputs,
        Split::Novel => &loaded.novel,
    };
    if views.is_empty() {
        return Err(Error::Precondition(format!("scene has no {:?} views", req.split)));
    }
    let (scene, passes, mut timings) = build_scene(req, cfg)?;
    std::fs::create_dir_all(&req.out)?;
    if !matches!(req.source, Source::Ply(_)) {
        ply::save(&scene, &req.out.join("scene.ply"))?;
    }
    timings.rendering = write_views(&scene, views, cfg, &req.out, req.dump_tiles)?;
    let report = RenderReport {
        num_gs: scene.num_gs(),
        num_anchors: scene.num_anchors(),
        refine_passes: passes,
        max_offset: scene.max_offset(),
        views: views.iter().map(|v| v.name.clone()).collect(),
        timings,
    };
    std::fs::write(req.out.join(REPORT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}
