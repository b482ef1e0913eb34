//! Scoring rendered outputs against a scene's novel views.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::manifest;
use crate::objectives::{self, MetricsReport};

use super::render::{RenderReport, REPORT_FILE};

/// Reads `<name>.png` / `<name>.pfm` for every novel view from `rendered`.
/// NumGS and reconstruction time come from `render.json` when present.
pub fn eval_cmd(scene_dir: &Path, rendered: &Path) -> Result<MetricsReport> {
    let loaded = manifest::load_scene(scene_dir)?;
    if loaded.novel.is_empty() {
        return Err(Error::Precondition("scene has no novel views".into()));
    }
    let mut views = Vec::with_capacity(loaded.novel.len());
    for nv in &loaded.novel {
        let rgb = Image::read_png(&rendered.join(format!("{}.png", nv.name)))?;
        let depth = DepthMap::read_pfm(&rendered.join(format!("{}.pfm", nv.name)))?;
        views.push(objectives::view_metrics(&nv.name, &rgb, &depth, &nv.view)?);
    }
    let (num_gs, recon) = match std::fs::read(rendered.join(REPORT_FILE)) {
        Ok(bytes) => {
            let r: RenderReport = serde_json::from_slice(&bytes)?;
            (r.num_gs, r.timings.reconstruction())
        }
        Err(_) => (0, 0.0),
    };
    MetricsReport::from_views(views, num_gs, recon)
}
