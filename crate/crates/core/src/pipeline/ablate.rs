//! Sweeps over pooling mode, Gaussians per anchor and input-view count.

use serde::{Deserialize, Serialize};

use crate::autodiff::PoolingMode;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::manifest::LoadedScene;
use crate::objectives::MetricsReport;

use super::train::{self, Prepared};
use super::{evaluate, fit};

pub const MULTIPLICITIES: [usize; 5] = [1, 2, 4, 8, 16];
pub const VIEW_COUNTS: [usize; 3] = [2, 4, 8];
pub const POOLING_MODES: [PoolingMode; 3] = [PoolingMode::Avg, PoolingMode::Max, PoolingMode::Fifo];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Pooling,
    Multiplicity,
    Views,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooling" => Ok(Axis::Pooling),
            "multiplicity" => Ok(Axis::Multiplicity),
            "views" => Ok(Axis::Views),
            _ => Err(Error::Config(format!("unknown ablation axis '{s}' (pooling, multiplicity, views)"))),
        }
    }
}

/// One cell of the table; metrics are means over scenes, NumGS a sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub value: String,
    pub psnr: f64,
    pub ssim: f64,
    pub absrel: f64,
    pub delta1: f64,
    pub num_gs: usize,
    pub recon_time_s: f64,
}

impl AblationRow {
    fn from_reports(axis: Axis, value: String, reports: &[MetricsReport]) -> Self {
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self {
            axis,
            value,
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            absrel: mean(|r| r.absrel),
            delta1: mean(|r| r.delta1),
            num_gs: reports.iter().map(|r| r.num_gs).sum(),
            recon_time_s: reports.iter().map(|r| r.recon_time_s).sum(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.psnr, self.ssim, self.absrel, self.delta1].iter().all(|v| v.is_finite())
    }
}

pub fn rows_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,psnr,ssim,absrel,delta1,num_gs,recon_time_s\n");
    for r in rows {
        let axis = serde_json::to_value(r.axis).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        s.push_str(&format!("{axis},{},{},{},{},{},{},{}\n", r.value, r.psnr, r.ssim, r.absrel, r.delta1, r.num_gs, r.recon_time_s));
    }
    s
}

fn eval_views(scene: &LoadedScene) -> &[crate::manifest::NamedView] {
    if scene.novel.is_empty() {
        &scene.inputs
    } else {
        &scene.novel
    }
}

fn fit_row(scenes: &[LoadedScene], axis: Axis, value: String, cfg: &RunConfig) -> Result<AblationRow> {
    let reports = scenes.iter().map(|s| fit::fit(s, cfg, |_| {}).map(|o| o.report)).collect::<Result<Vec<_>>>()?;
    Ok(AblationRow::from_reports(axis, value, &reports))
}

/// Trains stage 1 with the given config and scores the decoded scenes.
fn learned_row(scenes: &[LoadedScene], axis: Axis, value: String, cfg: &RunConfig) -> Result<AblationRow> {
    let prepared: Vec<Prepared> = scenes.iter().map(|s| train::prepare_scene(s, cfg)).collect::<Result<_>>()?;
    let mut params = train::init_stage1(cfg);
    let mut opt = crate::optim::Adam::new(cfg.train.stage1, &params);
    for step in 0..cfg.train.stage1_steps {
        let (terms, grads) = train::stage1_loss(&params, &prepared[step % prepared.len()], cfg, None)?;
        if !terms.total.is_finite() {
            return Err(Error::Divergence { step, detail: format!("loss {}", terms.total) });
        }
        opt.update(&mut params, &grads)?;
    }
    let mut reports = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (scene, _, t) = train::reconstruct(&s.input_views(), &params, None, 0, cfg)?;
        reports.push(evaluate(&scene, eval_views(s), &cfg.raster.settings(), t.reconstruction())?);
    }
    Ok(AblationRow::from_reports(axis, value, &reports))
}

pub fn ablate(scenes: &[LoadedScene], axis: Axis, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Precondition("ablation needs at least one scene".into()));
    }
    match axis {
        Axis::Pooling => POOLING_MODES
            .iter()
            .map(|&mode| {
                let mut c = cfg.clone();
                c.features.pooling = mode;
                learned_row(scenes, axis, mode.to_string(), &c)
            })
            .collect(),
        Axis::Multiplicity => MULTIPLICITIES
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.decoder.gaussians_per_anchor = k;
                fit_row(scenes, axis, k.to_string(), &c)
            })
            .collect(),
        Axis::Views => VIEW_COUNTS
            .iter()
            .map(|&v| {
                let subset = scenes.iter().map(|s| s.with_input_count(v)).collect::<Result<Vec<_>>>()?;
                fit_row(&subset, axis, v.to_string(), cfg)
            })
            .collect(),
    }
}
