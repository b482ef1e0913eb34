//! Scene directories: a `manifest.json` listing posed views with image and
//! depth files relative to the directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cameras::{CameraView, Extrinsics, Intrinsics};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Input,
    Novel,
}

/// How a view's `extrinsics` should be read. World-to-camera poses are
/// inverted on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoseConvention {
    #[default]
    CameraToWorld,
    WorldToCamera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub name: String,
    pub image: String,
    pub depth: String,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    pub split: Split,
    #[serde(default)]
    pub convention: PoseConvention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub name: String,
    /// Where the depth maps come from (e.g. ray traced ground truth).
    pub depth_provenance: String,
    pub units: String,
    pub views: Vec<ViewEntry>,
}

impl SceneManifest {
    pub fn count(&self, split: Split) -> usize {
        self.views.iter().filter(|v| v.split == split).count()
    }
}

#[derive(Debug, Clone)]
pub struct NamedView {
    pub name: String,
    pub view: CameraView,
}

#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub dir: PathBuf,
    pub manifest: SceneManifest,
    pub inputs: Vec<NamedView>,
    pub novel: Vec<NamedView>,
}

impl LoadedScene {
    pub fn input_views(&self) -> Vec<CameraView> {
        self.inputs.iter().map(|v| v.view.clone()).collect()
    }

    pub fn novel_views(&self) -> Vec<CameraView> {
        self.novel.iter().map(|v| v.view.clone()).collect()
    }

    /// Keeps `n` evenly spaced input views (indices `⌊i·V/n⌋`), so smaller
    /// subsets nest inside larger ones when the counts divide.
    pub fn with_input_count(&self, n: usize) -> Result<Self> {
        let total = self.inputs.len();
        if n == 0 || n > total {
            return Err(Error::Manifest(format!("requested {n} of {total} input views")));
        }
        let mut s = self.clone();
        s.inputs = (0..n).map(|i| self.inputs[i * total / n].clone()).collect();
        Ok(s)
    }
}

pub fn read_manifest(dir: &Path) -> Result<SceneManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest(dir: &Path, m: &SceneManifest) -> Result<()> {
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(m)? + "\n")?;
    Ok(())
}

fn load_view(dir: &Path, e: &ViewEntry) -> Result<CameraView> {
    let ctx = |what: &str, err: Error| Error::Manifest(format!("view '{}': {what}: {err}", e.name));
    let image = Image::read_png(&dir.join(&e.image)).map_err(|err| ctx("image", err))?;
    let depth = DepthMap::load(&dir.join(&e.depth)).map_err(|err| ctx("depth", err))?;
    let extrinsics = match e.convention {
        PoseConvention::CameraToWorld => Extrinsics::new(e.extrinsics.rotation, e.extrinsics.translation),
        PoseConvention::WorldToCamera => Extrinsics::from_world_to_camera(e.extrinsics.rotation, e.extrinsics.translation),
    }
    .map_err(|err| ctx("extrinsics", err))?;
    CameraView::new(image, depth, e.intrinsics, extrinsics).map_err(|err| ctx("view", err))
}

pub fn load_scene(dir: &Path) -> Result<LoadedScene> {
    let manifest = read_manifest(dir)?;
    if manifest.count(Split::Input) == 0 {
        return Err(Error::Manifest("manifest has no input views".into()));
    }
    let mut inputs = Vec::new();
    let mut novel = Vec::new();
    for e in &manifest.views {
        let nv = NamedView { name: e.name.clone(), view: load_view(dir, e)? };
        match e.split {
            Split::Input => inputs.push(nv),
            Split::Novel => novel.push(nv),
        }
    }
    Ok(LoadedScene { dir: dir.to_path_buf(), manifest, inputs, novel })
}
