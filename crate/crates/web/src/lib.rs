//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Images are returned as RGBA bytes ready for `ImageData`.

use wasm_bindgen::prelude::*;

use asplat::anchors::{self, AnchorConfig};
use asplat::cameras::{self, CameraView, Extrinsics, Intrinsics};
use asplat::image::Image;
use asplat::raster::{self, RasterSettings};
use asplat::scene::{Gaussian, SceneNormalization, SH_C0};
use asplat::synth::{self, Preset};

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    img.to_rgb8().chunks(3).flat_map(|c| [c[0], c[1], c[2], 255]).collect()
}

fn intrinsics(width: usize, height: usize) -> Result<Intrinsics, JsError> {
    let f = 0.8 * width as f64;
    Intrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height).map_err(js)
}

fn parse_preset(preset: &str) -> Result<Preset, JsError> {
    preset.parse().map_err(js)
}

/// Ray-traced view of a preset from orbit angle `theta` (radians).
#[wasm_bindgen]
pub fn room_view(preset: &str, theta: f64, width: usize, height: usize) -> Result<Vec<u8>, JsError> {
    let world = synth::build_world(parse_preset(preset)?, 0);
    let (img, _) = world.render(&intrinsics(width, height)?, &synth::orbit_pose(theta, 1.0));
    Ok(rgba(&img))
}

/// Samples up to `count` anchors from four orbit views and returns their
/// pixel positions in the view at `theta` as `[x0, y0, x1, y1, ...]`.
/// Anchors hidden behind geometry are omitted.
#[wasm_bindgen]
pub fn anchor_points(preset: &str, theta: f64, count: usize, width: usize, height: usize) -> Result<Vec<f32>, JsError> {
    let world = synth::build_world(parse_preset(preset)?, 0);
    let k = intrinsics(width, height)?;
    let mut views = Vec::new();
    for i in 0..4 {
        let e = synth::orbit_pose(theta + std::f64::consts::FRAC_PI_2 * i as f64, 1.0);
        let (img, depth) = world.render(&k, &e);
        views.push(CameraView::new(img, depth, k, e).map_err(js)?);
    }
    let cfg = AnchorConfig { stride: 2, cap: count.max(1), ..Default::default() };
    let set = anchors::build_anchors(&views, &cfg).map_err(js)?;
    let target = &views[0];
    let mut out = Vec::with_capacity(2 * set.len());
    for i in 0..set.len() {
        let p = set.world_position(i);
        if asplat::features::visibility(p, target, 0.05) {
            let pr = cameras::project_point(p, &target.intrinsics, &target.extrinsics);
            out.push(pr.u as f32);
            out.push(pr.v as f32);
        }
    }
    Ok(out)
}

/// One Gaussian one unit in front of the camera, rendered on a dark
/// background. Scales are in scene units, `angle` rotates about the view
/// axis (radians), color channels are in `[0, 1]`.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn splat_preview(sx: f64, sy: f64, angle: f64, opacity: f64, r: f64, g: f64, b: f64, size: usize) -> Result<Vec<u8>, JsError> {
    let k = intrinsics(size, size)?;
    let half = 0.5 * angle;
    let gaussian = Gaussian {
        mean: [0.0, 0.0, 1.0],
        opacity: opacity.clamp(0.0, 1.0),
        scale: [sx.max(1e-4), sy.max(1e-4), 0.01],
        rotation: [half.cos(), 0.0, 0.0, half.sin()],
        sh: [r, g, b].map(|c| (c.clamp(0.0, 1.0) - 0.5) / SH_C0),
        anchor_id: 0,
    };
    let norm = SceneNormalization { center: [0.0; 3], half_extent: 1.0 };
    let settings = RasterSettings { background: [0.08, 0.08, 0.1], ..Default::default() };
    let out = raster::render_gaussians(&[gaussian], &norm, &k, &Extrinsics::IDENTITY, &settings).map_err(js)?;
    Ok(rgba(&out.rgb))
}
