//! Ray-traced synthetic scenes with exact depth.
//!
//! Scenes are built from axis-aligned rectangles and spheres with procedural
//! albedo and a fixed world-space shading term, so colors do not depend on
//! the viewing direction. Each pixel is traced once through its integer
//! image coordinate; depth is the camera-space z of the first hit.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cameras::{CameraView, Extrinsics, Intrinsics};
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::linalg::{self, Vec3};
use crate::manifest::{self, NamedView, PoseConvention, SceneManifest, Split, ViewEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    BoxRoom,
    TexturedPlanes,
    SphereField,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "box-room" => Ok(Self::BoxRoom),
            "textured-planes" => Ok(Self::TexturedPlanes),
            "sphere-field" => Ok(Self::SphereField),
            _ => Err(Error::Config(format!("unknown preset '{s}' (box-room, textured-planes, sphere-field)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BoxRoom => "box-room",
            Self::TexturedPlanes => "textured-planes",
            Self::SphereField => "sphere-field",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub preset: Preset,
    pub width: usize,
    pub height: usize,
    pub input_views: usize,
    pub novel_views: usize,
    pub seed: u64,
    pub orbit_radius: f64,
    /// Horizontal focal length as a multiple of the image width.
    pub focal_factor: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            preset: Preset::BoxRoom,
            width: 128,
            height: 96,
            input_views: 8,
            novel_views: 2,
            seed: 0,
            orbit_radius: 1.0,
            focal_factor: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Texture {
    /// Soft checker between two colors with period `period` (world units).
    Checker { a: Vec3, b: Vec3, period: f64 },
    /// Linear blend along one surface coordinate.
    Gradient { a: Vec3, b: Vec3, span: f64 },
    Solid(Vec3),
}

impl Texture {
    fn eval(&self, s: f64, t: f64) -> Vec3 {
        match *self {
            Texture::Checker { a, b, period } => {
                let k = std::f64::consts::PI / period;
                let w = 0.5 + 0.5 * (k * s).sin() * (k * t).sin();
                lerp(a, b, w)
            }
            Texture::Gradient { a, b, span } => lerp(a, b, (0.5 + s / (2.0 * span)).clamp(0.0, 1.0)),
            Texture::Solid(c) => c,
        }
    }
}

fn lerp(a: Vec3, b: Vec3, w: f64) -> Vec3 {
    [a[0] + (b[0] - a[0]) * w, a[1] + (b[1] - a[1]) * w, a[2] + (b[2] - a[2]) * w]
}

/// Axis-aligned rectangle `x[axis] = offset` over a box in the other axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub axis: usize,
    pub offset: f64,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub texture: Texture,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    pub quads: Vec<Quad>,
    pub spheres: Vec<Sphere>,
}

pub struct Hit {
    pub t: f64,
    pub color: Vec3,
}

const LIGHT: Vec3 = [0.3, 0.8, 0.5];

fn shade(albedo: Vec3, normal: Vec3) -> Vec3 {
    let l = linalg::normalize(LIGHT);
    let k = 0.75 + 0.25 * linalg::dot(normal, l).abs();
    albedo.map(|c| (c * k).clamp(0.0, 1.0))
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl World {
    /// First hit along `o + t·d` with `t > 1e-9`.
    pub fn trace(&self, o: Vec3, d: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for q in &self.quads {
            if d[q.axis].abs() < 1e-15 {
                continue;
            }
            let t = (q.offset - o[q.axis]) / d[q.axis];
            if !(t > 1e-9) || best.as_ref().is_some_and(|b| b.t <= t) {
                continue;
            }
            let (a1, a2) = other_axes(q.axis);
            let p1 = o[a1] + t * d[a1];
            let p2 = o[a2] + t * d[a2];
            if p1 < q.lo[0] || p1 > q.hi[0] || p2 < q.lo[1] || p2 > q.hi[1] {
                continue;
            }
            let mut n = [0.0; 3];
            n[q.axis] = 1.0;
            best = Some(Hit { t, color: shade(q.texture.eval(p1, p2), n) });
        }
        for s in &self.spheres {
            let oc = linalg::sub(o, s.center);
            let a = linalg::dot(d, d);
            let b = linalg::dot(oc, d);
            let c = linalg::dot(oc, oc) - s.radius * s.radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                continue;
            }
            let sq = disc.sqrt();
            let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|t| *t > 1e-9);
            let Some(t) = t else { continue };
            if best.as_ref().is_some_and(|h| h.t <= t) {
                continue;
            }
            let p = linalg::add(o, linalg::scale(d, t));
            let n = linalg::normalize(linalg::sub(p, s.center));
            let lon = n[2].atan2(n[0]) * s.radius;
            let lat = n[1].asin() * s.radius;
            best = Some(Hit { t, color: shade(s.texture.eval(lon, lat), n) });
        }
        best
    }

    /// Renders color and z-depth through integer pixel coordinates.
    pub fn render(&self, k: &Intrinsics, e: &Extrinsics) -> (Image, DepthMap) {
        let mut img = Image::new(k.width, k.height);
        let mut depth = DepthMap::filled(k.width, k.height, 0.0);
        for v in 0..k.height {
            for u in 0..k.width {
                let dc = k.unproject(u as f64, v as f64);
                let dw = linalg::mat_vec(&e.rotation, dc);
                if let Some(h) = self.trace(e.translation, dw) {
                    // 8-bit color and float32 depth, exactly what the files hold
                    img.set(u, v, h.color.map(|c| (c * 255.0).round() / 255.0));
                    depth.set(u, v, h.t as f32 as f64);
                }
            }
        }
        (img, depth)
    }
}

fn jitter(rng: &mut ChaCha8Rng, c: Vec3, amount: f64) -> Vec3 {
    c.map(|x| (x + rng.random_range(-amount..amount)).clamp(0.05, 0.95))
}

const ROOM: [f64; 3] = [2.0, 1.2, 2.0];

fn room(rng: &mut ChaCha8Rng, walls: &mut Vec<Quad>) {
    let palette: [(Vec3, Vec3); 6] = [
        ([0.75, 0.35, 0.30], [0.95, 0.80, 0.55]),
        ([0.25, 0.45, 0.70], [0.70, 0.85, 0.95]),
        ([0.35, 0.60, 0.35], [0.85, 0.90, 0.60]),
        ([0.60, 0.40, 0.65], [0.90, 0.75, 0.85]),
        ([0.45, 0.35, 0.25], [0.80, 0.70, 0.55]),
        ([0.85, 0.85, 0.80], [0.55, 0.60, 0.70]),
    ];
    let mut i = 0;
    for axis in 0..3 {
        let (a1, a2) = other_axes(axis);
        for sign in [-1.0, 1.0] {
            let (a, b) = palette[i];
            let texture = if axis == 1 {
                Texture::Gradient { a: jitter(rng, a, 0.05), b: jitter(rng, b, 0.05), span: ROOM[a1] }
            } else {
                Texture::Checker { a: jitter(rng, a, 0.05), b: jitter(rng, b, 0.05), period: 0.5 + 0.1 * i as f64 }
            };
            walls.push(Quad {
                axis,
                offset: sign * ROOM[axis],
                lo: [-ROOM[a1], -ROOM[a2]],
                hi: [ROOM[a1], ROOM[a2]],
                texture,
            });
            i += 1;
        }
    }
}

/// The world for a preset; colors vary slightly with the seed.
pub fn build_world(preset: Preset, seed: u64) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_0000);
    let mut w = World::default();
    room(&mut rng, &mut w.quads);
    match preset {
        Preset::BoxRoom => {
            w.spheres.push(Sphere {
                center: [0.0, -0.7, 0.0],
                radius: 0.4,
                texture: Texture::Checker { a: jitter(&mut rng, [0.9, 0.6, 0.2], 0.05), b: [0.3, 0.2, 0.6], period: 0.3 },
            });
        }
        Preset::TexturedPlanes => {
            let cols = [[0.9, 0.3, 0.3], [0.3, 0.8, 0.4], [0.3, 0.4, 0.9]];
            for (i, c) in cols.into_iter().enumerate() {
                let off = -0.6 + 0.6 * i as f64;
                w.quads.push(Quad {
                    axis: (i % 2) * 2,
                    offset: off * 0.5,
                    lo: [-0.9, -0.3],
                    hi: [0.3, 0.4],
                    texture: Texture::Checker { a: jitter(&mut rng, c, 0.05), b: [0.95, 0.95, 0.9], period: 0.2 },
                });
            }
        }
        Preset::SphereField => {
            for i in 0..3 {
                for j in 0..3 {
                    let c = [0.2 + 0.3 * i as f64, 0.8 - 0.25 * j as f64, 0.4 + 0.15 * (i + j) as f64];
                    w.spheres.push(Sphere {
                        center: [-0.5 + 0.5 * i as f64, -0.8, -0.5 + 0.5 * j as f64],
                        radius: 0.15,
                        texture: Texture::Solid(jitter(&mut rng, c, 0.05)),
                    });
                }
            }
        }
    }
    w
}

/// Orbit camera at angle `theta`, looking inward and slightly down.
pub fn orbit_pose(theta: f64, r: f64) -> Extrinsics {
    let eye = [r * theta.cos(), 0.15, r * theta.sin()];
    let target = [-0.3 * theta.cos(), -0.4, -0.3 * theta.sin()];
    Extrinsics::look_at(eye, target, [0.0, 1.0, 0.0])
}

/// Input and novel views of a generated scene, in manifest order.
pub fn generate_views(spec: &GenSpec) -> Result<Vec<(NamedView, Split)>> {
    if spec.input_views == 0 || spec.width == 0 || spec.height == 0 {
        return Err(Error::Config("generator needs at least one input view and a non-empty image".into()));
    }
    let world = build_world(spec.preset, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let f = spec.focal_factor * spec.width as f64;
    let k = Intrinsics::new(f, f, (spec.width as f64 - 1.0) / 2.0, (spec.height as f64 - 1.0) / 2.0, spec.width, spec.height)?;
    let tau = std::f64::consts::TAU;
    let v = spec.input_views as f64;
    let mut poses = Vec::new();
    for i in 0..spec.input_views {
        poses.push((format!("input_{i:03}"), Split::Input, phase + tau * i as f64 / v));
    }
    for j in 0..spec.novel_views {
        // halfway between input cameras, spread around the orbit
        let slot = (j * spec.input_views) / spec.novel_views.max(1);
        poses.push((format!("novel_{j:03}"), Split::Novel, phase + tau * (slot as f64 + 0.5) / v));
    }
    let views = crate::parallel::map_indexed(poses.len(), |i| {
        let e = orbit_pose(poses[i].2, spec.orbit_radius);
        let (img, depth) = world.render(&k, &e);
        (img, depth, e)
    });
    poses
        .into_iter()
        .zip(views)
        .map(|((name, split, _), (img, depth, e))| Ok((NamedView { name, view: CameraView::new(img, depth, k, e)? }, split)))
        .collect()
}

/// Writes a scene directory with PNG images, PFM depth and a manifest.
pub fn write_scene(dir: &Path, spec: &GenSpec) -> Result<SceneManifest> {
    let views = generate_views(spec)?;
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("depth"))?;
    let mut entries = Vec::new();
    for (nv, split) in &views {
        let image = format!("images/{}.png", nv.name);
        let depth = format!("depth/{}.pfm", nv.name);
        nv.view.image.write_png(&dir.join(&image))?;
        nv.view.depth.write_pfm(&dir.join(&depth))?;
        entries.push(ViewEntry {
            name: nv.name.clone(),
            image,
            depth,
            intrinsics: nv.view.intrinsics,
            extrinsics: nv.view.extrinsics,
            split: *split,
            convention: PoseConvention::CameraToWorld,
        });
    }
    let m = SceneManifest {
        name: format!("{}-seed{}", spec.preset, spec.seed),
        depth_provenance: "ray-traced ground truth".into(),
        units: "world".into(),
        views: entries,
    };
    manifest::write_manifest(dir, &m)?;
    std::fs::write(dir.join("generator.json"), serde_json::to_string_pretty(spec)? + "\n")?;
    Ok(m)
}
