//! Pinhole cameras with camera-to-world extrinsics.
//!
//! A world point `P_w` relates to camera coordinates through
//! `P_w = R·P_c + T`. Pixel `(u, v)` with depth `d` back-projects to
//! `R·(d·((u−cx)/fx, (v−cy)/fy, 1)) + T`. Depth lookups and rasterization
//! use integer pixel coordinates; ray embeddings go through the pixel
//! center `(u+0.5, v+0.5)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};
use crate::linalg::{self, Mat3, Vec3};

/// Points closer to the image plane than this are behind the camera.
pub const Z_NEAR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("intrinsics".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Precondition(format!("focal lengths must be positive, got ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::Precondition(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-space direction (unnormalized, z = 1) through image coordinate `(x, y)`.
    #[inline]
    pub fn unproject(&self, x: f64, y: f64) -> Vec3 {
        [(x - self.cx) / self.fx, (y - self.cy) / self.fy, 1.0]
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Row-major rotation, camera axes expressed in world coordinates (columns).
    pub rotation: Mat3,
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Extrinsics {
    pub const IDENTITY: Extrinsics = Extrinsics { rotation: linalg::IDENTITY3, translation: [0.0; 3] };

    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let e = Self { rotation, translation };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().flatten().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("extrinsics".into()));
        }
        let rrt = linalg::mat_mul(&self.rotation, &linalg::transpose(&self.rotation));
        for (i, row) in rrt.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > 1e-9 {
                    return Err(Error::Precondition("rotation is not orthonormal".into()));
                }
            }
        }
        if (linalg::det(&self.rotation) - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition("rotation determinant is not +1".into()));
        }
        Ok(())
    }

    /// Builds the camera-to-world transform from a world-to-camera pose
    /// `P_c = R_wc·P_w + t_wc`.
    pub fn from_world_to_camera(r_wc: Mat3, t_wc: Vec3) -> Result<Self> {
        let rotation = linalg::transpose(&r_wc);
        let translation = linalg::scale(linalg::mat_vec(&rotation, t_wc), -1.0);
        Self::new(rotation, translation)
    }

    /// Camera at `eye` looking at `target`; image y axis points along −`up`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let z = linalg::normalize(linalg::sub(target, eye));
        let x = linalg::normalize(linalg::cross(z, up));
        let y = linalg::cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Self { rotation, translation: eye }
    }

    /// World point to camera coordinates: `Rᵀ(P − T)`.
    #[inline]
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        linalg::mat_t_vec(&self.rotation, linalg::sub(p, self.translation))
    }

    #[inline]
    pub fn camera_to_world(&self, p: Vec3) -> Vec3 {
        linalg::add(linalg::mat_vec(&self.rotation, p), self.translation)
    }

    /// `G ∘ self` for a rigid motion `G` given as camera-to-world style (R, T).
    pub fn transformed(&self, g: &Extrinsics) -> Extrinsics {
        Extrinsics {
            rotation: linalg::mat_mul(&g.rotation, &self.rotation),
            translation: g.camera_to_world(self.translation),
        }
    }
}

/// One posed RGB-D observation.
#[derive(Debug, Clone)]
pub struct CameraView {
    pub image: Image,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

impl CameraView {
    pub fn new(image: Image, depth: DepthMap, intrinsics: Intrinsics, extrinsics: Extrinsics) -> Result<Self> {
        let view = Self { image, depth, intrinsics, extrinsics };
        view.validate()?;
        Ok(view)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.extrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if self.image.width != w || self.image.height != h || self.depth.width != w || self.depth.height != h {
            return Err(Error::Shape(format!(
                "view is {}x{} but image is {}x{} and depth is {}x{}",
                w, h, self.image.width, self.image.height, self.depth.width, self.depth.height
            )));
        }
        if !self.image.data.iter().all(|v| v.is_finite()) || !self.depth.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera view".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// Camera-space depth.
    pub z: f64,
    pub behind: bool,
}

pub fn backproject_pixel(u: f64, v: f64, d: f64, k: &Intrinsics, e: &Extrinsics) -> Result<Vec3> {
    if !(u.is_finite() && v.is_finite() && d.is_finite()) {
        return Err(Error::NonFinite("pixel coordinate or depth".into()));
    }
    if d <= 0.0 {
        return Err(Error::InvalidDepth(d));
    }
    let ray = k.unproject(u, v);
    Ok(e.camera_to_world(linalg::scale(ray, d)))
}

pub fn project_point(p: Vec3, k: &Intrinsics, e: &Extrinsics) -> Projection {
    project_point_with_near(p, k, e, Z_NEAR)
}

pub fn project_point_with_near(p: Vec3, k: &Intrinsics, e: &Extrinsics, z_near: f64) -> Projection {
    let pc = e.world_to_camera(p);
    let z = pc[2];
    Projection {
        u: k.fx * pc[0] / z + k.cx,
        v: k.fy * pc[1] / z + k.cy,
        z,
        behind: !(z > z_near),
    }
}

/// Plücker coordinates `(d, o × d)` of the ray through pixel center `(u+0.5, v+0.5)`.
pub fn ray_embedding(u: f64, v: f64, k: &Intrinsics, e: &Extrinsics) -> [f64; 6] {
    let dir_cam = k.unproject(u + 0.5, v + 0.5);
    let d = linalg::normalize(linalg::mat_vec(&e.rotation, dir_cam));
    let m = linalg::cross(e.translation, d);
    [d[0], d[1], d[2], m[0], m[1], m[2]]
}

/// Back-projects every `stride`-th pixel with valid depth, row-major.
pub fn backproject_view(view: &CameraView, stride: usize) -> Result<Vec<Vec3>> {
    if stride == 0 {
        return Err(Error::Precondition("stride must be at least 1".into()));
    }
    let (w, h) = (view.width(), view.height());
    let mut out = Vec::with_capacity((w / stride + 1) * (h / stride + 1));
    for v in (0..h).step_by(stride) {
        for u in (0..w).step_by(stride) {
            let d = view.depth.get(u, v);
            if d > 0.0 {
                out.push(backproject_pixel(u as f64, v as f64, d, &view.intrinsics, &view.extrinsics)?);
            }
        }
    }
    Ok(out)
}
