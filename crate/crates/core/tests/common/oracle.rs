use asplat::cameras::{Extrinsics, Intrinsics};
use asplat::raster::{ALPHA_MAX, CUTOFF_SIGMA, LOW_PASS, T_MIN};
use asplat::scene::{self, Gaussian, SceneNormalization};
use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};

pub struct OracleSplat {
    u: f64,
    v: f64,
    conic: Matrix2<f64>,
    z: f64,
    color: [f64; 3],
    opacity: f64,
    id: usize,
}

pub fn oracle_project(g: &Gaussian, id: usize, norm: &SceneNormalization, k: &Intrinsics, e: &Extrinsics) -> Option<OracleSplat> {
    let h = norm.half_extent;
    let mean = Vector3::from(norm.center) + h * Vector3::from(g.mean);
    let q = UnitQuaternion::from_quaternion(Quaternion::new(g.rotation[0], g.rotation[1], g.rotation[2], g.rotation[3]));
    let r = q.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(&Vector3::new(g.scale[0] * h, g.scale[1] * h, g.scale[2] * h));
    let sigma = r * s * s * r.transpose();
    let rc = Matrix3::from_row_slice(&e.rotation.concat());
    let w = rc.transpose();
    let t = w * (mean - Vector3::from(e.translation));
    if t.z <= 1e-4 {
        return None;
    }
    // the Jacobian sees slopes clamped to 1.3× the half field of view
    let sx = (t.x / t.z).clamp(-0.65 * k.width as f64 / k.fx, 0.65 * k.width as f64 / k.fx);
    let sy = (t.y / t.z).clamp(-0.65 * k.height as f64 / k.fy, 0.65 * k.height as f64 / k.fy);
    let j = Matrix2x3::new(k.fx / t.z, 0.0, -k.fx * sx / t.z, 0.0, k.fy / t.z, -k.fy * sy / t.z);
    let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * LOW_PASS;
    Some(OracleSplat {
        u: k.fx * t.x / t.z + k.cx,
        v: k.fy * t.y / t.z + k.cy,
        conic: cov.try_inverse()?,
        z: t.z,
        color: scene::sh_to_rgb(g.sh),
        opacity: g.opacity,
        id,
    })
}

/// Per pixel, every Gaussian in (depth, id) order, no tiling or culling.
pub fn oracle_render(gs: &[Gaussian], norm: &SceneNormalization, k: &Intrinsics, e: &Extrinsics, bg: [f64; 3]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut splats: Vec<OracleSplat> = gs.iter().enumerate().filter_map(|(i, g)| oracle_project(g, i, norm, k, e)).collect();
    splats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.id.cmp(&b.id)));
    let floor = (-0.5 * CUTOFF_SIGMA * CUTOFF_SIGMA).exp();
    let (w, h) = (k.width, k.height);
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut zs = 0.0;
            for s in &splats {
                let d = nalgebra::Vector2::new(x as f64 - s.u, y as f64 - s.v);
                let rho = (d.transpose() * s.conic * d)[0];
                if rho >= CUTOFF_SIGMA * CUTOFF_SIGMA {
                    continue;
                }
                let wgt = (s.opacity * ((-0.5 * rho).exp() - floor) / (1.0 - floor)).min(ALPHA_MAX);
                if wgt <= 0.0 {
                    continue;
                }
                for ch in 0..3 {
                    c[ch] += s.color[ch] * wgt * t;
                }
                zs += s.z * wgt * t;
                t *= 1.0 - wgt;
                if t < T_MIN {
                    break;
                }
            }
            let p = y * w + x;
            for ch in 0..3 {
                rgb[3 * p + ch] = c[ch] + t * bg[ch];
            }
            alpha[p] = 1.0 - t;
            if alpha[p] > 0.0 {
                depth[p] = zs / alpha[p].max(1e-8);
            }
        }
    }
    (rgb, depth, alpha)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
