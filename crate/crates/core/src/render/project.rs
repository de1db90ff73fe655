//! Projection of 3D Gaussians to screen-space splats and its adjoint.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use super::RenderConfig;
use crate::scene::{
    covariance_from_params, rotation_matrix, sigmoid, CameraView, GaussianCloud, GaussianPrimitive,
};
use crate::scene::{ShDegree, SH_C0, SH_C1};

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel coordinates; pixel `(x, y)` is sampled at exactly `(x, y)`.
    pub mean2d: [f64; 2],
    /// Symmetric 2x2 covariance as `[xx, xy, yy]`, dilation included.
    pub cov2d: [f64; 3],
    /// Camera-frame z.
    pub depth: f64,
    pub gaussian_index: usize,
}

/// Everything the rasterizer and the backward pass need about a visible Gaussian.
#[derive(Debug, Clone)]
pub(crate) struct Splat {
    pub proj: ProjectedGaussian,
    pub id: u64,
    /// Inverse of `cov2d`, `[a, b, c]` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Pixel-space support box `[x0, x1, y0, y1]` (inclusive).
    pub bbox: [i64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    /// Channels whose raw color was clamped into [0, 1].
    pub color_clamped: [bool; 3],
    // Cached intermediates for the backward pass.
    t_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    w_sigma_wt: Matrix3<f64>,
    view_dir: Vector3<f64>,
    view_dist: f64,
}

pub fn project_gaussian(
    g: &GaussianPrimitive,
    camera: &CameraView,
    cfg: &RenderConfig,
) -> Option<ProjectedGaussian> {
    let mut cloud = GaussianCloud::with_feature_dim(g.features.len());
    cloud.push(g);
    project_one(&cloud, 0, camera, &camera.world_to_camera_rotation(), cfg).map(|s| s.proj)
}

pub(crate) fn project_cloud(
    cloud: &GaussianCloud,
    camera: &CameraView,
    cfg: &RenderConfig,
) -> Vec<Option<Splat>> {
    let w = camera.world_to_camera_rotation();
    crate::par::map_indexed(cloud.len(), cfg.parallel, |i| {
        project_one(cloud, i, camera, &w, cfg)
    })
}

fn project_one(
    cloud: &GaussianCloud,
    i: usize,
    camera: &CameraView,
    w: &Matrix3<f64>,
    cfg: &RenderConfig,
) -> Option<Splat> {
    let p = Vector3::from(cloud.positions[i]);
    let t = w * p + Vector3::from(camera.translation);
    if t.z <= cfg.near {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let mean2d = [fx * t.x / t.z + camera.cx, fy * t.y / t.z + camera.cy];
    let jac = Matrix2x3::new(
        fx / t.z,
        0.0,
        -fx * t.x / (t.z * t.z),
        0.0,
        fy / t.z,
        -fy * t.y / (t.z * t.z),
    );
    let sigma = covariance_from_params(cloud.rotations[i], cloud.log_scales[i]);
    let m = w * sigma * w.transpose();
    let c = jac * m * jac.transpose();
    let cov2d = [
        c[(0, 0)] + cfg.dilation,
        0.5 * (c[(0, 1)] + c[(1, 0)]),
        c[(1, 1)] + cfg.dilation,
    ];
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov2d[2] / det, -cov2d[1] / det, cov2d[0] / det];

    let mid = 0.5 * (cov2d[0] + cov2d[2]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = cfg.extent_sigma * lambda_max.sqrt();
    let (wd, ht) = (camera.width as f64, camera.height as f64);
    if mean2d[0] + radius < 0.0
        || mean2d[0] - radius > wd - 1.0
        || mean2d[1] + radius < 0.0
        || mean2d[1] - radius > ht - 1.0
    {
        return None;
    }
    let bbox = if cfg.pixel_cutoff {
        [
            (mean2d[0] - radius).ceil().max(0.0) as i64,
            (mean2d[0] + radius).floor().min(wd - 1.0) as i64,
            (mean2d[1] - radius).ceil().max(0.0) as i64,
            (mean2d[1] + radius).floor().min(ht - 1.0) as i64,
        ]
    } else {
        [0, camera.width as i64 - 1, 0, camera.height as i64 - 1]
    };
    if bbox[0] > bbox[1] || bbox[2] > bbox[3] {
        return None;
    }

    let cam_center = Vector3::from(camera.center());
    let offset = p - cam_center;
    let view_dist = offset.norm();
    let view_dir = if view_dist > 0.0 {
        offset / view_dist
    } else {
        Vector3::z()
    };
    let raw = raw_color(cloud.features_of(i), cloud.sh_degree(), &view_dir);
    let color = raw.map(|c| c.clamp(0.0, 1.0));
    let color_clamped = raw.map(|c| !(0.0..=1.0).contains(&c));

    Some(Splat {
        proj: ProjectedGaussian {
            mean2d,
            cov2d,
            depth: t.z,
            gaussian_index: i,
        },
        id: cloud.ids[i],
        conic,
        bbox,
        opacity: sigmoid(cloud.opacity_logits[i]),
        color,
        color_clamped,
        t_cam: t,
        jac,
        w_sigma_wt: m,
        view_dir,
        view_dist,
    })
}

/// Linear SH color before clamping; `dir` is the unit vector from the camera
/// center to the Gaussian.
pub(crate) fn raw_color(features: &[f64], degree: ShDegree, dir: &Vector3<f64>) -> [f64; 3] {
    let mut c = [0.0; 3];
    for ch in 0..3 {
        c[ch] = SH_C0 * features[ch] + 0.5;
        if degree == ShDegree::One {
            c[ch] += SH_C1
                * (-dir.y * features[3 + ch] + dir.z * features[6 + ch] - dir.x * features[9 + ch]);
        }
    }
    c
}

/// Upstream gradients of one splat collected by the rasterizer.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

/// Gradients for one Gaussian's parameters.
#[derive(Debug, Clone, Default)]
pub(crate) struct ParamGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub features: Vec<f64>,
    pub opacity_logit: f64,
}

/// Chains splat-level gradients back to the Gaussian's parameters.
pub(crate) fn backward_splat(
    splat: &Splat,
    grad: &SplatGrad,
    cloud: &GaussianCloud,
    camera: &CameraView,
    w: &Matrix3<f64>,
) -> ParamGrad {
    let i = splat.proj.gaussian_index;
    let k = cloud.feature_dim();
    let degree = cloud.sh_degree();
    let mut out = ParamGrad {
        features: vec![0.0; k],
        ..Default::default()
    };

    // Opacity logit.
    let o = splat.opacity;
    out.opacity_logit = grad.opacity * o * (1.0 - o);

    // Color -> features (and view direction for degree 1).
    let mut d_dir = Vector3::zeros();
    let f = cloud.features_of(i);
    for ch in 0..3 {
        if splat.color_clamped[ch] {
            continue;
        }
        let g = grad.color[ch];
        out.features[ch] = g * SH_C0;
        if degree == ShDegree::One {
            let dir = &splat.view_dir;
            out.features[3 + ch] = -g * SH_C1 * dir.y;
            out.features[6 + ch] = g * SH_C1 * dir.z;
            out.features[9 + ch] = -g * SH_C1 * dir.x;
            d_dir.x += -g * SH_C1 * f[9 + ch];
            d_dir.y += -g * SH_C1 * f[3 + ch];
            d_dir.z += g * SH_C1 * f[6 + ch];
        }
    }
    let mut d_pos = Vector3::zeros();
    if degree == ShDegree::One && splat.view_dist > 0.0 {
        let dir = splat.view_dir;
        d_pos += (d_dir - dir * dir.dot(&d_dir)) / splat.view_dist;
    }

    // Conic -> 2D covariance. Off-diagonal conic/cov entries appear twice in
    // the symmetric matrices, so the upstream b-gradient is split in half.
    let conic = nalgebra::Matrix2::new(
        splat.conic[0],
        splat.conic[1],
        splat.conic[1],
        splat.conic[2],
    );
    let g_conic = nalgebra::Matrix2::new(
        grad.conic[0],
        0.5 * grad.conic[1],
        0.5 * grad.conic[1],
        grad.conic[2],
    );
    let g_cov = -(conic * g_conic * conic);
    // `g_cov` is the full-matrix gradient; the dilation term has no parameters.

    // cov2d = J M Jᵀ.
    let jac = splat.jac;
    let m = splat.w_sigma_wt;
    let g_m = jac.transpose() * g_cov * jac;
    let g_jac = 2.0 * g_cov * jac * m;
    let g_sigma = w.transpose() * g_m * w;

    // Camera-frame point through J and the mean projection.
    let t = splat.t_cam;
    let (fx, fy) = (camera.fx, camera.fy);
    let (iz, iz2, iz3) = (1.0 / t.z, 1.0 / (t.z * t.z), 1.0 / (t.z * t.z * t.z));
    let mut d_t = Vector3::new(
        grad.mean2d[0] * fx * iz,
        grad.mean2d[1] * fy * iz,
        -grad.mean2d[0] * fx * t.x * iz2 - grad.mean2d[1] * fy * t.y * iz2,
    );
    d_t.x += g_jac[(0, 2)] * (-fx * iz2);
    d_t.y += g_jac[(1, 2)] * (-fy * iz2);
    d_t.z += g_jac[(0, 0)] * (-fx * iz2)
        + g_jac[(0, 2)] * (2.0 * fx * t.x * iz3)
        + g_jac[(1, 1)] * (-fy * iz2)
        + g_jac[(1, 2)] * (2.0 * fy * t.y * iz3);
    d_pos += w.transpose() * d_t;
    out.position = [d_pos.x, d_pos.y, d_pos.z];

    // Sigma = R D Rᵀ, D = diag(exp(2 s)).
    let q = cloud.rotations[i];
    let r = rotation_matrix(q);
    let d = Vector3::from(cloud.log_scales[i].map(|s| (2.0 * s).exp()));
    let g_sym = 0.5 * (g_sigma + g_sigma.transpose());
    let rt_g_r = r.transpose() * g_sym * r;
    for a in 0..3 {
        out.log_scale[a] = 2.0 * d[a] * rt_g_r[(a, a)];
    }
    let g_r = 2.0 * g_sym * r * Matrix3::from_diagonal(&d);
    out.rotation = quaternion_backward(q, &g_r);
    out
}

/// Gradient of `L(R(q/|q|))` with respect to the raw quaternion `q`.
pub(crate) fn quaternion_backward(q: [f64; 4], g_r: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let g = |r: usize, c: usize| g_r[(r, c)];
    // Partial derivatives of the rotation matrix entries w.r.t. unit (w, x, y, z).
    let dw =
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0
        * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2));
    let dy = 2.0
        * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2));
    let dz = 2.0
        * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1));
    let gu = [dw, dx, dy, dz];
    let u = [w, x, y, z];
    let dot: f64 = gu.iter().zip(&u).map(|(a, b)| a * b).sum();
    std::array::from_fn(|k| (gu[k] - u[k] * dot) / n)
}
