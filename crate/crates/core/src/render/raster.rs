//! Depth-sorted front-to-back alpha compositing and its adjoint.
//!
//! All splats of a view are sorted once by `(depth, id)`. Each image row keeps
//! the sorted sub-list of splats whose support box intersects it, so every
//! pixel composites its contributors in the same global order no matter how
//! rows are scheduled across threads.

use super::project::{backward_splat, project_cloud, Splat, SplatGrad};
use super::{ParamGradients, RenderConfig, RenderOutput};
use crate::par;
use crate::scene::{CameraView, GaussianCloud, Image};

pub(crate) struct Prepared {
    pub splats: Vec<Splat>,
    /// `rows[y]` holds indices into `splats` in compositing order.
    pub rows: Vec<Vec<u32>>,
    pub width: usize,
    pub height: usize,
}

pub(crate) fn prepare(cloud: &GaussianCloud, camera: &CameraView, cfg: &RenderConfig) -> Prepared {
    let mut splats: Vec<Splat> = project_cloud(cloud, camera, cfg)
        .into_iter()
        .flatten()
        .collect();
    splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.id.cmp(&b.id)));
    let (width, height) = (camera.width as usize, camera.height as usize);
    let mut rows = vec![Vec::new(); height];
    for (si, s) in splats.iter().enumerate() {
        for row in &mut rows[s.bbox[2] as usize..=s.bbox[3] as usize] {
            row.push(si as u32);
        }
    }
    Prepared {
        splats,
        rows,
        width,
        height,
    }
}

/// One contributor of a pixel.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub splat: u32,
    pub alpha: f64,
    /// Gaussian falloff value at the pixel.
    pub falloff: f64,
    /// Transmittance in front of this contributor.
    pub transmittance: f64,
    pub dx: f64,
    pub dy: f64,
    pub clamped: bool,
}

/// Walks the contributors of pixel `(x, y)` front to back; returns the final
/// transmittance.
#[inline]
pub(crate) fn composite_pixel(
    prep: &Prepared,
    cfg: &RenderConfig,
    x: usize,
    y: usize,
    mut visit: impl FnMut(&Contribution, &Splat),
) -> f64 {
    let (px, py) = (x as f64, y as f64);
    let xi = x as i64;
    let mut t = 1.0;
    for &si in &prep.rows[y] {
        let s = &prep.splats[si as usize];
        if xi < s.bbox[0] || xi > s.bbox[1] {
            continue;
        }
        let dx = px - s.proj.mean2d[0];
        let dy = py - s.proj.mean2d[1];
        let power =
            -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
        let falloff = power.min(0.0).exp();
        let raw = s.opacity * falloff;
        let clamped = raw > cfg.alpha_max;
        let alpha = if clamped { cfg.alpha_max } else { raw };
        visit(
            &Contribution {
                splat: si,
                alpha,
                falloff,
                transmittance: t,
                dx,
                dy,
                clamped,
            },
            s,
        );
        t *= 1.0 - alpha;
        if t < cfg.transmittance_min {
            break;
        }
    }
    t
}

pub(crate) fn forward(prep: &Prepared, cfg: &RenderConfig) -> RenderOutput {
    let (w, h) = (prep.width, prep.height);
    let rows = par::map_indexed(h, cfg.parallel, |y| {
        let mut color = vec![0.0; w * 3];
        let mut trans = vec![0.0; w];
        let mut counts = vec![0u32; w];
        for x in 0..w {
            let mut c = [0.0; 3];
            let mut n = 0;
            let t = composite_pixel(prep, cfg, x, y, |k, s| {
                let wgt = k.alpha * k.transmittance;
                for ch in 0..3 {
                    c[ch] += s.color[ch] * wgt;
                }
                n += 1;
            });
            for ch in 0..3 {
                color[x * 3 + ch] = c[ch] + t * cfg.background[ch];
            }
            trans[x] = t;
            counts[x] = n;
        }
        (color, trans, counts)
    });
    let mut out = RenderOutput {
        color: Image::new(w, h),
        transmittance: Vec::with_capacity(w * h),
        contributors: Vec::with_capacity(w * h),
    };
    for (y, (color, trans, counts)) in rows.into_iter().enumerate() {
        out.color.data[y * w * 3..(y + 1) * w * 3].copy_from_slice(&color);
        out.transmittance.extend(trans);
        out.contributors.extend(counts);
    }
    out
}

/// Back-propagates `d_color` (per-pixel dL/dC) to every Gaussian parameter.
pub(crate) fn backward(
    prep: &Prepared,
    cfg: &RenderConfig,
    d_color: &Image,
    cloud: &GaussianCloud,
    camera: &CameraView,
) -> ParamGradients {
    let (w, h) = (prep.width, prep.height);
    let n_splats = prep.splats.len();
    // Each row accumulates into its own buffer; rows are summed in order.
    let row_grads = par::map_indexed(h, cfg.parallel, |y| {
        let mut acc: Vec<(u32, SplatGrad)> = Vec::new();
        let mut local: Vec<Option<usize>> = vec![None; n_splats];
        let mut contribs: Vec<Contribution> = Vec::new();
        for x in 0..w {
            let i = (y * w + x) * 3;
            let g = [d_color.data[i], d_color.data[i + 1], d_color.data[i + 2]];
            if g == [0.0; 3] {
                continue;
            }
            contribs.clear();
            let t_final = composite_pixel(prep, cfg, x, y, |k, _| contribs.push(*k));
            // Color of everything behind the current contributor, background included.
            let mut behind = [
                t_final * cfg.background[0],
                t_final * cfg.background[1],
                t_final * cfg.background[2],
            ];
            for k in contribs.iter().rev() {
                let s = &prep.splats[k.splat as usize];
                let wgt = k.alpha * k.transmittance;
                let mut sg = SplatGrad::default();
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    sg.color[ch] = g[ch] * wgt;
                    d_alpha +=
                        g[ch] * (s.color[ch] * k.transmittance - behind[ch] / (1.0 - k.alpha));
                    behind[ch] += s.color[ch] * wgt;
                }
                if !k.clamped {
                    sg.opacity = d_alpha * k.falloff;
                    let d_power = d_alpha * s.opacity * k.falloff;
                    let (a, b, c) = (s.conic[0], s.conic[1], s.conic[2]);
                    sg.mean2d = [
                        d_power * (a * k.dx + b * k.dy),
                        d_power * (b * k.dx + c * k.dy),
                    ];
                    sg.conic = [
                        -0.5 * d_power * k.dx * k.dx,
                        -d_power * k.dx * k.dy,
                        -0.5 * d_power * k.dy * k.dy,
                    ];
                }
                let slot = *local[k.splat as usize].get_or_insert_with(|| {
                    acc.push((k.splat, SplatGrad::default()));
                    acc.len() - 1
                });
                acc[slot].1.add(&sg);
            }
        }
        acc.sort_by_key(|(s, _)| *s);
        acc
    });

    let mut splat_grads = vec![SplatGrad::default(); n_splats];
    for row in &row_grads {
        for (s, g) in row {
            splat_grads[*s as usize].add(g);
        }
    }

    let wmat = camera.world_to_camera_rotation();
    let per_splat = par::map_indexed(n_splats, cfg.parallel, |si| {
        backward_splat(&prep.splats[si], &splat_grads[si], cloud, camera, &wmat)
    });
    let mut grads = ParamGradients::zeros(cloud.len(), cloud.feature_dim());
    for (si, pg) in per_splat.into_iter().enumerate() {
        let gi = prep.splats[si].proj.gaussian_index;
        grads.positions[gi] = pg.position;
        grads.rotations[gi] = pg.rotation;
        grads.log_scales[gi] = pg.log_scale;
        grads.features[gi * cloud.feature_dim()..(gi + 1) * cloud.feature_dim()]
            .copy_from_slice(&pg.features);
        grads.opacity_logits[gi] = pg.opacity_logit;
        grads.mean2d[gi] = splat_grads[si].mean2d;
        grads.visible[gi] = true;
    }
    grads
}
