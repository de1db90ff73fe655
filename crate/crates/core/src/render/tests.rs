use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};

use super::*;
use crate::scene::{logit, rgb_to_sh0, GaussianPrimitive, ShDegree};
use crate::testing::{axis_camera, random_cloud};

fn single(position: [f64; 3], opacity: f64, color: [f64; 3]) -> GaussianCloud {
    let mut c = GaussianCloud::new(ShDegree::Zero);
    c.push(&GaussianPrimitive {
        id: 1,
        position,
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [0.2f64.ln(); 3],
        features: color.map(rgb_to_sh0).to_vec(),
        opacity_logit: logit(opacity),
    });
    c
}

fn smooth_cfg() -> RenderConfig {
    RenderConfig {
        pixel_cutoff: false,
        background: [0.1, 0.2, 0.3],
        ..Default::default()
    }
}

/// Ground truth offset from the current render so no pixel sits on the L1 kink.
fn offset_gt(rendered: &Image, seed: u64) -> Image {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut gt = rendered.clone();
    for v in &mut gt.data {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        *v += sign * (0.02 + 0.2 * rng.random::<f64>());
    }
    gt
}

#[test]
fn empty_cloud_renders_background() {
    let cam = axis_camera(8, 6, 10.0);
    let cfg = RenderConfig {
        background: [0.2, 0.4, 0.6],
        ..Default::default()
    };
    let out = render(&GaussianCloud::new(ShDegree::Zero), &cam, &cfg);
    for y in 0..6 {
        for x in 0..8 {
            assert_eq!(out.color.pixel(x, y), [0.2, 0.4, 0.6]);
        }
    }
    assert!(out.transmittance.iter().all(|&t| t == 1.0));
}

#[test]
fn single_gaussian_at_pixel_center() {
    let cam = axis_camera(64, 64, 100.0);
    let color = [0.9, 0.5, 0.25];
    let out = render(
        &single([0.0, 0.0, 5.0], 0.8, color),
        &cam,
        &RenderConfig::default(),
    );
    let px = out.color.pixel(32, 32);
    for ch in 0..3 {
        assert_abs_diff_eq!(px[ch], 0.8 * color[ch], epsilon = 1e-12);
    }
}

/// Straight-line Eq.-2 style compositor: evaluates every Gaussian at the pixel,
/// orders by depth, and forms Σ c_i α_i Π_{j<i} (1 - α_j) + bg Π (1 - α_j).
fn brute_force_pixel(
    cloud: &GaussianCloud,
    cam: &CameraView,
    cfg: &RenderConfig,
    x: f64,
    y: f64,
) -> [f64; 3] {
    let mut terms = Vec::new();
    for g in cloud.iter() {
        let Some(p) = project_gaussian(&g, cam, cfg) else {
            continue;
        };
        let [a, b, c] = p.cov2d;
        let det = a * c - b * b;
        let (dx, dy) = (x - p.mean2d[0], y - p.mean2d[1]);
        let m = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        let alpha = (g.opacity() * (-0.5 * m).exp()).min(cfg.alpha_max);
        let col: [f64; 3] =
            std::array::from_fn(|ch| (g.features[ch] * crate::scene::SH_C0 + 0.5).clamp(0.0, 1.0));
        terms.push((p.depth, g.id, alpha, col));
    }
    terms.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)));
    let mut out = [0.0; 3];
    for i in 0..terms.len() {
        let mut t = 1.0;
        for term in &terms[..i] {
            t *= 1.0 - term.2;
        }
        for ch in 0..3 {
            out[ch] += terms[i].3[ch] * terms[i].2 * t;
        }
    }
    let t_all: f64 = terms.iter().map(|t| 1.0 - t.2).product();
    for ch in 0..3 {
        out[ch] += cfg.background[ch] * t_all;
    }
    out
}

#[test]
fn two_overlapping_gaussians_match_brute_force() {
    let cam = axis_camera(24, 24, 30.0);
    let mut cloud = single([0.0, 0.0, 4.0], 0.7, [1.0, 0.2, 0.1]);
    cloud.push(&GaussianPrimitive {
        id: 2,
        position: [0.2, -0.1, 6.0],
        rotation: [0.9, 0.1, 0.3, -0.2],
        log_scale: [0.5f64.ln(), 0.3f64.ln(), 0.4f64.ln()],
        features: [0.1, 0.8, 0.6].map(rgb_to_sh0).to_vec(),
        opacity_logit: logit(0.6),
    });
    cloud.normalize_rotations();
    let cfg = RenderConfig {
        pixel_cutoff: false,
        background: [0.3, 0.3, 0.3],
        ..Default::default()
    };
    let out = render(&cloud, &cam, &cfg);
    for y in 0..24 {
        for x in 0..24 {
            let expected = brute_force_pixel(&cloud, &cam, &cfg, x as f64, y as f64);
            let got = out.color.pixel(x, y);
            for ch in 0..3 {
                assert_abs_diff_eq!(got[ch], expected[ch], epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn compositing_conserves_weight() {
    let cam = axis_camera(20, 20, 25.0);
    for seed in 0..5 {
        let cloud = random_cloud(seed, 12, &cam, ShDegree::Zero);
        let cfg = RenderConfig::default();
        let prep = raster::prepare(&cloud, &cam, &cfg);
        for y in 0..20 {
            for x in 0..20 {
                let mut sum = 0.0;
                let mut prev_t = 1.0;
                let t = raster::composite_pixel(&prep, &cfg, x, y, |k, _| {
                    assert!(k.transmittance <= prev_t);
                    prev_t = k.transmittance;
                    sum += k.alpha * k.transmittance;
                });
                assert!((0.0..=1.0).contains(&t));
                assert_abs_diff_eq!(sum + t, 1.0, epsilon = 1e-12);
            }
        }
    }
}

#[test]
fn renders_are_deterministic_and_thread_independent() {
    let cam = axis_camera(32, 24, 30.0);
    let cloud = random_cloud(3, 30, &cam, ShDegree::One);
    let par = RenderConfig::default();
    let seq = RenderConfig {
        parallel: false,
        ..par.clone()
    };
    let a = render(&cloud, &cam, &par);
    assert_eq!(a, render(&cloud, &cam, &par));
    assert_eq!(a, render(&cloud, &cam, &seq));
    let gt = offset_gt(&a.color, 1);
    let ga = render_backward(&cloud, &cam, &gt, &LossConfig::default(), &par).unwrap();
    let gb = render_backward(&cloud, &cam, &gt, &LossConfig::default(), &seq).unwrap();
    assert_eq!(ga.grads, gb.grads);
    assert_eq!(ga.loss.to_bits(), gb.loss.to_bits());
}

#[test]
fn depth_ties_break_by_id() {
    let cam = axis_camera(16, 16, 20.0);
    let mut cloud = single([0.0, 0.0, 4.0], 0.5, [1.0, 0.0, 0.0]);
    let mut g = cloud.get(0);
    g.id = 9;
    g.features = [0.0, 0.0, 1.0].map(rgb_to_sh0).to_vec();
    cloud.push(&g);
    // Lower ID composites first: red in front.
    let px = render(&cloud, &cam, &RenderConfig::default())
        .color
        .pixel(8, 8);
    assert!(px[0] > px[2]);
}

#[test]
fn loss_of_identical_images_is_zero() {
    let cam = axis_camera(16, 16, 20.0);
    let img = render(
        &random_cloud(1, 5, &cam, ShDegree::Zero),
        &cam,
        &RenderConfig::default(),
    )
    .color;
    assert_abs_diff_eq!(loss(&img, &img, 0.2).unwrap(), 0.0, epsilon = 1e-12);
}

#[test]
fn pure_l1_loss() {
    let a = Image::filled(7, 5, [0.25; 3]);
    let b = Image::filled(7, 5, [0.75; 3]);
    assert_abs_diff_eq!(loss(&a, &b, 0.0).unwrap(), 0.5, epsilon = 1e-15);
}

#[test]
fn loss_dimension_mismatch() {
    assert!(matches!(
        loss(&Image::new(3, 3), &Image::new(3, 4), 0.2),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn loss_matches_independent_ssim() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let mut a = Image::new(16, 16);
    let mut b = Image::new(16, 16);
    a.data.iter_mut().for_each(|v| *v = rng.random());
    b.data.iter_mut().for_each(|v| *v = rng.random());
    let l1: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data.len() as f64;
    let expected = l1 + 0.2 * (1.0 - ssim::ssim(&a, &b).unwrap());
    assert_abs_diff_eq!(loss(&a, &b, 0.2).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn perfect_render_has_zero_gradients() {
    let cam = axis_camera(16, 16, 20.0);
    let cloud = random_cloud(2, 8, &cam, ShDegree::Zero);
    let gt = render(&cloud, &cam, &RenderConfig::default()).color;
    let b = render_backward(
        &cloud,
        &cam,
        &gt,
        &LossConfig::default(),
        &RenderConfig::default(),
    )
    .unwrap();
    assert_abs_diff_eq!(b.loss, 0.0, epsilon = 1e-12);
    for g in b.grads.flat() {
        assert_abs_diff_eq!(g, 0.0, epsilon = 1e-12);
    }
}

#[test]
fn culled_gaussian_has_zero_gradient_row() {
    let cam = axis_camera(16, 16, 20.0);
    let mut cloud = random_cloud(5, 4, &cam, ShDegree::Zero);
    let mut far = cloud.get(0);
    far.id = 1000;
    far.position = [100.0, 0.0, 4.0];
    cloud.push(&far);
    let mut behind = cloud.get(1);
    behind.id = 1001;
    behind.position = [0.0, 0.0, -3.0];
    cloud.push(&behind);
    let gt = Image::filled(16, 16, [0.5; 3]);
    let b = render_backward(
        &cloud,
        &cam,
        &gt,
        &LossConfig::default(),
        &RenderConfig::default(),
    )
    .unwrap();
    for i in [4, 5] {
        assert!(!b.grads.visible[i]);
        assert_eq!(b.grads.positions[i], [0.0; 3]);
        assert_eq!(b.grads.rotations[i], [0.0; 4]);
        assert_eq!(b.grads.log_scales[i], [0.0; 3]);
        assert_eq!(b.grads.opacity_logits[i], 0.0);
        assert!(b.grads.features[i * 3..i * 3 + 3].iter().all(|&v| v == 0.0));
    }
    assert!(b.grads.visible[..4].iter().any(|&v| v));
}

/// Central differences over every scalar parameter of `cloud`.
fn finite_difference(
    cloud: &GaussianCloud,
    cam: &CameraView,
    gt: &Image,
    cfg: &RenderConfig,
    h: f64,
) -> Vec<f64> {
    let lc = LossConfig::default();
    let eval = |c: &GaussianCloud| render_loss(c, cam, gt, &lc, cfg).unwrap();
    let n = cloud.len();
    let k = cloud.feature_dim();
    let mut out = Vec::new();
    let mut probe = |f: &dyn Fn(&mut GaussianCloud, f64)| {
        let mut p = cloud.clone();
        let mut m = cloud.clone();
        f(&mut p, h);
        f(&mut m, -h);
        out.push((eval(&p) - eval(&m)) / (2.0 * h));
    };
    for i in 0..n {
        for a in 0..3 {
            probe(&|c, d| c.positions[i][a] += d);
        }
    }
    for i in 0..n {
        for a in 0..4 {
            probe(&|c, d| c.rotations[i][a] += d);
        }
    }
    for i in 0..n {
        for a in 0..3 {
            probe(&|c, d| c.log_scales[i][a] += d);
        }
    }
    for j in 0..n * k {
        probe(&|c, d| c.features[j] += d);
    }
    for i in 0..n {
        probe(&|c, d| c.opacity_logits[i] += d);
    }
    out
}

fn assert_grads_match(analytic: &[f64], numeric: &[f64]) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let rel = err / a.abs().max(n.abs());
        assert!(
            err < 1e-6 || rel < 1e-3,
            "parameter {i}: analytic {a:e}, numeric {n:e}, rel {rel:e}"
        );
    }
}

#[test]
fn single_gaussian_gradient_matches_finite_differences() {
    let cam = axis_camera(16, 16, 20.0);
    let cfg = smooth_cfg();
    for seed in 0..4 {
        let cloud = random_cloud(seed, 1, &cam, ShDegree::Zero);
        let gt = offset_gt(&render(&cloud, &cam, &cfg).color, seed);
        let b = render_backward(&cloud, &cam, &gt, &LossConfig::default(), &cfg).unwrap();
        assert_grads_match(
            &b.grads.flat(),
            &finite_difference(&cloud, &cam, &gt, &cfg, 1e-4),
        );
    }
}

#[test]
fn degree_one_gradients_match_finite_differences() {
    let mut cam = axis_camera(16, 16, 20.0);
    cam.translation = [0.3, -0.2, 0.5];
    cam.rotation = crate::scene::canonical_quaternion([0.98, 0.05, -0.1, 0.08]);
    let cfg = smooth_cfg();
    let cloud = random_cloud(11, 3, &axis_camera(16, 16, 20.0), ShDegree::One);
    let gt = offset_gt(&render(&cloud, &cam, &cfg).color, 2);
    let b = render_backward(&cloud, &cam, &gt, &LossConfig::default(), &cfg).unwrap();
    assert_grads_match(
        &b.grads.flat(),
        &finite_difference(&cloud, &cam, &gt, &cfg, 1e-4),
    );
}

#[test]
fn clamped_alpha_blocks_opacity_gradient() {
    let cam = axis_camera(16, 16, 20.0);
    // A centered, nearly opaque Gaussian saturates at the clamp near its mean.
    let cloud = single([0.0, 0.0, 4.0], 0.999, [0.5, 0.5, 0.5]);
    let gt = Image::filled(16, 16, [0.0; 3]);
    let cfg = smooth_cfg();
    let b = render_backward(&cloud, &cam, &gt, &LossConfig { lambda: 0.0 }, &cfg).unwrap();
    assert!(b.grads.all_finite());
}
