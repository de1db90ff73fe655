//! Novel-view metrics on held-out views.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render, ssim, RenderConfig};
use crate::scene::{CameraView, GaussianCloud, Image};

pub const PSNR_CAP: f64 = 99.0;

/// Every 8th view (indices 7, 15, ...) is held out.
pub const HOLDOUT_STRIDE: usize = 8;

pub fn is_holdout(index: usize) -> bool {
    index % HOLDOUT_STRIDE == HOLDOUT_STRIDE - 1
}

pub fn holdout_views(n: usize) -> Vec<usize> {
    (0..n).filter(|&i| is_holdout(i)).collect()
}

pub fn training_views(n: usize) -> Vec<usize> {
    (0..n).filter(|&i| !is_holdout(i)).collect()
}

/// `10 log10(1 / MSE)` on [0, 1] images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    if a.data.is_empty() {
        return Ok(PSNR_CAP);
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view_id: u64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub train_seconds: f64,
    pub gaussians: usize,
    /// Approximate peak resident set size.
    pub peak_rss_kb: Option<u64>,
    pub config: serde_json::Value,
}

/// Renders every held-out view and scores it against its ground truth.
/// SSIM takes the rendered image first and the ground truth second.
pub fn evaluate(
    model: &GaussianCloud,
    cameras: &[CameraView],
    images: &[Image],
    cfg: &RenderConfig,
) -> Result<MetricsReport> {
    let holdout = holdout_views(cameras.len());
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    let mut views = Vec::with_capacity(holdout.len());
    for v in holdout {
        let out = render(model, &cameras[v], cfg).color;
        views.push(ViewMetrics {
            view_id: cameras[v].view_id,
            psnr: psnr(&out, &images[v])?,
            ssim: ssim::ssim(&out, &images[v])?,
        });
    }
    let n = views.len() as f64;
    Ok(MetricsReport {
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
        train_seconds: 0.0,
        gaussians: model.len(),
        peak_rss_kb: peak_rss_kb(),
        config: serde_json::Value::Null,
    })
}

/// Peak resident set size from `/proc/self/status`, where available.
pub fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn psnr_examples() {
        let a = Image::filled(8, 8, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let b = Image::filled(8, 8, [0.6; 3]);
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);
        assert!(psnr(&a, &Image::new(8, 9)).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let a = Image {
            width: 10,
            height: 7,
            data: (0..210).map(|_| rng.random()).collect(),
        };
        let b = Image {
            width: 10,
            height: 7,
            data: (0..210).map(|_| rng.random()).collect(),
        };
        let diffs: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
        let mut sq = 0.0;
        for d in &diffs {
            sq += d * d;
        }
        let expected = -10.0 * (sq / diffs.len() as f64).log10();
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), expected, epsilon = 1e-12);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn holdout_rule() {
        assert_eq!(holdout_views(24), vec![7, 15, 23]);
        assert_eq!(training_views(9), vec![0, 1, 2, 3, 4, 5, 6, 8]);
        assert!(holdout_views(7).is_empty());
    }

    #[test]
    fn empty_holdout_is_an_error() {
        let cam = crate::testing::axis_camera(8, 8, 10.0);
        let r = evaluate(
            &GaussianCloud::new(crate::scene::ShDegree::Zero),
            &[cam],
            &[Image::new(8, 8)],
            &RenderConfig::default(),
        );
        assert!(matches!(r, Err(Error::EmptyHoldout)));
    }
}
