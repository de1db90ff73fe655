//! CPU differentiable splatting: projection, depth-sorted alpha compositing,
//! the photometric loss and analytic gradients for every Gaussian parameter.

mod project;
mod raster;
pub mod ssim;

use serde::{Deserialize, Serialize};

pub use project::{project_gaussian, ProjectedGaussian};

use crate::error::{Error, Result};
use crate::scene::{CameraView, GaussianCloud, Image};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub background: [f64; 3],
    pub alpha_max: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
    /// Screen-space covariance dilation in px².
    pub dilation: f64,
    pub near: f64,
    /// Support radius in standard deviations, used for culling and pixel boxes.
    pub extent_sigma: f64,
    /// Restrict each splat to its support box. When false every visible splat
    /// is evaluated at every pixel, which makes the image smooth in all parameters.
    pub pixel_cutoff: bool,
    /// Use the rayon pool when the `parallel` feature is enabled.
    pub parallel: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            background: [0.0; 3],
            alpha_max: 0.99,
            transmittance_min: 1e-4,
            dilation: 0.3,
            near: 0.01,
            extent_sigma: 3.0,
            pixel_cutoff: true,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: Image,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
    pub contributors: Vec<u32>,
}

/// Gradients with the layout of a [`GaussianCloud`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub features: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// Screen-space mean gradient (pixels), used by densification.
    pub mean2d: Vec<[f64; 2]>,
    /// Whether the Gaussian survived culling for this view.
    pub visible: Vec<bool>,
}

impl ParamGradients {
    pub fn zeros(n: usize, feature_dim: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            features: vec![0.0; n * feature_dim],
            opacity_logits: vec![0.0; n],
            mean2d: vec![[0.0; 2]; n],
            visible: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&mut self, n: usize, feature_dim: usize) {
        self.positions.truncate(n);
        self.rotations.truncate(n);
        self.log_scales.truncate(n);
        self.features.truncate(n * feature_dim);
        self.opacity_logits.truncate(n);
        self.mean2d.truncate(n);
        self.visible.truncate(n);
    }

    /// Every parameter gradient, flattened in cloud order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend(self.positions.iter().flatten());
        v.extend(self.rotations.iter().flatten());
        v.extend(self.log_scales.iter().flatten());
        v.extend(&self.features);
        v.extend(&self.opacity_logits);
        v
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }
}

pub fn render(cloud: &GaussianCloud, camera: &CameraView, cfg: &RenderConfig) -> RenderOutput {
    let prep = raster::prepare(cloud, camera, cfg);
    raster::forward(&prep, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the `1 - SSIM` term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: 0.2 }
    }
}

/// `mean|rendered - gt| + lambda * (1 - SSIM(rendered, gt))`.
pub fn loss(rendered: &Image, gt: &Image, lambda: f64) -> Result<f64> {
    check_dims(rendered, gt)?;
    let l1 = l1_mean(rendered, gt);
    if lambda == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + lambda * (1.0 - ssim::ssim(rendered, gt)?))
}

/// Loss and its gradient with respect to the rendered image.
pub fn loss_and_grad(
    rendered: &Image,
    gt: &Image,
    lambda: f64,
    parallel: bool,
) -> Result<(f64, Image)> {
    check_dims(rendered, gt)?;
    let n = rendered.data.len() as f64;
    let mut grad = Image::new(rendered.width, rendered.height);
    for ((g, r), t) in grad.data.iter_mut().zip(&rendered.data).zip(&gt.data) {
        let d = r - t;
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    let mut value = l1_mean(rendered, gt);
    if lambda != 0.0 {
        let (s, ds) = ssim::ssim_with_grad(rendered, gt, parallel)?;
        value += lambda * (1.0 - s);
        for (g, d) in grad.data.iter_mut().zip(&ds.data) {
            *g -= lambda * d;
        }
    }
    Ok((value, grad))
}

fn l1_mean(a: &Image, b: &Image) -> f64 {
    if a.data.is_empty() {
        return 0.0;
    }
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data.len() as f64
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            left: a.dims(),
            right: b.dims(),
        });
    }
    Ok(())
}

/// Result of one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub grads: ParamGradients,
    pub output: RenderOutput,
}

/// Renders `cloud`, evaluates the loss against `gt` and returns analytic
/// gradients for every parameter. Culled Gaussians get zero rows.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &CameraView,
    gt: &Image,
    loss_cfg: &LossConfig,
    cfg: &RenderConfig,
) -> Result<Backward> {
    let prep = raster::prepare(cloud, camera, cfg);
    let output = raster::forward(&prep, cfg);
    let (loss, d_color) = loss_and_grad(&output.color, gt, loss_cfg.lambda, cfg.parallel)?;
    let grads = raster::backward(&prep, cfg, &d_color, cloud, camera);
    Ok(Backward {
        loss,
        grads,
        output,
    })
}

/// Loss only; the forward half of [`render_backward`].
pub fn render_loss(
    cloud: &GaussianCloud,
    camera: &CameraView,
    gt: &Image,
    loss_cfg: &LossConfig,
    cfg: &RenderConfig,
) -> Result<f64> {
    loss(&render(cloud, camera, cfg).color, gt, loss_cfg.lambda)
}

#[cfg(test)]
mod tests;
