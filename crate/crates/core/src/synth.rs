//! Seeded synthetic aerial-style scenes with ground-truth renders.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{render, RenderConfig};
use crate::scene::{
    canonical_quaternion, logit, quantize, rgb_to_sh0, save_checkpoint, save_scene, CameraView,
    GaussianCloud, GaussianPrimitive, Image, SceneDataset, ScenePoint, ShDegree, SH_C0,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub seed: u64,
    pub n_gaussians: usize,
    pub n_cameras: usize,
    /// Ground-plane side length; the box height is a fifth of it.
    pub extent: f64,
    pub image_size: u32,
    /// Focal length in pixels, as a multiple of `image_size`.
    pub focal_factor: f64,
    /// Standard deviation of the point noise, as a fraction of `extent`.
    pub point_noise: f64,
    /// Fraction of ground-truth centers kept as initialization points.
    pub point_fraction: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 200,
            n_cameras: 24,
            extent: 5.0,
            image_size: 96,
            focal_factor: 2.2,
            point_noise: 0.02,
            point_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub dataset: SceneDataset,
    pub ground_truth: GaussianCloud,
    pub images: Vec<Image>,
}

pub const SCENE_FILE: &str = "scene.dogs";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.gspl";

impl SyntheticScene {
    /// Writes the scene container, the ground-truth images and the
    /// ground-truth model into `dir`; returns the container path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        for (view, img) in self.dataset.views.iter().zip(&self.images) {
            let p = dir.join(&view.image_path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            img.save(&p)?;
        }
        save_checkpoint(&self.ground_truth, &dir.join(GROUND_TRUTH_FILE))?;
        let path = dir.join(SCENE_FILE);
        save_scene(&self.dataset, &path)?;
        Ok(path)
    }
}

/// Ground-truth Gaussians in a flat `extent x extent/5 x extent` box (y up),
/// cameras on a ring above the scene looking down and slightly inward, and
/// initialization points drawn from perturbed ground-truth centers.
pub fn generate_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    if spec.n_gaussians == 0 || spec.n_cameras == 0 {
        return Err(Error::Config(
            "scene needs at least one Gaussian and one camera".into(),
        ));
    }
    if spec.image_size == 0 || !(spec.extent > 0.0) || !(spec.focal_factor > 0.0) {
        return Err(Error::Config(
            "image size, extent and focal factor must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let half = 0.5 * spec.extent;
    let height = 0.2 * spec.extent;

    let mut gt = GaussianCloud::new(ShDegree::Zero);
    for id in 0..spec.n_gaussians as u64 {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        gt.push(&GaussianPrimitive {
            id,
            position: [
                rng.random_range(-half..half),
                rng.random_range(0.0..height),
                rng.random_range(-half..half),
            ],
            rotation: canonical_quaternion(q),
            log_scale: std::array::from_fn(|_| rng.random_range(0.1f64..0.35).ln()),
            features: (0..3)
                .map(|_| rgb_to_sh0(rng.random_range(0.05..0.95)))
                .collect(),
            opacity_logit: logit(rng.random_range(0.6..0.95)),
        });
    }

    let size = spec.image_size;
    let focal = f64::from(size) * spec.focal_factor;
    let ring = 0.3 * spec.extent;
    let target_ring = 0.24 * spec.extent;
    let mut views = Vec::with_capacity(spec.n_cameras);
    for v in 0..spec.n_cameras {
        let a = std::f64::consts::TAU * v as f64 / spec.n_cameras as f64;
        let h = 0.6 * spec.extent * rng.random_range(0.93..1.07);
        let eye = [ring * a.cos(), h, ring * a.sin()];
        let target = [target_ring * a.cos(), 0.5 * height, target_ring * a.sin()];
        let mut cam = CameraView::look_at(
            v as u64,
            eye,
            target,
            [a.cos(), 0.0, a.sin()],
            focal,
            focal,
            size,
            size,
        );
        cam.image_path = format!("images/view_{v:03}.png");
        views.push(cam);
    }
    let cfg = RenderConfig::default();
    let images: Vec<Image> = views.iter().map(|c| render(&gt, c, &cfg).color).collect();

    let keep = ((spec.n_gaussians as f64 * spec.point_fraction).round() as usize)
        .clamp(1, spec.n_gaussians);
    let mut chosen = sample(&mut rng, spec.n_gaussians, keep).into_vec();
    chosen.sort_unstable();
    let noise = Normal::new(0.0, spec.point_noise * spec.extent)
        .map_err(|e| Error::Config(e.to_string()))?;
    let points = chosen
        .into_iter()
        .map(|i| {
            let g = gt.get(i);
            let rgb = std::array::from_fn(|c| quantize(SH_C0 * g.features[c] + 0.5));
            ScenePoint {
                position: std::array::from_fn(|a| (g.position[a] + noise.sample(&mut rng)) as f32),
                rgb,
            }
        })
        .collect();

    Ok(SyntheticScene {
        dataset: SceneDataset {
            points,
            views,
            checkpoint: None,
        },
        ground_truth: gt,
        images,
    })
}
