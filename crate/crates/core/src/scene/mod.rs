//! Gaussians, cameras, datasets and their on-disk formats.

mod camera;
pub mod container;
mod gaussian;
mod image;

use std::path::Path;

pub use camera::CameraView;
pub use container::{load_checkpoint, load_scene, save_checkpoint, save_scene};
pub use gaussian::{
    canonical_quaternion, covariance_from_params, evaluate_gaussian, logit, rgb_to_sh0,
    rotation_matrix, sigmoid, GaussianCloud, GaussianPrimitive, ShDegree, COVARIANCE_EPSILON,
    SH_C0, SH_C1,
};
pub use image::{quantize, Image};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub position: [f32; 3],
    pub rgb: [u8; 3],
}

impl ScenePoint {
    pub fn position_f64(&self) -> [f64; 3] {
        self.position.map(f64::from)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SceneDataset {
    pub points: Vec<ScenePoint>,
    pub views: Vec<CameraView>,
    pub checkpoint: Option<GaussianCloud>,
}

impl SceneDataset {
    pub fn validate_for_training(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("training dataset has no views".into()));
        }
        self.views.iter().try_for_each(CameraView::validate)
    }

    /// Loads every view's ground-truth image. Relative paths resolve against `base`.
    pub fn load_images(&self, base: &Path) -> Result<Vec<Image>> {
        self.views
            .iter()
            .map(|v| {
                let p = Path::new(&v.image_path);
                let img = Image::load(&if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                })?;
                if img.dims() != (v.width as usize, v.height as usize) {
                    return Err(Error::DimensionMismatch {
                        left: img.dims(),
                        right: (v.width as usize, v.height as usize),
                    });
                }
                Ok(img)
            })
            .collect()
    }
}
