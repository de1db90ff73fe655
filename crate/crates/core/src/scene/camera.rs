use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::gaussian::rotation_matrix;
use crate::error::{Error, Result};

/// Pinhole camera with a rigid world-to-camera pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub view_id: u64,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rotation, unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    /// World-to-camera translation.
    pub translation: [f64; 3],
    pub image_path: String,
}

impl CameraView {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "view {}: focal lengths must be positive",
                self.view_id
            )));
        }
        if !(self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64)
        {
            return Err(Error::InvalidCamera(format!(
                "view {}: principal point outside the image",
                self.view_id
            )));
        }
        Ok(())
    }

    pub fn world_to_camera_rotation(&self) -> Matrix3<f64> {
        rotation_matrix(self.rotation)
    }

    pub fn to_camera(&self, p: [f64; 3]) -> Vector3<f64> {
        self.world_to_camera_rotation() * Vector3::from(p) + Vector3::from(self.translation)
    }

    /// Camera center in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.world_to_camera_rotation().transpose() * Vector3::from(self.translation));
        [c.x, c.y, c.z]
    }

    /// Builds a camera at `eye` looking at `target`. Camera axes follow the
    /// usual vision convention: +z forward, +x right, +y down in the image.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        view_id: u64,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let eye_v = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye_v).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        // Rows of the world-to-camera rotation are the camera axes in world space.
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let q = nalgebra::UnitQuaternion::from_matrix(&r);
        let rotation = super::gaussian::canonical_quaternion([q.w, q.i, q.j, q.k]);
        let t = -(rotation_matrix(rotation) * eye_v);
        Self {
            view_id,
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            rotation,
            translation: [t.x, t.y, t.z],
            image_path: String::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn look_at_places_target_on_axis() {
        let cam = CameraView::look_at(
            0,
            [1.0, 4.0, -2.0],
            [0.5, 0.0, 0.3],
            [0.0, 1.0, 0.0],
            50.0,
            50.0,
            64,
            64,
        );
        let c = cam.center();
        for i in 0..3 {
            assert_abs_diff_eq!(c[i], [1.0, 4.0, -2.0][i], epsilon = 1e-9);
        }
        let t = cam.to_camera([0.5, 0.0, 0.3]);
        assert_abs_diff_eq!(t.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(t.y, 0.0, epsilon = 1e-9);
        assert!(t.z > 0.0);
        cam.validate().unwrap();
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut cam = CameraView::look_at(
            0,
            [0.0, 0.0, -5.0],
            [0.0; 3],
            [0.0, 1.0, 0.0],
            50.0,
            50.0,
            64,
            64,
        );
        cam.cx = 64.0;
        assert!(cam.validate().is_err());
        cam.cx = 32.0;
        cam.fy = 0.0;
        assert!(cam.validate().is_err());
    }
}
