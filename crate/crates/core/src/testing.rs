//! Seeded scene builders shared by unit tests, integration tests and benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scene::{
    canonical_quaternion, logit, rgb_to_sh0, CameraView, GaussianCloud, GaussianPrimitive, ShDegree,
};

/// Identity-pose pinhole camera looking down +z.
pub fn axis_camera(width: u32, height: u32, focal: f64) -> CameraView {
    CameraView {
        view_id: 0,
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        rotation: [1.0, 0.0, 0.0, 0.0],
        translation: [0.0; 3],
        image_path: String::new(),
    }
}

/// `n` Gaussians in front of [`axis_camera`] with moderate opacity, colors
/// strictly inside (0, 1) and footprints inside the image.
pub fn random_cloud(seed: u64, n: usize, camera: &CameraView, degree: ShDegree) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(degree);
    let half_w = 0.3 * camera.width as f64 / camera.fx;
    let half_h = 0.3 * camera.height as f64 / camera.fy;
    for id in 0..n as u64 {
        let z = rng.random_range(3.0..6.0);
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let mut features = vec![0.0; degree.feature_dim()];
        for f in features.iter_mut().take(3) {
            *f = rgb_to_sh0(rng.random_range(0.15..0.85));
        }
        for f in features.iter_mut().skip(3) {
            *f = rng.random_range(-0.1..0.1);
        }
        cloud.push(&GaussianPrimitive {
            id: id * 3 + 1,
            position: [
                rng.random_range(-half_w..half_w) * z,
                rng.random_range(-half_h..half_h) * z,
                z,
            ],
            rotation: canonical_quaternion(q),
            log_scale: std::array::from_fn(|_| rng.random_range(0.1f64..0.35).ln()),
            features,
            opacity_logit: logit(rng.random_range(0.1..0.6)),
        });
    }
    cloud
}
