use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constant real spherical-harmonic basis value for degree 0.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;
/// Degree-1 real spherical-harmonic basis magnitude.
pub const SH_C1: f64 = 0.488_602_511_902_919_9;

/// Regularizer added to a covariance before it is inverted.
pub const COVARIANCE_EPSILON: f64 = 1e-8;

/// Spherical-harmonic degree of the color features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShDegree {
    #[default]
    Zero,
    One,
}

impl ShDegree {
    /// Number of feature scalars per Gaussian (3 color channels per coefficient).
    pub const fn feature_dim(self) -> usize {
        match self {
            ShDegree::Zero => 3,
            ShDegree::One => 12,
        }
    }

    pub fn from_feature_dim(dim: usize) -> Result<Self> {
        match dim {
            3 => Ok(ShDegree::Zero),
            12 => Ok(ShDegree::One),
            other => Err(Error::InvalidCloud(format!(
                "unsupported feature dimension {other}"
            ))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Feature value whose degree-0 color evaluates to `c`.
pub fn rgb_to_sh0(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

/// One Gaussian primitive in optimization parameterization.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub id: u64,
    pub position: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub features: Vec<f64>,
    pub opacity_logit: f64,
}

impl GaussianPrimitive {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_from_params(self.rotation, self.log_scale)
    }
}

/// Structure-of-arrays Gaussian storage, sorted by ascending ID.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub ids: Vec<u64>,
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    /// Row-major `len() x feature_dim` matrix. Coefficient-major inside a row:
    /// `features[i * dim + coeff * 3 + channel]`.
    pub features: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    feature_dim: usize,
}

impl GaussianCloud {
    pub fn new(degree: ShDegree) -> Self {
        Self::with_feature_dim(degree.feature_dim())
    }

    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            features: Vec::new(),
            opacity_logits: Vec::new(),
            feature_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn sh_degree(&self) -> ShDegree {
        ShDegree::from_feature_dim(self.feature_dim).unwrap_or_default()
    }

    pub fn features_of(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn features_of_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.feature_dim;
        &mut self.features[i * d..(i + 1) * d]
    }

    /// Appends a primitive. Callers are responsible for keeping IDs sorted,
    /// or must call [`GaussianCloud::sort_by_id`] afterwards.
    pub fn push(&mut self, g: &GaussianPrimitive) {
        assert_eq!(
            g.features.len(),
            self.feature_dim,
            "feature dimension mismatch"
        );
        self.ids.push(g.id);
        self.positions.push(g.position);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.features.extend_from_slice(&g.features);
        self.opacity_logits.push(g.opacity_logit);
    }

    pub fn get(&self, i: usize) -> GaussianPrimitive {
        GaussianPrimitive {
            id: self.ids[i],
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            features: self.features_of(i).to_vec(),
            opacity_logit: self.opacity_logits[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = GaussianPrimitive> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.ids.binary_search(&id).ok()
    }

    /// New cloud holding the entries at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::with_feature_dim(self.feature_dim);
        for &i in indices {
            out.ids.push(self.ids[i]);
            out.positions.push(self.positions[i]);
            out.rotations.push(self.rotations[i]);
            out.log_scales.push(self.log_scales[i]);
            out.features.extend_from_slice(self.features_of(i));
            out.opacity_logits.push(self.opacity_logits[i]);
        }
        out
    }

    /// Keeps only the entries for which `keep` returns true.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let indices: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        *self = self.select(&indices);
    }

    pub fn sort_by_id(&mut self) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by_key(|&i| self.ids[i]);
        *self = self.select(&order);
    }

    /// Appends `other`'s rows as they are, without sorting.
    pub fn append(&mut self, other: &Self) {
        debug_assert_eq!(self.feature_dim, other.feature_dim);
        self.ids.extend_from_slice(&other.ids);
        self.positions.extend_from_slice(&other.positions);
        self.rotations.extend_from_slice(&other.rotations);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.features.extend_from_slice(&other.features);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
    }

    /// Merges two ID-disjoint clouds into one sorted cloud.
    pub fn merged(&self, other: &Self) -> Result<Self> {
        if self.feature_dim != other.feature_dim {
            return Err(Error::InvalidCloud("feature dimension mismatch".into()));
        }
        let mut out = self.clone();
        for g in other.iter() {
            out.push(&g);
        }
        out.sort_by_id();
        out.validate()?;
        Ok(out)
    }

    /// Renormalizes every quaternion and flips it into the `w >= 0` hemisphere.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = canonical_quaternion(*q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ids.len();
        let lens = [
            self.positions.len(),
            self.rotations.len(),
            self.log_scales.len(),
            self.opacity_logits.len(),
        ];
        if lens.iter().any(|&l| l != n) || self.features.len() != n * self.feature_dim {
            return Err(Error::InvalidCloud("array lengths differ".into()));
        }
        if let Some(i) = self.ids.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidCloud(format!(
                "IDs not strictly ascending at index {}",
                i + 1
            )));
        }
        Ok(())
    }
}

/// Normalizes a quaternion and enforces `w >= 0`.
pub fn canonical_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let s = if q[0] < 0.0 { -1.0 / n } else { 1.0 / n };
    q.map(|v| v * s)
}

/// Rotation matrix of a quaternion (w, x, y, z). The input is normalized first.
pub fn rotation_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
pub fn covariance_from_params(rotation: [f64; 4], log_scale: [f64; 3]) -> Matrix3<f64> {
    let r = rotation_matrix(rotation);
    let d = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|s| (2.0 * s).exp())));
    let sigma = r * d * r.transpose();
    // Exact symmetry.
    (sigma + sigma.transpose()) * 0.5
}

/// Unnormalized Gaussian density `exp(-½ (p-u)ᵀ Σ⁻¹ (p-u))`.
pub fn evaluate_gaussian(center: [f64; 3], covariance: &Matrix3<f64>, p: [f64; 3]) -> Result<f64> {
    let reg = covariance + Matrix3::identity() * COVARIANCE_EPSILON;
    let inv = reg.try_inverse().ok_or(Error::SingularCovariance)?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    let d = Vector3::from(p) - Vector3::from(center);
    let m = d.dot(&(inv * d));
    Ok((-0.5 * m).exp())
}
