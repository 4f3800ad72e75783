//! Geometric model representations, minimal solvers and residual functions.
//!
//! All coordinates are expected in the centered, max-dimension normalized
//! frame produced by [`normalize_coords`]. Residual thresholds throughout the
//! crate are stated in this frame.

mod fundamental;
mod homography;
mod vp;

pub use fundamental::{fmat_seven_point, gt_fmat_from_pose, residual_sampson_sqrt};
pub use homography::{
    gt_homography_from_plane, homography_four_point_dlt, residual_transfer, residual_transfer_sqrt,
};
pub use vp::{refine_vp_weighted, residual_vp, vp_from_lines};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Residual value returned when a model evaluation is undefined (e.g. a
/// transferred point at infinity). Large enough to never be an inlier,
/// finite so that downstream sums stay finite.
pub const RESIDUAL_SENTINEL: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Vp,
    Fundamental,
    Homography,
}

impl Task {
    /// Minimal set size for this task.
    pub fn minimal_set_size(self) -> usize {
        match self {
            Task::Vp => 2,
            Task::Fundamental => 7,
            Task::Homography => 4,
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Vp => write!(f, "vp"),
            Task::Fundamental => write!(f, "fundamental"),
            Task::Homography => write!(f, "homography"),
        }
    }
}

/// A single input datum: a line segment (VP task) or a point correspondence
/// (F/H tasks), as a 4-vector in normalized image coordinates.
///
/// VP task: `v = (midpoint x, midpoint y, length, angle)`, with the raw
/// segment endpoints retained for residual and refinement computations.
/// F/H tasks: `v = (x1, y1, x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub v: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub endpoints: Option<[f64; 4]>,
}

impl Observation {
    pub fn correspondence(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Observation {
            v: [x1, y1, x2, y2],
            endpoints: None,
        }
    }

    /// Builds a line-segment observation from its two endpoints.
    pub fn segment(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        let (dx, dy) = (x2 - x1, y2 - y1);
        Observation {
            v: [
                0.5 * (x1 + x2),
                0.5 * (y1 + y2),
                (dx * dx + dy * dy).sqrt(),
                dy.atan2(dx),
            ],
            endpoints: Some([x1, y1, x2, y2]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().all(|c| c.is_finite())
            && self
                .endpoints
                .map_or(true, |e| e.iter().all(|c| c.is_finite()))
    }

    /// First point of a correspondence, homogeneous.
    pub fn point_a(&self) -> Vector3<f64> {
        Vector3::new(self.v[0], self.v[1], 1.0)
    }

    /// Second point of a correspondence, homogeneous.
    pub fn point_b(&self) -> Vector3<f64> {
        Vector3::new(self.v[2], self.v[3], 1.0)
    }

    /// Homogeneous line through the segment endpoints (VP task).
    pub fn segment_line(&self) -> Vector3<f64> {
        let e = self.endpoints.expect("segment observation without endpoints");
        let p1 = Vector3::new(e[0], e[1], 1.0);
        let p2 = Vector3::new(e[2], e[3], 1.0);
        p1.cross(&p2)
    }

    /// Segment midpoint (VP task).
    pub fn midpoint(&self) -> Vector3<f64> {
        Vector3::new(self.v[0], self.v[1], 1.0)
    }

    /// Unit direction of the segment (VP task).
    pub fn direction(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.v[3].cos(), self.v[3].sin())
    }
}

/// Intrinsic camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub k: Matrix3<f64>,
}

impl CameraIntrinsics {
    pub fn new(k: Matrix3<f64>) -> Result<Self, GeometryError> {
        if (k[(2, 2)] - 1.0).abs() > 1e-12 {
            return Err(GeometryError::InvalidIntrinsics);
        }
        if k.try_inverse().is_none() {
            return Err(GeometryError::InvalidIntrinsics);
        }
        Ok(CameraIntrinsics { k })
    }

    pub fn from_focal(f: f64, cx: f64, cy: f64) -> Self {
        CameraIntrinsics {
            k: Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0),
        }
    }
}

/// One fitted model instance. Matrices are stored scale-normalized
/// (Frobenius norm 1, sign of largest-magnitude entry positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum ModelInstance {
    Vp(Vector3<f64>),
    Fundamental(Matrix3<f64>),
    Homography(Matrix3<f64>),
}

impl ModelInstance {
    pub fn task(&self) -> Task {
        match self {
            ModelInstance::Vp(_) => Task::Vp,
            ModelInstance::Fundamental(_) => Task::Fundamental,
            ModelInstance::Homography(_) => Task::Homography,
        }
    }

    /// Canonical representative: unit Frobenius norm, positive sign on the
    /// largest-magnitude entry. Makes serialization bit-stable.
    pub fn canonicalize(self) -> Self {
        match self {
            ModelInstance::Vp(v) => ModelInstance::Vp(canonicalize_vector(v)),
            ModelInstance::Fundamental(m) => ModelInstance::Fundamental(canonicalize_matrix(m)),
            ModelInstance::Homography(m) => ModelInstance::Homography(canonicalize_matrix(m)),
        }
    }

    /// Fitting residual between an observation and this model, in
    /// normalized units: angle cosine deficit (VP), square root of the
    /// Sampson distance (F), squared symmetric transfer error (H).
    pub fn residual(&self, x: &Observation) -> f64 {
        match self {
            ModelInstance::Vp(v) => residual_vp(x, v),
            ModelInstance::Fundamental(f) => residual_sampson_sqrt(x, f),
            ModelInstance::Homography(h) => residual_transfer(x, h),
        }
    }
}

fn canonicalize_vector(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n == 0.0 {
        return v;
    }
    let v = v / n;
    let (mut imax, mut amax) = (0, 0.0);
    for i in 0..3 {
        if v[i].abs() > amax {
            amax = v[i].abs();
            imax = i;
        }
    }
    if v[imax] < 0.0 {
        -v
    } else {
        v
    }
}

fn canonicalize_matrix(m: Matrix3<f64>) -> Matrix3<f64> {
    let n = m.norm();
    if n == 0.0 {
        return m;
    }
    let m = m / n;
    let (mut idx, mut amax) = ((0, 0), 0.0);
    for r in 0..3 {
        for c in 0..3 {
            if m[(r, c)].abs() > amax {
                amax = m[(r, c)].abs();
                idx = (r, c);
            }
        }
    }
    if m[idx] < 0.0 {
        -m
    } else {
        m
    }
}

/// Indices of the observations forming a minimal sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinimalSet {
    pub indices: Vec<usize>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite input coordinates")]
    NonFinite,
    #[error("invalid camera intrinsics")]
    InvalidIntrinsics,
    #[error("degenerate configuration")]
    Degenerate,
    #[error("translation must be nonzero")]
    ZeroTranslation,
    #[error("plane offset must be nonzero")]
    ZeroPlaneOffset,
    #[error("image dimensions must be positive")]
    InvalidImageSize,
}

/// Maps pixel coordinates into the centered max-dimension frame:
/// `x' = (x - w/2) / max(w, h)`, `y' = (y - h/2) / max(w, h)`.
pub fn normalize_coords(
    points: &[(f64, f64)],
    width: f64,
    height: f64,
) -> Result<Vec<(f64, f64)>, GeometryError> {
    if !(width > 0.0 && height > 0.0) {
        return Err(GeometryError::InvalidImageSize);
    }
    let s = width.max(height);
    points
        .iter()
        .map(|&(x, y)| {
            if !(x.is_finite() && y.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
            Ok(((x - 0.5 * width) / s, (y - 0.5 * height) / s))
        })
        .collect()
}

/// The affine transform of [`normalize_coords`] as a homogeneous 3x3 matrix.
pub fn normalization_matrix(width: f64, height: f64) -> Matrix3<f64> {
    let s = width.max(height);
    Matrix3::new(
        1.0 / s,
        0.0,
        -0.5 * width / s,
        0.0,
        1.0 / s,
        -0.5 * height / s,
        0.0,
        0.0,
        1.0,
    )
}
