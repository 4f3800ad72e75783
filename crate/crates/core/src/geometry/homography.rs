//! Four-point DLT homography solver, symmetric transfer residual and
//! analytic ground-truth construction from a plane and relative pose.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::fundamental::hartley_normalization;
use super::{CameraIntrinsics, GeometryError, ModelInstance, Observation, RESIDUAL_SENTINEL};

fn three_collinear(points: &[Vector3<f64>]) -> bool {
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            for k in (j + 1)..points.len() {
                let l = points[i].cross(&points[j]);
                let n = l.norm();
                if n < 1e-15 {
                    return true; // coincident points
                }
                if (l.dot(&points[k]) / n).abs() < 1e-12 {
                    return true;
                }
            }
        }
    }
    false
}

/// Four-point DLT: a homography from four correspondences. Returns `None`
/// when three source or target points are collinear or the result is
/// singular.
pub fn homography_four_point_dlt(obs: &[&Observation]) -> Option<ModelInstance> {
    assert_eq!(obs.len(), 4, "DLT solver needs exactly 4 correspondences");
    let pa: Vec<Vector3<f64>> = obs.iter().map(|o| o.point_a()).collect();
    let pb: Vec<Vector3<f64>> = obs.iter().map(|o| o.point_b()).collect();
    if three_collinear(&pa) || three_collinear(&pb) {
        return None;
    }
    let (ta, tb) = (hartley_normalization(&pa)?, hartley_normalization(&pb)?);
    let pa: Vec<Vector3<f64>> = pa.iter().map(|p| ta * p).collect();
    let pb: Vec<Vector3<f64>> = pb.iter().map(|p| tb * p).collect();

    // zero-padded to 9x9: nalgebra's SVD is thin, and the null-space vector
    // lives beyond the first 8 right singular vectors
    let mut a = DMatrix::zeros(9, 9);
    for (i, (p, q)) in pa.iter().zip(&pb).enumerate() {
        let (x, y) = (p[0], p[1]);
        let (u, v) = (q[0], q[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().unwrap();
    let h = v_t.row(8);
    let h_cond = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let h = tb.try_inverse()? * h_cond * ta;
    if h.determinant().abs() < 1e-12 * h.norm().powi(3) {
        return None;
    }
    Some(ModelInstance::Homography(h).canonicalize())
}

/// Symmetric transfer error (squared form):
/// `d(a, H^-1 b)^2 + d(b, H a)^2`. This is the fitting residual; the
/// inlier thresholds (tau = 1e-6 ~ 1 px at 1024 px) are calibrated to it.
/// Returns a large sentinel when a transferred point lands at infinity or
/// H is not invertible.
pub fn residual_transfer(x: &Observation, h: &Matrix3<f64>) -> f64 {
    let Some(h_inv) = h.try_inverse() else {
        return RESIDUAL_SENTINEL;
    };
    let (pa, pb) = (x.point_a(), x.point_b());
    let fwd = h * pa;
    let bwd = h_inv * pb;
    if fwd[2].abs() < 1e-12 * fwd.norm() || bwd[2].abs() < 1e-12 * bwd.norm() {
        return RESIDUAL_SENTINEL;
    }
    let d_fwd = (fwd[0] / fwd[2] - pb[0]).powi(2) + (fwd[1] / fwd[2] - pb[1]).powi(2);
    let d_bwd = (bwd[0] / bwd[2] - pa[0]).powi(2) + (bwd[1] / bwd[2] - pa[1]).powi(2);
    d_fwd + d_bwd
}

/// Square root of the symmetric transfer error; the evaluation-metric
/// variant of [`residual_transfer`] (a distance, not a squared distance).
pub fn residual_transfer_sqrt(x: &Observation, h: &Matrix3<f64>) -> f64 {
    let sq = residual_transfer(x, h);
    if sq >= RESIDUAL_SENTINEL {
        return RESIDUAL_SENTINEL;
    }
    sq.sqrt()
}

/// Ground-truth homography induced by the plane `{X : n.X + d = 0}` (first
/// camera frame) under relative pose `(R, t)`:
/// `H = K (R - d^-1 t n^T) K^-1`.
pub fn gt_homography_from_plane(
    k: &CameraIntrinsics,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
    n: &Vector3<f64>,
    d: f64,
) -> Result<ModelInstance, GeometryError> {
    if d.abs() < 1e-15 {
        return Err(GeometryError::ZeroPlaneOffset);
    }
    let k_inv = k.k.try_inverse().ok_or(GeometryError::InvalidIntrinsics)?;
    let h = k.k * (r - (t * n.transpose()) / d) * k_inv;
    if h.determinant().abs() < 1e-12 * h.norm().powi(3) {
        return Err(GeometryError::Degenerate);
    }
    Ok(ModelInstance::Homography(h).canonicalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_from_fixed_points() {
        let obs = [
            Observation::correspondence(0.0, 0.0, 0.0, 0.0),
            Observation::correspondence(1.0, 0.0, 1.0, 0.0),
            Observation::correspondence(0.0, 1.0, 0.0, 1.0),
            Observation::correspondence(1.0, 1.0, 1.0, 1.0),
        ];
        let refs: Vec<&Observation> = obs.iter().collect();
        let h = homography_four_point_dlt(&refs).unwrap();
        let ModelInstance::Homography(h) = h else { unreachable!() };
        let id = ModelInstance::Homography(Matrix3::identity()).canonicalize();
        let ModelInstance::Homography(id) = id else { unreachable!() };
        assert!((h - id).norm() < 1e-9);
    }

    #[test]
    fn unit_square_scaled_by_two() {
        let obs = [
            Observation::correspondence(0.0, 0.0, 0.0, 0.0),
            Observation::correspondence(1.0, 0.0, 2.0, 0.0),
            Observation::correspondence(0.0, 1.0, 0.0, 2.0),
            Observation::correspondence(1.0, 1.0, 2.0, 2.0),
        ];
        let refs: Vec<&Observation> = obs.iter().collect();
        let h = homography_four_point_dlt(&refs).unwrap();
        let ModelInstance::Homography(h) = h else { unreachable!() };
        let expect = ModelInstance::Homography(Matrix3::new(
            2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0,
        ))
        .canonicalize();
        let ModelInstance::Homography(e) = expect else { unreachable!() };
        assert!((h - e).norm() < 1e-9);
    }

    #[test]
    fn collinear_source_points_degenerate() {
        let obs = [
            Observation::correspondence(0.0, 0.0, 0.0, 0.0),
            Observation::correspondence(1.0, 1.0, 1.0, 0.0),
            Observation::correspondence(2.0, 2.0, 0.0, 1.0),
            Observation::correspondence(1.0, 0.0, 1.0, 1.0),
        ];
        let refs: Vec<&Observation> = obs.iter().collect();
        assert!(homography_four_point_dlt(&refs).is_none());
    }

    #[test]
    fn dlt_reproduces_noise_free_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let h_true = Matrix3::new(
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.2..0.2),
                1.0 + rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                1.0,
            );
            let obs: Vec<Observation> = (0..4)
                .map(|_| {
                    let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
                    let q = h_true * p;
                    Observation::correspondence(p[0], p[1], q[0] / q[2], q[1] / q[2])
                })
                .collect();
            let refs: Vec<&Observation> = obs.iter().collect();
            let Some(ModelInstance::Homography(h)) = homography_four_point_dlt(&refs) else {
                continue; // collinear draw, allowed
            };
            let max = obs
                .iter()
                .map(|o| residual_transfer_sqrt(o, &h))
                .fold(0.0f64, f64::max);
            assert!(max < 1e-9, "max transfer residual {max}");
        }
    }

    #[test]
    fn transfer_identity_and_offset() {
        let id = Matrix3::identity();
        let same = Observation::correspondence(0.3, 0.4, 0.3, 0.4);
        assert_relative_eq!(residual_transfer_sqrt(&same, &id), 0.0);
        let off = Observation::correspondence(0.0, 0.0, 3.0, 4.0);
        assert_relative_eq!(residual_transfer_sqrt(&off, &id), 50.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn transfer_scale_invariant() {
        let h = Matrix3::new(1.1, 0.1, 0.2, -0.1, 0.9, 0.1, 0.05, 0.0, 1.0);
        let o = Observation::correspondence(0.3, -0.2, 0.4, -0.1);
        assert_relative_eq!(
            residual_transfer_sqrt(&o, &h),
            residual_transfer_sqrt(&o, &(h * 2.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn transfer_point_at_infinity_sentinel() {
        // H maps (0,0,1) to (0,0,0): w vanishes
        let h = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0);
        let o = Observation::correspondence(0.0, 0.0, 0.0, 0.0);
        assert_eq!(residual_transfer_sqrt(&o, &h), RESIDUAL_SENTINEL);
    }

    #[test]
    fn gt_homography_identity_pose() {
        let k = CameraIntrinsics::from_focal(2.0, 0.1, -0.1);
        let h = gt_homography_from_plane(
            &k,
            &Matrix3::identity(),
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
            -5.0,
        )
        .unwrap();
        let ModelInstance::Homography(h) = h else { unreachable!() };
        let id = ModelInstance::Homography(Matrix3::identity()).canonicalize();
        let ModelInstance::Homography(id) = id else { unreachable!() };
        assert!((h - id).norm() < 1e-12);
    }

    #[test]
    fn gt_homography_on_plane_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = CameraIntrinsics::from_focal(1.2, 0.0, 0.0);
        let r = nalgebra::Rotation3::from_euler_angles(0.1, -0.05, 0.2).into_inner();
        let t = Vector3::new(0.3, -0.1, 0.2);
        let n = Vector3::new(0.1, 0.2, 1.0).normalize();
        let d = -4.0; // plane n.X + d = 0 => n.X = 4
        let h = gt_homography_from_plane(&k, &r, &t, &n, d).unwrap();
        let ModelInstance::Homography(h) = h else { unreachable!() };
        let mut max = 0.0f64;
        for _ in 0..100 {
            // point on the plane: pick x, y; solve for z
            let (x, y) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let z = (-d - n[0] * x - n[1] * y) / n[2];
            let p1 = Vector3::new(x, y, z);
            let p2 = r * p1 + t;
            let u = k.k * p1;
            let v = k.k * p2;
            let o = Observation::correspondence(u[0] / u[2], u[1] / u[2], v[0] / v[2], v[1] / v[2]);
            max = max.max(residual_transfer_sqrt(&o, &h));
        }
        assert!(max < 1e-9, "max transfer residual {max}");
    }

    #[test]
    fn gt_homography_off_plane_point_has_residual() {
        let k = CameraIntrinsics::from_focal(1.0, 0.0, 0.0);
        let r = nalgebra::Rotation3::from_euler_angles(0.05, 0.1, -0.02).into_inner();
        let t = Vector3::new(0.2, 0.1, 0.0);
        let n = Vector3::new(0.0, 0.0, 1.0);
        let d = -5.0;
        let h = gt_homography_from_plane(&k, &r, &t, &n, d).unwrap();
        let ModelInstance::Homography(h) = h else { unreachable!() };
        // point at depth 7, well off the z=5 plane
        let p1 = Vector3::new(0.5, 0.3, 7.0);
        let p2 = r * p1 + t;
        let o = Observation::correspondence(p1[0] / p1[2], p1[1] / p1[2], p2[0] / p2[2], p2[1] / p2[2]);
        assert!(residual_transfer_sqrt(&o, &h) > 1e-6);
    }

    #[test]
    fn gt_homography_zero_offset_rejected() {
        let k = CameraIntrinsics::from_focal(1.0, 0.0, 0.0);
        assert_eq!(
            gt_homography_from_plane(
                &k,
                &Matrix3::identity(),
                &Vector3::new(1.0, 0.0, 0.0),
                &Vector3::new(0.0, 0.0, 1.0),
                0.0
            ),
            Err(GeometryError::ZeroPlaneOffset)
        );
    }
}
