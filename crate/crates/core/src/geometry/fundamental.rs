//! Seven-point fundamental matrix solver, Sampson residual and analytic
//! ground-truth construction from a relative pose.
//!
//! Correspondence convention: `point_a` lives in the first view, `point_b`
//! in the second, and an exact model satisfies `b' F a = 0`.

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::{CameraIntrinsics, GeometryError, ModelInstance, Observation, RESIDUAL_SENTINEL};

/// Similarity transform conditioning a point set: zero centroid, mean
/// distance sqrt(2). Returns `None` when the points (near-)coincide.
pub(crate) fn hartley_normalization(points: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = points.iter().map(|p| p[1]).sum::<f64>() / n;
    let mean_dist = points
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// Real roots of `a x^3 + b x^2 + c x + d = 0`, falling back to the
/// quadratic/linear case when the leading coefficients vanish.
pub(crate) fn real_cubic_roots(a: f64, b: f64, c: f64, d: f64) -> Vec<f64> {
    let scale = a.abs().max(b.abs()).max(c.abs()).max(d.abs());
    if scale == 0.0 {
        return vec![];
    }
    if a.abs() < 1e-12 * scale {
        // quadratic
        if b.abs() < 1e-12 * scale {
            if c.abs() < 1e-12 * scale {
                return vec![];
            }
            return vec![-d / c];
        }
        let disc = c * c - 4.0 * b * d;
        if disc < 0.0 {
            return vec![];
        }
        let sq = disc.sqrt();
        // Citardauq form avoids cancellation
        let q = -0.5 * (c + c.signum() * sq);
        let mut roots = vec![q / b];
        if q.abs() > 0.0 {
            roots.push(d / q);
        } else {
            roots.push(0.0);
        }
        return roots;
    }
    // depressed cubic t^3 + p t + q with x = t - b/(3a)
    let (b, c, d) = (b / a, c / a, d / a);
    let p = c - b * b / 3.0;
    let q = 2.0 * b * b * b / 27.0 - b * c / 3.0 + d;
    let shift = -b / 3.0;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let mut roots = if disc > 1e-14 {
        let sq = disc.sqrt();
        let u = (-q / 2.0 + sq).cbrt();
        let v = (-q / 2.0 - sq).cbrt();
        vec![u + v + shift]
    } else if p.abs() < 1e-14 && q.abs() < 1e-14 {
        vec![shift]
    } else {
        // three real roots, trigonometric form
        let m = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * m)).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (theta - 2.0 * std::f64::consts::PI * k as f64 / 3.0).cos() + shift)
            .collect()
    };
    // one Newton polish per root
    for r in roots.iter_mut() {
        for _ in 0..2 {
            let f = ((*r + b) * *r + c) * *r + d;
            let df = (3.0 * *r + 2.0 * b) * *r + c;
            if df.abs() > 1e-30 {
                *r -= f / df;
            }
        }
    }
    roots
}

fn epipolar_row(a: &Vector3<f64>, b: &Vector3<f64>) -> [f64; 9] {
    [
        b[0] * a[0],
        b[0] * a[1],
        b[0],
        b[1] * a[0],
        b[1] * a[1],
        b[1],
        a[0],
        a[1],
        1.0,
    ]
}

fn mat_from_vec9(v: &[f64]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8])
}

/// Adjugate of a 3x3 matrix: rows are cross products of column pairs, so
/// `adj(M) * M = det(M) * I` without forming the inverse.
fn adjugate(m: &Matrix3<f64>) -> Matrix3<f64> {
    let c1 = m.column(0).into_owned();
    let c2 = m.column(1).into_owned();
    let c3 = m.column(2).into_owned();
    Matrix3::from_rows(&[
        c2.cross(&c3).transpose(),
        c3.cross(&c1).transpose(),
        c1.cross(&c2).transpose(),
    ])
}

fn enforce_rank2(f: &Matrix3<f64>) -> Option<Matrix3<f64>> {
    let svd = f.svd(true, true);
    let sv = svd.singular_values;
    if sv[1] < 1e-12 * sv[0] {
        // rank < 2, useless as an epipolar geometry
        return None;
    }
    if sv[2] <= 1e-12 * sv[0] {
        // already rank 2 to working precision; reconstructing from the SVD
        // would inject O(eps) noise that near-epipole Sampson denominators
        // amplify far above the residual floor
        return Some(*f);
    }
    let mut s = Matrix3::zeros();
    s[(0, 0)] = sv[0];
    s[(1, 1)] = sv[1];
    Some(svd.u.unwrap() * s * svd.v_t.unwrap())
}

/// Oriented epipolar constraint: for an exact correspondence the epipolar
/// line `F a` and the line `e' x b` through the second-view epipole are the
/// same line, so their dot product carries a sign that must agree (up to a
/// global flip) across all correspondences of one rigid motion. Spurious
/// cubic roots of the seven-point solver typically violate it.
fn oriented_consistent(f: &Matrix3<f64>, obs: &[&Observation]) -> bool {
    let svd = f.svd(true, false);
    let u = svd.u.as_ref().unwrap();
    let e2 = Vector3::new(u[(0, 2)], u[(1, 2)], u[(2, 2)]);
    let (mut pos, mut neg) = (0usize, 0usize);
    for o in obs {
        let line = f * o.point_a();
        let s = e2.cross(&o.point_b()).dot(&line);
        // skip points at the epipole where the sign is undefined
        if s > 1e-14 {
            pos += 1;
        } else if s < -1e-14 {
            neg += 1;
        }
    }
    pos == 0 || neg == 0
}

/// Seven-point algorithm: up to three fundamental matrices from seven
/// correspondences. Returns an empty vector for degenerate configurations.
pub fn fmat_seven_point(obs: &[&Observation]) -> Vec<ModelInstance> {
    assert_eq!(obs.len(), 7, "seven-point solver needs exactly 7 correspondences");
    let pa: Vec<Vector3<f64>> = obs.iter().map(|o| o.point_a()).collect();
    let pb: Vec<Vector3<f64>> = obs.iter().map(|o| o.point_b()).collect();
    let (Some(ta), Some(tb)) = (hartley_normalization(&pa), hartley_normalization(&pb)) else {
        return vec![];
    };
    let pa: Vec<Vector3<f64>> = pa.iter().map(|p| ta * p).collect();
    let pb: Vec<Vector3<f64>> = pb.iter().map(|p| tb * p).collect();

    // zero-padded to 9x9: nalgebra's SVD is thin, and the two null-space
    // vectors live beyond the first 7 right singular vectors
    let a = DMatrix::from_fn(9, 9, |r, c| {
        if r < 7 {
            epipolar_row(&pa[r], &pb[r])[c]
        } else {
            0.0
        }
    });
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    if sv[6] < 1e-9 * sv[0] {
        // constraint matrix rank < 7
        return vec![];
    }
    let v_t = svd.v_t.as_ref().unwrap();
    let f1 = mat_from_vec9(&v_t.row(7).iter().copied().collect::<Vec<_>>());
    let f2 = mat_from_vec9(&v_t.row(8).iter().copied().collect::<Vec<_>>());

    // det(alpha*F1 + (1-alpha)*F2) is cubic in alpha; get its coefficients by
    // interpolation at four sample points.
    let det_at = |alpha: f64| (f1 * alpha + f2 * (1.0 - alpha)).determinant();
    let (d0, d1, dm1, d2) = (det_at(0.0), det_at(1.0), det_at(-1.0), det_at(2.0));
    // P(a) = c3 a^3 + c2 a^2 + c1 a + c0
    let c0 = d0;
    let c2 = (d1 + dm1) / 2.0 - d0;
    let c3 = (d2 + 3.0 * d0 - 3.0 * d1 - dm1) / 6.0;
    let c1 = (d1 - dm1) / 2.0 - c3;

    let mut out = Vec::new();
    for alpha in real_cubic_roots(c3, c2, c1, c0) {
        if !alpha.is_finite() {
            continue;
        }
        // the interpolated coefficients carry roundoff that the rank-2
        // projection amplifies into epipolar residuals; polish the root on
        // the true determinant (d det(M) = tr(adj(M) dM)). Near-double
        // roots converge only linearly, hence the long best-tracking loop.
        let dm = f1 - f2;
        let det_alpha = |x: f64| (f1 * x + f2 * (1.0 - x)).determinant();
        let mut best_alpha = alpha;
        let mut best_det = det_alpha(alpha).abs();
        let mut cur = alpha;
        for _ in 0..40 {
            let m = f1 * cur + f2 * (1.0 - cur);
            let g = m.determinant();
            let dg = (adjugate(&m) * dm).trace();
            if dg.abs() < 1e-300 {
                break;
            }
            cur -= g / dg;
            let d = det_alpha(cur).abs();
            if d < best_det {
                best_det = d;
                best_alpha = cur;
            }
        }
        let alpha = best_alpha;
        let f_cond = f1 * alpha + f2 * (1.0 - alpha);
        // undo the conditioning transforms
        let f = tb.transpose() * f_cond * ta;
        if let Some(f) = enforce_rank2(&f) {
            if oriented_consistent(&f, obs) {
                out.push(ModelInstance::Fundamental(f).canonicalize());
            }
        }
    }
    out
}

/// Square root of the Sampson distance for a correspondence and a
/// fundamental matrix. Returns a large sentinel when both epipolar-line
/// gradients vanish.
pub fn residual_sampson_sqrt(x: &Observation, f: &Matrix3<f64>) -> f64 {
    let (pa, pb) = (x.point_a(), x.point_b());
    let fa = f * pa;
    let ftb = f.transpose() * pb;
    let num = pb.dot(&fa);
    let den = fa[0] * fa[0] + fa[1] * fa[1] + ftb[0] * ftb[0] + ftb[1] * ftb[1];
    if den <= 0.0 {
        return RESIDUAL_SENTINEL;
    }
    (num * num / den).sqrt()
}

/// Skew-symmetric cross-product matrix.
pub(crate) fn cross_matrix(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t[2], t[1], t[2], 0.0, -t[0], -t[1], t[0], 0.0)
}

/// Ground-truth fundamental matrix from a relative pose:
/// `F = K^-T [t]x R K^-1`, with the second view at `(R, t)` relative to the
/// first (`X2 = R X1 + t`).
pub fn gt_fmat_from_pose(
    k: &CameraIntrinsics,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<ModelInstance, GeometryError> {
    if t.norm() < 1e-15 {
        return Err(GeometryError::ZeroTranslation);
    }
    let k_inv = k.k.try_inverse().ok_or(GeometryError::InvalidIntrinsics)?;
    let f = k_inv.transpose() * cross_matrix(t) * r * k_inv;
    Ok(ModelInstance::Fundamental(f).canonicalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rotation_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }

    /// Random rigid scene: 3D points projected into two views.
    fn random_two_view(
        rng: &mut ChaCha8Rng,
        n: usize,
    ) -> (Vec<Observation>, Matrix3<f64>, Vector3<f64>) {
        let r = rotation_from_axis_angle(
            Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
            rng.gen_range(-0.4..0.4),
        );
        let t = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.3..0.3),
        );
        let obs = (0..n)
            .map(|_| {
                let p = Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(4.0..8.0),
                );
                let q = r * p + t;
                Observation::correspondence(p[0] / p[2], p[1] / p[2], q[0] / q[2], q[1] / q[2])
            })
            .collect();
        (obs, r, t)
    }

    #[test]
    fn cubic_roots_known_polynomials() {
        // (x-1)(x-2)(x-3)
        let mut r = real_cubic_roots(1.0, -6.0, 11.0, -6.0);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(r[1], 2.0, epsilon = 1e-9);
        assert_relative_eq!(r[2], 3.0, epsilon = 1e-9);
        // single real root: x^3 + x = -(x)(complex pair) shifted -> x^3 + x - 2
        let r = real_cubic_roots(1.0, 0.0, 1.0, -2.0);
        assert_eq!(r.len(), 1);
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-9);
        // degenerate leading coefficient -> quadratic
        let mut r = real_cubic_roots(0.0, 1.0, -3.0, 2.0);
        r.sort_by(f64::total_cmp);
        assert_relative_eq!(r[0], 1.0, epsilon = 1e-9);
        assert_relative_eq!(r[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn seven_point_recovers_noise_free_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (obs, _, _) = random_two_view(&mut rng, 7);
        let refs: Vec<&Observation> = obs.iter().collect();
        let sols = fmat_seven_point(&refs);
        assert!(!sols.is_empty());
        let best = sols
            .iter()
            .map(|m| {
                let ModelInstance::Fundamental(f) = m else { unreachable!() };
                obs.iter()
                    .map(|o| residual_sampson_sqrt(o, f))
                    .fold(0.0f64, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-9, "max Sampson residual {best}");
    }

    #[test]
    fn seven_point_identical_points_degenerate() {
        let o = Observation::correspondence(0.1, 0.2, 0.3, 0.4);
        let refs = [&o; 7];
        assert!(fmat_seven_point(&refs).is_empty());
    }

    #[test]
    fn seven_point_pure_translation() {
        // correspondences consistent with pure x-translation at identity K
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = Vector3::new(1.0, 0.0, 0.0);
        let obs: Vec<Observation> = (0..7)
            .map(|_| {
                let p = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(3.0..6.0),
                );
                let q = p + t;
                Observation::correspondence(p[0] / p[2], p[1] / p[2], q[0] / q[2], q[1] / q[2])
            })
            .collect();
        let refs: Vec<&Observation> = obs.iter().collect();
        let sols = fmat_seven_point(&refs);
        let gt = gt_fmat_from_pose(
            &CameraIntrinsics::from_focal(1.0, 0.0, 0.0),
            &Matrix3::identity(),
            &t,
        )
        .unwrap();
        let ModelInstance::Fundamental(gt_f) = gt else { unreachable!() };
        let matched = sols.iter().any(|m| {
            let ModelInstance::Fundamental(f) = m else { unreachable!() };
            (f - gt_f).norm() < 1e-6 || (f + gt_f).norm() < 1e-6
        });
        assert!(matched, "no solution proportional to [t]x");
    }

    #[test]
    fn sampson_zero_on_epipolar_line() {
        let f = cross_matrix(&Vector3::new(1.0, 0.0, 0.0));
        let o = Observation::correspondence(0.0, 0.0, 0.0, 0.0);
        assert_relative_eq!(residual_sampson_sqrt(&o, &f), 0.0);
    }

    #[test]
    fn sampson_scale_invariant() {
        let f = Matrix3::new(0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.0, 0.4);
        let o = Observation::correspondence(0.3, -0.1, 0.2, 0.25);
        assert_relative_eq!(
            residual_sampson_sqrt(&o, &f),
            residual_sampson_sqrt(&o, &(f * 10.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampson_hand_evaluated_example() {
        // F = [[0,0,0],[0,0,-1],[0,1,0]], a=(0,0,1), b=(0,1,1)
        let f = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        let o = Observation::correspondence(0.0, 0.0, 0.0, 1.0);
        assert_relative_eq!(
            residual_sampson_sqrt(&o, &f),
            std::f64::consts::FRAC_1_SQRT_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sampson_zero_denominator_sentinel() {
        let mut f = Matrix3::zeros();
        f[(2, 2)] = 1.0;
        let o = Observation::correspondence(0.0, 0.0, 0.0, 0.0);
        assert_eq!(residual_sampson_sqrt(&o, &f), RESIDUAL_SENTINEL);
    }

    #[test]
    fn gt_fmat_pure_translation_form() {
        let k = CameraIntrinsics::from_focal(1.0, 0.0, 0.0);
        let f = gt_fmat_from_pose(&k, &Matrix3::identity(), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let ModelInstance::Fundamental(f) = f else { unreachable!() };
        let expect =
            ModelInstance::Fundamental(cross_matrix(&Vector3::new(1.0, 0.0, 0.0))).canonicalize();
        let ModelInstance::Fundamental(e) = expect else { unreachable!() };
        assert!((f - e).norm() < 1e-12);
    }

    #[test]
    fn gt_fmat_projection_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (obs, r, t) = random_two_view(&mut rng, 100);
        let k = CameraIntrinsics::from_focal(1.0, 0.0, 0.0);
        let f = gt_fmat_from_pose(&k, &r, &t).unwrap();
        let ModelInstance::Fundamental(f) = f else { unreachable!() };
        let max = obs
            .iter()
            .map(|o| residual_sampson_sqrt(o, &f))
            .fold(0.0f64, f64::max);
        assert!(max < 1e-9, "max Sampson residual {max}");
    }

    #[test]
    fn gt_fmat_zero_translation_rejected() {
        let k = CameraIntrinsics::from_focal(1.0, 0.0, 0.0);
        assert_eq!(
            gt_fmat_from_pose(&k, &Matrix3::identity(), &Vector3::zeros()),
            Err(GeometryError::ZeroTranslation)
        );
    }
}
