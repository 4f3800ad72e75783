//! Evaluation metrics: Hungarian assignment, VP angle errors and AUC,
//! misclassification error, Sampson and transfer error metrics.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::geometry::{CameraIntrinsics, ModelInstance, Task};
use crate::scene::Scene;

/// Minimal-cost injective assignment from the smaller side of the cost
/// matrix into the larger. Returns (row, col) pairs and the total cost.
pub fn hungarian_assign(cost: &DMatrix<f64>) -> (Vec<(usize, usize)>, f64) {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return (vec![], 0.0);
    }
    // orient so rows <= cols, solve, then flip pairs back
    if n > m {
        let (pairs, total) = hungarian_assign(&cost.transpose());
        return (pairs.into_iter().map(|(r, c)| (c, r)).collect(), total);
    }
    // Jonker-Volgenant style shortest augmenting path, O(n^2 m)
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut match_col = vec![usize::MAX; m + 1]; // col -> row, n used as sentinel index
    for i in 0..n {
        let mut min_v = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        let mut j0 = m; // virtual start column
        match_col[m] = i;
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 0..m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0, j)] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    if let Some(r) = match_col.get(j).copied() {
                        if r != usize::MAX && j < way.len() {
                            u[r] += delta;
                        }
                    }
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == usize::MAX {
                break;
            }
        }
        // augment along the alternating path
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == m {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 0..m {
        let r = match_col[j];
        if r != usize::MAX {
            pairs.push((r, j));
            total += cost[(r, j)];
        }
    }
    pairs.sort_unstable();
    (pairs, total)
}

/// Exhaustive assignment oracle for small matrices (min side <= ~8).
pub fn brute_force_assign(cost: &DMatrix<f64>) -> f64 {
    let (n, m) = (cost.nrows(), cost.ncols());
    if n == 0 || m == 0 {
        return 0.0;
    }
    if n > m {
        return brute_force_assign(&cost.transpose());
    }
    fn rec(cost: &DMatrix<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for j in 0..cost.ncols() {
            if !used[j] {
                used[j] = true;
                rec(cost, row + 1, used, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

/// Angle between a vanishing point pair as back-projected directions,
/// in degrees; antipodal directions count as identical.
pub fn vp_pair_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>, k_inv: &Matrix3<f64>) -> f64 {
    let da = k_inv * a;
    let db = k_inv * b;
    let (na, nb) = (da.norm(), db.norm());
    if na < 1e-15 || nb < 1e-15 {
        return 90.0;
    }
    let c = (da.dot(&db) / (na * nb)).abs().clamp(0.0, 1.0);
    c.acos().to_degrees()
}

/// Per-GT-model angle errors in degrees. Only the `min(|gt|, M)` top-ranked
/// predictions enter the matching; unmatched GT models get 90 degrees.
pub fn vp_angle_errors(
    models: &[ModelInstance],
    gt_models: &[ModelInstance],
    k: &CameraIntrinsics,
) -> Vec<f64> {
    let k_inv = k
        .k
        .try_inverse()
        .expect("intrinsics validated as invertible");
    let m_tilde = models.len().min(gt_models.len());
    if gt_models.is_empty() {
        return vec![];
    }
    if m_tilde == 0 {
        return vec![90.0; gt_models.len()];
    }
    let cost = DMatrix::from_fn(m_tilde, gt_models.len(), |i, j| {
        let (ModelInstance::Vp(p), ModelInstance::Vp(g)) = (&models[i], &gt_models[j]) else {
            return 90.0;
        };
        vp_pair_angle_deg(p, g, &k_inv)
    });
    let (pairs, _) = hungarian_assign(&cost);
    let mut errors = vec![90.0; gt_models.len()];
    for (i, j) in pairs {
        errors[j] = cost[(i, j)];
    }
    errors
}

/// Exact relative area under the recall step function up to `theta_c`:
/// `(1/theta_c) * sum over errors e <= theta_c of (theta_c - e) / n`.
pub fn auc_at(errors: &[f64], theta_c: f64) -> f64 {
    assert!(theta_c > 0.0, "theta_c must be positive");
    if errors.is_empty() {
        return 0.0;
    }
    let n = errors.len() as f64;
    errors
        .iter()
        .filter(|&&e| e <= theta_c)
        .map(|&e| (theta_c - e) / (theta_c * n))
        .sum()
}

/// Fraction of observations whose predicted label differs from ground
/// truth. Labels are compared identity-to-identity (predicted rank k vs GT
/// model k); both sides are significance-ordered by construction.
pub fn misclassification_error(labels: &[usize], gt_labels: &[usize]) -> f64 {
    assert_eq!(labels.len(), gt_labels.len(), "label length mismatch");
    if labels.is_empty() {
        return 0.0;
    }
    let mismatched = labels
        .iter()
        .zip(gt_labels)
        .filter(|(a, b)| a != b)
        .count();
    mismatched as f64 / labels.len() as f64
}

fn min_residual_metric(
    scene: &Scene,
    models: &[ModelInstance],
    expected_task: Task,
) -> Option<f64> {
    let gt_labels = scene.gt_labels.as_ref().expect("metric requires GT labels");
    let m_tilde = scene
        .gt_model_count()
        .map_or(models.len(), |g| models.len().min(g));
    // empty-prediction fallback: a single identity-matrix model
    let identity = match expected_task {
        Task::Fundamental => ModelInstance::Fundamental(Matrix3::identity()),
        Task::Homography => ModelInstance::Homography(Matrix3::identity()),
        Task::Vp => unreachable!("no residual metric for the VP task"),
    };
    let eval: Vec<ModelInstance> = if m_tilde == 0 {
        vec![identity]
    } else {
        models[..m_tilde].to_vec()
    };
    // clip at the normalized-frame equivalent of max(W, H) pixels
    let clip = 1.0;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, &l) in scene.observations.iter().zip(gt_labels) {
        if l == 0 {
            continue;
        }
        // metric residuals are distances (sqrt forms), independent of the
        // fitting residual convention
        let e = eval
            .iter()
            .map(|m| match m {
                ModelInstance::Fundamental(f) => {
                    crate::geometry::residual_sampson_sqrt(x, f)
                }
                ModelInstance::Homography(h) => {
                    crate::geometry::residual_transfer_sqrt(x, h)
                }
                ModelInstance::Vp(_) => unreachable!("no residual metric for the VP task"),
            })
            .fold(f64::INFINITY, f64::min)
            .min(clip);
        sum += e;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

/// Mean over GT inliers of the minimum Sampson residual to the top-ranked
/// predictions, clipped, in normalized units. `None` when the scene has no
/// GT inliers. Multiply by `max(W, H)` for pixels.
pub fn sampson_error_metric(scene: &Scene, models: &[ModelInstance]) -> Option<f64> {
    min_residual_metric(scene, models, Task::Fundamental)
}

/// Transfer-error analogue of [`sampson_error_metric`] for homographies.
pub fn transfer_error_metric(scene: &Scene, models: &[ModelInstance]) -> Option<f64> {
    min_residual_metric(scene, models, Task::Homography)
}
