//! Vanishing point solver, residual and weighted refinement.

use nalgebra::{DMatrix, Vector2, Vector3};

use super::{ModelInstance, Observation};

/// Minimal solver: the cross product of the two homogeneous segment lines.
/// Returns `None` for (near-)collinear segments.
pub fn vp_from_lines(a: &Observation, b: &Observation) -> Option<ModelInstance> {
    let l1 = unit_line(a.segment_line())?;
    let l2 = unit_line(b.segment_line())?;
    let v = l1.cross(&l2);
    if v.norm() < 1e-12 {
        return None;
    }
    Some(ModelInstance::Vp(v).canonicalize())
}

fn unit_line(l: Vector3<f64>) -> Option<Vector3<f64>> {
    let n = l.norm();
    if n < 1e-15 {
        return None;
    }
    Some(l / n)
}

/// `1 - |cos(angle)|` between the segment direction and the constrained line
/// through the segment midpoint and the vanishing point. Range [0, 1].
pub fn residual_vp(x: &Observation, v: &Vector3<f64>) -> f64 {
    let dir = x.direction();
    let constrained = constrained_direction(x, v);
    let Some(c) = constrained else {
        // VP coincides with the midpoint: the segment trivially passes through it.
        return 0.0;
    };
    let cosine = (dir.dot(&c)).abs().min(1.0);
    1.0 - cosine
}

/// Unit direction from the segment midpoint towards the VP; `None` when the
/// two coincide. For a VP at infinity the direction is its first two
/// components.
fn constrained_direction(x: &Observation, v: &Vector3<f64>) -> Option<Vector2<f64>> {
    let d = if v[2].abs() < 1e-12 * v.norm() {
        Vector2::new(v[0], v[1])
    } else {
        let vp = Vector2::new(v[0] / v[2], v[1] / v[2]);
        vp - Vector2::new(x.v[0], x.v[1])
    };
    let n = d.norm();
    if n < 1e-12 {
        return None;
    }
    Some(d / n)
}

/// Weighted least-squares refinement: the right singular vector of smallest
/// singular value of the matrix whose row i is `l_i * w_i`. Returns the input
/// unchanged when fewer than two rows carry weight or the system is
/// rank-deficient.
pub fn refine_vp_weighted(v: &ModelInstance, observations: &[Observation], weights: &[f64]) -> ModelInstance {
    let ModelInstance::Vp(v0) = v else {
        return *v;
    };
    let rows: Vec<Vector3<f64>> = observations
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .filter_map(|(x, &w)| unit_line(x.segment_line()).map(|l| l * w))
        .collect();
    if rows.len() < 2 {
        return *v;
    }
    let a = DMatrix::from_fn(rows.len(), 3, |r, c| rows[r][c]);
    let svd = a.svd(false, true);
    let sv = &svd.singular_values;
    let rank = sv.iter().filter(|&&s| s > 1e-12 * sv[0]).count();
    if rank < 2 {
        return *v;
    }
    let v_t = svd.v_t.as_ref().expect("svd computed with v_t");
    let last = v_t.nrows() - 1;
    let refined = Vector3::new(v_t[(last, 0)], v_t[(last, 1)], v_t[(last, 2)]);
    if refined.norm() < 1e-12 {
        return ModelInstance::Vp(*v0);
    }
    ModelInstance::Vp(refined).canonicalize()
}
