//! Analytic synthetic scene generation: epipolar scenes from per-object
//! rigid motions, homography scenes from 3D planes, vanishing-point scenes
//! from line segments, plus noise and outlier injection.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::substream_rng;
use crate::geometry::{
    gt_fmat_from_pose, gt_homography_from_plane, CameraIntrinsics, ModelInstance, Observation,
    Task,
};
use crate::scene::Scene;

/// Labeling thresholds, in pixels (F/H) or degrees (VP).
pub const FMAT_LABEL_THRESHOLD_PX: f64 = 2.0;
pub const HOMOGRAPHY_LABEL_THRESHOLD_PX: f64 = 1.0;
pub const VP_INLIER_ANGLE_DEG: f64 = 0.5;

/// Plane-merge tolerances (SMH-style): planes within both are one model.
pub const PLANE_MERGE_ANGLE_DEG: f64 = 2.0;
pub const PLANE_MERGE_DIST: f64 = 0.1;

/// Cross-model separation margins, in fitting-residual units. Every
/// generated inlier keeps at least this residual to every *other* model,
/// and injected outliers keep it to every model; both bands sit beyond the
/// default inlier/assignment thresholds (tau, tau_a), so cross-model
/// absorption cannot corrupt ranking or assignment on clean scenes.
pub const VP_SEPARATION_DEG: f64 = 2.0;
/// Square root of the Sampson distance; ~31 px at 1024 px.
pub const FMAT_SEPARATION: f64 = 3e-2;
/// Squared symmetric transfer error; ~(5 px)^2 at 1024 px.
pub const HOMOGRAPHY_SEPARATION: f64 = 2.4e-5;

/// Minimum fitting residual of any observation to a non-generating model.
fn separation(task: Task) -> f64 {
    match task {
        Task::Vp => 1.0 - VP_SEPARATION_DEG.to_radians().cos(),
        Task::Fundamental => FMAT_SEPARATION,
        Task::Homography => HOMOGRAPHY_SEPARATION,
    }
}

/// Minimum inliers a model must keep: below this it is pruned.
fn min_inliers(task: Task) -> usize {
    match task {
        Task::Vp => Task::Vp.minimal_set_size() + 1,
        Task::Fundamental => Task::Fundamental.minimal_set_size() + 1,
        Task::Homography => 10, // "fewer than ten correspondences" pruned
    }
}

const MAX_OUTLIER_COUNT: usize = 100_000;
const SCENE_RETRIES: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: Task,
    pub count: usize,
    pub width: f64,
    pub height: f64,
    /// Inclusive model-count range per scene.
    pub model_count: (usize, usize),
    /// Inclusive points-per-model range.
    pub points_per_model: (usize, usize),
    /// Endpoint/correspondence noise, pixels.
    pub noise_sigma_px: f64,
    /// Outlier fraction in [0, 1).
    pub outlier_rate: f64,
    /// Focal length range in normalized units (~0.67-1.11 spans a
    /// 24-40 mm full-frame lens).
    pub focal_range: (f64, f64),
    /// VP task only: mutually orthogonal directions.
    pub manhattan: bool,
    pub seed: u64,
}

impl GenConfig {
    pub fn defaults_for(task: Task) -> Self {
        let model_count = match task {
            Task::Vp => (1, 8),
            Task::Fundamental => (1, 4),
            Task::Homography => (2, 8),
        };
        GenConfig {
            task,
            count: 1,
            width: 1024.0,
            height: 1024.0,
            model_count,
            points_per_model: (30, 60),
            noise_sigma_px: 0.0,
            outlier_rate: 0.0,
            focal_range: (0.67, 1.11),
            manhattan: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.count == 0 {
            return Err("count must be >= 1".into());
        }
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err("width/height must be positive".into());
        }
        if self.model_count.0 < 1 || self.model_count.0 > self.model_count.1 {
            return Err("model_count range is empty".into());
        }
        if self.points_per_model.0 < 1 || self.points_per_model.0 > self.points_per_model.1 {
            return Err("points_per_model range is empty".into());
        }
        if !(self.noise_sigma_px >= 0.0) {
            return Err("noise_sigma_px must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err("outlier_rate must lie in [0, 1)".into());
        }
        if !(self.focal_range.0 > 0.0 && self.focal_range.0 <= self.focal_range.1) {
            return Err("focal_range is empty".into());
        }
        Ok(())
    }

    fn half_extents(&self) -> (f64, f64) {
        let s = self.width.max(self.height);
        (0.5 * self.width / s, 0.5 * self.height / s)
    }

    fn px(&self) -> f64 {
        1.0 / self.width.max(self.height)
    }

    fn label_threshold(&self) -> f64 {
        match self.task {
            Task::Vp => vp_residual_bound(),
            Task::Fundamental => FMAT_LABEL_THRESHOLD_PX * self.px(),
            // fitting residual is the squared transfer error
            Task::Homography => (HOMOGRAPHY_LABEL_THRESHOLD_PX * self.px()).powi(2),
        }
    }
}

/// Residual value of a segment deviating exactly 0.5 degrees.
pub fn vp_residual_bound() -> f64 {
    1.0 - VP_INLIER_ANGLE_DEG.to_radians().cos()
}

fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = random_unit(rng);
    let angle = rng.gen_range(-max_angle..max_angle);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

fn sample_intrinsics(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> CameraIntrinsics {
    let f = rng.gen_range(cfg.focal_range.0..=cfg.focal_range.1);
    CameraIntrinsics::from_focal(f, 0.0, 0.0)
}

fn in_frame(cfg: &GenConfig, x: f64, y: f64) -> bool {
    let (hx, hy) = cfg.half_extents();
    x.abs() <= hx && y.abs() <= hy
}

fn project(k: &Matrix3<f64>, p: &Vector3<f64>) -> Option<(f64, f64)> {
    if p[2] < 0.1 {
        return None;
    }
    let q = k * p;
    Some((q[0] / q[2], q[1] / q[2]))
}

/// Applies the configured observation noise before labeling so the emitted
/// labels satisfy the generation-threshold bound on the final coordinates;
/// points drifting past the bound become outliers and are replaced during
/// outlier injection.
fn noise_observations(cfg: &GenConfig, observations: Vec<Observation>, rng: &mut ChaCha8Rng) -> Vec<Observation> {
    if cfg.noise_sigma_px == 0.0 {
        return observations;
    }
    let sigma = cfg.noise_sigma_px * cfg.px();
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    use rand_distr::Distribution as _;
    observations
        .into_iter()
        .map(|o| match o.endpoints {
            Some(e) => Observation::segment(
                e[0] + normal.sample(rng),
                e[1] + normal.sample(rng),
                e[2] + normal.sample(rng),
                e[3] + normal.sample(rng),
            ),
            None => Observation::correspondence(
                o.v[0] + normal.sample(rng),
                o.v[1] + normal.sample(rng),
                o.v[2] + normal.sample(rng),
                o.v[3] + normal.sample(rng),
            ),
        })
        .collect()
}

/// Nearest-model labeling: argmin residual when below the threshold, else
/// outlier. Keeps label soundness exact, including accidental collisions.
fn label_by_residual(
    observations: &[Observation],
    models: &[ModelInstance],
    threshold: f64,
) -> Vec<usize> {
    observations
        .iter()
        .map(|x| {
            let mut best = (f64::INFINITY, 0usize);
            for (j, m) in models.iter().enumerate() {
                let r = m.residual(x);
                if r < best.0 {
                    best = (r, j + 1);
                }
            }
            if best.0 < threshold {
                best.1
            } else {
                0
            }
        })
        .collect()
}

/// Drops models with too few inliers, sorts the rest by descending inlier
/// count (stable) and remaps labels to the new significance order.
fn finalize_labels(
    models: Vec<ModelInstance>,
    labels: Vec<usize>,
    task: Task,
) -> (Vec<ModelInstance>, Vec<usize>) {
    let mut counts = vec![0usize; models.len()];
    for &l in &labels {
        if l > 0 {
            counts[l - 1] += 1;
        }
    }
    let mut order: Vec<usize> = (0..models.len())
        .filter(|&j| counts[j] >= min_inliers(task))
        .collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut remap = vec![0usize; models.len() + 1];
    for (new_rank, &old) in order.iter().enumerate() {
        remap[old + 1] = new_rank + 1;
    }
    let new_models = order.iter().map(|&j| models[j]).collect();
    let new_labels = labels.into_iter().map(|l| remap[l]).collect();
    (new_models, new_labels)
}

/// Epipolar scene: each model is an independently moving rigid point cloud
/// observed by the same camera pair; the per-object relative motion induces
/// its fundamental matrix.
pub fn gen_fmat_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    assert_eq!(cfg.task, Task::Fundamental);
    let k = sample_intrinsics(cfg, rng);
    let num_models = rng.gen_range(cfg.model_count.0..=cfg.model_count.1);
    let k_inv = k.k.try_inverse().unwrap();
    for _attempt in 0..SCENE_RETRIES {
        // sample every motion first so points can be checked against all
        // models of the scene, not just earlier ones
        let mut motions: Vec<(Matrix3<f64>, Vector3<f64>, ModelInstance)> = Vec::new();
        let mut motion_tries = 0;
        while motions.len() < num_models && motion_tries < num_models * 50 {
            motion_tries += 1;
            let r = random_rotation(rng, 0.5);
            let mut t = random_unit(rng) * rng.gen_range(0.2..0.8);
            if t.norm() < 0.1 {
                t = Vector3::new(0.3, 0.0, 0.0);
            }
            let Ok(f) = gt_fmat_from_pose(&k, &r, &t) else {
                continue;
            };
            motions.push((r, t, f));
        }
        let models: Vec<ModelInstance> = motions.iter().map(|(_, _, f)| *f).collect();
        let sep = separation(cfg.task);
        let mut observations = Vec::new();
        for (mi, (r, t, _)) in motions.iter().enumerate() {
            let n_pts = rng.gen_range(cfg.points_per_model.0..=cfg.points_per_model.1);
            let mut added = 0;
            let mut tries = 0;
            while added < n_pts && tries < n_pts * 50 {
                tries += 1;
                let (hx, hy) = cfg.half_extents();
                let x1 = (rng.gen_range(-0.9 * hx..0.9 * hx), rng.gen_range(-0.9 * hy..0.9 * hy));
                let ray = k_inv * Vector3::new(x1.0, x1.1, 1.0);
                let z = rng.gen_range(4.0..10.0);
                let p = ray * (z / ray[2]);
                let q = r * p + t;
                let Some(x2) = project(&k.k, &q) else { continue };
                if !in_frame(cfg, x2.0, x2.1) {
                    continue;
                }
                let obs = Observation::correspondence(x1.0, x1.1, x2.0, x2.1);
                // keep the correspondence clear of every other epipolar geometry
                if models
                    .iter()
                    .enumerate()
                    .any(|(mj, other)| mj != mi && other.residual(&obs) < sep)
                {
                    continue;
                }
                observations.push(obs);
                added += 1;
            }
        }
        let observations = noise_observations(cfg, observations, rng);
        let labels = label_by_residual(&observations, &models, cfg.label_threshold());
        let (models, labels) = finalize_labels(models, labels, cfg.task);
        if models.len() == num_models || _attempt == SCENE_RETRIES - 1 {
            return assemble(cfg, k, observations, labels, models, rng);
        }
    }
    unreachable!("loop always returns on the last attempt")
}

/// A sampled 3D plane `{X : n.X + d = 0}` in the first camera frame.
#[derive(Debug, Clone, Copy)]
pub struct PlaneSpec {
    pub n: Vector3<f64>,
    pub d: f64,
}

/// Greedy clustering of planes by the merge rule: two planes belong
/// together when their normals differ by at most the angle tolerance and
/// their offsets by at most the distance tolerance. Returns, per plane, the
/// index of its cluster representative (the lowest member index).
pub fn merge_plane_clusters(planes: &[PlaneSpec], angle_deg: f64, dist: f64) -> Vec<usize> {
    let cos_tol = angle_deg.to_radians().cos();
    let mut rep: Vec<usize> = (0..planes.len()).collect();
    for i in 0..planes.len() {
        if rep[i] != i {
            continue;
        }
        for j in (i + 1)..planes.len() {
            if rep[j] != j {
                continue;
            }
            // compare with consistent orientation
            let dot = planes[i].n.dot(&planes[j].n);
            let (dot, dj) = if dot < 0.0 {
                (-dot, -planes[j].d)
            } else {
                (dot, planes[j].d)
            };
            if dot >= cos_tol && (planes[i].d - dj).abs() <= dist {
                rep[j] = i;
            }
        }
    }
    rep
}

fn sample_separated_plane(
    cfg: &GenConfig,
    k_inv: &Matrix3<f64>,
    existing: &[PlaneSpec],
    rng: &mut ChaCha8Rng,
) -> PlaneSpec {
    // keep sampled planes clear of the merge tolerance so merging stays
    // vacuous for generated scenes and inlier residuals remain exact
    loop {
        let (hx, hy) = cfg.half_extents();
        let anchor_img = Vector3::new(
            rng.gen_range(-0.7 * hx..0.7 * hx),
            rng.gen_range(-0.7 * hy..0.7 * hy),
            1.0,
        );
        let ray = k_inv * anchor_img;
        let p0 = ray * (rng.gen_range(4.0..8.0) / ray[2]);
        let mut n = random_unit(rng);
        // keep the plane reasonably front-facing at its anchor
        if n.dot(&p0.normalize()).abs() < 0.4 {
            continue;
        }
        if n[2] > 0.0 {
            n = -n;
        }
        let d = -n.dot(&p0);
        if d.abs() < 0.5 {
            continue;
        }
        let candidate = PlaneSpec { n, d };
        let mut probe: Vec<PlaneSpec> = existing.to_vec();
        probe.push(candidate);
        let rep = merge_plane_clusters(
            &probe,
            1.5 * PLANE_MERGE_ANGLE_DEG,
            1.5 * PLANE_MERGE_DIST,
        );
        if rep[probe.len() - 1] == probe.len() - 1 {
            return candidate;
        }
    }
}

/// Homography scene from an explicit plane list: points scattered on each
/// plane, projected into both views; approximately coplanar planes merged;
/// under-populated clusters pruned to outliers.
pub fn gen_homography_scene_from_planes(
    cfg: &GenConfig,
    planes: &[PlaneSpec],
    k: CameraIntrinsics,
    r: Matrix3<f64>,
    t: Vector3<f64>,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let k_inv = k.k.try_inverse().unwrap();
    let rep = merge_plane_clusters(planes, PLANE_MERGE_ANGLE_DEG, PLANE_MERGE_DIST);
    // one model per cluster representative
    let mut cluster_of = std::collections::BTreeMap::new();
    let mut models = Vec::new();
    for (i, plane) in planes.iter().enumerate() {
        if rep[i] == i {
            if let Ok(h) = gt_homography_from_plane(&k, &r, &t, &plane.n, plane.d) {
                cluster_of.insert(i, models.len());
                models.push(h);
            }
        }
    }
    let sep = separation(Task::Homography);
    let mut observations = Vec::new();
    for (i, plane) in planes.iter().enumerate() {
        let Some(&own) = cluster_of.get(&rep[i]) else {
            continue;
        };
        let n_pts = rng.gen_range(cfg.points_per_model.0..=cfg.points_per_model.1);
        let mut added = 0;
        let mut tries = 0;
        while added < n_pts && tries < n_pts * 50 {
            tries += 1;
            let (hx, hy) = cfg.half_extents();
            let x1 = (rng.gen_range(-0.9 * hx..0.9 * hx), rng.gen_range(-0.9 * hy..0.9 * hy));
            let ray = k_inv * Vector3::new(x1.0, x1.1, 1.0);
            let denom = plane.n.dot(&ray);
            if denom.abs() < 1e-6 {
                continue;
            }
            let lambda = -plane.d / denom;
            if !(1.0..50.0).contains(&lambda) {
                continue;
            }
            let p = ray * lambda;
            let q = r * p + t;
            let Some(x2) = project(&k.k, &q) else { continue };
            if !in_frame(cfg, x2.0, x2.1) {
                continue;
            }
            let obs = Observation::correspondence(x1.0, x1.1, x2.0, x2.1);
            // keep the point clear of every other cluster's homography
            if models
                .iter()
                .enumerate()
                .any(|(mj, other)| mj != own && other.residual(&obs) < sep)
            {
                continue;
            }
            observations.push(obs);
            added += 1;
        }
    }
    let observations = noise_observations(cfg, observations, rng);
    let labels = label_by_residual(&observations, &models, cfg.label_threshold());
    let (models, labels) = finalize_labels(models, labels, Task::Homography);
    assemble(cfg, k, observations, labels, models, rng)
}

pub fn gen_homography_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    assert_eq!(cfg.task, Task::Homography);
    let k = sample_intrinsics(cfg, rng);
    let k_inv = k.k.try_inverse().unwrap();
    let r = random_rotation(rng, 0.25);
    let t = random_unit(rng) * rng.gen_range(0.2..0.6);
    let num_models = rng.gen_range(cfg.model_count.0..=cfg.model_count.1);
    let mut best: Option<Scene> = None;
    for _ in 0..SCENE_RETRIES {
        let mut planes = Vec::new();
        for _ in 0..num_models {
            planes.push(sample_separated_plane(cfg, &k_inv, &planes, rng));
        }
        let scene = gen_homography_scene_from_planes(cfg, &planes, k, r, t, rng);
        if scene.gt_model_count() == Some(num_models) {
            return scene;
        }
        best = Some(scene);
    }
    best.unwrap()
}

/// Vanishing-point scene: segments aligned (within 0.5 degrees) with the
/// constrained line toward each VP.
pub fn gen_vp_scene(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Scene {
    assert_eq!(cfg.task, Task::Vp);
    let k = sample_intrinsics(cfg, rng);
    let num_models = rng.gen_range(cfg.model_count.0..=cfg.model_count.1);
    for _attempt in 0..SCENE_RETRIES {
        let directions = sample_vp_directions(cfg, num_models, rng);
        let models: Vec<ModelInstance> = directions
            .iter()
            .map(|d| ModelInstance::Vp(k.k * d).canonicalize())
            .collect();
        let mut observations = Vec::new();
        for (mi, m) in models.iter().enumerate() {
            let ModelInstance::Vp(v) = m else { unreachable!() };
            let n_pts = rng.gen_range(cfg.points_per_model.0..=cfg.points_per_model.1);
            let mut added = 0;
            let mut tries = 0;
            while added < n_pts && tries < n_pts * 50 {
                tries += 1;
                let (hx, hy) = cfg.half_extents();
                let mid = (rng.gen_range(-0.9 * hx..0.9 * hx), rng.gen_range(-0.9 * hy..0.9 * hy));
                // constrained direction: toward the VP (or along it at infinity)
                let dir = if v[2].abs() < 1e-9 * v.norm() {
                    nalgebra::Vector2::new(v[0], v[1]).normalize()
                } else {
                    let vp = (v[0] / v[2], v[1] / v[2]);
                    let d = nalgebra::Vector2::new(vp.0 - mid.0, vp.1 - mid.1);
                    if d.norm() < 1e-6 {
                        continue;
                    }
                    d.normalize()
                };
                // segments align exactly with the constrained direction;
                // angular deviation comes solely from injected noise
                let len = rng.gen_range(0.03..0.12);
                let a = (mid.0 - 0.5 * len * dir[0], mid.1 - 0.5 * len * dir[1]);
                let b = (mid.0 + 0.5 * len * dir[0], mid.1 + 0.5 * len * dir[1]);
                if !in_frame(cfg, a.0, a.1) || !in_frame(cfg, b.0, b.1) {
                    continue;
                }
                let obs = Observation::segment(a.0, a.1, b.0, b.1);
                // keep the segment clear of every other vanishing point
                let sep = separation(cfg.task);
                if models
                    .iter()
                    .enumerate()
                    .any(|(mj, other)| mj != mi && other.residual(&obs) < sep)
                {
                    continue;
                }
                observations.push(obs);
                added += 1;
            }
        }
        let observations = noise_observations(cfg, observations, rng);
        let labels = label_by_residual(&observations, &models, cfg.label_threshold());
        let (models, labels) = finalize_labels(models, labels, cfg.task);
        if models.len() == num_models || _attempt == SCENE_RETRIES - 1 {
            return assemble(cfg, k, observations, labels, models, rng);
        }
    }
    unreachable!("loop always returns on the last attempt")
}

fn sample_vp_directions(cfg: &GenConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vector3<f64>> {
    if cfg.manhattan {
        let r = random_rotation(rng, std::f64::consts::PI);
        return (0..count.min(3)).map(|i| r.column(i).into_owned()).collect();
    }
    let min_cos = 15.0f64.to_radians().cos();
    let mut dirs: Vec<Vector3<f64>> = Vec::new();
    while dirs.len() < count {
        let mut d = random_unit(rng);
        if d[2] < 0.0 {
            d = -d;
        }
        if dirs.iter().all(|e| e.dot(&d).abs() < min_cos) {
            dirs.push(d);
        }
    }
    dirs
}

fn assemble(
    cfg: &GenConfig,
    k: CameraIntrinsics,
    observations: Vec<Observation>,
    labels: Vec<usize>,
    models: Vec<ModelInstance>,
    rng: &mut ChaCha8Rng,
) -> Scene {
    let mut scene = Scene {
        task: cfg.task,
        width: cfg.width,
        height: cfg.height,
        observations,
        gt_labels: Some(labels),
        gt_models: Some(models),
        intrinsics: Some(k),
        seed: cfg.seed,
    };
    // observation noise was applied before labeling; only the outlier
    // population remains to be adjusted
    if cfg.outlier_rate > 0.0 {
        scene = inject_outliers(&scene, cfg.outlier_rate, rng).expect("validated rate");
    }
    scene
}

/// Generates scene `index` of the configured batch. Deterministic in
/// (config, index).
pub fn generate_scene(cfg: &GenConfig, index: usize) -> Scene {
    let mut rng = substream_rng(cfg.seed, index as u64);
    let mut scene = match cfg.task {
        Task::Vp => gen_vp_scene(cfg, &mut rng),
        Task::Fundamental => gen_fmat_scene(cfg, &mut rng),
        Task::Homography => gen_homography_scene(cfg, &mut rng),
    };
    scene.seed = cfg.seed.wrapping_add(index as u64);
    scene
}

/// Adds i.i.d. Gaussian pixel noise to segment endpoints or correspondence
/// coordinates. Ground truth labels and models are unchanged.
pub fn inject_noise(scene: &Scene, sigma_px: f64, rng: &mut ChaCha8Rng) -> Scene {
    assert!(sigma_px >= 0.0);
    if sigma_px == 0.0 {
        return scene.clone();
    }
    let sigma = sigma_px / scene.width.max(scene.height);
    let normal = rand_distr::Normal::new(0.0, sigma).unwrap();
    use rand_distr::Distribution as _;
    let mut out = scene.clone();
    out.observations = scene
        .observations
        .iter()
        .map(|o| match o.endpoints {
            Some(e) => Observation::segment(
                e[0] + normal.sample(rng),
                e[1] + normal.sample(rng),
                e[2] + normal.sample(rng),
                e[3] + normal.sample(rng),
            ),
            None => Observation::correspondence(
                o.v[0] + normal.sample(rng),
                o.v[1] + normal.sample(rng),
                o.v[2] + normal.sample(rng),
                o.v[3] + normal.sample(rng),
            ),
        })
        .collect();
    out
}

/// Replaces the outlier population: removes existing label-0 observations
/// and appends synthetic outliers until they make up `rate` of the scene
/// (rounded to the nearest achievable count).
pub fn inject_outliers(scene: &Scene, rate: f64, rng: &mut ChaCha8Rng) -> Result<Scene, String> {
    if !(0.0..1.0).contains(&rate) {
        return Err("rate must lie in [0, 1)".into());
    }
    let labels = scene
        .gt_labels
        .as_ref()
        .ok_or("outlier injection requires GT labels")?;
    let models = scene.gt_models.clone().unwrap_or_default();
    let mut observations = Vec::new();
    let mut new_labels = Vec::new();
    for (o, &l) in scene.observations.iter().zip(labels) {
        if l != 0 {
            observations.push(*o);
            new_labels.push(l);
        }
    }
    let n_in = observations.len();
    let n_out = (rate * n_in as f64 / (1.0 - rate)).round() as usize;
    if n_out > MAX_OUTLIER_COUNT {
        return Err(format!("outlier count {n_out} exceeds cap {MAX_OUTLIER_COUNT}"));
    }
    let threshold = outlier_threshold(scene);
    let (hx, hy) = {
        let s = scene.width.max(scene.height);
        (0.5 * scene.width / s, 0.5 * scene.height / s)
    };
    let square = 50.0 / scene.width.max(scene.height);
    for _ in 0..n_out {
        let mut candidate = None;
        for _try in 0..100 {
            let o = match scene.task {
                Task::Vp => {
                    // both endpoints in a 100x100 px square around a point
                    let c = (rng.gen_range(-hx..hx), rng.gen_range(-hy..hy));
                    Observation::segment(
                        c.0 + rng.gen_range(-square..square),
                        c.1 + rng.gen_range(-square..square),
                        c.0 + rng.gen_range(-square..square),
                        c.1 + rng.gen_range(-square..square),
                    )
                }
                _ => Observation::correspondence(
                    rng.gen_range(-hx..hx),
                    rng.gen_range(-hy..hy),
                    rng.gen_range(-hx..hx),
                    rng.gen_range(-hy..hy),
                ),
            };
            let mut hit = 0usize;
            let mut best = f64::INFINITY;
            for (j, m) in models.iter().enumerate() {
                let r = m.residual(&o);
                if r < best {
                    best = r;
                    hit = j + 1;
                }
            }
            if best >= threshold {
                candidate = Some((o, 0));
                break;
            }
            // collision: keep as a relabeled inlier only as a last resort
            candidate = Some((o, hit));
        }
        if let Some((o, l)) = candidate {
            observations.push(o);
            new_labels.push(l);
        }
    }
    let mut out = scene.clone();
    out.observations = observations;
    out.gt_labels = Some(new_labels);
    Ok(out)
}

fn outlier_threshold(scene: &Scene) -> f64 {
    // outliers stay beyond the separation band of every model so that
    // the default assignment thresholds cannot absorb them
    separation(scene.task)
}
