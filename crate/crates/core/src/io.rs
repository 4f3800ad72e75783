//! Scene and results files: versioned, self-describing JSON with explicit
//! record layouts, plus aggregate metrics that are recomputable from the
//! per-scene entries.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, ModelInstance, Observation, Task};
use crate::metrics::{
    auc_at, misclassification_error, sampson_error_metric, transfer_error_metric, vp_angle_errors,
};
use crate::pipeline::{FitResult, PipelineParams};
use crate::scene::Scene;

pub const SCENE_FORMAT_VERSION: u32 = 1;
pub const RESULTS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_AUC_CUTOFFS_DEG: [f64; 4] = [1.0, 3.0, 5.0, 10.0];

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format version {got} (expected {expected})")]
    BadVersion { got: u32, expected: u32 },
    #[error("model record '{kind}' expects {expected} params, got {got}")]
    BadModelParams {
        kind: String,
        expected: usize,
        got: usize,
    },
    #[error("unknown model kind '{0}'")]
    UnknownModelKind(String),
    #[error("aggregate self-consistency failed: {0}")]
    InconsistentAggregates(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub kind: String,
    /// Row-major parameters: 3 for a VP, 9 for F/H.
    pub params: Vec<f64>,
}

impl ModelRecord {
    pub fn from_model(m: &ModelInstance) -> Self {
        match m {
            ModelInstance::Vp(v) => ModelRecord {
                kind: "vp".into(),
                params: vec![v[0], v[1], v[2]],
            },
            ModelInstance::Fundamental(f) => ModelRecord {
                kind: "fundamental".into(),
                params: row_major(f),
            },
            ModelInstance::Homography(h) => ModelRecord {
                kind: "homography".into(),
                params: row_major(h),
            },
        }
    }

    pub fn to_model(&self) -> Result<ModelInstance, IoError> {
        let expect = |n: usize| {
            if self.params.len() == n {
                Ok(())
            } else {
                Err(IoError::BadModelParams {
                    kind: self.kind.clone(),
                    expected: n,
                    got: self.params.len(),
                })
            }
        };
        match self.kind.as_str() {
            "vp" => {
                expect(3)?;
                Ok(ModelInstance::Vp(Vector3::new(
                    self.params[0],
                    self.params[1],
                    self.params[2],
                )))
            }
            "fundamental" => {
                expect(9)?;
                Ok(ModelInstance::Fundamental(from_row_major(&self.params)))
            }
            "homography" => {
                expect(9)?;
                Ok(ModelInstance::Homography(from_row_major(&self.params)))
            }
            other => Err(IoError::UnknownModelKind(other.into())),
        }
    }
}

fn row_major(m: &Matrix3<f64>) -> Vec<f64> {
    (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect()
}

fn from_row_major(p: &[f64]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| p[r * 3 + c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub v: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoints: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub format_version: u32,
    pub task: Task,
    pub width: f64,
    pub height: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intrinsics: Option<[f64; 9]>,
    pub observations: Vec<ObservationRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_models: Option<Vec<ModelRecord>>,
    pub seed: u64,
}

impl SceneRecord {
    pub fn from_scene(scene: &Scene) -> Self {
        SceneRecord {
            format_version: SCENE_FORMAT_VERSION,
            task: scene.task,
            width: scene.width,
            height: scene.height,
            intrinsics: scene.intrinsics.map(|k| {
                let mut out = [0.0; 9];
                for (i, v) in row_major(&k.k).into_iter().enumerate() {
                    out[i] = v;
                }
                out
            }),
            observations: scene
                .observations
                .iter()
                .map(|o| ObservationRecord {
                    v: o.v,
                    endpoints: o.endpoints,
                })
                .collect(),
            gt_labels: scene.gt_labels.clone(),
            gt_models: scene
                .gt_models
                .as_ref()
                .map(|ms| ms.iter().map(ModelRecord::from_model).collect()),
            seed: scene.seed,
        }
    }

    pub fn to_scene(&self) -> Result<Scene, IoError> {
        if self.format_version != SCENE_FORMAT_VERSION {
            return Err(IoError::BadVersion {
                got: self.format_version,
                expected: SCENE_FORMAT_VERSION,
            });
        }
        let gt_models = match &self.gt_models {
            Some(records) => Some(
                records
                    .iter()
                    .map(|r| r.to_model())
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        Ok(Scene {
            task: self.task,
            width: self.width,
            height: self.height,
            observations: self
                .observations
                .iter()
                .map(|o| Observation {
                    v: o.v,
                    endpoints: o.endpoints,
                })
                .collect(),
            gt_labels: self.gt_labels.clone(),
            gt_models,
            intrinsics: self.intrinsics.map(|p| CameraIntrinsics {
                k: from_row_major(&p),
            }),
            seed: self.seed,
        })
    }
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), IoError> {
    let record = SceneRecord::from_scene(scene);
    let json = serde_json::to_string_pretty(&record)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene, IoError> {
    let json = std::fs::read_to_string(path)?;
    let record: SceneRecord = serde_json::from_str(&json)?;
    record.to_scene()
}

/// Manifest written next to generated scene files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateManifest {
    pub format_version: u32,
    pub config: crate::datagen::GenConfig,
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneResult {
    pub scene: String,
    pub models: Vec<ModelRecord>,
    pub labels: Vec<usize>,
    pub per_model_inliers: Vec<usize>,
    pub elapsed_seconds: f64,
}

impl SceneResult {
    pub fn from_fit(scene_name: &str, fit: &FitResult) -> Self {
        SceneResult {
            scene: scene_name.into(),
            models: fit.models.iter().map(ModelRecord::from_model).collect(),
            labels: fit.labels.clone(),
            per_model_inliers: fit.per_model_inliers.clone(),
            elapsed_seconds: fit.elapsed_seconds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_me: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_me: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_se: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_te: Option<f64>,
    /// (cutoff degrees, AUC) over the pooled VP angle errors.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub auc: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub format_version: u32,
    pub tool_version: String,
    pub task: Task,
    pub seed: u64,
    pub provider: String,
    pub params: PipelineParams,
    pub per_scene: Vec<SceneResult>,
    pub aggregates: Aggregates,
}

impl ResultsFile {
    pub fn new(
        task: Task,
        seed: u64,
        provider: &str,
        params: &PipelineParams,
        per_scene: Vec<SceneResult>,
        scenes: &[Scene],
    ) -> Result<Self, IoError> {
        let aggregates = compute_aggregates(&per_scene, scenes)?;
        Ok(ResultsFile {
            format_version: RESULTS_FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            task,
            seed,
            provider: provider.into(),
            params: *params,
            per_scene,
            aggregates,
        })
    }

    /// Zeroes the timing fields, leaving only the deterministic content.
    pub fn strip_timing(&mut self) {
        for r in &mut self.per_scene {
            r.elapsed_seconds = 0.0;
        }
    }
}

/// Recomputes the aggregate metrics from per-scene results and their source
/// scenes (paired by index). Metrics lacking ground truth are omitted.
pub fn compute_aggregates(
    per_scene: &[SceneResult],
    scenes: &[Scene],
) -> Result<Aggregates, IoError> {
    let mut mes = Vec::new();
    let mut ses = Vec::new();
    let mut tes = Vec::new();
    let mut vp_errors = Vec::new();
    for (result, scene) in per_scene.iter().zip(scenes) {
        let models: Vec<ModelInstance> = result
            .models
            .iter()
            .map(|r| r.to_model())
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(gt) = &scene.gt_labels {
            mes.push(misclassification_error(&result.labels, gt));
        }
        match scene.task {
            Task::Fundamental => {
                if let Some(se) = sampson_error_metric(scene, &models) {
                    ses.push(se);
                }
            }
            Task::Homography => {
                if let Some(te) = transfer_error_metric(scene, &models) {
                    tes.push(te);
                }
            }
            Task::Vp => {
                if let (Some(gt), Some(k)) = (&scene.gt_models, &scene.intrinsics) {
                    vp_errors.extend(vp_angle_errors(&models, gt, k));
                }
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let median = |v: &mut Vec<f64>| {
        if v.is_empty() {
            return None;
        }
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(v[v.len() / 2])
    };
    let auc = if vp_errors.is_empty() {
        vec![]
    } else {
        DEFAULT_AUC_CUTOFFS_DEG
            .iter()
            .map(|&c| (c, auc_at(&vp_errors, c)))
            .collect()
    };
    let mut mes_sorted = mes.clone();
    Ok(Aggregates {
        mean_me: mean(&mes),
        median_me: median(&mut mes_sorted),
        mean_se: mean(&ses),
        mean_te: mean(&tes),
        auc,
    })
}

/// Self-consistency check: the embedded aggregates must equal a fresh
/// recomputation from the per-scene entries.
pub fn verify_aggregates(results: &ResultsFile, scenes: &[Scene]) -> Result<(), IoError> {
    let fresh = compute_aggregates(&results.per_scene, scenes)?;
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * (1.0 + x.abs().max(y.abs())),
        _ => false,
    };
    if !close(fresh.mean_me, results.aggregates.mean_me)
        || !close(fresh.median_me, results.aggregates.median_me)
        || !close(fresh.mean_se, results.aggregates.mean_se)
        || !close(fresh.mean_te, results.aggregates.mean_te)
    {
        return Err(IoError::InconsistentAggregates("ME/SE/TE mismatch".into()));
    }
    if fresh.auc.len() != results.aggregates.auc.len()
        || fresh
            .auc
            .iter()
            .zip(&results.aggregates.auc)
            .any(|(a, b)| a.0 != b.0 || (a.1 - b.1).abs() > 1e-12)
    {
        return Err(IoError::InconsistentAggregates("AUC mismatch".into()));
    }
    Ok(())
}

pub fn save_results(results: &ResultsFile, path: &Path) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(results)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_results(path: &Path) -> Result<ResultsFile, IoError> {
    let json = std::fs::read_to_string(path)?;
    let results: ResultsFile = serde_json::from_str(&json)?;
    if results.format_version != RESULTS_FORMAT_VERSION {
        return Err(IoError::BadVersion {
            got: results.format_version,
            expected: RESULTS_FORMAT_VERSION,
        });
    }
    Ok(results)
}
