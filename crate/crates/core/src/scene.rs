//! Scene container shared by the pipeline, metrics, data generation and IO.

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, ModelInstance, Observation, Task};

/// Observations plus optional ground truth. Coordinates are stored in the
/// normalized frame; `width`/`height` are kept for pixel-unit reporting.
/// Ground-truth models are significance-ordered (descending inlier count)
/// and `gt_labels` uses 0 for outliers, k for the k-th model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub task: Task,
    pub width: f64,
    pub height: f64,
    pub observations: Vec<Observation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_labels: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_models: Option<Vec<ModelInstance>>,
    /// Intrinsics expressed in the normalized frame.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub intrinsics: Option<CameraIntrinsics>,
    pub seed: u64,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Number of ground-truth models, if ground truth is present.
    pub fn gt_model_count(&self) -> Option<usize> {
        self.gt_models.as_ref().map(|m| m.len())
    }
}
