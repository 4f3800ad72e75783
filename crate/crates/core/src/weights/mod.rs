//! Weight providers: the contract consumed by the pipeline plus the uniform
//! baseline, the ground-truth oracle and the neural predictor.

mod network;

pub use network::{
    init_params, load_params, network_backward, network_forward, pad_or_subsample, save_params,
    scene_features, update_running_stats, ForwardCache, GradientBundle, Mode, NetConfig,
    NetworkParams, Tensor, WeightsFileError, INPUT_DIM,
};

use nalgebra::DMatrix;

use crate::consensus::WeightMatrices;
use crate::scene::Scene;

pub const ORACLE_EPSILON: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum WeightError {
    #[error("scene has no observations")]
    EmptyScene,
    #[error("oracle provider requires ground-truth labels")]
    MissingGroundTruth,
    #[error("scene has {gt} ground-truth models but only {m_star} putative slots")]
    TooManyModels { gt: usize, m_star: usize },
    #[error("ground-truth label {label} exceeds model count {models}")]
    LabelOutOfRange { label: usize, models: usize },
}

/// Emits normalized log sample weights (N x M*, columns sum to 1 after exp)
/// and log inlier weights (N x (M*+1), rows sum to 1 after exp) for a scene.
pub trait WeightProvider: Sync {
    fn weights(&self, scene: &Scene) -> Result<WeightMatrices, WeightError>;
    fn m_star(&self) -> usize;
}

/// Uniform weights: reduces the pipeline to unguided parallel RANSAC.
#[derive(Debug, Clone, Copy)]
pub struct UniformProvider {
    pub m_star: usize,
}

impl WeightProvider for UniformProvider {
    fn weights(&self, scene: &Scene) -> Result<WeightMatrices, WeightError> {
        let n = scene.len();
        if n == 0 {
            return Err(WeightError::EmptyScene);
        }
        Ok(WeightMatrices {
            log_p: DMatrix::from_element(n, self.m_star, (1.0 / n as f64).ln()),
            log_q: DMatrix::from_element(n, self.m_star + 1, (1.0 / (self.m_star + 1) as f64).ln()),
        })
    }

    fn m_star(&self) -> usize {
        self.m_star
    }
}

/// Ground-truth weights for validating the pipeline independently of
/// training: sample mass concentrated on each model's labeled inliers,
/// inlier mass on the labeled column, with epsilon smoothing.
#[derive(Debug, Clone, Copy)]
pub struct OracleProvider {
    pub m_star: usize,
}

impl WeightProvider for OracleProvider {
    fn weights(&self, scene: &Scene) -> Result<WeightMatrices, WeightError> {
        let n = scene.len();
        if n == 0 {
            return Err(WeightError::EmptyScene);
        }
        let labels = scene
            .gt_labels
            .as_ref()
            .ok_or(WeightError::MissingGroundTruth)?;
        let num_models = labels.iter().copied().max().unwrap_or(0);
        if num_models > self.m_star {
            return Err(WeightError::TooManyModels {
                gt: num_models,
                m_star: self.m_star,
            });
        }
        let m = self.m_star;
        let eps = ORACLE_EPSILON;
        let mut log_p = DMatrix::zeros(n, m);
        for j in 0..m {
            // surplus slots repeat the model columns cyclically so oracle
            // sampling never draws minimal sets across models
            let target = if num_models > 0 { j % num_models } else { j };
            let mut col: Vec<f64> = labels
                .iter()
                .map(|&l| if l == target + 1 { 1.0 } else { eps })
                .collect();
            let total: f64 = col.iter().sum();
            for v in &mut col {
                *v = (*v / total).ln();
            }
            for (i, v) in col.into_iter().enumerate() {
                log_p[(i, j)] = v;
            }
        }
        let mut log_q = DMatrix::zeros(n, m + 1);
        for (i, &l) in labels.iter().enumerate() {
            // label 0 (outlier) maps to the last column; inlier mass is
            // split over every slot assigned to the label's model so the
            // cyclic surplus slots score their own samples
            let is_target = |j: usize| {
                if l == 0 {
                    j == m
                } else {
                    j < m && num_models > 0 && j % num_models == l - 1
                }
            };
            let n_targets = (0..=m).filter(|&j| is_target(j)).count().max(1);
            for j in 0..=m {
                let v = if is_target(j) {
                    (1.0 - eps) / n_targets as f64
                } else {
                    eps / (m + 1 - n_targets) as f64
                };
                log_q[(i, j)] = v.ln();
            }
        }
        Ok(WeightMatrices { log_p, log_q })
    }

    fn m_star(&self) -> usize {
        self.m_star
    }
}

/// Inference-mode wrapper around the neural predictor.
#[derive(Debug, Clone)]
pub struct NeuralProvider {
    pub params: NetworkParams,
}

impl WeightProvider for NeuralProvider {
    fn weights(&self, scene: &Scene) -> Result<WeightMatrices, WeightError> {
        if scene.is_empty() {
            return Err(WeightError::EmptyScene);
        }
        let (log_p, log_q, _) = network_forward(&self.params, scene, Mode::Infer);
        Ok(WeightMatrices { log_p, log_q })
    }

    fn m_star(&self) -> usize {
        self.params.config.m_star
    }
}

/// Checks the provider normalization contract: exp(logP) columns and
/// exp(logQ) rows sum to 1 within `tol`, all entries finite.
pub fn check_normalization(w: &WeightMatrices, tol: f64) -> Result<(), String> {
    for j in 0..w.log_p.ncols() {
        let s: f64 = (0..w.log_p.nrows()).map(|i| w.log_p[(i, j)].exp()).sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("logP column {j} sums to {s}"));
        }
    }
    for i in 0..w.log_q.nrows() {
        let s: f64 = (0..w.log_q.ncols()).map(|j| w.log_q[(i, j)].exp()).sum();
        if (s - 1.0).abs() > tol {
            return Err(format!("logQ row {i} sums to {s}"));
        }
    }
    if w.log_p.iter().any(|v| !v.is_finite()) || w.log_q.iter().any(|v| !v.is_finite()) {
        return Err("non-finite log weight".into());
    }
    Ok(())
}
