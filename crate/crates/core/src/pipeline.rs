//! End-to-end fitting: parallel putative-model discovery, greedy instance
//! ranking and cluster assignment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{self, ConsensusParams, HypothesisSet, WeightMatrices};
use crate::geometry::{refine_vp_weighted, ModelInstance, Task};
use crate::scene::Scene;
use crate::weights::WeightProvider;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    /// Number of putative model instances M*.
    pub m_star: usize,
    /// Assignment threshold; must exceed tau. `None` disables the loose
    /// assignment branch (VP task).
    pub tau_a: Option<f64>,
    pub consensus: ConsensusParams,
    /// Weighted inlier counting for hypothesis selection; `false` switches
    /// to the plain-count ablation.
    pub weighted_selection: bool,
}

impl PipelineParams {
    /// Task defaults mirroring the inference settings the method ships with.
    pub fn defaults_for(task: Task) -> Self {
        let (m_star, tau, tau_a, s) = match task {
            Task::Vp => (8, 1e-4, None, 32),
            Task::Fundamental => (4, 1e-2, Some(2e-2), 128),
            Task::Homography => (24, 1e-6, Some(4e-6), 512),
        };
        PipelineParams {
            m_star,
            tau_a,
            consensus: ConsensusParams {
                tau,
                beta: 5.0,
                num_hypotheses: s,
                alpha_s: 1000.0,
                minimal_set_size: task.minimal_set_size(),
            },
            weighted_selection: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.m_star < 1 {
            return Err("m_star must be >= 1".into());
        }
        if let Some(tau_a) = self.tau_a {
            if !(tau_a > self.consensus.tau) {
                return Err("tau_a must exceed tau".into());
            }
        }
        self.consensus.validate()
    }
}

/// Output of a fitting run: ranked models, per-observation cluster labels
/// (0 = outlier, k = k-th ranked model) and hard inlier counts at tau.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub models: Vec<ModelInstance>,
    pub labels: Vec<usize>,
    pub per_model_inliers: Vec<usize>,
    pub elapsed_seconds: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("weight provider failed: {0}")]
    Provider(#[from] crate::weights::WeightError),
    #[error("weight matrices have wrong shape: expected {expected} putative columns, got {got}")]
    WeightShape { expected: usize, got: usize },
}

/// Runs the full fitting pipeline. Deterministic given `seed`, regardless of
/// how many worker threads the surrounding rayon pool provides.
pub fn parsac_fit(
    scene: &Scene,
    provider: &dyn WeightProvider,
    params: &PipelineParams,
    seed: u64,
) -> Result<FitResult, PipelineError> {
    let start = std::time::Instant::now();
    params.validate().map_err(PipelineError::InvalidParams)?;
    if scene.is_empty() {
        return Ok(FitResult {
            models: vec![],
            labels: vec![],
            per_model_inliers: vec![],
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let weights = provider.weights(scene)?;
    if weights.num_putative() != params.m_star {
        return Err(PipelineError::WeightShape {
            expected: params.m_star,
            got: weights.num_putative(),
        });
    }
    let putative = putative_models(scene, &weights, params, seed);
    let (models, labels, per_model_inliers) = rank_and_assign(scene, &putative, params);
    Ok(FitResult {
        models,
        labels,
        per_model_inliers,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}

/// Discovers the M* putative models in parallel; each putative slot owns an
/// independent RNG substream so the result does not depend on scheduling.
pub fn putative_models(
    scene: &Scene,
    weights: &WeightMatrices,
    params: &PipelineParams,
    seed: u64,
) -> Vec<Option<ModelInstance>> {
    (0..params.m_star)
        .into_par_iter()
        .map(|j| {
            let mut rng = consensus::substream_rng(seed, j as u64);
            let (selected, set) = generate_for_slot(j, scene, weights, params, &mut rng);
            let _ = set;
            refine_if_vp(selected, scene, params)
        })
        .collect()
}

pub(crate) fn generate_for_slot(
    j: usize,
    scene: &Scene,
    weights: &WeightMatrices,
    params: &PipelineParams,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (Option<ModelInstance>, HypothesisSet) {
    if params.weighted_selection {
        consensus::generate_and_select(j, scene, weights, &params.consensus, rng)
    } else {
        // ablation: same sampling, selection by unweighted count
        let (_, mut set) = consensus::generate_and_select(j, scene, weights, &params.consensus, rng);
        set.weighted_counts = set
            .hypotheses
            .iter()
            .map(|h| consensus::unweighted_inlier_count(h.as_ref(), scene, &params.consensus))
            .collect();
        let best = consensus::argmax_first(&set.weighted_counts);
        (set.hypotheses[best], set)
    }
}

/// Selected vanishing points are polished by soft-inlier weighted least
/// squares; other model kinds are used as solved.
fn refine_if_vp(
    selected: Option<ModelInstance>,
    scene: &Scene,
    params: &PipelineParams,
) -> Option<ModelInstance> {
    let m = selected?;
    if scene.task != Task::Vp {
        return Some(m);
    }
    let w: Vec<f64> = scene
        .observations
        .iter()
        .map(|x| consensus::soft_inlier_score(m.residual(x), params.consensus.tau, params.consensus.beta))
        .collect();
    Some(refine_vp_weighted(&m, &scene.observations, &w))
}

/// Greedy instance ranking: repeatedly pick the model maximizing unique
/// minus overlapping hard inliers; stop when the margin drops below the
/// minimal set size.
pub fn instance_ranking(
    putative: &[ModelInstance],
    scene: &Scene,
    tau: f64,
    minimal_set_size: usize,
) -> Vec<ModelInstance> {
    let inlier_sets: Vec<Vec<usize>> = putative
        .iter()
        .map(|m| {
            scene
                .observations
                .iter()
                .enumerate()
                .filter(|(_, x)| m.residual(x) < tau)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let n = scene.len();
    let mut covered = vec![false; n];
    let mut remaining: Vec<usize> = (0..putative.len()).collect();
    let mut ranked = Vec::new();
    while !remaining.is_empty() {
        let mut best: Option<(usize, i64)> = None;
        for &idx in &remaining {
            let mut unique = 0i64;
            let mut overlap = 0i64;
            for &i in &inlier_sets[idx] {
                if covered[i] {
                    overlap += 1;
                } else {
                    unique += 1;
                }
            }
            let margin = unique - overlap;
            if best.map_or(true, |(_, b)| margin > b) {
                best = Some((idx, margin));
            }
        }
        let (idx, margin) = best.unwrap();
        if margin < minimal_set_size as i64 {
            break;
        }
        ranked.push(putative[idx]);
        for &i in &inlier_sets[idx] {
            covered[i] = true;
        }
        remaining.retain(|&r| r != idx);
    }
    ranked
}

/// Per-observation labels: nearest model below tau, else the first ranked
/// model below tau_a, else outlier (0).
pub fn cluster_assignment(
    models: &[ModelInstance],
    scene: &Scene,
    tau: f64,
    tau_a: Option<f64>,
) -> Vec<usize> {
    scene
        .observations
        .iter()
        .map(|x| {
            let residuals: Vec<f64> = models.iter().map(|m| m.residual(x)).collect();
            let mut best = 0usize;
            for (j, r) in residuals.iter().enumerate().skip(1) {
                if *r < residuals[best] {
                    best = j;
                }
            }
            if !residuals.is_empty() && residuals[best] < tau {
                return best + 1;
            }
            if let Some(tau_a) = tau_a {
                for (j, r) in residuals.iter().enumerate() {
                    if *r < tau_a {
                        return j + 1;
                    }
                }
            }
            0
        })
        .collect()
}

fn rank_and_assign(
    scene: &Scene,
    putative: &[Option<ModelInstance>],
    params: &PipelineParams,
) -> (Vec<ModelInstance>, Vec<usize>, Vec<usize>) {
    let valid: Vec<ModelInstance> = putative.iter().filter_map(|m| *m).collect();
    let models = instance_ranking(&valid, scene, params.consensus.tau, params.consensus.minimal_set_size);
    let labels = cluster_assignment(&models, scene, params.consensus.tau, params.tau_a);
    let per_model_inliers = models
        .iter()
        .map(|m| {
            scene
                .observations
                .iter()
                .filter(|x| m.residual(x) < params.consensus.tau)
                .count()
        })
        .collect();
    (models, labels, per_model_inliers)
}
