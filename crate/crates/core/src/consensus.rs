//! Soft inlier scoring, weighted inlier counting, guided minimal-set
//! sampling and per-putative-model hypothesis generation and selection.

use nalgebra::DMatrix;
use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    fmat_seven_point, homography_four_point_dlt, vp_from_lines, MinimalSet, ModelInstance, Task,
};
use crate::scene::Scene;

/// Parameters of the per-putative-model inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusParams {
    /// Inlier threshold in normalized residual units.
    pub tau: f64,
    /// Softness of the soft inlier measure.
    pub beta: f64,
    /// Hypotheses generated per putative model.
    pub num_hypotheses: usize,
    /// Softmax scale for probabilistic selection (training only).
    pub alpha_s: f64,
    /// Minimal set size.
    pub minimal_set_size: usize,
}

impl ConsensusParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.tau > 0.0) {
            return Err("tau must be > 0".into());
        }
        if !(self.beta > 0.0) {
            return Err("beta must be > 0".into());
        }
        if self.num_hypotheses < 1 {
            return Err("num_hypotheses must be >= 1".into());
        }
        if !(self.alpha_s > 0.0) {
            return Err("alpha_s must be > 0".into());
        }
        Ok(())
    }
}

/// Normalized sample and inlier weights for one scene: `log_p` is N x M*
/// (columns sum to 1 after exp), `log_q` is N x (M*+1) (rows sum to 1
/// after exp; the last column holds the outlier weights).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrices {
    pub log_p: DMatrix<f64>,
    pub log_q: DMatrix<f64>,
}

impl WeightMatrices {
    pub fn num_observations(&self) -> usize {
        self.log_p.nrows()
    }

    pub fn num_putative(&self) -> usize {
        self.log_p.ncols()
    }
}

/// The S hypotheses generated for one putative model, with their minimal
/// sets, weighted inlier counts and summed log sample probabilities.
#[derive(Debug, Clone)]
pub struct HypothesisSet {
    pub hypotheses: Vec<Option<ModelInstance>>,
    pub minimal_sets: Vec<MinimalSet>,
    pub weighted_counts: Vec<f64>,
    pub log_sample_prob: Vec<f64>,
}

/// Soft inlier measure: `1 / (1 + exp(beta * (d / tau - 1)))`.
/// Monotone decreasing in `d`, equals 1/2 at `d = tau`.
pub fn soft_inlier_score(d: f64, tau: f64, beta: f64) -> f64 {
    1.0 / (1.0 + (beta * (d / tau - 1.0)).exp())
}

/// Weighted inlier count of a hypothesis for putative model `j`:
/// soft inlier scores weighted by the predicted inlier weights of column j.
/// A degenerate hypothesis counts 0.
pub fn weighted_inlier_count(
    hypothesis: Option<&ModelInstance>,
    j: usize,
    scene: &Scene,
    weights: &WeightMatrices,
    params: &ConsensusParams,
) -> f64 {
    let Some(h) = hypothesis else {
        return 0.0;
    };
    scene
        .observations
        .iter()
        .enumerate()
        .map(|(i, x)| {
            soft_inlier_score(h.residual(x), params.tau, params.beta) * weights.log_q[(i, j)].exp()
        })
        .sum()
}

/// Plain soft inlier count, used only in the unweighted-selection ablation.
pub fn unweighted_inlier_count(
    hypothesis: Option<&ModelInstance>,
    scene: &Scene,
    params: &ConsensusParams,
) -> f64 {
    let Some(h) = hypothesis else {
        return 0.0;
    };
    scene
        .observations
        .iter()
        .map(|x| soft_inlier_score(h.residual(x), params.tau, params.beta))
        .sum()
}

/// Categorical sampler over observation indices with precomputed cumulative
/// weights. Falls back to uniform when the column carries no mass.
struct ColumnSampler {
    cumulative: Vec<f64>,
    log_prob: Vec<f64>,
}

impl ColumnSampler {
    fn new(weights: &WeightMatrices, j: usize) -> Self {
        let n = weights.num_observations();
        let probs: Vec<f64> = (0..n).map(|i| weights.log_p[(i, j)].exp()).collect();
        let total: f64 = probs.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            let lp = (1.0 / n as f64).ln();
            return ColumnSampler {
                cumulative: (1..=n).map(|i| i as f64 / n as f64).collect(),
                log_prob: vec![lp; n],
            };
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p / total;
                acc
            })
            .collect();
        let log_prob = probs.iter().map(|p| (p / total).ln()).collect();
        ColumnSampler { cumulative, log_prob }
    }

    fn draw(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rand::distributions::Uniform::new(0.0, 1.0).sample(rng);
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&u).unwrap())
        {
            Ok(i) | Err(i) => i.min(self.cumulative.len() - 1),
        }
    }
}

/// Draws C observation indices i.i.d. from the sample-weight column of
/// putative model `j`. Returns the set and its summed log probability.
pub fn sample_minimal_set(
    j: usize,
    weights: &WeightMatrices,
    c: usize,
    rng: &mut ChaCha8Rng,
) -> (MinimalSet, f64) {
    let sampler = ColumnSampler::new(weights, j);
    let mut indices = Vec::with_capacity(c);
    let mut log_prob = 0.0;
    for _ in 0..c {
        let i = sampler.draw(rng);
        log_prob += sampler.log_prob[i];
        indices.push(i);
    }
    (MinimalSet { indices }, log_prob)
}

/// Solves a minimal set for the scene's task. The seven-point solver can
/// return up to three candidates; the best by weighted inlier count is
/// retained so each minimal set occupies exactly one hypothesis slot.
pub fn solve_minimal_set(
    set: &MinimalSet,
    j: usize,
    scene: &Scene,
    weights: &WeightMatrices,
    params: &ConsensusParams,
) -> Option<ModelInstance> {
    let obs: Vec<&crate::geometry::Observation> =
        set.indices.iter().map(|&i| &scene.observations[i]).collect();
    match scene.task {
        Task::Vp => vp_from_lines(obs[0], obs[1]),
        Task::Homography => homography_four_point_dlt(&obs),
        Task::Fundamental => {
            let candidates = fmat_seven_point(&obs);
            let mut best: Option<(f64, ModelInstance)> = None;
            for m in candidates {
                let count = weighted_inlier_count(Some(&m), j, scene, weights, params);
                if best.as_ref().map_or(true, |(c, _)| count > *c) {
                    best = Some((count, m));
                }
            }
            best.map(|(_, m)| m)
        }
    }
}

/// The inner loop of the fitting algorithm for one putative model: sample S
/// minimal sets, solve each, and select the hypothesis with the largest
/// weighted inlier count (ties broken by lowest index).
pub fn generate_and_select(
    j: usize,
    scene: &Scene,
    weights: &WeightMatrices,
    params: &ConsensusParams,
    rng: &mut ChaCha8Rng,
) -> (Option<ModelInstance>, HypothesisSet) {
    let s = params.num_hypotheses;
    let mut set = HypothesisSet {
        hypotheses: Vec::with_capacity(s),
        minimal_sets: Vec::with_capacity(s),
        weighted_counts: Vec::with_capacity(s),
        log_sample_prob: Vec::with_capacity(s),
    };
    for _ in 0..s {
        let (minimal, log_prob) = sample_minimal_set(j, weights, params.minimal_set_size, rng);
        let hypothesis = solve_minimal_set(&minimal, j, scene, weights, params);
        let count = weighted_inlier_count(hypothesis.as_ref(), j, scene, weights, params);
        set.minimal_sets.push(minimal);
        set.hypotheses.push(hypothesis);
        set.weighted_counts.push(count);
        set.log_sample_prob.push(log_prob);
    }
    let best = argmax_first(&set.weighted_counts);
    (set.hypotheses[best], set)
}

/// Index of the maximum, lowest index on ties.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax over `alpha_s * weighted_counts`, computed with max subtraction.
pub fn selection_distribution(weighted_counts: &[f64], alpha_s: f64) -> Vec<f64> {
    let max = weighted_counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = weighted_counts
        .iter()
        .map(|c| (alpha_s * (c - max)).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Deterministic per-putative-model RNG substream: a counter-mixed stream
/// derived from the scene seed so results are independent of thread
/// scheduling.
pub fn substream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    // SplitMix64 step over the combined seed
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}
