//! Task losses, the score-function gradient estimator with mean baseline,
//! the self-supervised losses, the Adam optimizer and the epoch loop.

use nalgebra::DMatrix;
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::{
    self, selection_distribution, soft_inlier_score, HypothesisSet, WeightMatrices,
};
use crate::geometry::ModelInstance;
use crate::metrics::{hungarian_assign, misclassification_error, vp_pair_angle_deg};
use crate::pipeline::{cluster_assignment, instance_ranking, PipelineParams};
use crate::scene::Scene;
use crate::weights::{
    network_backward, network_forward, pad_or_subsample, update_running_stats, ForwardCache,
    GradientBundle, Mode, NetworkParams,
};

/// Unmatched-model fill value for the VP Hungarian loss, degrees.
pub const VP_MAX_PAIR_LOSS_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    HungarianVp,
    Me,
    SelfWeighted,
    SelfPlain,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainParams {
    /// Hypothesis-set samples K per scene.
    pub k: usize,
    /// Model-set samples per hypothesis set.
    pub k_tilde: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Learning rate drops by 10x after this epoch (1-based).
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    /// Exponential decay of the self-supervised weighted loss.
    pub gamma: f64,
    /// Observation cap per scene during training.
    pub n_max: usize,
    pub loss: LossKind,
}

impl TrainParams {
    pub fn defaults_for(task: crate::geometry::Task) -> Self {
        let loss = match task {
            crate::geometry::Task::Vp => LossKind::HungarianVp,
            _ => LossKind::Me,
        };
        TrainParams {
            k: 8,
            k_tilde: 64,
            learning_rate: 1e-4,
            epochs: 2000,
            lr_drop_epoch: 1500,
            batch_size: 64,
            gamma: 0.3,
            n_max: 512,
            loss,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.k < 1 || self.k_tilde < 1 {
            return Err("k and k_tilde must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be > 0".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err("gamma must lie in (0, 1)".into());
        }
        if self.n_max < 1 {
            return Err("n_max must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("loss requires ground-truth labels")]
    MissingLabels,
    #[error("loss requires ground-truth models and intrinsics")]
    MissingModels,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Minimal assignment cost between predicted and GT models. When there are
/// more predictions than GT models only the first |gt| predictions enter;
/// each unmatched GT model adds `max_loss`.
pub fn task_loss_hungarian(
    models: &[ModelInstance],
    gt_models: &[ModelInstance],
    pair_loss: &dyn Fn(&ModelInstance, &ModelInstance) -> f64,
    max_loss: f64,
) -> f64 {
    let m = gt_models.len();
    if m == 0 {
        return 0.0;
    }
    let n = models.len().min(m);
    if n == 0 {
        return m as f64 * max_loss;
    }
    let cost = DMatrix::from_fn(n, m, |i, j| pair_loss(&models[i], &gt_models[j]));
    let (_, total) = hungarian_assign(&cost);
    total + (m - n) as f64 * max_loss
}

/// Misclassification fraction under the identity label mapping (ranked
/// label k vs GT label k, no permutation search).
pub fn task_loss_me(labels: &[usize], gt_labels: &[usize]) -> f64 {
    misclassification_error(labels, gt_labels)
}

/// Exponentially weighted soft inlier coverage:
/// `-sum_i sum_j rho_ij * gamma^j` with `rho_ij` the best soft inlier score
/// of observation i over the first j ranked models.
pub fn self_supervised_weighted_loss(
    models: &[ModelInstance],
    scene: &Scene,
    tau: f64,
    beta: f64,
    gamma: f64,
) -> f64 {
    if models.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    for x in &scene.observations {
        let mut rho = 0.0f64;
        let mut decay = 1.0;
        for m in models {
            decay *= gamma;
            rho = rho.max(soft_inlier_score(m.residual(x), tau, beta));
            loss -= rho * decay;
        }
    }
    loss
}

/// Negative size of the union of hard inlier sets at `tau`.
pub fn self_supervised_plain_loss(models: &[ModelInstance], scene: &Scene, tau: f64) -> f64 {
    let covered = scene
        .observations
        .iter()
        .filter(|x| models.iter().any(|m| m.residual(x) < tau))
        .count();
    -(covered as f64)
}

/// One scene's sampled episode: K hypothesis-set draws (each M* hypothesis
/// sets) and K*K_tilde model-set draws (selected hypothesis index per slot).
#[derive(Debug, Clone)]
pub struct Episode {
    pub sets: Vec<Vec<HypothesisSet>>,
    pub draws: Vec<Vec<Vec<usize>>>,
}

/// Samples an episode: K hypothesis sets via the pipeline's inner loop,
/// then K_tilde stochastic selections per set from the softmax selection
/// distribution.
pub fn sample_episode(
    scene: &Scene,
    pipeline: &PipelineParams,
    train: &TrainParams,
    weights: &WeightMatrices,
    rng: &mut ChaCha8Rng,
) -> Episode {
    let m_star = pipeline.m_star;
    let base: u64 = rng.gen();
    let mut sets = Vec::with_capacity(train.k);
    for k in 0..train.k {
        let mut slot_sets = Vec::with_capacity(m_star);
        for j in 0..m_star {
            let mut sub = consensus::substream_rng(base, (k * m_star + j) as u64);
            let (_, set) =
                consensus::generate_and_select(j, scene, weights, &pipeline.consensus, &mut sub);
            slot_sets.push(set);
        }
        sets.push(slot_sets);
    }
    let mut draws = Vec::with_capacity(train.k);
    for slot_sets in &sets {
        let mut set_draws = Vec::with_capacity(train.k_tilde);
        for _ in 0..train.k_tilde {
            let mut selected = Vec::with_capacity(m_star);
            for set in slot_sets {
                let probs =
                    selection_distribution(&set.weighted_counts, pipeline.consensus.alpha_s);
                let dist = WeightedIndex::new(&probs).expect("softmax probabilities positive");
                selected.push(dist.sample(rng));
            }
            set_draws.push(selected);
        }
        draws.push(set_draws);
    }
    Episode { sets, draws }
}

/// Task loss of one model-set draw: ranks the selected hypotheses and
/// evaluates the configured loss.
pub fn draw_loss(
    scene: &Scene,
    pipeline: &PipelineParams,
    train: &TrainParams,
    selected: &[ModelInstance],
) -> Result<f64, TrainError> {
    let ranked = instance_ranking(
        selected,
        scene,
        pipeline.consensus.tau,
        pipeline.consensus.minimal_set_size,
    );
    match train.loss {
        LossKind::HungarianVp => {
            let gt = scene.gt_models.as_ref().ok_or(TrainError::MissingModels)?;
            let k = scene.intrinsics.ok_or(TrainError::MissingModels)?;
            let k_inv = k.k.try_inverse().ok_or(TrainError::MissingModels)?;
            let pair = move |a: &ModelInstance, b: &ModelInstance| -> f64 {
                match (a, b) {
                    (ModelInstance::Vp(va), ModelInstance::Vp(vb)) => {
                        vp_pair_angle_deg(va, vb, &k_inv)
                    }
                    _ => VP_MAX_PAIR_LOSS_DEG,
                }
            };
            Ok(task_loss_hungarian(&ranked, gt, &pair, VP_MAX_PAIR_LOSS_DEG))
        }
        LossKind::Me => {
            let gt = scene.gt_labels.as_ref().ok_or(TrainError::MissingLabels)?;
            let labels =
                cluster_assignment(&ranked, scene, pipeline.consensus.tau, pipeline.tau_a);
            Ok(task_loss_me(&labels, gt))
        }
        LossKind::SelfWeighted => Ok(self_supervised_weighted_loss(
            &ranked,
            scene,
            pipeline.consensus.tau,
            pipeline.consensus.beta,
            train.gamma,
        )),
        LossKind::SelfPlain => Ok(self_supervised_plain_loss(
            &ranked,
            scene,
            pipeline.consensus.tau,
        )),
    }
}

/// Score-function gradients of the expected loss with respect to the
/// normalized log weights. The upstream coefficient of each log sample
/// probability and log selection probability is `(loss - baseline) / (K *
/// K_tilde)`; sampling terms of a hypothesis set accumulate the
/// coefficients of all its selection draws. `baseline` defaults to the
/// mean of all draw losses.
pub fn episode_gradient(
    scene: &Scene,
    pipeline: &PipelineParams,
    train: &TrainParams,
    weights: &WeightMatrices,
    episode: &Episode,
    baseline: Option<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<f64>), TrainError> {
    let n = scene.len();
    let m_star = pipeline.m_star;
    let total_draws = (episode.sets.len() * episode.draws[0].len()) as f64;
    let mut losses = Vec::new();
    for (k, set_draws) in episode.draws.iter().enumerate() {
        for selected in set_draws {
            let models: Vec<ModelInstance> = selected
                .iter()
                .enumerate()
                .filter_map(|(j, &s)| episode.sets[k][j].hypotheses[s])
                .collect();
            losses.push(draw_loss(scene, pipeline, train, &models)?);
        }
    }
    let b = baseline.unwrap_or_else(|| losses.iter().sum::<f64>() / losses.len() as f64);
    let mut d_log_p = DMatrix::zeros(n, m_star);
    let mut d_log_q = DMatrix::zeros(n, m_star + 1);
    let mut loss_iter = losses.iter();
    for (k, set_draws) in episode.draws.iter().enumerate() {
        // per-slot selection coefficients a_s and the summed set coefficient
        let mut set_coeff = 0.0;
        let s_hyp = pipeline.consensus.num_hypotheses;
        let mut slot_a: Vec<Vec<f64>> = vec![vec![0.0; s_hyp]; m_star];
        for selected in set_draws {
            let coeff = (loss_iter.next().unwrap() - b) / total_draws;
            set_coeff += coeff;
            for (j, &s_star) in selected.iter().enumerate() {
                let set = &episode.sets[k][j];
                let probs =
                    selection_distribution(&set.weighted_counts, pipeline.consensus.alpha_s);
                for s in 0..s_hyp {
                    let delta = if s == s_star { 1.0 } else { 0.0 };
                    slot_a[j][s] += coeff * pipeline.consensus.alpha_s * (delta - probs[s]);
                }
            }
        }
        for (j, set) in episode.sets[k].iter().enumerate() {
            // sampling terms: multiplicity of each drawn index
            for minimal in &set.minimal_sets {
                for &i in &minimal.indices {
                    d_log_p[(i, j)] += set_coeff;
                }
            }
            // selection terms chain through the weighted counts into log q
            for (s, hyp) in set.hypotheses.iter().enumerate() {
                let a = slot_a[j][s];
                if a == 0.0 {
                    continue;
                }
                let Some(h) = hyp else { continue };
                for (i, x) in scene.observations.iter().enumerate() {
                    let soft = soft_inlier_score(
                        h.residual(x),
                        pipeline.consensus.tau,
                        pipeline.consensus.beta,
                    );
                    d_log_q[(i, j)] += a * soft * weights.log_q[(i, j)].exp();
                }
            }
        }
    }
    Ok((d_log_p, d_log_q, losses))
}

/// Full REINFORCE step for one scene: train-mode forward, episode sampling,
/// score-function gradients, backward through the network. Returns the
/// parameter gradients, the mean draw loss and the forward cache (for
/// running-statistics updates).
pub fn reinforce_gradient(
    scene: &Scene,
    pipeline: &PipelineParams,
    net: &NetworkParams,
    train: &TrainParams,
    rng: &mut ChaCha8Rng,
) -> Result<(GradientBundle, f64, ForwardCache), TrainError> {
    train.validate().map_err(TrainError::InvalidParams)?;
    let (log_p, log_q, cache) = network_forward(net, scene, Mode::Train);
    let weights = WeightMatrices { log_p, log_q };
    let episode = sample_episode(scene, pipeline, train, &weights, rng);
    let (d_log_p, d_log_q, losses) =
        episode_gradient(scene, pipeline, train, &weights, &episode, None)?;
    let bundle = network_backward(net, &cache, &d_log_p, &d_log_q);
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    Ok((bundle, mean_loss, cache))
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &NetworkParams) -> Self {
        AdamState {
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
        }
    }
}

/// One Adam update. Non-trainable tensors (running statistics) are never
/// touched. A non-finite gradient bundle skips the step and returns false.
pub fn adam_step(
    params: &mut NetworkParams,
    bundle: &GradientBundle,
    lr: f64,
    state: &mut AdamState,
) -> bool {
    if !bundle.is_finite() {
        return false;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (idx, tensor) in params.tensors.iter_mut().enumerate() {
        if !tensor.trainable {
            continue;
        }
        let g = &bundle.grads[idx];
        for (i, w) in tensor.data.iter_mut().enumerate() {
            let m = &mut state.m[idx][i];
            let v = &mut state.v[idx][i];
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g[i];
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    true
}

/// Learning rate for a 1-based epoch index: drops by 10x after
/// `lr_drop_epoch`.
pub fn effective_lr(train: &TrainParams, epoch: usize) -> f64 {
    if epoch > train.lr_drop_epoch {
        train.learning_rate * 0.1
    } else {
        train.learning_rate
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub steps: usize,
    pub skipped_steps: usize,
}

/// One training epoch: shuffles scenes, processes batches of `batch_size`
/// with a fixed-order gradient reduction, one Adam step per batch. `epoch`
/// is 1-based and drives the learning-rate schedule.
pub fn train_epoch(
    dataset: &[Scene],
    net: &mut NetworkParams,
    state: &mut AdamState,
    pipeline: &PipelineParams,
    train: &TrainParams,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    train.validate().map_err(TrainError::InvalidParams)?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let lr = effective_lr(train, epoch);
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut steps = 0;
    let mut skipped = 0;
    for batch in order.chunks(train.batch_size) {
        let mut batch_bundle = GradientBundle::zeros_like(net);
        let scale = 1.0 / batch.len() as f64;
        for &idx in batch {
            let scene = pad_or_subsample(&dataset[idx], train.n_max, rng);
            let (bundle, loss, cache) = reinforce_gradient(&scene, pipeline, net, train, rng)?;
            update_running_stats(net, &cache);
            batch_bundle.add_scaled(&bundle, scale);
            loss_sum += loss;
            loss_count += 1;
        }
        if adam_step(net, &batch_bundle, lr, state) {
            steps += 1;
        } else {
            skipped += 1;
        }
    }
    Ok(EpochStats {
        mean_loss: loss_sum / loss_count as f64,
        steps,
        skipped_steps: skipped,
    })
}
