//! Self-contained gradient checks: the analytic backward pass against
//! central finite differences, and the score-function estimator against the
//! finite-difference gradient of an exactly enumerated expected loss.

use nalgebra::DMatrix;
use rand::Rng;

use crate::consensus::{
    self, selection_distribution, substream_rng, ConsensusParams, HypothesisSet, WeightMatrices,
};
use crate::geometry::{CameraIntrinsics, MinimalSet, ModelInstance, Observation, Task};
use crate::scene::Scene;
use crate::training::{draw_loss, episode_gradient, Episode, LossKind, TrainParams};
use crate::weights::{
    init_params, network_backward, network_forward, Mode, NetConfig, NetworkParams,
};

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub worst_param: String,
    pub checked: usize,
    pub passed: bool,
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.3e} <= {:.0e}, {} params, worst: {})",
            self.name,
            if self.passed { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.tolerance,
            self.checked,
            self.worst_param,
        )
    }
}

fn compare_grads(
    name: &str,
    net: &NetworkParams,
    analytic: &crate::weights::GradientBundle,
    mut eval: impl FnMut(&NetworkParams) -> f64,
    steps: &[f64],
    tolerance: f64,
) -> CheckReport {
    let mut worst = (0.0f64, String::from("none"));
    let mut checked = 0;
    for (ti, tensor) in net.tensors.iter().enumerate() {
        if !tensor.trainable {
            continue;
        }
        for i in 0..tensor.len() {
            let an = analytic.grads[ti][i];
            // central differences are truncation-limited at large steps and
            // roundoff-limited at small ones; take the best over the ladder
            let mut rel = f64::INFINITY;
            let mut skipped = true;
            for &step in steps {
                let mut plus = net.clone();
                plus.tensors[ti].data[i] += step;
                let mut minus = net.clone();
                minus.tensors[ti].data[i] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let denom = fd.abs().max(an.abs());
                if denom < 1e-7 {
                    continue;
                }
                skipped = false;
                rel = rel.min((fd - an).abs() / denom);
            }
            if skipped {
                continue;
            }
            checked += 1;
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", tensor.name));
            }
        }
    }
    CheckReport {
        name: name.into(),
        max_rel_err: worst.0,
        tolerance,
        worst_param: worst.1,
        checked,
        passed: worst.0 < tolerance,
    }
}

/// Backward pass vs central finite differences on a tiny network (N=6,
/// M*=2) with a random linear objective over the log weight outputs.
/// `corrupt` perturbs one analytic gradient entry and exists as a negative
/// control for the check itself.
pub fn backward_finite_difference_check(seed: u64, corrupt: f64) -> CheckReport {
    let mut rng = substream_rng(seed, 0x6d);
    let n = 6;
    let m_star = 2;
    let observations: Vec<Observation> = (0..n)
        .map(|_| {
            Observation::segment(
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
                rng.gen_range(-0.4..0.4),
            )
        })
        .collect();
    let scene = Scene {
        task: Task::Vp,
        width: 1024.0,
        height: 1024.0,
        observations,
        gt_labels: None,
        gt_models: None,
        intrinsics: None,
        seed,
    };
    let net = init_params(
        NetConfig {
            m_star,
            width: 8,
            blocks: 2,
        },
        seed,
    );
    let gp = DMatrix::from_fn(n, m_star, |_, _| rng.gen_range(-1.0..1.0));
    let gq = DMatrix::from_fn(n, m_star + 1, |_, _| rng.gen_range(-1.0..1.0));
    let (_, _, cache) = network_forward(&net, &scene, Mode::Train);
    let mut analytic = network_backward(&net, &cache, &gp, &gq);
    if corrupt != 0.0 {
        analytic.grads[0][0] += corrupt;
    }
    let eval = |params: &NetworkParams| {
        let (log_p, log_q, _) = network_forward(params, &scene, Mode::Train);
        log_p.component_mul(&gp).sum() + log_q.component_mul(&gq).sum()
    };
    compare_grads(
        "backward-vs-finite-difference",
        &net,
        &analytic,
        eval,
        &[1e-3, 1e-4, 1e-5],
        1e-4,
    )
}

fn micro_scene() -> Scene {
    Scene {
        task: Task::Vp,
        width: 1024.0,
        height: 1024.0,
        observations: vec![
            Observation::segment(-0.2, 0.1, 0.2, 0.1),
            Observation::segment(-0.2, -0.1, 0.2, -0.1),
            Observation::segment(0.1, -0.2, 0.1, 0.2),
            Observation::segment(-0.1, -0.2, -0.1, 0.2),
        ],
        gt_labels: None,
        gt_models: None,
        intrinsics: Some(CameraIntrinsics::from_focal(1.0, 0.0, 0.0)),
        seed: 0,
    }
}

fn micro_pipeline() -> crate::pipeline::PipelineParams {
    crate::pipeline::PipelineParams {
        m_star: 1,
        tau_a: None,
        consensus: ConsensusParams {
            tau: 1e-3,
            beta: 5.0,
            num_hypotheses: 2,
            alpha_s: 10.0,
            minimal_set_size: 2,
        },
        weighted_selection: true,
    }
}

fn micro_train() -> TrainParams {
    TrainParams {
        k: 1,
        k_tilde: 1,
        learning_rate: 1e-4,
        epochs: 1,
        lr_drop_epoch: 1,
        batch_size: 1,
        gamma: 0.3,
        n_max: 512,
        loss: LossKind::SelfPlain,
    }
}

/// Enumerates the joint outcome space of the micro instance (two minimal
/// sets of two indices out of four observations, then one of two
/// hypotheses selected), yielding per outcome: probability, hypothesis set
/// and selected index.
fn enumerate_outcomes(
    scene: &Scene,
    pipeline: &crate::pipeline::PipelineParams,
    weights: &WeightMatrices,
) -> Vec<(f64, HypothesisSet, usize)> {
    let n = scene.len();
    let p: Vec<f64> = (0..n).map(|i| weights.log_p[(i, 0)].exp()).collect();
    let mut out = Vec::new();
    for i1 in 0..n {
        for i2 in 0..n {
            for i3 in 0..n {
                for i4 in 0..n {
                    let prob = p[i1] * p[i2] * p[i3] * p[i4];
                    let minimal_sets = vec![
                        MinimalSet {
                            indices: vec![i1, i2],
                        },
                        MinimalSet {
                            indices: vec![i3, i4],
                        },
                    ];
                    let hypotheses: Vec<Option<ModelInstance>> = minimal_sets
                        .iter()
                        .map(|ms| {
                            consensus::solve_minimal_set(ms, 0, scene, weights, &pipeline.consensus)
                        })
                        .collect();
                    let weighted_counts: Vec<f64> = hypotheses
                        .iter()
                        .map(|h| {
                            consensus::weighted_inlier_count(
                                h.as_ref(),
                                0,
                                scene,
                                weights,
                                &pipeline.consensus,
                            )
                        })
                        .collect();
                    let pi = selection_distribution(&weighted_counts, pipeline.consensus.alpha_s);
                    for s in 0..2 {
                        out.push((
                            prob * pi[s],
                            HypothesisSet {
                                hypotheses: hypotheses.clone(),
                                minimal_sets: minimal_sets.clone(),
                                weighted_counts: weighted_counts.clone(),
                                log_sample_prob: vec![0.0; 2],
                            },
                            s,
                        ));
                    }
                }
            }
        }
    }
    out
}

fn exact_expected_loss(
    scene: &Scene,
    pipeline: &crate::pipeline::PipelineParams,
    train: &TrainParams,
    weights: &WeightMatrices,
) -> f64 {
    enumerate_outcomes(scene, pipeline, weights)
        .into_iter()
        .map(|(prob, set, s)| {
            let models: Vec<ModelInstance> = set.hypotheses[s].iter().copied().collect();
            prob * draw_loss(scene, pipeline, train, &models).unwrap()
        })
        .sum()
}

/// Score-function estimator, exhaustively averaged over every outcome of
/// the micro instance, against central finite differences of the exactly
/// computed expected loss.
pub fn estimator_enumeration_check(seed: u64) -> CheckReport {
    let scene = micro_scene();
    let pipeline = micro_pipeline();
    let train = micro_train();
    let net = init_params(
        NetConfig {
            m_star: 1,
            width: 4,
            blocks: 1,
        },
        seed,
    );
    let (log_p, log_q, cache) = network_forward(&net, &scene, Mode::Train);
    let weights = WeightMatrices { log_p, log_q };
    let n = scene.len();
    let mut dp = DMatrix::zeros(n, 1);
    let mut dq = DMatrix::zeros(n, 2);
    for (prob, set, s) in enumerate_outcomes(&scene, &pipeline, &weights) {
        let episode = Episode {
            sets: vec![vec![set]],
            draws: vec![vec![vec![s]]],
        };
        let (odp, odq, _) =
            episode_gradient(&scene, &pipeline, &train, &weights, &episode, Some(0.0)).unwrap();
        dp += odp * prob;
        dq += odq * prob;
    }
    let analytic = network_backward(&net, &cache, &dp, &dq);
    let eval = |params: &NetworkParams| {
        let (log_p, log_q, _) = network_forward(params, &scene, Mode::Train);
        let w = WeightMatrices { log_p, log_q };
        exact_expected_loss(&scene, &pipeline, &train, &w)
    };
    compare_grads(
        "estimator-vs-enumerated-expectation",
        &net,
        &analytic,
        eval,
        &[1e-4, 1e-5],
        1e-3,
    )
}
