//! Parallel robust multi-model fitting: minimal solvers, guided hypothesis
//! sampling and selection, instance ranking, a trainable weight predictor,
//! evaluation metrics and synthetic scene generation.

pub mod consensus;
pub mod datagen;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod training;
pub mod weights;

pub use consensus::{ConsensusParams, WeightMatrices};
pub use datagen::{generate_scene, inject_noise, inject_outliers, GenConfig};
pub use geometry::{CameraIntrinsics, MinimalSet, ModelInstance, Observation, Task};
pub use io::{load_results, load_scene, save_results, save_scene, ResultsFile, SceneRecord};
pub use pipeline::{parsac_fit, FitResult, PipelineParams};
pub use scene::Scene;
pub use training::{
    adam_step, reinforce_gradient, train_epoch, AdamState, EpochStats, LossKind, TrainParams,
};
pub use weights::{NeuralProvider, OracleProvider, UniformProvider, WeightProvider};
