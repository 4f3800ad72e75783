//! Shared setup for the fit benchmarks: a large synthetic vanishing-point
//! scene (N = 2000 observations) and pipeline parameters with 24 putative
//! model slots, sized so per-slot parallelism dominates the wall time.

use parsac_core::datagen::{generate_scene, GenConfig};
use parsac_core::geometry::Task;
use parsac_core::pipeline::PipelineParams;
use parsac_core::scene::Scene;

/// 3 vanishing points x 500 segments + 25% outliers = 2000 observations.
pub fn large_scene() -> Scene {
    let cfg = GenConfig {
        count: 1,
        model_count: (3, 3),
        points_per_model: (500, 500),
        noise_sigma_px: 1.0,
        outlier_rate: 0.25,
        seed: 17,
        ..GenConfig::defaults_for(Task::Vp)
    };
    generate_scene(&cfg, 0)
}

pub fn bench_params() -> PipelineParams {
    let mut params = PipelineParams::defaults_for(Task::Vp);
    params.m_star = 24;
    params
}
