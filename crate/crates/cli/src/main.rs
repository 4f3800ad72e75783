//! Command-line surface: generate | fit | train | eval | gradcheck | bench.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use parsac_core::consensus::substream_rng;
use parsac_core::datagen::{generate_scene, GenConfig};
use parsac_core::geometry::Task;
use parsac_core::gradcheck;
use parsac_core::io::{
    compute_aggregates, load_results, load_scene, save_results, save_scene, verify_aggregates,
    Aggregates, GenerateManifest, ResultsFile, SceneResult, SCENE_FORMAT_VERSION,
};
use parsac_core::pipeline::{parsac_fit, PipelineParams};
use parsac_core::training::{train_epoch, AdamState, TrainParams};
use parsac_core::weights::{
    init_params, load_params, save_params, NetConfig, NeuralProvider, OracleProvider,
    UniformProvider, WeightProvider,
};
use parsac_core::Scene;

#[derive(Parser)]
#[command(name = "parsac", version, about = "Parallel robust multi-model fitting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene files from a config.
    Generate(GenerateArgs),
    /// Fit models to scenes and write a results file.
    Fit(FitArgs),
    /// Train the neural weight predictor.
    Train(TrainArgs),
    /// Evaluate results or a provider on labeled scenes.
    Eval(EvalArgs),
    /// Run the analytic-gradient self checks.
    Gradcheck(GradcheckArgs),
    /// Time the fitting pipeline across thread counts.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ProviderKind {
    Uniform,
    Oracle,
    Neural,
}

impl std::fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ProviderKind::Uniform => "uniform",
            ProviderKind::Oracle => "oracle",
            ProviderKind::Neural => "neural",
        };
        write!(f, "{name}")
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Path to a GenConfig JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for scene files and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Scene files, or a directory containing a generation manifest.
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderKind::Uniform)]
    provider: ProviderKind,
    /// Weights file for the neural provider.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Optional PipelineParams JSON overriding the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (falls back to PARSAC_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Results file path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainConfigFile {
    #[serde(default)]
    pipeline: Option<PipelineParams>,
    train: TrainParams,
    train_scenes: Vec<PathBuf>,
    #[serde(default)]
    val_scenes: Vec<PathBuf>,
    #[serde(default)]
    width: Option<usize>,
    #[serde(default)]
    blocks: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Path to a training config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Final weights path; the best-validation checkpoint gets a `.best`
    /// suffix and the optimizer state a `.adam.json` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Scene files, or a directory containing a generation manifest.
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
    /// Existing results file to re-check instead of fitting.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderKind::Uniform)]
    provider: ProviderKind,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Metrics to report (me, se, te, auc); defaults to all applicable.
    #[arg(long, value_delimiter = ',')]
    metrics: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Optional machine-readable report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(required = true)]
    scenes: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = ProviderKind::Uniform)]
    provider: ProviderKind,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated thread counts, e.g. 1,4,8.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    threads: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn resolve_threads(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("PARSAC_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().context("building the thread pool")
}

fn load_scene_set(paths: &[PathBuf]) -> Result<(Vec<PathBuf>, Vec<Scene>)> {
    let mut files = Vec::new();
    for path in paths {
        if path.is_dir() {
            let manifest_path = path.join("manifest.json");
            if manifest_path.exists() {
                let manifest: GenerateManifest =
                    serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
                        .context("parsing manifest.json")?;
                files.extend(manifest.scenes.iter().map(|s| path.join(s)));
            } else {
                let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                    .collect();
                entries.sort();
                files.extend(entries);
            }
        } else {
            files.push(path.clone());
        }
    }
    if files.is_empty() {
        bail!("no scene files found");
    }
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        scenes.push(load_scene(f).with_context(|| format!("loading {}", f.display()))?);
    }
    let task = scenes[0].task;
    if let Some(bad) = scenes.iter().position(|s| s.task != task) {
        bail!(
            "scene task mismatch: {} is {:?} but {} is {:?}",
            files[0].display(),
            task,
            files[bad].display(),
            scenes[bad].task
        );
    }
    Ok((files, scenes))
}

fn pipeline_params(config: &Option<PathBuf>, task: Task) -> Result<PipelineParams> {
    let params = match config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .context("parsing pipeline config")?,
        None => PipelineParams::defaults_for(task),
    };
    Ok(params)
}

fn make_provider(
    kind: ProviderKind,
    weights: &Option<PathBuf>,
    params: &PipelineParams,
) -> Result<Box<dyn WeightProvider>> {
    match kind {
        ProviderKind::Uniform => Ok(Box::new(UniformProvider {
            m_star: params.m_star,
        })),
        ProviderKind::Oracle => Ok(Box::new(OracleProvider {
            m_star: params.m_star,
        })),
        ProviderKind::Neural => {
            let path = weights
                .as_ref()
                .ok_or_else(|| anyhow!("--provider neural requires --weights"))?;
            let net = load_params(path).with_context(|| format!("loading {}", path.display()))?;
            if net.config.m_star != params.m_star {
                bail!(
                    "weights predict {} putative models but the pipeline expects {}",
                    net.config.m_star,
                    params.m_star
                );
            }
            Ok(Box::new(NeuralProvider { params: net }))
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let mut config: GenConfig = serde_json::from_str(&std::fs::read_to_string(&args.config)?)
        .context("parsing generation config")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|field| anyhow!("invalid config: {field}"))?;
    std::fs::create_dir_all(&args.out)?;
    let mut names = Vec::with_capacity(config.count);
    for i in 0..config.count {
        let scene = generate_scene(&config, i);
        let name = format!("scene_{i:04}.json");
        save_scene(&scene, &args.out.join(&name))?;
        names.push(name);
    }
    let manifest = GenerateManifest {
        format_version: SCENE_FORMAT_VERSION,
        config,
        scenes: names,
    };
    std::fs::write(
        args.out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!("wrote {} scenes to {}", manifest.scenes.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn fit_scenes(
    files: &[PathBuf],
    scenes: &[Scene],
    provider: &dyn WeightProvider,
    params: &PipelineParams,
    seed: u64,
) -> Result<Vec<SceneResult>> {
    let mut out = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let fit = parsac_fit(scene, provider, params, seed.wrapping_add(i as u64))
            .with_context(|| format!("fitting {}", files[i].display()))?;
        let name = files[i]
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("scene_{i}"));
        out.push(SceneResult::from_fit(&name, &fit));
    }
    Ok(out)
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode> {
    let (files, scenes) = load_scene_set(&args.scenes)?;
    let task = scenes[0].task;
    let params = pipeline_params(&args.config, task)?;
    let provider = make_provider(args.provider, &args.weights, &params)?;
    let pool = build_pool(resolve_threads(args.threads))?;
    let per_scene = pool.install(|| fit_scenes(&files, &scenes, provider.as_ref(), &params, args.seed))?;
    let results = ResultsFile::new(
        task,
        args.seed,
        &args.provider.to_string(),
        &params,
        per_scene,
        &scenes,
    )?;
    save_results(&results, &args.out)?;
    print_aggregates(&results.aggregates);
    Ok(ExitCode::SUCCESS)
}

fn print_aggregates(agg: &Aggregates) {
    if let Some(v) = agg.mean_me {
        println!("mean ME     {v:.6}");
    }
    if let Some(v) = agg.median_me {
        println!("median ME   {v:.6}");
    }
    if let Some(v) = agg.mean_se {
        println!("mean SE     {v:.6}");
    }
    if let Some(v) = agg.mean_te {
        println!("mean TE     {v:.6}");
    }
    for (cutoff, auc) in &agg.auc {
        println!("AUC@{cutoff}°     {auc:.6}");
    }
}

/// Validation score: AUC@5° for VP (higher is better), mean ME otherwise
/// (lower is better). Returned so that larger is always better.
fn validation_score(
    scenes: &[Scene],
    provider: &dyn WeightProvider,
    params: &PipelineParams,
    seed: u64,
) -> Result<Option<f64>> {
    if scenes.is_empty() {
        return Ok(None);
    }
    let files: Vec<PathBuf> = (0..scenes.len())
        .map(|i| PathBuf::from(format!("val_{i}")))
        .collect();
    let per_scene = fit_scenes(&files, scenes, provider, params, seed)?;
    let agg = compute_aggregates(&per_scene, scenes)?;
    if scenes[0].task == Task::Vp {
        Ok(agg.auc.iter().find(|(c, _)| *c == 5.0).map(|(_, v)| *v))
    } else {
        Ok(agg.mean_me.map(|me| -me))
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config: TrainConfigFile = serde_json::from_str(&std::fs::read_to_string(&args.config)?)
        .context("parsing training config")?;
    let (_, train_scenes) = load_scene_set(&config.train_scenes)?;
    let val_scenes = if config.val_scenes.is_empty() {
        vec![]
    } else {
        load_scene_set(&config.val_scenes)?.1
    };
    let task = train_scenes[0].task;
    let pipeline = config
        .pipeline
        .unwrap_or_else(|| PipelineParams::defaults_for(task));
    let train = config.train;
    train.validate().map_err(|e| anyhow!("invalid train config: {e}"))?;
    let mut net_cfg = NetConfig::new(pipeline.m_star);
    if let Some(w) = config.width {
        net_cfg.width = w;
    }
    if let Some(b) = config.blocks {
        net_cfg.blocks = b;
    }
    let pool = build_pool(resolve_threads(args.threads))?;
    let mut net = init_params(net_cfg, args.seed);
    let mut state = AdamState::new(&net);
    let mut rng = substream_rng(args.seed, 0x7261);
    let best_path = args.out.with_extension("best");
    let mut best_score = f64::NEG_INFINITY;
    pool.install(|| -> Result<()> {
        for epoch in 1..=train.epochs {
            let stats = train_epoch(
                &train_scenes,
                &mut net,
                &mut state,
                &pipeline,
                &train,
                epoch,
                &mut rng,
            )?;
            if !stats.mean_loss.is_finite() {
                bail!("training diverged at epoch {epoch}; last good checkpoint retained");
            }
            let score = validation_score(
                &val_scenes,
                &NeuralProvider { params: net.clone() },
                &pipeline,
                args.seed,
            )?;
            match score {
                Some(s) => {
                    println!("epoch {epoch}: loss {:.6} val {:.6}", stats.mean_loss, s);
                    if s > best_score {
                        best_score = s;
                        save_params(&net, &best_path)?;
                    }
                }
                None => println!("epoch {epoch}: loss {:.6}", stats.mean_loss),
            }
        }
        Ok(())
    })?;
    save_params(&net, &args.out)?;
    if best_score == f64::NEG_INFINITY {
        // no validation set: the final checkpoint doubles as the best one
        save_params(&net, &best_path)?;
    }
    std::fs::write(
        args.out.with_extension("adam.json"),
        serde_json::to_string(&state)?,
    )?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn validate_metric_flags(metrics: &[String], task: Task) -> Result<()> {
    for m in metrics {
        let ok = match m.as_str() {
            "me" => true,
            "se" => task == Task::Fundamental,
            "te" => task == Task::Homography,
            "auc" => task == Task::Vp,
            other => bail!("unknown metric '{other}' (expected me, se, te or auc)"),
        };
        if !ok {
            bail!("metric '{m}' is not defined for the {task:?} task");
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (files, scenes) = load_scene_set(&args.scenes)?;
    let task = scenes[0].task;
    validate_metric_flags(&args.metrics, task)?;
    let results = match &args.results {
        Some(path) => {
            let results = load_results(path)?;
            verify_aggregates(&results, &scenes)
                .map_err(|e| anyhow!("results file inconsistent with scenes: {e}"))?;
            println!("aggregates verified against per-scene entries");
            results
        }
        None => {
            let params = pipeline_params(&args.config, task)?;
            let provider = make_provider(args.provider, &args.weights, &params)?;
            let pool = build_pool(resolve_threads(args.threads))?;
            let per_scene = pool
                .install(|| fit_scenes(&files, &scenes, provider.as_ref(), &params, args.seed))?;
            ResultsFile::new(
                task,
                args.seed,
                &args.provider.to_string(),
                &params,
                per_scene,
                &scenes,
            )?
        }
    };
    print_aggregates(&results.aggregates);
    if let Some(out) = &args.out {
        save_results(&results, out)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let backward = gradcheck::backward_finite_difference_check(args.seed, 0.0);
    let estimator = gradcheck::estimator_enumeration_check(args.seed);
    println!("{backward}");
    println!("{estimator}");
    if backward.passed && estimator.passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(anyhow!("gradient check failed"))
    }
}

#[derive(Debug, Serialize)]
struct BenchRow {
    threads: usize,
    mean_ms: f64,
    median_ms: f64,
    speedup: f64,
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let (files, scenes) = load_scene_set(&args.scenes)?;
    let task = scenes[0].task;
    let params = pipeline_params(&args.config, task)?;
    let provider = make_provider(args.provider, &args.weights, &params)?;
    let mut rows: Vec<BenchRow> = Vec::new();
    for &threads in &args.threads {
        let pool = build_pool(Some(threads))?;
        let per_scene =
            pool.install(|| fit_scenes(&files, &scenes, provider.as_ref(), &params, args.seed))?;
        let mut times: Vec<f64> = per_scene.iter().map(|r| r.elapsed_seconds * 1e3).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let median = times[times.len() / 2];
        let baseline = rows.first().map_or(mean, |r| r.mean_ms);
        rows.push(BenchRow {
            threads,
            mean_ms: mean,
            median_ms: median,
            speedup: baseline / mean,
        });
    }
    println!("{:>8} {:>12} {:>12} {:>8}", "threads", "mean_ms", "median_ms", "speedup");
    for r in &rows {
        println!(
            "{:>8} {:>12.3} {:>12.3} {:>8.2}",
            r.threads, r.mean_ms, r.median_ms, r.speedup
        );
    }
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_string_pretty(&rows)?)?;
    }
    Ok(ExitCode::SUCCESS)
}
