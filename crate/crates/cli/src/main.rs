use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use mpa_core::auca::{AucaConfig, InterpolationSource, LambdaMode, SampleCount};
use mpa_core::bank::{self, Manifest};
use mpa_core::classifier::{self, Optimizer, TrainConfig, UncertainPolicy};
use mpa_core::episodes::{
    ablation_run, assemble_support, lambda_statistics, run_evaluation, sample_episode, EmbeddingBank, EngineConfig,
    PipelineFlags,
};
use mpa_core::extract::{extract_records, load_image_dir, ExtractOptions, SemanticSources};
use mpa_core::hma::{ImageEncoder, JitterParams, ToyEncoder, ViewPlan};
use mpa_core::lmse::{FetchConfig, HashTextEncoder, OfflineGenerator, TextEncoder, VariantCache, VariantGenerator};
use mpa_core::provider::{HttpProvider, ProviderConfig, DEFAULT_PROVIDER_URL};
use mpa_core::synth::{noisy_cluster_bank, synth_bank, NoisyClusterConfig, Regime, VectorSynthConfig};
use mpa_core::{report, EpisodeSpec, MpaError, PrototypeSource, Result};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(name = "mpa", version, about = "Few-shot classification with multi-perspective support enrichment")]
struct Cli {
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Embed a directory of labeled PNG images into a bank file.
    Extract(ExtractArgs),
    /// Evaluate episodes on a bank.
    Eval(EvalArgs),
    /// Run the five-row component ablation.
    Ablate(AblateArgs),
    /// Mean and variance of the uncertainty factor over sampled episodes.
    LambdaStats(LambdaArgs),
    /// Print a bank's header, manifest and record counts.
    Inspect(InspectArgs),
    /// Write a synthetic bank.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct ProviderArgs {
    /// Embedding provider base URL.
    #[arg(long, env = "MPA_PROVIDER_URL", default_value = DEFAULT_PROVIDER_URL)]
    provider_url: String,

    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,

    /// Batch size and concurrent request limit.
    #[arg(long, default_value_t = 4)]
    max_in_flight: usize,

    /// Retries for transient provider failures.
    #[arg(long, default_value_t = 3)]
    retries: u32,

    /// LLM identity recorded in the variant cache.
    #[arg(long, default_value = "default")]
    llm_id: String,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Root directory laid out as <class_name>/<item>.png.
    #[arg(long)]
    images: PathBuf,

    /// JSON with "class_names" (id -> name) and optional "dataset_name".
    #[arg(long)]
    manifest: PathBuf,

    /// Output bank path; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,

    /// Use the deterministic offline encoders instead of the provider.
    #[arg(long)]
    toy_encoder: bool,

    /// Embedding dimension of the offline encoder (at least 192).
    #[arg(long, default_value_t = 192)]
    toy_dim: usize,

    /// Embed augmented views of every image.
    #[arg(long)]
    hma: bool,

    /// Center-crop sizes in pixels.
    #[arg(long, value_delimiter = ',', default_value = "120,170,200")]
    crop_sizes: Vec<u32>,

    /// Rotation angles in degrees.
    #[arg(long, value_delimiter = ',', default_value = "45,90,180,270,315", allow_hyphen_values = true)]
    rotations: Vec<f64>,

    /// Color jitter as brightness,contrast,saturation,hue.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.5,0.5,0.2")]
    jitter: Vec<f64>,

    /// Color-jittered views per image.
    #[arg(long, default_value_t = 1)]
    jitter_samples: usize,

    /// Omit the horizontal-reflection view.
    #[arg(long)]
    no_reflection: bool,

    /// Embed LLM-generated class descriptions.
    #[arg(long)]
    lmse: bool,

    /// Paraphrases requested per class description.
    #[arg(long, default_value_t = 4)]
    n_variants: usize,

    /// Variant cache file.
    #[arg(long, env = "MPA_VARIANT_CACHE")]
    variant_cache: Option<PathBuf>,

    /// Fail instead of using the template description when the LLM is unavailable.
    #[arg(long)]
    no_fallback: bool,

    /// Seed for color-jitter draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args, Debug)]
struct EpisodeArgs {
    /// Bank file.
    #[arg(long)]
    bank: PathBuf,

    #[arg(long, default_value_t = 5)]
    n_way: usize,

    #[arg(long, default_value_t = 1)]
    k_shot: usize,

    /// Queries per class.
    #[arg(long, default_value_t = 15)]
    queries: usize,

    #[arg(long, default_value_t = 100)]
    episodes: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LambdaModeArg {
    AsWritten,
    PairMean,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SourceArg {
    Enriched,
    Raw,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    CountWrong,
    Fallback,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Lbfgs,
    Gd,
}

#[derive(Args, Debug)]
struct EngineArgs {
    /// Interpolation weight range as low,high.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.8")]
    alpha_range: Vec<f64>,

    #[arg(long, value_enum, default_value = "as-written")]
    lambda_mode: LambdaModeArg,

    /// Report the unclamped uncertainty factor (sampling still uses [0, 1]).
    #[arg(long)]
    no_lambda_clamp: bool,

    /// Uncertain samples per episode: "auto" or a count.
    #[arg(long, default_value = "auto")]
    uncertain_samples: String,

    /// Features used for uncertain-class interpolation.
    #[arg(long, value_enum, default_value = "enriched")]
    interpolate: SourceArg,

    /// Features averaged into class prototypes.
    #[arg(long, value_enum, default_value = "enriched")]
    prototype: SourceArg,

    /// Scoring of queries predicted as the uncertain class.
    #[arg(long, value_enum, default_value = "count-wrong")]
    uncertain_policy: PolicyArg,

    /// L2-normalize every feature row.
    #[arg(long)]
    normalize: bool,

    /// L2 penalty on classifier weights.
    #[arg(long, default_value_t = 1.0)]
    l2: f64,

    #[arg(long, default_value_t = 1000)]
    max_iter: usize,

    /// Gradient infinity-norm stopping tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,

    #[arg(long, value_enum, default_value = "lbfgs")]
    optimizer: OptimizerArg,
}

#[derive(Args, Debug)]
struct FlagArgs {
    /// Add semantic description rows to the support set.
    #[arg(long)]
    lmse: bool,

    /// Add augmented view rows to the support set.
    #[arg(long)]
    hma: bool,

    /// Add the adaptive uncertain class.
    #[arg(long)]
    auca: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    episode: EpisodeArgs,

    #[command(flatten)]
    flags: FlagArgs,

    #[command(flatten)]
    engine: EngineArgs,

    /// Run the five-row ablation instead of a single configuration.
    #[arg(long)]
    ablate: bool,

    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Write the classifier trained on episode 0 as JSON.
    #[arg(long)]
    dump_model: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    episode: EpisodeArgs,

    #[command(flatten)]
    engine: EngineArgs,

    /// Write the reports as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LambdaArgs {
    /// Bank files; one result line each.
    #[arg(long, required = true, num_args = 1..)]
    bank: Vec<PathBuf>,

    #[arg(long, default_value_t = 1000)]
    lambda_trials: usize,

    #[arg(long, default_value_t = 5)]
    n_way: usize,

    #[arg(long, default_value_t = 1)]
    k_shot: usize,

    #[arg(long, default_value_t = 15)]
    queries: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    flags: FlagArgs,

    #[command(flatten)]
    engine: EngineArgs,

    /// Write the statistics as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    bank: PathBuf,

    /// Print the manifest and counts as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RegimeArg {
    Separated,
    Clustered,
    /// Toy-encoded ring images with views and aligned semantic rows.
    NoisyImages,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    regime: RegimeArg,

    #[arg(long, default_value_t = 5)]
    n_classes: usize,

    /// Embedding dimension (vector regimes only).
    #[arg(long, default_value_t = 64)]
    dim: usize,

    #[arg(long, default_value_t = 30)]
    items_per_class: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid usage");
            eprintln!("error[UsageError]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::LambdaStats(a) => cmd_lambda(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn usage(msg: impl Into<String>) -> MpaError {
    MpaError::InvalidConfig(msg.into())
}

fn write_json(path: &Path, json: &str) -> Result<()> {
    fs::write(path, json)?;
    info!("wrote {}", path.display());
    Ok(())
}

#[derive(Deserialize)]
struct InputManifest {
    #[serde(default)]
    dataset_name: Option<String>,
    class_names: BTreeMap<u32, String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

fn view_plan(a: &ExtractArgs) -> Result<ViewPlan> {
    let [brightness, contrast, saturation, hue] = a.jitter[..] else {
        return Err(usage("--jitter takes four values: brightness,contrast,saturation,hue"));
    };
    Ok(ViewPlan {
        crop_sizes: a.crop_sizes.clone(),
        rotation_degrees: a.rotations.clone(),
        jitter: JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
        },
        jitter_samples: a.jitter_samples,
        include_reflection: !a.no_reflection,
    })
}

fn cmd_extract(a: ExtractArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest)?;
    let input: InputManifest =
        serde_json::from_str(&text).map_err(|e| MpaError::Format(format!("manifest {}: {e}", a.manifest.display())))?;
    if input.class_names.values().any(|n| n.trim().is_empty()) {
        return Err(MpaError::EmptyClassName);
    }
    let plan = if a.hma { Some(view_plan(&a)?) } else { None };
    if let Some(p) = &plan {
        p.jitter.validate()?;
    }
    let loaded = load_image_dir(
        &a.images,
        &Manifest {
            class_names: input.class_names.clone(),
            ..Manifest::default()
        },
    )?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }

    let provider = if a.toy_encoder {
        None
    } else {
        let cfg = ProviderConfig {
            base_url: a.provider.provider_url.clone(),
            timeout_secs: a.provider.timeout_secs,
            max_in_flight: a.provider.max_in_flight,
            retry_count: a.provider.retries,
            llm_id: a.provider.llm_id.clone(),
            ..ProviderConfig::default()
        };
        let p = HttpProvider::new(cfg)?;
        p.health()?;
        Some(p)
    };
    let toy = ToyEncoder::new(a.toy_dim)?;
    let hash = HashTextEncoder { dim: a.toy_dim };
    let (encoder, text_encoder, generator): (&dyn ImageEncoder, &dyn TextEncoder, &dyn VariantGenerator) =
        match &provider {
            Some(p) => (p, p, p),
            None => (&toy, &hash, &OfflineGenerator),
        };

    let mut cache = match &a.variant_cache {
        Some(path) => VariantCache::open(path)?,
        None => VariantCache::in_memory(),
    };
    let opts = ExtractOptions {
        plan,
        semantic: a.lmse.then_some(FetchConfig {
            n_variants: a.n_variants,
            fallback_enabled: !a.no_fallback,
        }),
        seed: a.seed,
    };
    let sources = a.lmse.then_some(SemanticSources {
        generator,
        encoder: text_encoder,
        cache: &mut cache,
    });
    let manifest_classes = input.class_names.clone();
    let probe = Manifest {
        class_names: manifest_classes.clone(),
        ..Manifest::default()
    };
    let out = extract_records(&loaded.images, &probe, encoder, sources, &opts)?;

    let dataset_name = input.dataset_name.unwrap_or_else(|| {
        a.images
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "images".into())
    });
    let mut metadata = input.metadata;
    metadata.insert("hma".into(), a.hma.to_string());
    metadata.insert("lmse".into(), a.lmse.to_string());
    metadata.insert("seed".into(), a.seed.to_string());
    for (class_id, source) in &out.variant_sources {
        metadata.insert(format!("variants.{class_id}"), format!("{source:?}"));
    }
    let manifest = Manifest {
        dataset_name,
        encoder_id: encoder.encoder_id(),
        class_names: manifest_classes,
        metadata,
    };
    bank::write_bank(&out.records, &manifest, &a.out)?;
    println!(
        "wrote {} records ({} images, {} skipped) to {}",
        out.records.len(),
        loaded.images.len(),
        loaded.warnings.len(),
        a.out.display()
    );
    println!(
        "extraction {:.3}s  augmentation {:.3}s  semantic {:.3}s",
        out.timings.extraction, out.timings.augmentation, out.timings.semantic
    );
    Ok(())
}

fn engine_config(e: &EngineArgs) -> Result<EngineConfig> {
    let [lo, hi] = e.alpha_range[..] else {
        return Err(usage("--alpha-range takes two values: low,high"));
    };
    let sample_count = match e.uncertain_samples.as_str() {
        "auto" => SampleCount::Auto,
        n => SampleCount::Fixed(
            n.parse()
                .map_err(|_| usage(format!("--uncertain-samples must be 'auto' or a count, got {n:?}")))?,
        ),
    };
    let cfg = EngineConfig {
        prototype_source: match e.prototype {
            SourceArg::Enriched => PrototypeSource::Enriched,
            SourceArg::Raw => PrototypeSource::VisualRawOnly,
        },
        l2_normalize: e.normalize,
        uncertain_policy: match e.uncertain_policy {
            PolicyArg::CountWrong => UncertainPolicy::CountWrong,
            PolicyArg::Fallback => UncertainPolicy::FallbackSecondBest,
        },
        train: TrainConfig {
            l2_strength: e.l2,
            max_iterations: e.max_iter,
            gradient_tolerance: e.tol,
            optimizer: match e.optimizer {
                OptimizerArg::Lbfgs => Optimizer::QuasiNewton,
                OptimizerArg::Gd => Optimizer::GradientDescent,
            },
            ..TrainConfig::default()
        },
        auca: AucaConfig {
            alpha_range: (lo, hi),
            sample_count,
            lambda_mode: match e.lambda_mode {
                LambdaModeArg::AsWritten => LambdaMode::AsWritten,
                LambdaModeArg::PairMean => LambdaMode::PairMean,
            },
            lambda_clamp: !e.no_lambda_clamp,
            interpolation_source: match e.interpolate {
                SourceArg::Enriched => InterpolationSource::Enriched,
                SourceArg::Raw => InterpolationSource::RawOnly,
            },
            ..AucaConfig::default()
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn episode_spec(e: &EpisodeArgs) -> Result<EpisodeSpec> {
    let spec = EpisodeSpec {
        n_way: e.n_way,
        k_shot: e.k_shot,
        q_queries: e.queries,
        seed: e.seed,
    };
    spec.validate()?;
    Ok(spec)
}

fn workers(e: &EpisodeArgs) -> usize {
    e.workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn flags(f: &FlagArgs) -> PipelineFlags {
    PipelineFlags::new(f.lmse, f.hma, f.auca)
}

fn print_ablation(bank: &EmbeddingBank, spec: &EpisodeSpec, cfg: &EngineConfig, e: &EpisodeArgs, out: Option<&Path>) -> Result<()> {
    let ab = ablation_run(bank, spec, cfg, e.episodes, workers(e))?;
    println!("{}", report::ablation_table(&ab));
    println!("{}", report::efficiency_table(&ab.rows.iter().collect::<Vec<_>>()));
    if let Some(path) = out {
        write_json(path, &serde_json::to_string_pretty(&ab).expect("report serializes"))?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let spec = episode_spec(&a.episode)?;
    let cfg = engine_config(&a.engine)?;
    let bank = EmbeddingBank::open(&a.episode.bank)?;
    if a.ablate {
        return print_ablation(&bank, &spec, &cfg, &a.episode, a.out.as_deref());
    }
    let f = flags(&a.flags);
    let r = run_evaluation(&bank, &spec, f, &cfg, a.episode.episodes, workers(&a.episode))?;
    println!("{}", report::eval_table(&r));
    println!("{}", report::efficiency_table(&[&r]));
    if let Some(path) = &a.out {
        write_json(path, &r.to_json())?;
    }
    if let Some(path) = &a.dump_model {
        let ep = sample_episode(&bank, &spec, 0)?;
        let (support, _) = assemble_support(&bank, &ep, f, &cfg)?;
        let model = classifier::train(&support.rows, support.n_classes, &cfg.train)?;
        let dump = serde_json::json!({
            "episode_classes": ep.classes,
            "uncertain_label": support.uncertain_label(),
            "train_config": cfg.train,
            "model": model,
        });
        write_json(path, &serde_json::to_string_pretty(&dump).expect("model serializes"))?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let spec = episode_spec(&a.episode)?;
    let cfg = engine_config(&a.engine)?;
    let bank = EmbeddingBank::open(&a.episode.bank)?;
    print_ablation(&bank, &spec, &cfg, &a.episode, a.out.as_deref())
}

fn cmd_lambda(a: LambdaArgs) -> Result<()> {
    let spec = EpisodeSpec {
        n_way: a.n_way,
        k_shot: a.k_shot,
        q_queries: a.queries,
        seed: a.seed,
    };
    spec.validate()?;
    let cfg = engine_config(&a.engine)?;
    let mut rows = Vec::new();
    for path in &a.bank {
        let bank = EmbeddingBank::open(path)?;
        let stats = lambda_statistics(&bank, &spec, flags(&a.flags), &cfg, a.lambda_trials)?;
        rows.push((path.display().to_string(), stats));
    }
    println!("{}", report::lambda_table(&rows));
    println!("variance is the population variance over trials");
    if let Some(path) = &a.out {
        let json: Vec<_> = rows
            .iter()
            .map(|(bank, s)| serde_json::json!({ "bank": bank, "trials": s.lambdas.len(), "mean": s.mean, "variance": s.variance, "lambdas": s.lambdas }))
            .collect();
        write_json(path, &serde_json::to_string_pretty(&json).expect("serializes"))?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let header = bank::read_header(&a.bank)?;
    let bank = EmbeddingBank::open(&a.bank)?;
    let counts = bank.modality_counts();
    if a.json {
        let counts: BTreeMap<String, usize> = counts.iter().map(|(m, n)| (m.to_string(), *n)).collect();
        let json = serde_json::json!({
            "dim": header.dim,
            "record_count": header.record_count,
            "manifest": bank.manifest(),
            "modality_counts": counts,
        });
        println!("{}", serde_json::to_string_pretty(&json).expect("serializes"));
    } else {
        print!("{}", report::inspect_text(&header, bank.manifest(), &counts));
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let (records, manifest) = match a.regime {
        RegimeArg::Separated | RegimeArg::Clustered => synth_bank(&VectorSynthConfig {
            regime: if matches!(a.regime, RegimeArg::Separated) {
                Regime::Separated
            } else {
                Regime::Clustered
            },
            n_classes: a.n_classes,
            dim: a.dim,
            items_per_class: a.items_per_class,
            seed: a.seed,
        })?,
        RegimeArg::NoisyImages => noisy_cluster_bank(
            &NoisyClusterConfig {
                n_classes: a.n_classes,
                items_per_class: a.items_per_class,
                seed: a.seed,
                ..NoisyClusterConfig::default()
            },
            &ViewPlan::default(),
        )?,
    };
    bank::write_bank(&records, &manifest, &a.out)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}
