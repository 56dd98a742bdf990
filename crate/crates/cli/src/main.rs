//! Command line front end. Every subcommand runs offline with the
//! built-in deterministic backends; transport TOML files switch any
//! stage to an external JSON backend.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use emokg_core::clients::TransportConfig;
use emokg_core::cues::prompt::{compile_prompt, LmmClient, PromptMode};
use emokg_core::cues::{
    calibrate, default_conflict_rules, filter_bank, select_cues, ConflictRule, SceneStructure,
    DEFAULT_LAMBDA, DEFAULT_TAU, DEFAULT_TOP_K,
};
use emokg_core::dsee::denoiser::{
    AnalyticDenoiser, ClientDenoiser, StructuredDenoiser, ZeroDenoiser,
};
use emokg_core::dsee::{edit, Denoiser, EditConfig, LatentTrajectory, NoiseSchedule};
use emokg_core::kg::demo::demo_graph;
use emokg_core::kg::jsonl::{load_graph, save_graph};
use emokg_core::kg::retrieval::{retrieve_subgraph, RetrievalQuery, Subgraph, SubgraphDoc};
use emokg_core::kg::{EmotionLabels, KnowledgeGraph, NodeKind};
use emokg_core::metrics;
use emokg_core::pipeline::{
    build_env, image_to_latent, latent_to_image, load_config, load_manifest, run_batch,
    PipelineConfig, RunItem,
};
use emokg_core::providers::{
    ClassifierClient, EmbeddingProvider, JsonClassifier, JsonEmbedder, StubClassifier,
    StubEmbedder,
};
use emokg_core::region::backbone::{ClientBackbone, TinyBackbone};
use emokg_core::region::decoder::{train_decoder, DecoderParams};
use emokg_core::region::{
    aggregate_attention, focus_features, load_gray, load_mask_png, localize, save_gray,
    save_mask_png, Backbone, LayerSet,
};

#[derive(Parser)]
#[command(name = "emokg", version, about = "Knowledge-graph guided image emotion editing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and query emotion knowledge graphs
    #[command(subcommand)]
    Kg(KgCommand),
    /// Localize the affective region of an image
    #[command(subcommand)]
    Era(EraCommand),
    /// Select, calibrate, and filter visual emotion cues
    #[command(subcommand)]
    Cues(CuesCommand),
    /// Run mask-constrained latent edits
    #[command(subcommand)]
    Edit(EditCommand),
    /// Score edited images against their sources
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the full editing pipeline
    #[command(subcommand)]
    Pipeline(PipelineCommand),
    /// Materialize a self-contained offline example workspace
    #[command(subcommand)]
    Demo(DemoCommand),
}

#[derive(Subcommand)]
enum KgCommand {
    /// Validate JSONL records and write the canonical graph file
    Build(KgBuildArgs),
    /// Retrieve reasoning paths from start nodes to target emotions
    Query(KgQueryArgs),
}

#[derive(Args)]
struct KgBuildArgs {
    /// JSONL node/edge records to load
    #[arg(long, conflicts_with = "demo")]
    records: Option<PathBuf>,
    /// Use the bundled demo graph instead of a records file
    #[arg(long)]
    demo: bool,
    /// Embedding width for --demo
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KgQueryArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Start node ids, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    start: Vec<String>,
    /// Target emotion labels or node ids, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    emotion: Vec<String>,
    /// Neighbor count for completion
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Output JSON file; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EraCommand {
    /// Predict the affective mask for an image
    Localize(EraLocalizeArgs),
}

#[derive(Args)]
struct EraLocalizeArgs {
    #[arg(long)]
    image: PathBuf,
    /// "test" for the built-in backbone, or a transport TOML file
    #[arg(long, default_value = "test")]
    backbone: String,
    /// Layers whose CLS attention is averaged, comma separated
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Trained decoder weights; a seeded decoder is used when omitted
    #[arg(long)]
    decoder: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    hidden: usize,
    /// Patch feature width the decoder expects
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    /// Side length of the upsampled mask
    #[arg(long, default_value_t = 64)]
    map_size: usize,
    /// Layer count reported for a client backbone
    #[arg(long, default_value_t = 4)]
    layer_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Mask PNG to write; a .box.json sidecar lands next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CuesCommand {
    /// Score, calibrate, and filter cues from a retrieved subgraph
    Select(CuesSelectArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Template,
    Lmm,
}

impl From<ModeArg> for PromptMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Template => PromptMode::Template,
            ModeArg::Lmm => PromptMode::Lmm,
        }
    }
}

#[derive(Args)]
struct CuesSelectArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Subgraph JSON produced by `kg query`
    #[arg(long)]
    subgraph: PathBuf,
    /// JSON array holding the image embedding
    #[arg(long, conflicts_with = "image")]
    image_emb: Option<PathBuf>,
    /// Image to embed with the deterministic stub embedder
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    emotion: String,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// Conflict rules JSON; the built-in set when omitted
    #[arg(long)]
    rules: Option<PathBuf>,
    /// Scene structure JSON; an empty scene when omitted
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cue bank JSON to write
    #[arg(long)]
    out: PathBuf,
    /// Also compile the editing prompt into this file
    #[arg(long)]
    prompt_out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Template)]
    mode: ModeArg,
    /// Transport TOML for the rewrite model (mode lmm)
    #[arg(long)]
    lmm: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EditCommand {
    /// Invert, reconstruct, and edit a latent under a mask
    Run(EditRunArgs),
}

#[derive(Args)]
struct EditRunArgs {
    #[arg(long)]
    image: PathBuf,
    /// Binary mask PNG; white pixels are edited
    #[arg(long)]
    mask: PathBuf,
    /// Editing condition; unconditional when omitted
    #[arg(long)]
    prompt: Option<String>,
    /// "zero", "analytic", "structured", or a transport TOML file
    #[arg(long, default_value = "structured")]
    backend: String,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale
    #[arg(long, default_value_t = 7.5)]
    w: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda_att: f64,
    /// Final steps that skip fusion and injection
    #[arg(long, default_value_t = 5)]
    harmonize: usize,
    #[arg(long, default_value_t = 32)]
    latent_res: usize,
    #[arg(long, default_value_t = 4)]
    channels: usize,
    /// Signal variance for the analytic backend
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    injection_layers: Vec<usize>,
    /// Keep fractional mask values instead of rebinarizing
    #[arg(long)]
    soft_mask: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Edited image PNG to write
    #[arg(long)]
    out: PathBuf,
    /// Write per-trajectory state statistics as JSON
    #[arg(long)]
    dump_trajectory: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Compute proximity and emotion metrics over a manifest
    Report(EvalReportArgs),
}

#[derive(Args)]
struct EvalReportArgs {
    /// CSV with source_path, edited_path, target_emotion, method
    #[arg(long)]
    manifest: PathBuf,
    /// "stub" or a transport TOML file
    #[arg(long, default_value = "stub")]
    provider: String,
    /// "stub" or a transport TOML file; classification off when omitted
    #[arg(long)]
    classifier: Option<String>,
    /// Embedding width
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for report.csv and report.md
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCommand {
    /// Edit a single image toward target emotions
    Run(PipelineRunArgs),
    /// Run a manifest of items, isolating per-item failures
    Batch(PipelineBatchArgs),
}

#[derive(Args)]
struct PipelineRunArgs {
    #[arg(long)]
    image: PathBuf,
    /// Target emotion labels, comma separated
    #[arg(long, value_delimiter = ',', required = true)]
    emotion: Vec<String>,
    /// Pipeline TOML; falls back to $EMOKG_CONFIG, then defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Original caption of the image
    #[arg(long)]
    o_prompt: Option<String>,
    /// Retrieval start node ids, comma separated
    #[arg(long, value_delimiter = ',')]
    starts: Vec<String>,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineBatchArgs {
    /// CSV with image_path, emotions, optional o_prompt and starts
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline TOML; falls back to $EMOKG_CONFIG, then defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; overrides the config value
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum DemoCommand {
    /// Write a graph, images, manifest, config, and rules to a directory
    Init(DemoInitArgs),
}

#[derive(Args)]
struct DemoInitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Kg(KgCommand::Build(args)) => kg_build(args),
        Command::Kg(KgCommand::Query(args)) => kg_query(args),
        Command::Era(EraCommand::Localize(args)) => era_localize(args),
        Command::Cues(CuesCommand::Select(args)) => cues_select(args),
        Command::Edit(EditCommand::Run(args)) => edit_run(args),
        Command::Eval(EvalCommand::Report(args)) => eval_report(args),
        Command::Pipeline(PipelineCommand::Run(args)) => pipeline_run(args),
        Command::Pipeline(PipelineCommand::Batch(args)) => pipeline_batch(args),
        Command::Demo(DemoCommand::Init(args)) => demo_init(args),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| {
        e.downcast::<PartialFailure>()
            .map(|pf| {
                eprintln!("{pf}");
                ExitCode::from(2)
            })
            .or_else(Err)
    })
}

/// Items failed but the batch itself completed and was written out.
#[derive(Debug)]
struct PartialFailure {
    failed: usize,
    total: usize,
}

impl std::fmt::Display for PartialFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} of {} items failed", self.failed, self.total)
    }
}

impl std::error::Error for PartialFailure {}

fn read_transport(path: &Path) -> Result<TransportConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading transport config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing transport config {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn make_backbone(spec: &str, layer_count: usize, seed: u64) -> Result<Box<dyn Backbone>> {
    if spec == "test" {
        return Ok(Box::new(TinyBackbone::new(seed)));
    }
    let transport = read_transport(Path::new(spec))?;
    Ok(Box::new(ClientBackbone::from_config(&transport, layer_count)?))
}

fn make_denoiser(
    spec: &str,
    sigma2: f64,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn Denoiser>> {
    Ok(match spec {
        "zero" => Box::new(ZeroDenoiser),
        "analytic" => Box::new(AnalyticDenoiser::new(sigma2, schedule.clone())),
        "structured" => Box::new(StructuredDenoiser::new(seed)),
        path => Box::new(ClientDenoiser::from_config(&read_transport(Path::new(path))?)?),
    })
}

fn kg_build(args: KgBuildArgs) -> Result<()> {
    let graph = match (&args.records, args.demo) {
        (Some(path), _) => load_graph(path)
            .with_context(|| format!("loading records from {}", path.display()))?,
        (None, true) => demo_graph(args.embed_dim),
        (None, false) => bail!("pass --records <file> or --demo"),
    };
    save_graph(&graph, &args.out)
        .with_context(|| format!("writing graph to {}", args.out.display()))?;
    println!(
        "wrote {} ({} nodes, {} edges)",
        args.out.display(),
        graph.node_count(),
        graph.edge_count()
    );
    Ok(())
}

/// Accept an emotion as a Mikels label (matched against node text) or
/// directly as an emotion node id.
fn emotion_node_id(graph: &KnowledgeGraph, label: &str) -> Result<String> {
    if let Some(node) = graph.emotion_node(label) {
        return Ok(node.id.clone());
    }
    if let Some(node) = graph.node(label) {
        if node.kind == NodeKind::Emotion {
            return Ok(node.id.clone());
        }
    }
    bail!("no emotion node for {label:?}")
}

fn kg_query(args: KgQueryArgs) -> Result<()> {
    let graph = load_graph(&args.graph)
        .with_context(|| format!("loading graph {}", args.graph.display()))?;
    let targets = args
        .emotion
        .iter()
        .map(|e| emotion_node_id(&graph, e))
        .collect::<Result<Vec<_>>>()?;
    let query = RetrievalQuery {
        starts: args.start.clone(),
        targets,
        k: args.k,
    };
    let subgraph = retrieve_subgraph(&graph, &query)?;
    let doc = subgraph.to_doc();
    match &args.out {
        Some(path) => {
            write_json(path, &doc)?;
            let completed = subgraph.paths.iter().filter(|p| p.completed_from.is_some()).count();
            println!(
                "wrote {} ({} paths, {} via completion)",
                path.display(),
                subgraph.paths.len(),
                completed
            );
        }
        None => println!("{}", serde_json::to_string_pretty(&doc)?),
    }
    Ok(())
}

fn era_localize(args: EraLocalizeArgs) -> Result<()> {
    let backbone = make_backbone(&args.backbone, args.layer_count, args.seed)?;
    let decoder = match &args.decoder {
        Some(path) => DecoderParams::load_json(path)?,
        None => DecoderParams::seeded(
            args.input_dim,
            args.hidden,
            args.map_size,
            args.map_size,
            args.seed,
        ),
    };
    let layers = LayerSet::new(args.layers.clone())?;
    let mask = localize(backbone.as_ref(), &args.image, &layers, &decoder, args.threshold)?;
    save_mask_png(&mask.binary, &args.out)?;
    let area = mask.binary.iter().filter(|&&b| b).count();
    let sidecar = args.out.with_extension("box.json");
    write_json(
        &sidecar,
        &serde_json::json!({
            "bbox": mask.bbox,
            "area": area,
            "threshold": args.threshold,
        }),
    )?;
    println!(
        "wrote {} and {} (area {area} px, bbox {:?})",
        args.out.display(),
        sidecar.display(),
        mask.bbox
    );
    Ok(())
}

fn cues_select(args: CuesSelectArgs) -> Result<()> {
    let graph = load_graph(&args.graph)
        .with_context(|| format!("loading graph {}", args.graph.display()))?;
    let doc: SubgraphDoc = serde_json::from_str(
        &fs::read_to_string(&args.subgraph)
            .with_context(|| format!("reading subgraph {}", args.subgraph.display()))?,
    )?;
    let subgraph = Subgraph::from_doc(doc);
    let embedding: Vec<f64> = match (&args.image_emb, &args.image) {
        (Some(path), _) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("reading embedding {}", path.display()))?,
        )?,
        (None, Some(image)) => {
            let dim = graph.embed_dim().unwrap_or(64);
            StubEmbedder::new(dim, args.seed).embed_image(image)?
        }
        (None, None) => bail!("pass --image-emb <json> or --image <png>"),
    };
    let scene: SceneStructure = match &args.scene {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("reading scene {}", path.display()))?,
        )?,
        None => SceneStructure {
            objects: Vec::new(),
            scene: None,
            o_prompt: String::new(),
        },
    };
    let rules: Vec<ConflictRule> = match &args.rules {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("reading rules {}", path.display()))?,
        )?,
        None => default_conflict_rules(),
    };
    let pool = select_cues(
        &graph,
        &subgraph,
        &embedding,
        &args.emotion,
        args.lambda,
        args.k,
        None,
    )?;
    let pool = calibrate(&pool, &scene, &rules);
    let bank = filter_bank(&pool, args.tau, &scene, &rules)?;
    write_json(&args.out, &bank)?;
    println!(
        "wrote {} ({} admitted, {} rejected)",
        args.out.display(),
        bank.admitted.len(),
        bank.rejected.len()
    );
    if let Some(prompt_path) = &args.prompt_out {
        let lmm_client = match &args.lmm {
            Some(path) => Some(emokg_core::clients::JsonLmm::new(&read_transport(path)?)?),
            None => None,
        };
        let prompt = compile_prompt(
            &bank,
            &scene,
            &args.emotion,
            args.mode.into(),
            graph.labels(),
            lmm_client.as_ref().map(|l| l as &dyn LmmClient),
        )?;
        fs::write(prompt_path, format!("{}\n", prompt.text))
            .with_context(|| format!("writing {}", prompt_path.display()))?;
        println!("wrote {}", prompt_path.display());
    }
    Ok(())
}

fn trajectory_stats(trajectory: &LatentTrajectory) -> serde_json::Value {
    let states: Vec<serde_json::Value> = trajectory
        .states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let n = s.len() as f64;
            let l2 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean = s.sum() / n;
            let min = s.iter().copied().fold(f64::INFINITY, f64::min);
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            serde_json::json!({"index": i, "l2": l2, "mean": mean, "min": min, "max": max})
        })
        .collect();
    serde_json::json!({
        "kind": trajectory.path_kind,
        "states": states,
        "recorded_maps": trajectory.maps.len(),
    })
}

fn edit_run(args: EditRunArgs) -> Result<()> {
    let gray = load_gray(&args.image)?;
    let (h, w) = gray.dim();
    let mask_bits = load_mask_png(&args.mask)?;
    let mask = Array2::from_shape_fn(mask_bits.dim(), |ij| if mask_bits[ij] { 1.0 } else { 0.0 });
    let schedule = NoiseSchedule::scaled_linear(args.steps, 0.00085, 0.012)?;
    let denoiser = make_denoiser(&args.backend, args.sigma2, args.seed, &schedule)?;
    let latent = image_to_latent(&gray, args.latent_res, args.channels);
    let cfg = EditConfig {
        guidance_scale: args.w,
        lambda_att: args.lambda_att,
        harmonize_steps: args.harmonize,
        injection_layers: args.injection_layers.clone(),
        soft_mask: args.soft_mask,
        record_maps: false,
    };
    let outcome = edit(
        denoiser.as_ref(),
        &schedule,
        &latent,
        args.prompt.as_deref(),
        &mask,
        &cfg,
    )?;
    let edited = latent_to_image(&outcome.final_latent, h, w);
    save_gray(&edited, &args.out)?;
    println!("wrote {} ({} steps, backend {})", args.out.display(), args.steps, args.backend);
    if let Some(path) = &args.dump_trajectory {
        write_json(
            path,
            &serde_json::json!({
                "inversion": trajectory_stats(&outcome.inversion),
                "reconstruction": trajectory_stats(&outcome.reconstruction),
                "editing": trajectory_stats(&outcome.editing),
            }),
        )?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn eval_report(args: EvalReportArgs) -> Result<()> {
    let labels = EmotionLabels::mikels();
    let provider: Box<dyn EmbeddingProvider> = if args.provider == "stub" {
        Box::new(StubEmbedder::new(args.dim, args.seed))
    } else {
        Box::new(JsonEmbedder::new(
            &read_transport(Path::new(&args.provider))?,
            args.dim,
        )?)
    };
    let classifier: Option<Box<dyn ClassifierClient>> = match args.classifier.as_deref() {
        None => None,
        Some("stub") => Some(Box::new(StubClassifier::new(labels.clone(), args.seed))),
        Some(path) => Some(Box::new(JsonClassifier::new(&read_transport(Path::new(
            path,
        ))?)?)),
    };
    let report = metrics::report(
        &args.manifest,
        provider.as_ref(),
        classifier.as_deref(),
        &labels,
        args.out.as_deref(),
    )?;
    let overall = &report.overall;
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.4}"),
        None => "-".to_string(),
    };
    println!(
        "rows {}  mean_i_prox {:.4}  mean_tea {}  acc8 {}  acc2 {}",
        overall.count,
        overall.mean_i_prox,
        fmt_opt(overall.mean_tea),
        fmt_opt(overall.acc8),
        fmt_opt(overall.acc2),
    );
    for (method, agg) in &report.per_method {
        println!(
            "  {method}: rows {}  mean_i_prox {:.4}  mean_tea {}",
            agg.count,
            agg.mean_i_prox,
            fmt_opt(agg.mean_tea),
        );
    }
    if let Some(dir) = &args.out {
        println!("wrote {} and {}", dir.join("report.csv").display(), dir.join("report.md").display());
    }
    Ok(())
}

fn resolve_config(path: Option<&Path>) -> Result<PipelineConfig> {
    if let Some(p) = path {
        return load_config(p).with_context(|| format!("loading config {}", p.display()));
    }
    if let Ok(env_path) = std::env::var("EMOKG_CONFIG") {
        if !env_path.is_empty() {
            return load_config(Path::new(&env_path))
                .with_context(|| format!("loading config from EMOKG_CONFIG={env_path}"));
        }
    }
    Ok(PipelineConfig::default())
}

fn print_summary(summary: &emokg_core::pipeline::RunSummary, run_dir: &Path) {
    println!(
        "{} items: {} succeeded, {} failed (run dir {})",
        summary.total,
        summary.succeeded,
        summary.failed,
        run_dir.display()
    );
    for f in &summary.failures {
        println!("  {} failed at {}: {}", f.id, f.stage, f.error);
    }
    let timings: Vec<String> = summary
        .mean_timings_ms
        .iter()
        .map(|(stage, t)| format!("{stage} {t:.1}ms"))
        .collect();
    if !timings.is_empty() {
        println!("mean stage timings: {}", timings.join(", "));
    }
}

fn pipeline_run(args: PipelineRunArgs) -> Result<()> {
    let cfg = resolve_config(args.config.as_deref())?;
    let env = build_env(&cfg)?;
    let item = RunItem {
        image: args.image.clone(),
        emotions: args.emotion.clone(),
        o_prompt: args.o_prompt.clone(),
        starts: args.starts.clone(),
    };
    let summary = run_batch(std::slice::from_ref(&item), &cfg, &env, &args.out)?;
    print_summary(&summary, &args.out);
    if summary.failed > 0 {
        let f = &summary.failures[0];
        bail!("item failed at {}: {}", f.stage, f.error);
    }
    let record_path = args.out.join("item_000/record.json");
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(&record_path)?)?;
    if let Some(prompt) = record.get("prompt").and_then(|v| v.as_str()) {
        println!("prompt: {prompt}");
    }
    if let Some(edited) = record.get("edited_path").and_then(|v| v.as_str()) {
        println!("edited: {}", args.out.join(edited).display());
    }
    Ok(())
}

fn pipeline_batch(args: PipelineBatchArgs) -> Result<()> {
    let mut cfg = resolve_config(args.config.as_deref())?;
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    let items = load_manifest(&args.manifest)?;
    let env = build_env(&cfg)?;
    let summary = run_batch(&items, &cfg, &env, &args.out)?;
    print_summary(&summary, &args.out);
    if summary.failed > 0 {
        return Err(PartialFailure {
            failed: summary.failed,
            total: summary.total,
        }
        .into());
    }
    Ok(())
}

fn demo_image(h: usize, w: usize, variant: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let fy = y as f64 / (h - 1) as f64;
        let fx = x as f64 / (w - 1) as f64;
        match variant {
            0 => {
                let dy = fy - 0.3;
                let dx = fx - 0.3;
                let blob = (-18.0 * (dy * dy + dx * dx)).exp();
                0.2 + 0.7 * blob
            }
            1 => {
                let band = if (0.4..0.6).contains(&fy) { 0.45 } else { 0.0 };
                0.15 + 0.5 * fx + band
            }
            _ => 0.25 + 0.55 * fy * (1.0 - 0.4 * fx),
        }
        .clamp(0.0, 1.0)
    })
}

/// Region each demo image should edit, used as the decoder target.
fn demo_target(size: usize, variant: usize) -> Array2<f64> {
    Array2::from_shape_fn((size, size), |(y, x)| {
        let fy = y as f64 / (size - 1) as f64;
        let fx = x as f64 / (size - 1) as f64;
        let inside = match variant {
            0 => {
                let dy = fy - 0.3;
                let dx = fx - 0.3;
                (dy * dy + dx * dx).sqrt() < 0.28
            }
            1 => (0.4..0.6).contains(&fy),
            _ => fy > 0.6,
        };
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

fn demo_init(args: DemoInitArgs) -> Result<()> {
    fs::create_dir_all(args.out.join("images"))
        .with_context(|| format!("creating {}", args.out.display()))?;
    let out_abs = fs::canonicalize(&args.out)?;

    let graph = demo_graph(args.embed_dim);
    let graph_path = out_abs.join("graph.jsonl");
    save_graph(&graph, &graph_path)?;

    write_json(&out_abs.join("rules.json"), &default_conflict_rules())?;

    let images = [
        ("forest_dog.png", 0),
        ("street_bench.png", 1),
        ("beach_waves.png", 2),
    ];
    for (name, variant) in images {
        save_gray(&demo_image(48, 48, variant), &out_abs.join("images").join(name))?;
    }

    let map_size = 32;
    let backbone = TinyBackbone::new(args.seed);
    let layers = LayerSet::new(vec![2, 3])?;
    let mut dataset = Vec::new();
    for (name, variant) in images {
        let out = backbone.forward(&out_abs.join("images").join(name))?;
        let m_patch = aggregate_attention(&out, &layers)?;
        let g = focus_features(&out, &m_patch)?;
        dataset.push((g, demo_target(map_size, variant)));
    }
    let init = DecoderParams::seeded(16, 8, map_size, map_size, args.seed);
    let (decoder, trace) = train_decoder(&dataset, init, 300, 2.0)?;
    let decoder_path = out_abs.join("decoder.json");
    decoder.save_json(&decoder_path)?;

    let manifest = "\
image_path,emotions,o_prompt,starts
images/forest_dog.png,fear,a dog resting in a forest,forest;dog
images/street_bench.png,sadness,a bench on a quiet street,street;bench;trash_can
images/beach_waves.png,awe,waves rolling onto a beach,beach;waves
";
    fs::write(out_abs.join("manifest.csv"), manifest)?;

    let mut cfg = PipelineConfig::default();
    cfg.seed = args.seed;
    cfg.graph.path = graph_path.display().to_string();
    cfg.graph.embed_dim = args.embed_dim;
    cfg.cues.rules_path = Some(out_abs.join("rules.json").display().to_string());
    cfg.era.map_size = map_size;
    cfg.era.decoder_path = Some(decoder_path.display().to_string());
    cfg.dsee.steps = 8;
    cfg.dsee.harmonize_steps = 2;
    cfg.dsee.latent_res = 16;
    cfg.dsee.latent_channels = 2;
    let config_path = out_abs.join("config.toml");
    fs::write(&config_path, toml::to_string_pretty(&cfg)?)?;

    println!("initialized {}", out_abs.display());
    println!("  graph.jsonl   {} nodes, {} edges", graph.node_count(), graph.edge_count());
    println!("  images/       3 sample images");
    println!("  manifest.csv  3 items");
    println!(
        "  decoder.json  trained {} steps, loss {:.4} -> {:.4}",
        trace.len() - 1,
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    println!("  config.toml   offline settings");
    println!("  rules.json    conflict rules");
    println!();
    println!(
        "try: emokg pipeline batch --manifest {} --config {} --out {}",
        out_abs.join("manifest.csv").display(),
        config_path.display(),
        out_abs.join("run").display()
    );
    Ok(())
}

// Timings summaries land in BTreeMap to keep output stable.
#[allow(dead_code)]
type StageTimings = BTreeMap<String, f64>;
