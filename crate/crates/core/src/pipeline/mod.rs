//! End-to-end orchestration: localize the affective region, retrieve
//! emotion evidence from the graph, select and calibrate cues, compile
//! the guidance prompt, then run the mask-constrained latent edit.
//!
//! Batch runs write one directory per item containing `record.json`
//! plus the mask and edited image, an `index.json` listing every item,
//! a `summary.json` with aggregate counts and stage timings, and an
//! `eval_manifest.csv` ready for the metrics report. Records are fully
//! deterministic for a fixed config and input set; wall-clock timings
//! live only in the summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{ClientError, TransportConfig};
use crate::cues::prompt::{compile_prompt, LmmClient, PromptMode};
use crate::cues::{
    calibrate, default_conflict_rules, filter_bank, select_cues, ConflictRule, CueBank,
    CueCandidate, CueError, RejectReason, SceneObject, SceneStructure, DEFAULT_LAMBDA,
    DEFAULT_TAU, DEFAULT_TOP_K,
};
use crate::dsee::denoiser::{AnalyticDenoiser, ClientDenoiser, StructuredDenoiser, ZeroDenoiser};
use crate::dsee::{edit, DseeError, EditConfig, Latent, NoiseSchedule};
use crate::kg::jsonl::{load_graph, LoadError};
use crate::kg::retrieval::{retrieve_subgraph, RetrievalError, RetrievalQuery, Subgraph, DEFAULT_K};
use crate::kg::demo::demo_graph;
use crate::kg::{KnowledgeGraph, NodeId, NodeKind};
use crate::providers::{
    ClassifierClient, EmbeddingProvider, JsonClassifier, JsonEmbedder, ProviderError,
    StubEmbedder,
};
use crate::region::backbone::{ClientBackbone, TinyBackbone};
use crate::region::decoder::DecoderParams;
use crate::region::{
    localize, save_gray, save_mask_png, BBox, Backbone, LayerSet, RegionError,
};
use crate::vecmath::{cosine, resample_area};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {reason}")]
    Config { reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("unknown emotion label {label:?}")]
    UnknownEmotion { label: String },
    #[error(transparent)]
    Graph(#[from] LoadError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Cue(#[from] CueError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Dsee(#[from] DseeError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    /// JSONL graph to load; empty selects the bundled demo graph.
    pub path: String,
    /// Embedding width for the demo graph (ignored when a path is set).
    pub embed_dim: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            path: String::new(),
            embed_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Neighbor count for completion.
    pub k: usize,
    /// How many start nodes to derive when an item names none.
    pub n_starts: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: DEFAULT_K,
            n_starts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CuesConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub tau: f64,
    /// JSON file with extra conflict rules; the built-in set is used
    /// when absent.
    pub rules_path: Option<String>,
    pub mode: PromptMode,
}

impl Default for CuesConfig {
    fn default() -> Self {
        CuesConfig {
            lambda: DEFAULT_LAMBDA,
            top_k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            rules_path: None,
            mode: PromptMode::Template,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EraConfig {
    pub threshold: f64,
    /// Backbone layers whose CLS attention is averaged.
    pub layers: Vec<usize>,
    /// "test" for the built-in backbone, "client" for a JSON backend.
    pub backbone: String,
    pub transport: Option<TransportConfig>,
    /// Layer count reported for a client backbone.
    pub layer_count: usize,
    /// Trained decoder weights; a seeded untrained decoder is used
    /// when absent.
    pub decoder_path: Option<String>,
    pub decoder_hidden: usize,
    /// Patch feature width the decoder expects.
    pub input_dim: usize,
    /// Side length of the upsampled mask.
    pub map_size: usize,
}

impl Default for EraConfig {
    fn default() -> Self {
        EraConfig {
            threshold: 0.5,
            layers: vec![2, 3],
            backbone: "test".to_string(),
            transport: None,
            layer_count: 4,
            decoder_path: None,
            decoder_hidden: 8,
            input_dim: 16,
            map_size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DseeConfig {
    /// Skip the latent edit entirely when false.
    pub enabled: bool,
    pub steps: usize,
    pub guidance: f64,
    pub lambda_att: f64,
    pub harmonize_steps: usize,
    /// Side length of the square working latent.
    pub latent_res: usize,
    pub latent_channels: usize,
    pub soft_mask: bool,
    /// "zero", "analytic", "structured", or "client".
    pub backend: String,
    /// Signal variance for the analytic backend.
    pub sigma2: f64,
    pub transport: Option<TransportConfig>,
    pub injection_layers: Vec<usize>,
}

impl Default for DseeConfig {
    fn default() -> Self {
        DseeConfig {
            enabled: true,
            steps: 50,
            guidance: 7.5,
            lambda_att: 0.5,
            harmonize_steps: 5,
            latent_res: 32,
            latent_channels: 4,
            soft_mask: false,
            backend: "structured".to_string(),
            sigma2: 1.0,
            transport: None,
            injection_layers: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClientsConfig {
    pub lmm: Option<TransportConfig>,
    pub classifier: Option<TransportConfig>,
    pub embedder: Option<TransportConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads for batch runs; 0 picks the machine default.
    pub jobs: usize,
    pub graph: GraphConfig,
    pub retrieval: RetrievalConfig,
    pub cues: CuesConfig,
    pub era: EraConfig,
    pub dsee: DseeConfig,
    pub clients: ClientsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            jobs: 1,
            graph: GraphConfig::default(),
            retrieval: RetrievalConfig::default(),
            cues: CuesConfig::default(),
            era: EraConfig::default(),
            dsee: DseeConfig::default(),
            clients: ClientsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |reason: String| Err(PipelineError::Config { reason });
        if self.retrieval.k < 1 {
            return bad("retrieval.k must be at least 1".into());
        }
        if self.retrieval.n_starts < 1 {
            return bad("retrieval.n_starts must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.cues.lambda) {
            return bad(format!("cues.lambda {} outside [0, 1]", self.cues.lambda));
        }
        if !(0.0..=1.0).contains(&self.cues.tau) {
            return bad(format!("cues.tau {} outside [0, 1]", self.cues.tau));
        }
        if self.cues.top_k < 1 {
            return bad("cues.top_k must be at least 1".into());
        }
        if self.cues.mode == PromptMode::Lmm && self.clients.lmm.is_none() {
            return bad("cues.mode = \"lmm\" needs clients.lmm".into());
        }
        if !(0.0..=1.0).contains(&self.era.threshold) {
            return bad(format!("era.threshold {} outside [0, 1]", self.era.threshold));
        }
        if self.era.layers.is_empty() {
            return bad("era.layers must name at least one layer".into());
        }
        match self.era.backbone.as_str() {
            "test" => {}
            "client" => {
                if self.era.transport.is_none() {
                    return bad("era.backbone = \"client\" needs era.transport".into());
                }
            }
            other => return bad(format!("unknown era.backbone {other:?}")),
        }
        if self.era.decoder_hidden < 1 || self.era.input_dim < 1 || self.era.map_size < 1 {
            return bad("era decoder dimensions must be at least 1".into());
        }
        if self.dsee.steps < 1 {
            return bad("dsee.steps must be at least 1".into());
        }
        if self.dsee.harmonize_steps > self.dsee.steps {
            return bad(format!(
                "dsee.harmonize_steps {} exceeds dsee.steps {}",
                self.dsee.harmonize_steps, self.dsee.steps
            ));
        }
        if self.dsee.latent_res < 1 || self.dsee.latent_channels < 1 {
            return bad("dsee latent dimensions must be at least 1".into());
        }
        if !self.dsee.guidance.is_finite() {
            return bad("dsee.guidance must be finite".into());
        }
        if !self.dsee.lambda_att.is_finite() || self.dsee.lambda_att < 0.0 {
            return bad(format!(
                "dsee.lambda_att {} must be finite and nonnegative",
                self.dsee.lambda_att
            ));
        }
        if self.dsee.sigma2 <= 0.0 {
            return bad(format!("dsee.sigma2 {} must be positive", self.dsee.sigma2));
        }
        match self.dsee.backend.as_str() {
            "zero" | "analytic" | "structured" => {}
            "client" => {
                if self.dsee.transport.is_none() {
                    return bad("dsee.backend = \"client\" needs dsee.transport".into());
                }
            }
            other => return bad(format!("unknown dsee.backend {other:?}")),
        }
        Ok(())
    }
}

/// Parse and validate a TOML config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: PipelineConfig = toml::from_str(&text).map_err(|e| PipelineError::Config {
        reason: format!("{}: {e}", path.display()),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// One image to edit, with its requested target emotions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunItem {
    pub image: PathBuf,
    pub emotions: Vec<String>,
    #[serde(default)]
    pub o_prompt: Option<String>,
    /// Explicit retrieval starts; derived from the image embedding
    /// when empty.
    #[serde(default)]
    pub starts: Vec<NodeId>,
}

/// Read a batch manifest. Columns: `image_path`, `emotions`
/// (semicolon-separated), optional `o_prompt` and `starts`. Relative
/// image paths are resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<RunItem>, PipelineError> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| PipelineError::Manifest {
        line: 0,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| PipelineError::Manifest {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let image_col = col("image_path").ok_or_else(|| PipelineError::Manifest {
        line: 1,
        message: "missing column image_path".to_string(),
    })?;
    let emotions_col = col("emotions").ok_or_else(|| PipelineError::Manifest {
        line: 1,
        message: "missing column emotions".to_string(),
    })?;
    let o_prompt_col = col("o_prompt");
    let starts_col = col("starts");

    let split_list = |field: &str| -> Vec<String> {
        field
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    };

    let mut items = Vec::new();
    for (idx, row) in reader.records().enumerate() {
        let line = idx + 2;
        let row = row.map_err(|e| PipelineError::Manifest {
            line,
            message: e.to_string(),
        })?;
        let field = |c: usize| row.get(c).unwrap_or("").trim().to_string();
        let image_raw = field(image_col);
        if image_raw.is_empty() {
            return Err(PipelineError::Manifest {
                line,
                message: "empty image_path".to_string(),
            });
        }
        let image = if Path::new(&image_raw).is_absolute() {
            PathBuf::from(&image_raw)
        } else {
            base.join(&image_raw)
        };
        let emotions = split_list(&field(emotions_col));
        if emotions.is_empty() {
            return Err(PipelineError::Manifest {
                line,
                message: "empty emotions".to_string(),
            });
        }
        let o_prompt = o_prompt_col.map(field).filter(|s| !s.is_empty());
        let starts = starts_col.map(|c| split_list(&field(c))).unwrap_or_default();
        items.push(RunItem {
            image,
            emotions,
            o_prompt,
            starts,
        });
    }
    Ok(items)
}

/// A reasoning path as it appears in a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub id: String,
    pub nodes: Vec<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_from: Option<NodeId>,
}

/// A scored cue as it appears in a run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueRecord {
    pub attribute: NodeId,
    pub text: String,
    pub emotion: String,
    pub s_sim: f64,
    pub s_emo: f64,
    pub fused: f64,
    pub path_id: String,
    pub admitted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reject_reason: Option<RejectReason>,
}

/// Everything deterministic about one item's run. Timings are kept
/// out so identical inputs produce byte-identical records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub status: String,
    pub image: String,
    pub emotions: Vec<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub starts: Vec<NodeId>,
    pub paths: Vec<PathRecord>,
    pub cues: Vec<CueRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted: Option<String>,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureNote {
    pub id: String,
    pub stage: String,
    pub error: String,
}

/// Batch-level aggregates; the only place wall-clock numbers appear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub failures: Vec<FailureNote>,
    pub mean_timings_ms: BTreeMap<String, f64>,
}

/// Shared immutable state for a run, built once per batch.
pub struct RuntimeEnv {
    pub graph: KnowledgeGraph,
    pub backbone: Box<dyn Backbone>,
    pub denoiser: Box<dyn crate::dsee::Denoiser>,
    pub embedder: Box<dyn EmbeddingProvider>,
    pub lmm: Option<crate::clients::JsonLmm>,
    pub classifier: Option<Box<dyn ClassifierClient>>,
    pub decoder: DecoderParams,
    pub rules: Vec<ConflictRule>,
    pub schedule: NoiseSchedule,
}

pub fn build_env(cfg: &PipelineConfig) -> Result<RuntimeEnv, PipelineError> {
    cfg.validate()?;
    let graph = if cfg.graph.path.is_empty() {
        demo_graph(cfg.graph.embed_dim)
    } else {
        load_graph(&cfg.graph.path)?
    };
    let embed_dim = graph.embed_dim().unwrap_or(cfg.graph.embed_dim);

    let backbone: Box<dyn Backbone> = match cfg.era.backbone.as_str() {
        "client" => {
            let transport = cfg.era.transport.as_ref().expect("validated");
            Box::new(ClientBackbone::from_config(transport, cfg.era.layer_count)?)
        }
        _ => Box::new(TinyBackbone::new(cfg.seed)),
    };

    let schedule = NoiseSchedule::scaled_linear(cfg.dsee.steps, 0.00085, 0.012)?;
    let denoiser: Box<dyn crate::dsee::Denoiser> = match cfg.dsee.backend.as_str() {
        "zero" => Box::new(ZeroDenoiser),
        "analytic" => Box::new(AnalyticDenoiser::new(cfg.dsee.sigma2, schedule.clone())),
        "client" => {
            let transport = cfg.dsee.transport.as_ref().expect("validated");
            Box::new(ClientDenoiser::from_config(transport)?)
        }
        _ => Box::new(StructuredDenoiser::new(cfg.seed)),
    };

    let embedder: Box<dyn EmbeddingProvider> = match &cfg.clients.embedder {
        Some(t) => Box::new(JsonEmbedder::new(t, embed_dim)?),
        None => Box::new(StubEmbedder::new(embed_dim, cfg.seed)),
    };
    let lmm = match &cfg.clients.lmm {
        Some(t) => Some(crate::clients::JsonLmm::new(t)?),
        None => None,
    };
    let classifier: Option<Box<dyn ClassifierClient>> = match &cfg.clients.classifier {
        Some(t) => Some(Box::new(JsonClassifier::new(t)?)),
        None => None,
    };

    let decoder = match &cfg.era.decoder_path {
        Some(p) => DecoderParams::load_json(Path::new(p))?,
        None => DecoderParams::seeded(
            cfg.era.input_dim,
            cfg.era.decoder_hidden,
            cfg.era.map_size,
            cfg.era.map_size,
            cfg.seed,
        ),
    };
    let rules = match &cfg.cues.rules_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| PipelineError::Io {
                path: PathBuf::from(p),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| PipelineError::Config {
                reason: format!("{p}: {e}"),
            })?
        }
        None => default_conflict_rules(),
    };

    Ok(RuntimeEnv {
        graph,
        backbone,
        denoiser,
        embedder,
        lmm,
        classifier,
        decoder,
        rules,
        schedule,
    })
}

/// Normalize a grayscale image into a square multi-channel latent in
/// [-1, 1]; every channel carries the same plane.
pub fn image_to_latent(gray: &Array2<f64>, res: usize, channels: usize) -> Latent {
    let small = resample_area(gray, res, res);
    Array3::from_shape_fn((channels, res, res), |(_, y, x)| small[(y, x)] * 2.0 - 1.0)
}

/// Collapse a latent back to a grayscale image of the given size.
pub fn latent_to_image(latent: &Latent, h: usize, w: usize) -> Array2<f64> {
    let (c, lh, lw) = latent.dim();
    let mut mean: Array2<f64> = Array2::zeros((lh, lw));
    for ch in 0..c {
        for y in 0..lh {
            for x in 0..lw {
                mean[(y, x)] += latent[(ch, y, x)];
            }
        }
    }
    let inv = 1.0 / c as f64;
    let v01 = mean.mapv(|v| ((v * inv + 1.0) / 2.0).clamp(0.0, 1.0));
    resample_area(&v01, h, w)
}

/// Rank scene and object nodes by similarity to the image embedding
/// and keep the best `n`. Ties break on node id.
fn derive_starts(
    graph: &KnowledgeGraph,
    image_emb: &[f64],
    n: usize,
) -> Result<Vec<NodeId>, String> {
    if let Some(d) = graph.embed_dim() {
        if d != image_emb.len() {
            return Err(format!(
                "embedding width {} does not match graph width {d}",
                image_emb.len()
            ));
        }
    }
    let mut scored: Vec<(f64, &NodeId)> = graph
        .nodes()
        .filter(|node| matches!(node.kind, NodeKind::Scene | NodeKind::Object))
        .map(|node| (cosine(image_emb, &node.embedding).unwrap_or(0.0), &node.id))
        .collect();
    if scored.is_empty() {
        return Err("graph has no scene or object nodes".to_string());
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.1.cmp(b.1))
    });
    Ok(scored.into_iter().take(n).map(|(_, id)| id.clone()).collect())
}

/// Build the scene description the calibrator and prompt compiler see:
/// object nodes named as starts or lying on retrieved paths, the first
/// scene start as context, and the caller's prompt when given.
fn derive_scene(
    graph: &KnowledgeGraph,
    starts: &[NodeId],
    subgraphs: &[(String, Subgraph)],
    o_prompt: Option<&str>,
) -> SceneStructure {
    let mut objects = Vec::new();
    let mut seen = BTreeSet::new();
    let push = |id: &NodeId, objects: &mut Vec<SceneObject>, seen: &mut BTreeSet<NodeId>| {
        if let Some(node) = graph.node(id) {
            if node.kind == NodeKind::Object && seen.insert(id.clone()) {
                objects.push(SceneObject {
                    id: id.clone(),
                    noun: node.text.clone(),
                    attributes: Vec::new(),
                });
            }
        }
    };
    for s in starts {
        push(s, &mut objects, &mut seen);
    }
    for (_, sg) in subgraphs {
        for p in &sg.paths {
            if let Some(oid) = p.object(graph) {
                push(oid, &mut objects, &mut seen);
            }
        }
    }
    let scene = starts
        .iter()
        .filter_map(|s| graph.node(s))
        .find(|n| n.kind == NodeKind::Scene)
        .map(|n| n.text.clone());
    let o_prompt = match o_prompt {
        Some(p) => p.to_string(),
        None => match &scene {
            Some(s) => format!("a photo of {s}"),
            None => "a photo".to_string(),
        },
    };
    SceneStructure {
        objects,
        scene,
        o_prompt,
    }
}

fn stage_err(stage: &str, e: impl std::fmt::Display) -> (String, String) {
    (stage.to_string(), e.to_string())
}

fn ms(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64() * 1000.0
}

/// Run one item end to end. Never fails outright: errors land in the
/// record's `failed_stage`/`error` fields. The second return value
/// carries per-stage wall-clock milliseconds.
pub fn run_single(
    item: &RunItem,
    index: usize,
    cfg: &PipelineConfig,
    env: &RuntimeEnv,
    run_dir: &Path,
) -> (RunRecord, BTreeMap<String, f64>) {
    let id = format!("item_{index:03}");
    let mut record = RunRecord {
        id: id.clone(),
        status: "failed".to_string(),
        image: item.image.display().to_string(),
        emotions: item.emotions.clone(),
        seed: cfg.seed,
        failed_stage: None,
        error: None,
        starts: Vec::new(),
        paths: Vec::new(),
        cues: Vec::new(),
        prompt: None,
        mask_path: None,
        bbox: None,
        edited_path: None,
        predicted: None,
        config: cfg.clone(),
    };
    let mut timings = BTreeMap::new();
    match run_stages(item, cfg, env, run_dir, &id, &mut record, &mut timings) {
        Ok(()) => record.status = "ok".to_string(),
        Err((stage, message)) => {
            record.failed_stage = Some(stage);
            record.error = Some(message);
        }
    }
    (record, timings)
}

fn run_stages(
    item: &RunItem,
    cfg: &PipelineConfig,
    env: &RuntimeEnv,
    run_dir: &Path,
    id: &str,
    record: &mut RunRecord,
    timings: &mut BTreeMap<String, f64>,
) -> Result<(), (String, String)> {
    let item_dir = run_dir.join(id);
    fs::create_dir_all(&item_dir).map_err(|e| stage_err("setup", e))?;
    if item.emotions.is_empty() {
        return Err(stage_err("setup", "item requests no emotions"));
    }
    for e in &item.emotions {
        if !env.graph.labels().contains(e) {
            return Err(stage_err("setup", format!("unknown emotion label {e:?}")));
        }
    }

    // Affective region localization.
    let t0 = Instant::now();
    let layers = LayerSet::new(cfg.era.layers.clone()).map_err(|e| stage_err("era", e))?;
    let mask = localize(
        env.backbone.as_ref(),
        &item.image,
        &layers,
        &env.decoder,
        cfg.era.threshold,
    )
    .map_err(|e| stage_err("era", e))?;
    save_mask_png(&mask.binary, &item_dir.join("mask.png")).map_err(|e| stage_err("era", e))?;
    record.mask_path = Some(format!("{id}/mask.png"));
    record.bbox = mask.bbox;
    timings.insert("era".to_string(), ms(t0));

    // Graph retrieval, one subgraph per requested emotion.
    let t0 = Instant::now();
    let image_emb = env
        .embedder
        .embed_image(&item.image)
        .map_err(|e| stage_err("retrieval", e))?;
    let starts = if item.starts.is_empty() {
        derive_starts(&env.graph, &image_emb, cfg.retrieval.n_starts)
            .map_err(|e| stage_err("retrieval", e))?
    } else {
        for s in &item.starts {
            if env.graph.node(s).is_none() {
                return Err(stage_err("retrieval", format!("unknown start node {s:?}")));
            }
        }
        item.starts.clone()
    };
    record.starts = starts.clone();
    let mut subgraphs: Vec<(String, Subgraph)> = Vec::new();
    let mut path_records: Vec<PathRecord> = Vec::new();
    for e in &item.emotions {
        let target = env
            .graph
            .emotion_node(e)
            .ok_or_else(|| stage_err("retrieval", format!("graph has no node for emotion {e:?}")))?;
        let query = RetrievalQuery {
            starts: starts.clone(),
            targets: vec![target.id.clone()],
            k: cfg.retrieval.k,
        };
        let sg = retrieve_subgraph(&env.graph, &query).map_err(|e| stage_err("retrieval", e))?;
        for p in &sg.paths {
            let present = path_records
                .iter()
                .any(|pr| pr.nodes == p.nodes && pr.completed_from == p.completed_from);
            if !present {
                path_records.push(PathRecord {
                    id: format!("p{:03}", path_records.len()),
                    nodes: p.nodes.clone(),
                    completed_from: p.completed_from.clone(),
                });
            }
        }
        subgraphs.push((e.clone(), sg));
    }
    record.paths = path_records;
    timings.insert("retrieval".to_string(), ms(t0));

    // Cue selection, calibration, and filtering per target, then a
    // union bank: a cue admitted for any target stays admitted.
    let t0 = Instant::now();
    if subgraphs.iter().all(|(_, sg)| sg.is_empty()) {
        return Err(stage_err(
            "cues",
            "no reasoning paths reach any requested emotion",
        ));
    }
    let scene = derive_scene(&env.graph, &starts, &subgraphs, item.o_prompt.as_deref());
    let mut admitted: Vec<(String, CueCandidate)> = Vec::new();
    let mut admitted_attrs: BTreeSet<NodeId> = BTreeSet::new();
    let mut rejected_pool: Vec<(String, crate::cues::RejectedCue)> = Vec::new();
    for (e, sg) in &subgraphs {
        if sg.is_empty() {
            continue;
        }
        let pool = select_cues(
            &env.graph,
            sg,
            &image_emb,
            e,
            cfg.cues.lambda,
            cfg.cues.top_k,
            None,
        )
        .map_err(|err| stage_err("cues", err))?;
        let pool = calibrate(&pool, &scene, &env.rules);
        let bank = filter_bank(&pool, cfg.cues.tau, &scene, &env.rules)
            .map_err(|err| stage_err("cues", err))?;
        for cue in bank.admitted {
            if admitted_attrs.insert(cue.attribute_node.clone()) {
                admitted.push((e.clone(), cue));
            }
        }
        for rc in bank.rejected {
            rejected_pool.push((e.clone(), rc));
        }
    }
    // A rejection stands only when no target admitted the attribute;
    // a conflict anywhere outranks a below-threshold score.
    let mut rejected: Vec<(String, crate::cues::RejectedCue)> = Vec::new();
    let mut rejected_pos: BTreeMap<NodeId, usize> = BTreeMap::new();
    for (e, rc) in rejected_pool {
        if admitted_attrs.contains(&rc.cue.attribute_node) {
            continue;
        }
        match rejected_pos.get(&rc.cue.attribute_node) {
            None => {
                rejected_pos.insert(rc.cue.attribute_node.clone(), rejected.len());
                rejected.push((e, rc));
            }
            Some(&i) => {
                if rejected[i].1.reason == RejectReason::BelowTau
                    && rc.reason == RejectReason::Conflict
                {
                    rejected[i] = (e, rc);
                }
            }
        }
    }
    let path_id_of = |candidate: &CueCandidate| -> String {
        record
            .paths
            .iter()
            .find(|pr| {
                pr.nodes == candidate.source_path.nodes
                    && pr.completed_from == candidate.source_path.completed_from
            })
            .map(|pr| pr.id.clone())
            .unwrap_or_default()
    };
    for (e, cue) in &admitted {
        record.cues.push(CueRecord {
            attribute: cue.attribute_node.clone(),
            text: cue.text.clone(),
            emotion: e.clone(),
            s_sim: cue.s_sim,
            s_emo: cue.s_emo,
            fused: cue.fused,
            path_id: path_id_of(cue),
            admitted: true,
            reject_reason: None,
        });
    }
    for (e, rc) in &rejected {
        record.cues.push(CueRecord {
            attribute: rc.cue.attribute_node.clone(),
            text: rc.cue.text.clone(),
            emotion: e.clone(),
            s_sim: rc.cue.s_sim,
            s_emo: rc.cue.s_emo,
            fused: rc.cue.fused,
            path_id: path_id_of(&rc.cue),
            admitted: false,
            reject_reason: Some(rc.reason),
        });
    }
    let bank = CueBank {
        admitted: admitted.into_iter().map(|(_, c)| c).collect(),
        rejected: rejected.into_iter().map(|(_, rc)| rc).collect(),
    };
    timings.insert("cues".to_string(), ms(t0));

    // Prompt compilation. The first emotion is the nominal target;
    // none of the requested labels may surface in the text.
    let t0 = Instant::now();
    let lmm = env.lmm.as_ref().map(|l| l as &dyn LmmClient);
    let prompt = compile_prompt(
        &bank,
        &scene,
        &item.emotions[0],
        cfg.cues.mode,
        env.graph.labels(),
        lmm,
    )
    .map_err(|e| stage_err("prompt", e))?;
    let lowered = prompt.text.to_lowercase();
    for e in &item.emotions[1..] {
        if lowered.contains(&e.to_lowercase()) {
            return Err(stage_err(
                "prompt",
                format!("emotion label {e:?} leaked into the prompt"),
            ));
        }
    }
    record.prompt = Some(prompt.text.clone());
    timings.insert("prompt".to_string(), ms(t0));

    // Mask-constrained latent edit.
    if cfg.dsee.enabled {
        let t0 = Instant::now();
        let gray = crate::region::load_gray(&item.image).map_err(|e| stage_err("dsee", e))?;
        let (h, w) = gray.dim();
        let latent = image_to_latent(&gray, cfg.dsee.latent_res, cfg.dsee.latent_channels);
        let mask_f = Array2::from_shape_fn(mask.binary.dim(), |ij| {
            if mask.binary[ij] {
                1.0
            } else {
                0.0
            }
        });
        let edit_cfg = EditConfig {
            guidance_scale: cfg.dsee.guidance,
            lambda_att: cfg.dsee.lambda_att,
            harmonize_steps: cfg.dsee.harmonize_steps,
            injection_layers: cfg.dsee.injection_layers.clone(),
            soft_mask: cfg.dsee.soft_mask,
            record_maps: false,
        };
        let outcome = edit(
            env.denoiser.as_ref(),
            &env.schedule,
            &latent,
            Some(&prompt.text),
            &mask_f,
            &edit_cfg,
        )
        .map_err(|e| stage_err("dsee", e))?;
        let edited = latent_to_image(&outcome.final_latent, h, w);
        save_gray(&edited, &item_dir.join("edited.png")).map_err(|e| stage_err("dsee", e))?;
        record.edited_path = Some(format!("{id}/edited.png"));
        timings.insert("dsee".to_string(), ms(t0));
    }

    // Optional check with an external emotion classifier.
    if let (Some(classifier), Some(edited)) = (&env.classifier, &record.edited_path) {
        let t0 = Instant::now();
        let (label, _) = classifier
            .classify(&run_dir.join(edited))
            .map_err(|e| stage_err("classify", e))?;
        record.predicted = Some(label);
        timings.insert("classify".to_string(), ms(t0));
    }

    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("run artifacts serialize");
    text.push('\n');
    fs::write(path, text).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize)]
struct IndexEntry {
    id: String,
    status: String,
    record: String,
}

/// Run every item, isolating failures, and write the run directory:
/// per-item records and artifacts, `index.json`, `summary.json`, and
/// `eval_manifest.csv` for the succeeded edits.
pub fn run_batch(
    items: &[RunItem],
    cfg: &PipelineConfig,
    env: &RuntimeEnv,
    run_dir: &Path,
) -> Result<RunSummary, PipelineError> {
    if items.is_empty() {
        return Err(PipelineError::Config {
            reason: "no items to run".to_string(),
        });
    }
    fs::create_dir_all(run_dir).map_err(|source| PipelineError::Io {
        path: run_dir.to_path_buf(),
        source,
    })?;

    let mut jobs = cfg.jobs;
    if jobs == 0 {
        jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    }
    if env.denoiser.exclusive() {
        jobs = 1;
    }
    jobs = jobs.min(items.len()).max(1);

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<(RunRecord, BTreeMap<String, f64>)>>> =
        (0..items.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = run_single(&items[i], i, cfg, env, run_dir);
                *slots[i].lock().expect("result slot") = Some(out);
            });
        }
    });

    let mut records = Vec::with_capacity(items.len());
    let mut stage_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for slot in slots {
        let (record, timings) = slot
            .into_inner()
            .expect("result slot")
            .expect("every item produces a record");
        for (stage, t) in timings {
            let entry = stage_sums.entry(stage).or_insert((0.0, 0));
            entry.0 += t;
            entry.1 += 1;
        }
        records.push(record);
    }

    for record in &records {
        let dir = run_dir.join(&record.id);
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Io {
            path: dir.clone(),
            source,
        })?;
        write_json(&dir.join("record.json"), record)?;
    }

    let index: Vec<IndexEntry> = records
        .iter()
        .map(|r| IndexEntry {
            id: r.id.clone(),
            status: r.status.clone(),
            record: format!("{}/record.json", r.id),
        })
        .collect();
    write_json(&run_dir.join("index.json"), &index)?;

    let failures: Vec<FailureNote> = records
        .iter()
        .filter(|r| r.status != "ok")
        .map(|r| FailureNote {
            id: r.id.clone(),
            stage: r.failed_stage.clone().unwrap_or_default(),
            error: r.error.clone().unwrap_or_default(),
        })
        .collect();
    let summary = RunSummary {
        total: records.len(),
        succeeded: records.len() - failures.len(),
        failed: failures.len(),
        failures,
        mean_timings_ms: stage_sums
            .into_iter()
            .map(|(stage, (sum, n))| (stage, sum / n as f64))
            .collect(),
    };
    write_json(&run_dir.join("summary.json"), &summary)?;

    let manifest_path = run_dir.join("eval_manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path).map_err(|e| PipelineError::Config {
        reason: format!("{}: {e}", manifest_path.display()),
    })?;
    writer
        .write_record(["source_path", "edited_path", "target_emotion", "method"])
        .and_then(|_| {
            for r in &records {
                if let Some(edited) = &r.edited_path {
                    if r.status == "ok" {
                        writer.write_record([
                            r.image.as_str(),
                            run_dir.join(edited).display().to_string().as_str(),
                            r.emotions[0].as_str(),
                            "pipeline",
                        ])?;
                    }
                }
            }
            writer.flush()?;
            Ok(())
        })
        .map_err(|e| PipelineError::Config {
            reason: format!("{}: {e}", manifest_path.display()),
        })?;

    Ok(summary)
}
