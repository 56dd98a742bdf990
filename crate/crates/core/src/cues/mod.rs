//! Emotion cue scoring, selection, calibration, and conflict filtering.
//!
//! A cue is an attribute retrieved from the graph. Each candidate is
//! scored by fusing image similarity (cosine between the source image
//! embedding and the attribute's visual prototype) with target-emotion
//! intensity (the LEADS_TO edge weight, or an external provider). The
//! top K survive, duplicates and contextually impossible cues are
//! calibrated away, and an intensity threshold plus conflict rules
//! split the bank into admitted and rejected cues.

pub mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::ClientError;
use crate::kg::retrieval::{ReasoningPath, Subgraph};
use crate::kg::{KnowledgeGraph, NodeId};
use crate::vecmath::cosine;

/// Default fusion weight between image similarity and emotion intensity.
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Default intensity threshold.
pub const DEFAULT_TAU: f64 = 0.6;
/// Default pool size.
pub const DEFAULT_TOP_K: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueCandidate {
    pub attribute_node: NodeId,
    pub text: String,
    pub prototype: Vec<f64>,
    pub s_sim: f64,
    pub s_emo: f64,
    pub fused: f64,
    pub source_path: ReasoningPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuePool {
    /// Candidates in descending fused order, ties by text.
    pub cues: Vec<CueCandidate>,
    pub lambda: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BelowTau,
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCue {
    pub cue: CueCandidate,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueBank {
    pub admitted: Vec<CueCandidate>,
    pub rejected: Vec<RejectedCue>,
}

/// An attribute/object-class incompatibility. Patterns are
/// whitespace-separated lowercase token sets; a rule fires when the cue
/// text shares a token with the attribute pattern and the object (noun
/// plus its attributes) shares a token with the class pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictRule {
    pub attribute_pattern: String,
    pub object_class_pattern: String,
    pub reason: String,
}

/// Built-in conflict rules, seeding material and state incompatibilities.
pub fn default_conflict_rules() -> Vec<ConflictRule> {
    vec![
        ConflictRule {
            attribute_pattern: "rotten decayed moldy".into(),
            object_class_pattern: "metal metallic steel chrome iron glass plastic".into(),
            reason: "organic decay cannot apply to inorganic materials".into(),
        },
        ConflictRule {
            attribute_pattern: "rusty rusted corroded".into(),
            object_class_pattern: "cloth fabric fur wooden paper".into(),
            reason: "rust applies to metal surfaces only".into(),
        },
        ConflictRule {
            attribute_pattern: "snarling growling barking".into(),
            object_class_pattern: "bench can box building rock trail waves".into(),
            reason: "animate posture cannot apply to inanimate objects".into(),
        },
        ConflictRule {
            attribute_pattern: "wilted withered".into(),
            object_class_pattern: "metal metallic stone concrete glass".into(),
            reason: "plant states cannot apply to hard materials".into(),
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: NodeId,
    pub noun: String,
    #[serde(default)]
    pub attributes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneStructure {
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    #[serde(default)]
    pub scene: Option<String>,
    pub o_prompt: String,
}

impl SceneStructure {
    /// Existing attribute tokens across all objects, lowercased.
    fn existing_attribute_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for obj in &self.objects {
            for a in &obj.attributes {
                out.extend(tokens(a));
            }
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum CueError {
    #[error("zero-norm embedding for {what}")]
    ZeroEmbedding { what: String },
    #[error("subgraph contains no attribute candidates")]
    EmptySubgraph,
    #[error("unknown attribute node {id:?}")]
    UnknownAttribute { id: NodeId },
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("tau {0} outside [0, 1]")]
    TauOutOfRange(f64),
    #[error("k must be at least 1")]
    InvalidK,
    #[error("unknown emotion label {label:?}")]
    UnknownEmotion { label: String },
    #[error("no admitted cues and no scene fallback")]
    EmptyEvidence,
    #[error("intensity provider: {0}")]
    Provider(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("response violates prompt invariants: {reason}")]
    InvariantViolation { reason: String },
}

/// External source for the confidence that a cue evokes an emotion;
/// overrides the stored LEADS_TO weights when configured.
pub trait IntensityProvider: Send + Sync {
    fn intensity(&self, cue_text: &str, emotion: &str) -> Result<f64, CueError>;
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn token_overlap(a: &[String], b: &[String]) -> bool {
    a.iter().any(|t| b.contains(t))
}

/// Whether a rule fires for the given cue against the given object.
fn rule_fires(rule: &ConflictRule, cue_tokens: &[String], object_tokens: &[String]) -> bool {
    token_overlap(cue_tokens, &tokens(&rule.attribute_pattern))
        && token_overlap(object_tokens, &tokens(&rule.object_class_pattern))
}

fn object_tokens(obj: &SceneObject) -> Vec<String> {
    let mut out = tokens(&obj.noun);
    for a in &obj.attributes {
        out.extend(tokens(a));
    }
    out
}

/// Score one attribute node against the image and the target emotion.
pub fn score_cue(
    graph: &KnowledgeGraph,
    attribute_id: &str,
    image_embedding: &[f64],
    target_emotion: &str,
    lambda: f64,
    intensity: Option<&dyn IntensityProvider>,
    source_path: ReasoningPath,
) -> Result<CueCandidate, CueError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CueError::LambdaOutOfRange(lambda));
    }
    let node = graph.node(attribute_id).ok_or_else(|| CueError::UnknownAttribute {
        id: attribute_id.to_string(),
    })?;
    let prototype = node.visual_prototype.as_ref().unwrap_or(&node.embedding).clone();
    let s_sim = cosine(image_embedding, &prototype).ok_or_else(|| {
        let zero_is_image = crate::vecmath::l2_norm(image_embedding) < crate::vecmath::ZERO_NORM_EPS;
        CueError::ZeroEmbedding {
            what: if zero_is_image {
                "image embedding".to_string()
            } else {
                format!("prototype of {attribute_id:?}")
            },
        }
    })?;
    let s_emo = match intensity {
        Some(provider) => provider.intensity(&node.text, target_emotion)?,
        None => {
            let emotion_node = graph.emotion_node(target_emotion);
            emotion_node
                .and_then(|e| graph.leads_to_weight(attribute_id, &e.id))
                .unwrap_or(0.0)
        }
    };
    Ok(CueCandidate {
        attribute_node: node.id.clone(),
        text: node.text.clone(),
        prototype,
        s_sim,
        s_emo,
        fused: lambda * s_sim + (1.0 - lambda) * s_emo,
        source_path,
    })
}

/// Score every attribute on the subgraph's paths and keep the top K by
/// fused score, ties broken by attribute text then node id.
pub fn select_cues(
    graph: &KnowledgeGraph,
    subgraph: &Subgraph,
    image_embedding: &[f64],
    target_emotion: &str,
    lambda: f64,
    k: usize,
    intensity: Option<&dyn IntensityProvider>,
) -> Result<CuePool, CueError> {
    if k < 1 {
        return Err(CueError::InvalidK);
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(CueError::LambdaOutOfRange(lambda));
    }
    let candidates = subgraph.attribute_ids();
    if candidates.is_empty() {
        return Err(CueError::EmptySubgraph);
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for attr in &candidates {
        let path = subgraph
            .path_for_attribute(attr)
            .expect("attribute ids come from paths")
            .clone();
        scored.push(score_cue(graph, attr, image_embedding, target_emotion, lambda, intensity, path)?);
    }
    scored.sort_by(|a, b| {
        b.fused
            .partial_cmp(&a.fused)
            .expect("finite scores")
            .then_with(|| a.text.cmp(&b.text))
            .then_with(|| a.attribute_node.cmp(&b.attribute_node))
    });
    scored.truncate(k);
    Ok(CuePool {
        cues: scored,
        lambda,
        k,
    })
}

/// Remove cues that duplicate an existing attribute of the scene or that
/// conflict with every object. Order is preserved; idempotent.
pub fn calibrate(pool: &CuePool, scene: &SceneStructure, rules: &[ConflictRule]) -> CuePool {
    let existing = scene.existing_attribute_tokens();
    let kept = pool
        .cues
        .iter()
        .filter(|cue| {
            let cue_toks = tokens(&cue.text);
            if token_overlap(&cue_toks, &existing) {
                return false;
            }
            if !scene.objects.is_empty() {
                let conflicts_everywhere = scene.objects.iter().all(|obj| {
                    let obj_toks = object_tokens(obj);
                    rules.iter().any(|r| rule_fires(r, &cue_toks, &obj_toks))
                });
                if conflicts_everywhere {
                    return false;
                }
            }
            true
        })
        .cloned()
        .collect();
    CuePool {
        cues: kept,
        lambda: pool.lambda,
        k: pool.k,
    }
}

/// The object a cue will attach to: the object on its source path when
/// that object is part of the scene, scene-level otherwise.
pub(crate) fn attachment_object<'a>(cue: &CueCandidate, scene: &'a SceneStructure) -> Option<&'a SceneObject> {
    let path = &cue.source_path;
    // For CONTAINS-first paths the object is the second node; for
    // HAS_ATTR-first paths the start may itself be an object in scene.
    let candidate_ids: Vec<&NodeId> = match path.edges.first().map(|e| e.rel) {
        Some(crate::kg::Relation::Contains) => vec![&path.nodes[1]],
        Some(crate::kg::Relation::HasAttr) => vec![&path.nodes[0]],
        _ => vec![],
    };
    scene
        .objects
        .iter()
        .find(|obj| candidate_ids.iter().any(|id| *id == &obj.id))
}

/// Split a pool into admitted and rejected cues: admitted cues pass the
/// intensity threshold and trigger no conflict rule against the object
/// they will attach to.
pub fn filter_bank(
    pool: &CuePool,
    tau: f64,
    scene: &SceneStructure,
    rules: &[ConflictRule],
) -> Result<CueBank, CueError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(CueError::TauOutOfRange(tau));
    }
    let mut admitted = Vec::new();
    let mut rejected = Vec::new();
    for cue in &pool.cues {
        if cue.s_emo < tau {
            rejected.push(RejectedCue {
                cue: cue.clone(),
                reason: RejectReason::BelowTau,
            });
            continue;
        }
        let cue_toks = tokens(&cue.text);
        let conflict = match attachment_object(cue, scene) {
            Some(obj) => {
                let obj_toks = object_tokens(obj);
                rules.iter().any(|r| rule_fires(r, &cue_toks, &obj_toks))
            }
            None => false,
        };
        if conflict {
            rejected.push(RejectedCue {
                cue: cue.clone(),
                reason: RejectReason::Conflict,
            });
        } else {
            admitted.push(cue.clone());
        }
    }
    Ok(CueBank { admitted, rejected })
}
