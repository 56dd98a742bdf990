//! Typed multimodal sentiment knowledge graph.
//!
//! Nodes are scenes, objects, attributes, and emotions; edges are
//! CONTAINS (scene to object), HAS_ATTR (scene or object to attribute),
//! and LEADS_TO (attribute to emotion). LEADS_TO weights double as the
//! stored emotion-intensity signal consumed by cue scoring.
//!
//! A graph is built single-writer through [`KnowledgeGraph::add_node`]
//! and [`KnowledgeGraph::add_edge`]; once built it is immutable and safe
//! to query from any number of threads.

pub mod demo;
pub mod jsonl;
pub mod retrieval;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Node identifier, unique within one graph.
pub type NodeId = String;

/// The eight Mikels emotion categories, in canonical order.
pub const MIKELS_LABELS: [&str; 8] = [
    "amusement",
    "awe",
    "contentment",
    "excitement",
    "anger",
    "disgust",
    "fear",
    "sadness",
];

/// Mikels categories with positive polarity.
pub const MIKELS_POSITIVE: [&str; 4] = ["amusement", "awe", "contentment", "excitement"];

/// Default embedding dimension for newly built graphs.
pub const DEFAULT_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Scene,
    Object,
    Attribute,
    Emotion,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Scene => "scene",
            NodeKind::Object => "object",
            NodeKind::Attribute => "attribute",
            NodeKind::Emotion => "emotion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Relation {
    Contains,
    HasAttr,
    LeadsTo,
}

impl Relation {
    pub fn as_str(self) -> &'static str {
        match self {
            Relation::Contains => "CONTAINS",
            Relation::HasAttr => "HAS_ATTR",
            Relation::LeadsTo => "LEADS_TO",
        }
    }

    /// Whether `head -rel-> tail` is a schema-legal typed edge.
    pub fn legal(head: NodeKind, rel: Relation, tail: NodeKind) -> bool {
        matches!(
            (head, rel, tail),
            (NodeKind::Scene, Relation::Contains, NodeKind::Object)
                | (NodeKind::Scene, Relation::HasAttr, NodeKind::Attribute)
                | (NodeKind::Object, Relation::HasAttr, NodeKind::Attribute)
                | (NodeKind::Attribute, Relation::LeadsTo, NodeKind::Emotion)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub text: String,
    pub embedding: Vec<f64>,
    /// Visual prototype vector; attribute nodes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visual_prototype: Option<Vec<f64>>,
}

impl KgNode {
    pub fn new(id: impl Into<String>, kind: NodeKind, text: impl Into<String>, embedding: Vec<f64>) -> Self {
        KgNode {
            id: id.into(),
            kind,
            text: text.into(),
            embedding,
            visual_prototype: None,
        }
    }

    pub fn with_prototype(mut self, prototype: Vec<f64>) -> Self {
        self.visual_prototype = Some(prototype);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEdge {
    pub head: NodeId,
    pub rel: Relation,
    pub tail: NodeId,
    pub weight: f64,
}

impl KgEdge {
    pub fn new(head: impl Into<String>, rel: Relation, tail: impl Into<String>, weight: f64) -> Self {
        KgEdge {
            head: head.into(),
            rel,
            tail: tail.into(),
            weight,
        }
    }
}

/// The configured emotion label set: exactly eight lowercase labels in a
/// fixed order, with a positive-polarity subset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionLabels {
    labels: Vec<String>,
    positive: BTreeSet<String>,
}

impl EmotionLabels {
    pub fn new(labels: Vec<String>, positive: Vec<String>) -> Result<Self, KgError> {
        let labels: Vec<String> = labels.into_iter().map(|l| l.trim().to_lowercase()).collect();
        if labels.len() != 8 {
            return Err(KgError::BadLabelSet {
                reason: format!("expected 8 labels, got {}", labels.len()),
            });
        }
        let distinct: BTreeSet<&String> = labels.iter().collect();
        if distinct.len() != labels.len() {
            return Err(KgError::BadLabelSet {
                reason: "labels must be distinct".into(),
            });
        }
        if labels.iter().any(|l| l.is_empty()) {
            return Err(KgError::BadLabelSet {
                reason: "labels must be non-empty".into(),
            });
        }
        let positive: BTreeSet<String> = positive.into_iter().map(|l| l.trim().to_lowercase()).collect();
        if positive.is_empty() {
            return Err(KgError::BadLabelSet {
                reason: "positive subset must be non-empty".into(),
            });
        }
        for p in &positive {
            if !labels.contains(p) {
                return Err(KgError::BadLabelSet {
                    reason: format!("positive label {p:?} not in label set"),
                });
            }
        }
        Ok(EmotionLabels { labels, positive })
    }

    /// The default Mikels eight-category set.
    pub fn mikels() -> Self {
        EmotionLabels::new(
            MIKELS_LABELS.iter().map(|s| s.to_string()).collect(),
            MIKELS_POSITIVE.iter().map(|s| s.to_string()).collect(),
        )
        .expect("built-in label set is valid")
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index_of(label).is_some()
    }

    /// Zero-based position of a label, case-insensitive.
    pub fn index_of(&self, label: &str) -> Option<usize> {
        let needle = label.trim().to_lowercase();
        self.labels.iter().position(|l| *l == needle)
    }

    pub fn is_positive(&self, label: &str) -> bool {
        self.positive.contains(&label.trim().to_lowercase())
    }
}

impl Default for EmotionLabels {
    fn default() -> Self {
        EmotionLabels::mikels()
    }
}

#[derive(Debug, Error)]
pub enum KgError {
    #[error("empty node id")]
    EmptyId,
    #[error("duplicate node id {id:?}")]
    DuplicateId { id: NodeId },
    #[error("node {id:?}: embedding dimension {got} does not match graph dimension {expected}")]
    DimensionMismatch { id: NodeId, expected: usize, got: usize },
    #[error("node {id:?}: empty embedding")]
    EmptyEmbedding { id: NodeId },
    #[error("node {id:?}: non-finite value")]
    NonFiniteValue { id: NodeId },
    #[error("node {id:?} of kind {kind:?} carries a visual prototype; only attribute nodes may")]
    PrototypeOnNonAttribute { id: NodeId, kind: NodeKind },
    #[error("emotion node {id:?}: text {text:?} is not a configured emotion label")]
    UnknownEmotionLabel { id: NodeId, text: String },
    #[error("unknown endpoint {id:?}")]
    UnknownEndpoint { id: NodeId },
    #[error("self-loop on {id:?}")]
    SelfLoop { id: NodeId },
    #[error("illegal relation: {head_kind:?} -{rel:?}-> {tail_kind:?}")]
    IllegalRelation {
        head_kind: NodeKind,
        rel: Relation,
        tail_kind: NodeKind,
    },
    #[error("duplicate edge ({head:?}, {rel:?}, {tail:?})")]
    DuplicateEdge { head: NodeId, rel: Relation, tail: NodeId },
    #[error("edge weight {weight} outside [0, 1]")]
    WeightOutOfRange { weight: f64 },
    #[error("invalid emotion label set: {reason}")]
    BadLabelSet { reason: String },
}

/// An immutable-after-build typed graph.
///
/// The embedding dimension is fixed by the first node added (or pinned
/// up front with [`KnowledgeGraph::with_embed_dim`]); every later node
/// must match it.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    labels: EmotionLabels,
    embed_dim: Option<usize>,
    nodes: BTreeMap<NodeId, KgNode>,
    edges: BTreeMap<(NodeId, Relation, NodeId), f64>,
}

impl KnowledgeGraph {
    pub fn new(labels: EmotionLabels) -> Self {
        KnowledgeGraph {
            labels,
            embed_dim: None,
            nodes: BTreeMap::new(),
            edges: BTreeMap::new(),
        }
    }

    pub fn with_embed_dim(labels: EmotionLabels, dim: usize) -> Self {
        let mut g = KnowledgeGraph::new(labels);
        g.embed_dim = Some(dim);
        g
    }

    pub fn labels(&self) -> &EmotionLabels {
        &self.labels
    }

    /// Embedding dimension, `None` until the first node is added.
    pub fn embed_dim(&self) -> Option<usize> {
        self.embed_dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, id: &str) -> Option<&KgNode> {
        self.nodes.get(id)
    }

    /// Nodes in id order.
    pub fn nodes(&self) -> impl Iterator<Item = &KgNode> {
        self.nodes.values()
    }

    /// Edges in (head, rel, tail) order.
    pub fn edges(&self) -> impl Iterator<Item = KgEdge> + '_ {
        self.edges.iter().map(|((h, r, t), w)| KgEdge {
            head: h.clone(),
            rel: *r,
            tail: t.clone(),
            weight: *w,
        })
    }

    pub fn edge_weight(&self, head: &str, rel: Relation, tail: &str) -> Option<f64> {
        self.edges.get(&(head.to_string(), rel, tail.to_string())).copied()
    }

    /// Outgoing edges of one node, in (rel, tail) order.
    pub fn out_edges(&self, id: &str) -> impl Iterator<Item = KgEdge> + '_ {
        let lo = (id.to_string(), Relation::Contains, String::new());
        let id = id.to_string();
        self.edges
            .range(lo..)
            .take_while(move |((h, _, _), _)| *h == id)
            .map(|((h, r, t), w)| KgEdge {
                head: h.clone(),
                rel: *r,
                tail: t.clone(),
                weight: *w,
            })
    }

    /// LEADS_TO weight from an attribute node to an emotion node.
    pub fn leads_to_weight(&self, attribute: &str, emotion: &str) -> Option<f64> {
        self.edge_weight(attribute, Relation::LeadsTo, emotion)
    }

    /// Emotion node whose text matches the given label, case-insensitive.
    pub fn emotion_node(&self, label: &str) -> Option<&KgNode> {
        let needle = label.trim().to_lowercase();
        self.nodes
            .values()
            .find(|n| n.kind == NodeKind::Emotion && n.text.trim().to_lowercase() == needle)
    }

    pub fn add_node(&mut self, node: KgNode) -> Result<(), KgError> {
        if node.id.is_empty() {
            return Err(KgError::EmptyId);
        }
        if self.nodes.contains_key(&node.id) {
            return Err(KgError::DuplicateId { id: node.id });
        }
        if node.embedding.is_empty() {
            return Err(KgError::EmptyEmbedding { id: node.id });
        }
        if let Some(expected) = self.embed_dim {
            if node.embedding.len() != expected {
                return Err(KgError::DimensionMismatch {
                    expected,
                    got: node.embedding.len(),
                    id: node.id,
                });
            }
        }
        if !node.embedding.iter().all(|v| v.is_finite()) {
            return Err(KgError::NonFiniteValue { id: node.id });
        }
        if let Some(proto) = &node.visual_prototype {
            if node.kind != NodeKind::Attribute {
                return Err(KgError::PrototypeOnNonAttribute {
                    id: node.id,
                    kind: node.kind,
                });
            }
            let expected = self.embed_dim.unwrap_or(node.embedding.len());
            if proto.len() != expected {
                return Err(KgError::DimensionMismatch {
                    expected,
                    got: proto.len(),
                    id: node.id,
                });
            }
            if !proto.iter().all(|v| v.is_finite()) {
                return Err(KgError::NonFiniteValue { id: node.id });
            }
        }
        if node.kind == NodeKind::Emotion && !self.labels.contains(&node.text) {
            return Err(KgError::UnknownEmotionLabel {
                id: node.id,
                text: node.text,
            });
        }
        if self.embed_dim.is_none() {
            self.embed_dim = Some(node.embedding.len());
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn add_edge(&mut self, edge: KgEdge) -> Result<(), KgError> {
        let head = self
            .nodes
            .get(&edge.head)
            .ok_or_else(|| KgError::UnknownEndpoint { id: edge.head.clone() })?;
        let tail = self
            .nodes
            .get(&edge.tail)
            .ok_or_else(|| KgError::UnknownEndpoint { id: edge.tail.clone() })?;
        if edge.head == edge.tail {
            return Err(KgError::SelfLoop { id: edge.head });
        }
        if !Relation::legal(head.kind, edge.rel, tail.kind) {
            return Err(KgError::IllegalRelation {
                head_kind: head.kind,
                rel: edge.rel,
                tail_kind: tail.kind,
            });
        }
        if !(edge.weight.is_finite() && (0.0..=1.0).contains(&edge.weight)) {
            return Err(KgError::WeightOutOfRange { weight: edge.weight });
        }
        let key = (edge.head, edge.rel, edge.tail);
        if self.edges.contains_key(&key) {
            return Err(KgError::DuplicateEdge {
                head: key.0,
                rel: key.1,
                tail: key.2,
            });
        }
        self.edges.insert(key, edge.weight);
        Ok(())
    }
}
