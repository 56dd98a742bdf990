//! Reasoning-path retrieval over the knowledge graph.
//!
//! A valid path runs from a scene or object start to an emotion node
//! along one of two relation chains: CONTAINS then HAS_ATTR then
//! LEADS_TO, or HAS_ATTR then LEADS_TO. When a start has no direct path
//! to the target, its k nearest same-kind neighbors (cosine similarity
//! over node embeddings) stand in for it and their paths are tagged with
//! the substituted neighbor.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{KgEdge, KnowledgeGraph, NodeId, NodeKind, Relation};
use crate::vecmath::cosine;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub nodes: Vec<NodeId>,
    pub edges: Vec<KgEdge>,
    /// Neighbor substituted for the original start, if completion fired.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completed_from: Option<NodeId>,
}

impl ReasoningPath {
    /// The attribute node on this path (second to last node).
    pub fn attribute(&self) -> &NodeId {
        &self.nodes[self.nodes.len() - 2]
    }

    /// The emotion node this path ends at.
    pub fn emotion(&self) -> &NodeId {
        self.nodes.last().expect("paths have at least 2 nodes")
    }

    /// The object node on this path, if the chain goes through one.
    pub fn object<'a>(&'a self, graph: &KnowledgeGraph) -> Option<&'a NodeId> {
        match self.edges.first().map(|e| e.rel) {
            Some(Relation::Contains) => Some(&self.nodes[1]),
            Some(Relation::HasAttr) => {
                let start = graph.node(&self.nodes[0])?;
                (start.kind == NodeKind::Object).then_some(&self.nodes[0])
            }
            _ => None,
        }
    }

    fn sort_key(&self) -> (usize, Vec<NodeId>, Option<NodeId>) {
        (self.nodes.len(), self.nodes.clone(), self.completed_from.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalQuery {
    pub starts: Vec<NodeId>,
    pub targets: Vec<NodeId>,
    pub k: usize,
}

/// Default neighbor count for completion.
pub const DEFAULT_K: usize = 5;

/// A deduplicated, deterministically ordered set of reasoning paths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Subgraph {
    pub paths: Vec<ReasoningPath>,
}

impl Subgraph {
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Distinct node ids across all paths.
    pub fn node_ids(&self) -> BTreeSet<NodeId> {
        self.paths.iter().flat_map(|p| p.nodes.iter().cloned()).collect()
    }

    /// Distinct edges across all paths, in (head, rel, tail) order.
    pub fn edges(&self) -> Vec<KgEdge> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.paths {
            for e in &p.edges {
                if seen.insert((e.head.clone(), e.rel, e.tail.clone())) {
                    out.push(e.clone());
                }
            }
        }
        out.sort_by(|a, b| {
            (&a.head, a.rel, &a.tail).cmp(&(&b.head, b.rel, &b.tail))
        });
        out
    }

    /// Distinct attribute node ids, in the deterministic path order.
    pub fn attribute_ids(&self) -> Vec<NodeId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.paths {
            let a = p.attribute().clone();
            if seen.insert(a.clone()) {
                out.push(a);
            }
        }
        out
    }

    /// First path containing the given attribute, in deterministic order.
    pub fn path_for_attribute(&self, attribute: &str) -> Option<&ReasoningPath> {
        self.paths.iter().find(|p| p.attribute() == attribute)
    }
}

/// Serialized form: paths plus derived node/edge projections.
#[derive(Debug, Serialize, Deserialize)]
pub struct SubgraphDoc {
    pub paths: Vec<ReasoningPath>,
    #[serde(default)]
    pub nodes: Vec<NodeId>,
    #[serde(default)]
    pub edges: Vec<KgEdge>,
}

impl Subgraph {
    pub fn to_doc(&self) -> SubgraphDoc {
        SubgraphDoc {
            paths: self.paths.clone(),
            nodes: self.node_ids().into_iter().collect(),
            edges: self.edges(),
        }
    }

    pub fn from_doc(doc: SubgraphDoc) -> Subgraph {
        Subgraph { paths: doc.paths }
    }
}

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("unknown node {id:?}")]
    UnknownNode { id: NodeId },
    #[error("node {id:?} has kind {got:?}, expected {expected}")]
    WrongNodeKind {
        id: NodeId,
        expected: &'static str,
        got: NodeKind,
    },
    #[error("node {id:?} has a zero-norm embedding")]
    ZeroEmbedding { id: NodeId },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("query has no start nodes")]
    EmptyStarts,
}

fn require_kind(
    graph: &KnowledgeGraph,
    id: &str,
    allowed: &[NodeKind],
    expected: &'static str,
) -> Result<NodeKind, RetrievalError> {
    let node = graph
        .node(id)
        .ok_or_else(|| RetrievalError::UnknownNode { id: id.to_string() })?;
    if !allowed.contains(&node.kind) {
        return Err(RetrievalError::WrongNodeKind {
            id: id.to_string(),
            expected,
            got: node.kind,
        });
    }
    Ok(node.kind)
}

/// All schema-valid simple paths from `s` (scene or object) to emotion
/// `t`, ordered by (length, node ids).
pub fn paths(graph: &KnowledgeGraph, s: &str, t: &str) -> Result<Vec<ReasoningPath>, RetrievalError> {
    let start_kind = require_kind(graph, s, &[NodeKind::Scene, NodeKind::Object], "scene or object")?;
    require_kind(graph, t, &[NodeKind::Emotion], "emotion")?;

    let mut found = Vec::new();
    // Chain: start -HAS_ATTR-> attribute -LEADS_TO-> t
    for ha in graph.out_edges(s).filter(|e| e.rel == Relation::HasAttr) {
        if let Some(w) = graph.edge_weight(&ha.tail, Relation::LeadsTo, t) {
            found.push(ReasoningPath {
                nodes: vec![s.to_string(), ha.tail.clone(), t.to_string()],
                edges: vec![ha.clone(), KgEdge::new(ha.tail.clone(), Relation::LeadsTo, t, w)],
                completed_from: None,
            });
        }
    }
    // Chain: scene -CONTAINS-> object -HAS_ATTR-> attribute -LEADS_TO-> t
    if start_kind == NodeKind::Scene {
        for co in graph.out_edges(s).filter(|e| e.rel == Relation::Contains) {
            for ha in graph.out_edges(&co.tail).filter(|e| e.rel == Relation::HasAttr) {
                if let Some(w) = graph.edge_weight(&ha.tail, Relation::LeadsTo, t) {
                    found.push(ReasoningPath {
                        nodes: vec![s.to_string(), co.tail.clone(), ha.tail.clone(), t.to_string()],
                        edges: vec![
                            co.clone(),
                            ha.clone(),
                            KgEdge::new(ha.tail.clone(), Relation::LeadsTo, t, w),
                        ],
                        completed_from: None,
                    });
                }
            }
        }
    }
    found.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(found)
}

/// The k same-kind nearest neighbors of `s` by cosine similarity,
/// excluding `s` itself, ties broken by id. Returns fewer than k when
/// the graph is small.
pub fn knn(graph: &KnowledgeGraph, s: &str, k: usize) -> Result<Vec<NodeId>, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::InvalidK);
    }
    let anchor = graph
        .node(s)
        .ok_or_else(|| RetrievalError::UnknownNode { id: s.to_string() })?;
    let mut scored: Vec<(f64, &NodeId)> = Vec::new();
    for node in graph.nodes() {
        if node.kind != anchor.kind || node.id == anchor.id {
            continue;
        }
        let sim = cosine(&anchor.embedding, &node.embedding).ok_or_else(|| {
            let zero_is_anchor = crate::vecmath::l2_norm(&anchor.embedding) < crate::vecmath::ZERO_NORM_EPS;
            RetrievalError::ZeroEmbedding {
                id: if zero_is_anchor { anchor.id.clone() } else { node.id.clone() },
            }
        })?;
        scored.push((sim, &node.id));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarities").then(a.1.cmp(b.1)));
    Ok(scored.into_iter().take(k).map(|(_, id)| id.clone()).collect())
}

/// `paths(s, t)` when nonempty, otherwise the union of `paths(u, t)`
/// over the k nearest neighbors u of s, each tagged `completed_from=u`.
pub fn completed_paths(
    graph: &KnowledgeGraph,
    s: &str,
    t: &str,
    k: usize,
) -> Result<Vec<ReasoningPath>, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::InvalidK);
    }
    let direct = paths(graph, s, t)?;
    if !direct.is_empty() {
        return Ok(direct);
    }
    let mut out = Vec::new();
    for u in knn(graph, s, k)? {
        for mut p in paths(graph, &u, t)? {
            p.completed_from = Some(u.clone());
            out.push(p);
        }
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(out)
}

/// Union of completed paths over all (start, target) pairs, deduplicated.
pub fn retrieve_subgraph(graph: &KnowledgeGraph, query: &RetrievalQuery) -> Result<Subgraph, RetrievalError> {
    if query.starts.is_empty() {
        return Err(RetrievalError::EmptyStarts);
    }
    if query.k < 1 {
        return Err(RetrievalError::InvalidK);
    }
    for t in &query.targets {
        require_kind(graph, t, &[NodeKind::Emotion], "emotion")?;
    }
    let mut seen: BTreeSet<(Vec<NodeId>, Option<NodeId>)> = BTreeSet::new();
    let mut all = Vec::new();
    for s in &query.starts {
        for t in &query.targets {
            for p in completed_paths(graph, s, t, query.k)? {
                if seen.insert((p.nodes.clone(), p.completed_from.clone())) {
                    all.push(p);
                }
            }
        }
    }
    all.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(Subgraph { paths: all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EmotionLabels, KgNode};

    fn node(id: &str, kind: NodeKind, emb: &[f64]) -> KgNode {
        KgNode::new(id, kind, id, emb.to_vec())
    }

    fn forest_graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("forest", NodeKind::Scene, &[1.0, 0.0])).unwrap();
        g.add_node(node("dog", NodeKind::Object, &[0.0, 1.0])).unwrap();
        g.add_node(node("snarling", NodeKind::Attribute, &[1.0, 1.0])).unwrap();
        g.add_node(node("fear", NodeKind::Emotion, &[0.5, 0.5])).unwrap();
        g.add_node(node("amusement", NodeKind::Emotion, &[0.5, -0.5])).unwrap();
        g.add_edge(KgEdge::new("forest", Relation::Contains, "dog", 0.8)).unwrap();
        g.add_edge(KgEdge::new("dog", Relation::HasAttr, "snarling", 0.7)).unwrap();
        g.add_edge(KgEdge::new("snarling", Relation::LeadsTo, "fear", 0.9)).unwrap();
        g
    }

    #[test]
    fn scene_start_finds_four_node_path() {
        let g = forest_graph();
        let ps = paths(&g, "forest", "fear").unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].nodes, vec!["forest", "dog", "snarling", "fear"]);
        assert_eq!(ps[0].edges.len(), 3);
        assert!(ps[0].completed_from.is_none());
    }

    #[test]
    fn object_start_finds_three_node_path() {
        let g = forest_graph();
        let ps = paths(&g, "dog", "fear").unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].nodes, vec!["dog", "snarling", "fear"]);
    }

    #[test]
    fn no_connection_yields_empty() {
        let g = forest_graph();
        let ps = paths(&g, "dog", "amusement").unwrap();
        assert!(ps.is_empty());
    }

    #[test]
    fn wrong_start_kind_rejected() {
        let g = forest_graph();
        let err = paths(&g, "snarling", "fear").unwrap_err();
        assert!(matches!(err, RetrievalError::WrongNodeKind { .. }));
        let err = paths(&g, "forest", "dog").unwrap_err();
        assert!(matches!(err, RetrievalError::WrongNodeKind { .. }));
    }

    fn knn_graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("e1", NodeKind::Object, &[1.0, 0.0])).unwrap();
        g.add_node(node("e2", NodeKind::Object, &[0.9, 0.1])).unwrap();
        g.add_node(node("e3", NodeKind::Object, &[0.0, 1.0])).unwrap();
        g.add_node(node("e4", NodeKind::Object, &[-1.0, 0.0])).unwrap();
        g
    }

    #[test]
    fn knn_ranks_by_cosine() {
        let g = knn_graph();
        assert_eq!(knn(&g, "e1", 2).unwrap(), vec!["e2", "e3"]);
    }

    #[test]
    fn knn_truncates_to_available() {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("a", NodeKind::Object, &[1.0])).unwrap();
        g.add_node(node("b", NodeKind::Object, &[1.0])).unwrap();
        assert_eq!(knn(&g, "a", 5).unwrap(), vec!["b"]);
    }

    #[test]
    fn knn_ties_break_lexicographically() {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("q", NodeKind::Object, &[1.0, 0.0])).unwrap();
        g.add_node(node("zz", NodeKind::Object, &[2.0, 0.0])).unwrap();
        g.add_node(node("aa", NodeKind::Object, &[3.0, 0.0])).unwrap();
        assert_eq!(knn(&g, "q", 2).unwrap(), vec!["aa", "zz"]);
    }

    #[test]
    fn knn_rejects_zero_embedding() {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("a", NodeKind::Object, &[0.0, 0.0])).unwrap();
        g.add_node(node("b", NodeKind::Object, &[1.0, 0.0])).unwrap();
        let err = knn(&g, "a", 1).unwrap_err();
        assert!(matches!(err, RetrievalError::ZeroEmbedding { id } if id == "a"));
    }

    #[test]
    fn knn_is_prefix_monotone() {
        let g = knn_graph();
        let k2 = knn(&g, "e1", 2).unwrap();
        let k3 = knn(&g, "e1", 3).unwrap();
        assert_eq!(&k3[..2], &k2[..]);
    }

    #[test]
    fn direct_paths_skip_completion() {
        let g = forest_graph();
        let cp = completed_paths(&g, "forest", "fear", 3).unwrap();
        assert_eq!(cp, paths(&g, "forest", "fear").unwrap());
        assert!(cp.iter().all(|p| p.completed_from.is_none()));
    }

    fn completion_graph() -> KnowledgeGraph {
        let mut g = forest_graph();
        // "cat" is isolated but embedding-close to "dog".
        g.add_node(node("cat", NodeKind::Object, &[0.1, 1.0])).unwrap();
        g
    }

    #[test]
    fn isolated_start_borrows_neighbor_paths() {
        let g = completion_graph();
        let cp = completed_paths(&g, "cat", "fear", 1).unwrap();
        assert_eq!(cp.len(), 1);
        assert_eq!(cp[0].nodes, vec!["dog", "snarling", "fear"]);
        assert_eq!(cp[0].completed_from.as_deref(), Some("dog"));
    }

    #[test]
    fn exhausted_fallback_yields_empty() {
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        g.add_node(node("a", NodeKind::Object, &[1.0, 0.0])).unwrap();
        g.add_node(node("b", NodeKind::Object, &[0.9, 0.1])).unwrap();
        g.add_node(node("fear", NodeKind::Emotion, &[0.0, 1.0])).unwrap();
        assert!(completed_paths(&g, "a", "fear", 2).unwrap().is_empty());
    }

    #[test]
    fn subgraph_unions_and_dedups() {
        let g = completion_graph();
        let q = RetrievalQuery {
            starts: vec!["forest".into(), "dog".into()],
            targets: vec!["fear".into()],
            k: 2,
        };
        let sg = retrieve_subgraph(&g, &q).unwrap();
        assert_eq!(sg.paths.len(), 2);
        let q_single = RetrievalQuery {
            starts: vec!["dog".into()],
            targets: vec!["fear".into()],
            k: 2,
        };
        let sg_single = retrieve_subgraph(&g, &q_single).unwrap();
        assert_eq!(sg_single.paths, completed_paths(&g, "dog", "fear", 2).unwrap());
    }

    #[test]
    fn subgraph_rejects_non_emotion_target() {
        let g = forest_graph();
        let q = RetrievalQuery {
            starts: vec!["forest".into()],
            targets: vec!["dog".into()],
            k: 1,
        };
        assert!(matches!(
            retrieve_subgraph(&g, &q).unwrap_err(),
            RetrievalError::WrongNodeKind { .. }
        ));
    }

    #[test]
    fn subgraph_projections_cover_paths() {
        let g = completion_graph();
        let q = RetrievalQuery {
            starts: vec!["forest".into(), "cat".into()],
            targets: vec!["fear".into()],
            k: 1,
        };
        let sg = retrieve_subgraph(&g, &q).unwrap();
        let nodes = sg.node_ids();
        for p in &sg.paths {
            for n in &p.nodes {
                assert!(nodes.contains(n));
            }
        }
        assert_eq!(sg.attribute_ids(), vec!["snarling".to_string()]);
    }
}
