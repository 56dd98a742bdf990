//! JSONL persistence for knowledge graphs.
//!
//! One JSON object per line. Node records:
//! `{"kind":"node","id":...,"type":"scene|object|attribute|emotion","text":...,"embedding":[...],"visual_prototype":[...]?}`
//! Edge records:
//! `{"kind":"edge","head":...,"rel":"CONTAINS|HAS_ATTR|LEADS_TO","tail":...,"weight":...}`
//!
//! Loading replays records in file order through the graph's own
//! `add_node`/`add_edge`, so every schema violation surfaces with its
//! line number. Saving writes nodes in id order followed by edges in
//! (head, rel, tail) order, which makes save(load(f)) a canonical form.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{EmotionLabels, KgEdge, KgError, KgNode, KnowledgeGraph, NodeKind, Relation};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KgRecord {
    Node {
        id: String,
        #[serde(rename = "type")]
        node_type: NodeKind,
        text: String,
        embedding: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        visual_prototype: Option<Vec<f64>>,
    },
    Edge {
        head: String,
        rel: Relation,
        tail: String,
        weight: f64,
    },
}

impl KgRecord {
    pub fn from_node(node: &KgNode) -> Self {
        KgRecord::Node {
            id: node.id.clone(),
            node_type: node.kind,
            text: node.text.clone(),
            embedding: node.embedding.clone(),
            visual_prototype: node.visual_prototype.clone(),
        }
    }

    pub fn from_edge(edge: &KgEdge) -> Self {
        KgRecord::Edge {
            head: edge.head.clone(),
            rel: edge.rel,
            tail: edge.tail.clone(),
            weight: edge.weight,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Graph { line: usize, source: KgError },
}

/// Load a graph with the default Mikels emotion labels.
pub fn load_graph(path: impl AsRef<Path>) -> Result<KnowledgeGraph, LoadError> {
    load_graph_with_labels(path, EmotionLabels::mikels())
}

/// Load a graph, replaying records in file order. Blank lines are skipped.
pub fn load_graph_with_labels(
    path: impl AsRef<Path>,
    labels: EmotionLabels,
) -> Result<KnowledgeGraph, LoadError> {
    let content = fs::read_to_string(path)?;
    let mut graph = KnowledgeGraph::new(labels);
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: KgRecord = serde_json::from_str(line).map_err(|e| LoadError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        apply(&mut graph, record).map_err(|source| LoadError::Graph { line: line_no, source })?;
    }
    Ok(graph)
}

fn apply(graph: &mut KnowledgeGraph, record: KgRecord) -> Result<(), KgError> {
    match record {
        KgRecord::Node {
            id,
            node_type,
            text,
            embedding,
            visual_prototype,
        } => graph.add_node(KgNode {
            id,
            kind: node_type,
            text,
            embedding,
            visual_prototype,
        }),
        KgRecord::Edge { head, rel, tail, weight } => graph.add_edge(KgEdge { head, rel, tail, weight }),
    }
}

/// Write the canonical JSONL form: nodes in id order, then edges in
/// (head, rel, tail) order.
pub fn save_graph(graph: &KnowledgeGraph, path: impl AsRef<Path>) -> Result<(), std::io::Error> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for node in graph.nodes() {
        let record = KgRecord::from_node(node);
        let line = serde_json::to_string(&record).expect("graph records serialize");
        writeln!(w, "{line}")?;
    }
    for edge in graph.edges() {
        let record = KgRecord::from_edge(&edge);
        let line = serde_json::to_string(&record).expect("graph records serialize");
        writeln!(w, "{line}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn three_line_file_replays_to_graph() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"kind\":\"node\",\"id\":\"a\",\"type\":\"attribute\",\"text\":\"dim\",\"embedding\":[1.0,0.0]}\n",
                "{\"kind\":\"node\",\"id\":\"fear\",\"type\":\"emotion\",\"text\":\"fear\",\"embedding\":[0.0,1.0]}\n",
                "{\"kind\":\"edge\",\"head\":\"a\",\"rel\":\"LEADS_TO\",\"tail\":\"fear\",\"weight\":0.7}\n",
            ),
        )
        .unwrap();
        let g = load_graph(&path).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.leads_to_weight("a", "fear"), Some(0.7));
    }

    #[test]
    fn edge_before_endpoints_fails_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        fs::write(
            &path,
            concat!(
                "{\"kind\":\"node\",\"id\":\"a\",\"type\":\"attribute\",\"text\":\"dim\",\"embedding\":[1.0]}\n",
                "{\"kind\":\"edge\",\"head\":\"a\",\"rel\":\"LEADS_TO\",\"tail\":\"fear\",\"weight\":0.7}\n",
            ),
        )
        .unwrap();
        match load_graph(&path).unwrap_err() {
            LoadError::Graph {
                line,
                source: KgError::UnknownEndpoint { id },
            } => {
                assert_eq!(line, 2);
                assert_eq!(id, "fear");
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn malformed_json_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.jsonl");
        fs::write(&path, "{\"kind\":\"node\"\n").unwrap();
        match load_graph(&path).unwrap_err() {
            LoadError::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected: {other:?}"),
        }
    }

    fn random_graph(seed: u64) -> KnowledgeGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = KnowledgeGraph::new(EmotionLabels::mikels());
        let dim = 4;
        let rand_vec = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
        };
        for i in 0..6 {
            let v = rand_vec(&mut rng);
            g.add_node(KgNode::new(format!("sc{i}"), NodeKind::Scene, format!("scene {i}"), v))
                .unwrap();
        }
        for i in 0..8 {
            let v = rand_vec(&mut rng);
            g.add_node(KgNode::new(format!("ob{i}"), NodeKind::Object, format!("object {i}"), v))
                .unwrap();
        }
        for i in 0..12 {
            let v = rand_vec(&mut rng);
            let mut n = KgNode::new(format!("at{i}"), NodeKind::Attribute, format!("attr {i}"), v);
            if rng.random_bool(0.5) {
                n = n.with_prototype(rand_vec(&mut rng));
            }
            g.add_node(n).unwrap();
        }
        for label in crate::kg::MIKELS_LABELS.iter().take(4) {
            let v = rand_vec(&mut rng);
            g.add_node(KgNode::new(format!("em_{label}"), NodeKind::Emotion, *label, v))
                .unwrap();
        }
        for i in 0..6 {
            for j in 0..8 {
                if rng.random_bool(0.25) {
                    let _ = g.add_edge(KgEdge::new(
                        format!("sc{i}"),
                        Relation::Contains,
                        format!("ob{j}"),
                        rng.random_range(0.0..1.0),
                    ));
                }
            }
        }
        for j in 0..8 {
            for a in 0..12 {
                if rng.random_bool(0.2) {
                    let _ = g.add_edge(KgEdge::new(
                        format!("ob{j}"),
                        Relation::HasAttr,
                        format!("at{a}"),
                        rng.random_range(0.0..1.0),
                    ));
                }
            }
        }
        for a in 0..12 {
            for label in crate::kg::MIKELS_LABELS.iter().take(4) {
                if rng.random_bool(0.3) {
                    let _ = g.add_edge(KgEdge::new(
                        format!("at{a}"),
                        Relation::LeadsTo,
                        format!("em_{label}"),
                        rng.random_range(0.0..1.0),
                    ));
                }
            }
        }
        g
    }

    #[test]
    fn save_load_round_trip_is_identity_and_canonical() {
        let dir = tempfile::tempdir().unwrap();
        let g = random_graph(7);
        assert!(g.node_count() + g.edge_count() >= 50, "fixture should have 50+ records");

        let p1 = dir.path().join("g1.jsonl");
        save_graph(&g, &p1).unwrap();
        let loaded = load_graph(&p1).unwrap();
        assert_eq!(g, loaded);

        let p2 = dir.path().join("g2.jsonl");
        save_graph(&loaded, &p2).unwrap();
        let b1 = fs::read(&p1).unwrap();
        let b2 = fs::read(&p2).unwrap();
        assert_eq!(b1, b2, "canonical form is stable under reload");
    }

    #[test]
    fn construction_is_order_independent_for_legal_permutations() {
        let g = random_graph(11);
        let mut node_records: Vec<KgRecord> = g.nodes().map(KgRecord::from_node).collect();
        let mut edge_records: Vec<KgRecord> = g.edges().map(|e| KgRecord::from_edge(&e)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            shuffle(&mut node_records, &mut rng);
            shuffle(&mut edge_records, &mut rng);
            let mut rebuilt = KnowledgeGraph::new(EmotionLabels::mikels());
            for r in node_records.iter().chain(edge_records.iter()) {
                apply(&mut rebuilt, r.clone()).unwrap();
            }
            assert_eq!(g, rebuilt);
        }
    }

    fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
        for i in (1..v.len()).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
    }
}
