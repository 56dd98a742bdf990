//! A small bundled sample graph for quickstarts and offline tests.

use super::{EmotionLabels, KgEdge, KgNode, KnowledgeGraph, NodeKind, Relation, MIKELS_LABELS};
use crate::providers::hashed_unit_vector;

/// Build the bundled demo graph: three scenes, five objects, eight
/// attributes, and all eight emotions, with deterministic embeddings
/// derived from node text.
pub fn demo_graph(embed_dim: usize) -> KnowledgeGraph {
    let mut g = KnowledgeGraph::with_embed_dim(EmotionLabels::mikels(), embed_dim);
    let emb = |text: &str| hashed_unit_vector(text, embed_dim, 0);
    let proto = |text: &str| hashed_unit_vector(&format!("proto:{text}"), embed_dim, 0);

    let scenes = ["forest", "street", "beach"];
    for s in scenes {
        g.add_node(KgNode::new(s, NodeKind::Scene, s, emb(s))).unwrap();
    }
    let objects = ["dog", "trash can", "bench", "waves", "path"];
    let object_ids = ["dog", "trash_can", "bench", "waves", "trail"];
    for (id, text) in object_ids.iter().zip(objects) {
        g.add_node(KgNode::new(*id, NodeKind::Object, text, emb(text))).unwrap();
    }
    let attributes = [
        "snarling", "dim", "overflowing", "rusty", "golden", "gentle", "stormy", "playful",
    ];
    for a in attributes {
        let node = KgNode::new(a, NodeKind::Attribute, a, emb(a)).with_prototype(proto(a));
        g.add_node(node).unwrap();
    }
    for label in MIKELS_LABELS {
        g.add_node(KgNode::new(label, NodeKind::Emotion, label, emb(label))).unwrap();
    }

    let contains = [
        ("forest", "dog", 0.9),
        ("forest", "bench", 0.6),
        ("forest", "trail", 0.7),
        ("street", "trash_can", 0.9),
        ("street", "bench", 0.7),
        ("street", "dog", 0.5),
        ("beach", "waves", 0.95),
        ("beach", "dog", 0.6),
    ];
    for (h, t, w) in contains {
        g.add_edge(KgEdge::new(h, Relation::Contains, t, w)).unwrap();
    }
    let has_attr = [
        ("dog", "snarling", 0.8),
        ("dog", "playful", 0.9),
        ("trash_can", "overflowing", 0.9),
        ("trash_can", "rusty", 0.7),
        ("bench", "rusty", 0.6),
        ("waves", "gentle", 0.8),
        ("waves", "stormy", 0.7),
        ("trail", "dim", 0.6),
        ("forest", "dim", 0.7),
        ("street", "dim", 0.5),
        ("beach", "golden", 0.8),
    ];
    for (h, t, w) in has_attr {
        g.add_edge(KgEdge::new(h, Relation::HasAttr, t, w)).unwrap();
    }
    let leads_to = [
        ("snarling", "fear", 0.9),
        ("snarling", "anger", 0.6),
        ("dim", "fear", 0.7),
        ("dim", "sadness", 0.65),
        ("overflowing", "disgust", 0.85),
        ("rusty", "sadness", 0.65),
        ("rusty", "disgust", 0.5),
        ("golden", "awe", 0.8),
        ("golden", "contentment", 0.7),
        ("gentle", "contentment", 0.75),
        ("stormy", "fear", 0.75),
        ("stormy", "awe", 0.6),
        ("playful", "amusement", 0.85),
        ("playful", "excitement", 0.7),
    ];
    for (h, t, w) in leads_to {
        g.add_edge(KgEdge::new(h, Relation::LeadsTo, t, w)).unwrap();
    }
    g
}
