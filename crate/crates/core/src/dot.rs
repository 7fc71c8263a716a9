//! Graphviz export.

use std::fmt::Write;

use crate::graph::{DecisionGraph, NodeKind};

fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn shape(kind: NodeKind) -> &'static str {
    match kind {
        NodeKind::Entry => "ellipse",
        NodeKind::Intermediate => "box",
        NodeKind::Terminal => "doubleoctagon",
    }
}

/// DOT document with nodes in id order and edges in canonical order.
pub fn to_dot(graph: &DecisionGraph) -> String {
    let mut out = String::from("digraph decision_graph {\n  rankdir=TB;\n");
    for node in graph.nodes() {
        let _ = writeln!(
            out,
            "  {} [label={}, shape={}];",
            quote(node.node_id.as_str()),
            quote(&node.label),
            shape(node.kind)
        );
    }
    for edge in graph.edges() {
        let _ = writeln!(
            out,
            "  {} -> {} [label={}];",
            quote(edge.source.as_str()),
            quote(edge.target.as_str()),
            quote(&edge.label)
        );
    }
    out.push_str("}\n");
    out
}
