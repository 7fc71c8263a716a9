//! Consolidates chunk graphs into one graph.
//!
//! The chunk graphs are unioned, then every interface node is checked
//! against nodes from other chunks. Confirmed duplicates are merged: the
//! survivor keeps all edges of both, and the absorbed node's id is recorded
//! in its provenance. A survivor goes back on the queue so chains of
//! duplicates spanning several chunks collapse fully.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DecisionEdge, DecisionGraph, DecisionNode, NodeId, NodeKind};
use crate::model::Chunk;
use crate::normalize::normalize_label;
use crate::oracle::tasks::{FindDuplicate, LabeledEdge};
use crate::oracle::Oracle;
use crate::retrieval::{cosine, cosine_candidates, similarity_key, EmbeddingStore, Query};

pub const DEFAULT_ANCESTOR_CAP: usize = 8;

const MERGE_LOG_FORMAT: &str = "guidegraph.merge-log";
const PROVENANCE_FORMAT: &str = "guidegraph.provenance";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateSettings {
    pub candidate_count: usize,
    /// Most similar ancestors shown to the verifier.
    pub ancestor_cap: usize,
}

impl Default for AggregateSettings {
    fn default() -> Self {
        Self {
            candidate_count: crate::retrieval::DEFAULT_CANDIDATE_COUNT,
            ancestor_cap: DEFAULT_ANCESTOR_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeReason {
    NonTerminalPreferred,
    EarlierChunk,
    IdTieBreak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub primary: NodeId,
    pub secondary: NodeId,
    pub reason: MergeReason,
    pub primary_kind: NodeKind,
    pub secondary_kind: NodeKind,
    pub primary_chunk: u32,
    pub secondary_chunk: u32,
    /// Similarity between the dequeued node and its match.
    pub similarity: f64,
    /// Matched on identical labels, without the verifier.
    pub exact: bool,
    /// The survivor was queued again after this merge.
    pub requeued: bool,
    /// Edges that would have become self-loops, before rewiring.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub suppressed_loops: Vec<DecisionEdge>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MergeLog {
    pub decisions: Vec<MergeDecision>,
    /// Verifier calls that failed and were treated as "no duplicate".
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verifier_failures: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MergeLogDocument {
    format: String,
    version: u32,
    decisions: Vec<MergeDecision>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    verifier_failures: Vec<String>,
}

impl MergeLog {
    pub fn suppressed_loops(&self) -> impl Iterator<Item = &DecisionEdge> {
        self.decisions.iter().flat_map(|d| d.suppressed_loops.iter())
    }

    pub fn to_json(&self) -> String {
        let doc = MergeLogDocument {
            format: MERGE_LOG_FORMAT.into(),
            version: 1,
            decisions: self.decisions.clone(),
            verifier_failures: self.verifier_failures.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("merge log encodes") + "\n"
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let doc: MergeLogDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.format != MERGE_LOG_FORMAT || doc.version != 1 {
            return Err(format!("unsupported merge log {}/{}", doc.format, doc.version));
        }
        Ok(Self {
            decisions: doc.decisions,
            verifier_failures: doc.verifier_failures,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutput {
    pub graph: DecisionGraph,
    pub log: MergeLog,
}

/// Disjoint union of the chunk graphs.
pub fn union_graphs(graphs: &[DecisionGraph]) -> Result<DecisionGraph> {
    let mut union = DecisionGraph::new();
    for graph in graphs {
        for node in graph.nodes() {
            union.insert_node(node.clone())?;
        }
    }
    for graph in graphs {
        for edge in graph.edges() {
            union.insert_edge(edge.clone())?;
        }
    }
    Ok(union)
}

/// Interface node ids in chunk order: each chunk's entries, then its
/// terminals, without repeats.
pub fn seed_interface_queue(chunks: &[Chunk], graph: &DecisionGraph) -> Result<VecDeque<NodeId>> {
    let mut queue = VecDeque::new();
    let mut seen = HashSet::new();
    for chunk in chunks {
        for label in chunk.entry_labels.iter().chain(&chunk.terminal_labels) {
            let normalized = normalize_label(label)?;
            let node = graph
                .nodes()
                .find(|n| n.origin_chunk == chunk.chunk_id && n.answers_to(&normalized))
                .ok_or_else(|| Error::InterfaceResolution {
                    chunk: chunk.chunk_id,
                    label: label.clone(),
                })?;
            if seen.insert(node.node_id.clone()) {
                queue.push_back(node.node_id.clone());
            }
        }
    }
    Ok(queue)
}

/// Survivor, absorbed node and the rule that decided.
pub fn choose_primary_secondary<'a>(
    x: &'a DecisionNode,
    y: &'a DecisionNode,
) -> (&'a DecisionNode, &'a DecisionNode, MergeReason) {
    let x_term = x.kind == NodeKind::Terminal;
    let y_term = y.kind == NodeKind::Terminal;
    if x_term != y_term {
        return if x_term {
            (y, x, MergeReason::NonTerminalPreferred)
        } else {
            (x, y, MergeReason::NonTerminalPreferred)
        };
    }
    if x.origin_chunk != y.origin_chunk {
        return if x.origin_chunk < y.origin_chunk {
            (x, y, MergeReason::EarlierChunk)
        } else {
            (y, x, MergeReason::EarlierChunk)
        };
    }
    if x.node_id < y.node_id {
        (x, y, MergeReason::IdTieBreak)
    } else {
        (y, x, MergeReason::IdTieBreak)
    }
}

struct Match {
    node_id: NodeId,
    similarity: f64,
    exact: bool,
}

fn ancestor_context(
    graph: &DecisionGraph,
    store: &EmbeddingStore,
    x: &DecisionNode,
    cap: usize,
) -> Result<Vec<LabeledEdge>> {
    let own = store.embed(&x.label)?;
    let mut scored = Vec::new();
    for edge in graph.incoming(&x.node_id) {
        let ancestor = graph.node(&edge.source).expect("valid graph");
        let sim = cosine(&own, &store.embed(&ancestor.label)?);
        scored.push((similarity_key(sim), edge.source.clone(), ancestor.label.clone(), edge.label.clone()));
    }
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)).then_with(|| a.3.cmp(&b.3)));
    scored.truncate(cap);
    Ok(scored
        .into_iter()
        .map(|(_, _, label, condition)| LabeledEdge { label, condition })
        .collect())
}

fn find_cross_chunk_duplicate(
    oracle: &Oracle,
    store: &EmbeddingStore,
    graph: &DecisionGraph,
    x: &DecisionNode,
    settings: &AggregateSettings,
    failures: &mut Vec<String>,
) -> Result<Option<Match>> {
    let pool: Vec<&DecisionNode> = graph.nodes().filter(|y| y.origin_chunk != x.origin_chunk).collect();
    if let Some(y) = pool
        .iter()
        .find(|y| y.answers_to(&x.label) || x.aliases.iter().any(|a| y.answers_to(a)))
    {
        return Ok(Some(Match {
            node_id: y.node_id.clone(),
            similarity: if x.label == y.label {
                1.0
            } else {
                cosine(&store.embed(&x.label)?, &store.embed(&y.label)?)
            },
            exact: true,
        }));
    }
    let candidates = cosine_candidates(
        store,
        Query::Node(&x.node_id, &x.label),
        pool.iter().map(|y| (&y.node_id, y.label.as_str())),
        settings.candidate_count,
    )?;
    if candidates.is_empty() {
        return Ok(None);
    }
    let query = FindDuplicate {
        candidate: x.label.clone(),
        ancestors: ancestor_context(graph, store, x, settings.ancestor_cap)?,
        candidates: candidates
            .entries
            .iter()
            .map(|c| graph.node(&c.node_id).expect("pool node").label.clone())
            .collect(),
    };
    match oracle.ask(&query) {
        Ok(reply) => Ok(reply
            .matches
            .iter()
            .map(|&i| &candidates.entries[i])
            .min_by(|a, b| {
                similarity_key(b.similarity)
                    .cmp(&similarity_key(a.similarity))
                    .then_with(|| a.node_id.cmp(&b.node_id))
            })
            .map(|c| Match {
                node_id: c.node_id.clone(),
                similarity: c.similarity,
                exact: false,
            })),
        Err(e) => {
            log::warn!("duplicate check for {} failed: {e}", x.node_id);
            failures.push(format!("{}: {e}", x.node_id));
            Ok(None)
        }
    }
}

/// Unions the chunk graphs and merges cross-chunk duplicates.
pub fn aggregate(
    oracle: &Oracle,
    store: &EmbeddingStore,
    chunks: &[Chunk],
    graphs: &[DecisionGraph],
    settings: &AggregateSettings,
) -> Result<AggregateOutput> {
    let mut graph = union_graphs(graphs)?;
    let mut queue = seed_interface_queue(chunks, &graph)?;
    let mut pending: HashSet<NodeId> = queue.iter().cloned().collect();
    let mut removed: HashSet<NodeId> = HashSet::new();
    let mut log = MergeLog::default();

    while let Some(x_id) = queue.pop_front() {
        pending.remove(&x_id);
        if removed.contains(&x_id) {
            continue;
        }
        let x = graph.node(&x_id).expect("live queue entries exist").clone();
        let Some(found) =
            find_cross_chunk_duplicate(oracle, store, &graph, &x, settings, &mut log.verifier_failures)?
        else {
            continue;
        };
        let y = graph.node(&found.node_id).expect("candidate exists").clone();
        let (p, s, reason) = choose_primary_secondary(&x, &y);
        let (p, s) = (p.clone(), s.clone());
        let outcome = graph.merge_nodes(&p.node_id, &s.node_id)?;
        if (p.kind == NodeKind::Terminal) != (s.kind == NodeKind::Terminal) {
            graph.node_mut(&p.node_id).expect("survivor").kind = NodeKind::Intermediate;
        }
        removed.insert(s.node_id.clone());
        let requeued = pending.insert(p.node_id.clone());
        if requeued {
            queue.push_back(p.node_id.clone());
        }
        log::debug!("merged {} into {} ({reason:?})", s.node_id, p.node_id);
        log.decisions.push(MergeDecision {
            primary: p.node_id.clone(),
            secondary: s.node_id.clone(),
            reason,
            primary_kind: p.kind,
            secondary_kind: s.kind,
            primary_chunk: p.origin_chunk,
            secondary_chunk: s.origin_chunk,
            similarity: found.similarity,
            exact: found.exact,
            requeued,
            suppressed_loops: outcome.suppressed,
        });
    }
    graph.validate()?;
    Ok(AggregateOutput { graph, log })
}

/// Original node id to the id of the node that absorbed it.
pub fn merge_map(graph: &DecisionGraph) -> BTreeMap<NodeId, NodeId> {
    graph
        .nodes()
        .flat_map(|n| n.members().map(move |m| (m.clone(), n.node_id.clone())))
        .collect()
}

/// Checks that the union's edges, mapped through the merges, are exactly the
/// output edges plus the logged self-loops.
pub fn check_edge_preservation(
    union: &DecisionGraph,
    output: &DecisionGraph,
    log: &MergeLog,
) -> std::result::Result<(), String> {
    let map = merge_map(output);
    for node in union.nodes() {
        if !map.contains_key(&node.node_id) {
            return Err(format!("node {} has no image in the output", node.node_id));
        }
    }
    let image = |e: &DecisionEdge| DecisionEdge {
        source: map[&e.source].clone(),
        label: e.label.clone(),
        target: map[&e.target].clone(),
    };
    let mapped: BTreeSet<DecisionEdge> = union.edges().map(image).collect();
    let mut expected: BTreeSet<DecisionEdge> = output.edges().cloned().collect();
    for edge in log.suppressed_loops() {
        let Some((s, t)) = map.get(&edge.source).zip(map.get(&edge.target)) else {
            return Err(format!("logged loop {edge:?} references unknown nodes"));
        };
        expected.insert(DecisionEdge::new(s, edge.label.clone(), t));
    }
    if mapped == expected {
        Ok(())
    } else {
        let missing: Vec<_> = mapped.difference(&expected).collect();
        let extra: Vec<_> = expected.difference(&mapped).collect();
        Err(format!("edge images differ: unaccounted {missing:?}, unexpected {extra:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub node_id: NodeId,
    pub label: String,
    pub chunks: Vec<u32>,
    pub pages: Vec<u32>,
    pub members: Vec<NodeId>,
}

/// Contributing chunks, pages and original nodes of every output node.
pub fn provenance_table(graph: &DecisionGraph) -> Vec<ProvenanceRow> {
    graph
        .nodes()
        .map(|n| {
            let chunks: BTreeSet<u32> = std::iter::once(n.origin_chunk)
                .chain(n.merged_from.iter().map(|m| m.origin_chunk))
                .collect();
            let members: BTreeSet<NodeId> = n.members().cloned().collect();
            ProvenanceRow {
                node_id: n.node_id.clone(),
                label: n.label.clone(),
                chunks: chunks.into_iter().collect(),
                pages: n.provenance_pages.clone(),
                members: members.into_iter().collect(),
            }
        })
        .collect()
}

pub fn provenance_to_json(rows: &[ProvenanceRow]) -> String {
    let doc = serde_json::json!({
        "format": PROVENANCE_FORMAT,
        "version": 1,
        "nodes": rows,
    });
    serde_json::to_string_pretty(&doc).expect("provenance encodes") + "\n"
}
