//! Expands one chunk into a decision graph.
//!
//! The terminal labels are registered first and never expanded. Entry
//! labels seed a FIFO worklist; each dequeued candidate is either folded
//! into an existing node (exact label match, or a verifier-confirmed match
//! among its nearest neighbors) or registered and expanded into children.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DecisionEdge, DecisionGraph, NodeId, NodeKind, QueueItem};
use crate::model::Chunk;
use crate::normalize::{normalize_condition, normalize_label};
use crate::oracle::tasks::{FindDuplicate, GenerateChildren, LabeledEdge};
use crate::oracle::Oracle;
use crate::retrieval::{cosine_candidates, similarity_key, CandidateSet, EmbeddingStore, Query};

pub const DEFAULT_EXPANSION_CAP: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSettings {
    /// Neighbors retrieved per duplicate check.
    pub candidate_count: usize,
    /// Maximum nodes per chunk graph, terminals included.
    pub expansion_cap: usize,
}

impl Default for BuildSettings {
    fn default() -> Self {
        Self {
            candidate_count: crate::retrieval::DEFAULT_CANDIDATE_COUNT,
            expansion_cap: DEFAULT_EXPANSION_CAP,
        }
    }
}

/// One step of the expansion, for the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Dequeue {
        label: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        ancestor: Option<NodeId>,
    },
    Duplicate {
        label: String,
        matched: NodeId,
        similarity: f64,
        exact: bool,
    },
    Register {
        node: NodeId,
        label: String,
        kind: NodeKind,
    },
    SuppressedLoop {
        edge: DecisionEdge,
    },
    VerifierFailed {
        label: String,
        reason: String,
    },
    DroppedChild {
        node: NodeId,
        condition: String,
    },
    ChildrenFailed {
        node: NodeId,
        reason: String,
    },
    DeadEnd {
        node: NodeId,
    },
    CapExceeded {
        cap: usize,
        pending_label: String,
    },
}

/// A chunk graph together with its expansion trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub graph: DecisionGraph,
    pub trace: Vec<TraceEvent>,
}

/// Line-delimited JSON, one event per line.
pub fn trace_to_jsonl(trace: &[TraceEvent]) -> String {
    trace
        .iter()
        .map(|e| serde_json::to_string(e).expect("trace events encode") + "\n")
        .collect()
}

/// A duplicate decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DuplicateMatch {
    pub node_id: NodeId,
    pub similarity: f64,
    /// Found by exact label match, without the verifier.
    pub exact: bool,
}

/// Looks for an existing node equivalent to `item`.
///
/// A node whose label or alias equals the normalized candidate label matches
/// without consulting the oracle. Otherwise the verifier sees the candidate,
/// its incoming edge and the neighbor labels; of the confirmed neighbors the
/// most similar wins, ties going to the smaller id. A verifier failure counts
/// as no match and is reported through `on_failure`.
pub fn find_duplicate(
    oracle: &Oracle,
    graph: &DecisionGraph,
    item: &QueueItem,
    candidates: &CandidateSet,
    on_failure: &mut dyn FnMut(String),
) -> Option<DuplicateMatch> {
    let label = normalize_label(&item.candidate_label).ok()?;
    if let Some(node) = graph.nodes().find(|n| n.answers_to(&label)) {
        return Some(DuplicateMatch {
            node_id: node.node_id.clone(),
            similarity: 1.0,
            exact: true,
        });
    }
    let pool: Vec<_> = candidates
        .entries
        .iter()
        .filter_map(|c| graph.node(&c.node_id).map(|n| (c, n.label.clone())))
        .collect();
    if pool.is_empty() {
        return None;
    }
    let ancestors = item
        .incoming
        .iter()
        .filter_map(|inc| {
            graph.node(&inc.ancestor).map(|a| LabeledEdge {
                label: a.label.clone(),
                condition: normalize_condition(&inc.condition),
            })
        })
        .collect();
    let query = FindDuplicate {
        candidate: label,
        ancestors,
        candidates: pool.iter().map(|(_, l)| l.clone()).collect(),
    };
    match oracle.ask(&query) {
        Ok(reply) => reply
            .matches
            .iter()
            .map(|&i| pool[i].0)
            .min_by(|a, b| {
                similarity_key(b.similarity)
                    .cmp(&similarity_key(a.similarity))
                    .then_with(|| a.node_id.cmp(&b.node_id))
            })
            .map(|c| DuplicateMatch {
                node_id: c.node_id.clone(),
                similarity: c.similarity,
                exact: false,
            }),
        Err(e) => {
            on_failure(e.to_string());
            None
        }
    }
}

/// Successors of a non-terminal node as (label, condition) pairs.
pub fn generate_children(
    oracle: &Oracle,
    node_label: &str,
    incoming: Option<LabeledEdge>,
    context: &str,
) -> std::result::Result<Vec<LabeledEdge>, String> {
    let query = GenerateChildren {
        node: node_label.to_string(),
        incoming,
        context: context.to_string(),
    };
    oracle
        .ask(&query)
        .map(|r| r.children)
        .map_err(|e| e.to_string())
}

struct Expansion<'a> {
    chunk: &'a Chunk,
    graph: DecisionGraph,
    trace: Vec<TraceEvent>,
    cap: usize,
}

impl Expansion<'_> {
    fn register(&mut self, item: &QueueItem, kind: NodeKind) -> Result<NodeId> {
        if self.graph.node_count() >= self.cap {
            self.trace.push(TraceEvent::CapExceeded {
                cap: self.cap,
                pending_label: item.candidate_label.clone(),
            });
            return Err(Error::ExpansionBudgetExceeded {
                chunk: self.chunk.chunk_id,
                cap: self.cap,
                partial: Box::new(self.graph.clone()),
            });
        }
        let id = self.graph.register_node(item, kind, self.chunk.chunk_id)?;
        let node = self.graph.node_mut(&id).expect("just registered");
        node.provenance_pages = self.chunk.page_span.clone();
        self.trace.push(TraceEvent::Register {
            node: id.clone(),
            label: node.label.clone(),
            kind,
        });
        Ok(id)
    }
}

/// Expands `chunk` into its decision graph.
pub fn build_graph(
    oracle: &Oracle,
    store: &EmbeddingStore,
    chunk: &Chunk,
    settings: &BuildSettings,
) -> Result<BuildOutput> {
    let mut state = Expansion {
        chunk,
        graph: DecisionGraph::new(),
        trace: Vec::new(),
        cap: settings.expansion_cap,
    };
    for label in &chunk.terminal_labels {
        state.register(&QueueItem::root(label.clone()), NodeKind::Terminal)?;
    }
    let mut queue: VecDeque<QueueItem> = chunk.entry_labels.iter().cloned().map(QueueItem::root).collect();

    while let Some(item) = queue.pop_front() {
        state.trace.push(TraceEvent::Dequeue {
            label: item.candidate_label.clone(),
            ancestor: item.incoming.as_ref().map(|i| i.ancestor.clone()),
        });
        let label = normalize_label(&item.candidate_label)?;
        let candidates = cosine_candidates(
            store,
            Query::Label(&label),
            state.graph.nodes().map(|n| (&n.node_id, n.label.as_str())),
            settings.candidate_count,
        )?;
        let mut failures = Vec::new();
        let duplicate = find_duplicate(oracle, &state.graph, &item, &candidates, &mut |r| failures.push(r));
        for reason in failures {
            log::warn!("chunk {}: duplicate check for {label:?} failed: {reason}", chunk.chunk_id);
            state.trace.push(TraceEvent::VerifierFailed {
                label: label.clone(),
                reason,
            });
        }

        if let Some(dup) = duplicate {
            state.trace.push(TraceEvent::Duplicate {
                label: label.clone(),
                matched: dup.node_id.clone(),
                similarity: dup.similarity,
                exact: dup.exact,
            });
            if let Some(incoming) = &item.incoming {
                let edge = DecisionEdge::new(
                    &incoming.ancestor,
                    normalize_condition(&incoming.condition),
                    &dup.node_id,
                );
                if let Some(suppressed) = state.graph.redirect_ancestor_edge(&edge, &dup.node_id)? {
                    state.trace.push(TraceEvent::SuppressedLoop { edge: suppressed });
                }
            }
            state
                .graph
                .node_mut(&dup.node_id)
                .expect("matched node exists")
                .add_alias(&label);
            continue;
        }

        let kind = if item.incoming.is_some() { NodeKind::Intermediate } else { NodeKind::Entry };
        let id = state.register(&item, kind)?;
        let incoming = item.incoming.as_ref().and_then(|inc| {
            state.graph.node(&inc.ancestor).map(|a| LabeledEdge {
                label: a.label.clone(),
                condition: normalize_condition(&inc.condition),
            })
        });
        let children = match generate_children(oracle, &label, incoming, &chunk.context) {
            Ok(children) => children,
            Err(reason) => {
                log::warn!("chunk {}: no children for {label:?}: {reason}", chunk.chunk_id);
                state.trace.push(TraceEvent::ChildrenFailed {
                    node: id.clone(),
                    reason,
                });
                Vec::new()
            }
        };
        let mut queued = 0;
        for child in children {
            if normalize_label(&child.label).is_err() {
                state.trace.push(TraceEvent::DroppedChild {
                    node: id.clone(),
                    condition: child.condition,
                });
                continue;
            }
            queue.push_back(QueueItem::child(child.label, id.clone(), child.condition));
            queued += 1;
        }
        if queued == 0 {
            log::info!("chunk {}: {label:?} is a dead end", chunk.chunk_id);
            state.trace.push(TraceEvent::DeadEnd { node: id });
        }
    }
    Ok(BuildOutput {
        graph: state.graph,
        trace: state.trace,
    })
}
