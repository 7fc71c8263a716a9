//! Node, edge and triplet precision/recall of a predicted graph against a
//! reference graph, reported as supported-over-total counts.
//!
//! Nodes are matched one-to-one. A predicted edge is supported when both
//! endpoints are matched and the reference connects their images in the
//! same direction; a triplet additionally needs an equivalent condition
//! label. Recall is computed the same way from the reference side.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DecisionGraph, NodeId};
use crate::normalize::normalize_condition;
use crate::oracle::tasks::FindDuplicate;
use crate::oracle::Oracle;
use crate::retrieval::{cosine, cosine_candidates, similarity_key, EmbeddingStore, Query};

const REPORT_FORMAT: &str = "guidegraph.eval";

/// Supported-over-total count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cell {
    pub supported: usize,
    pub total: usize,
}

impl Cell {
    pub fn new(supported: usize, total: usize) -> Self {
        assert!(supported <= total, "supported {supported} exceeds total {total}");
        Self { supported, total }
    }

    /// Percentage in tenths of a percent, rounded half up. `None` when the
    /// total is zero.
    pub fn percent_tenths(&self) -> Option<u64> {
        if self.total == 0 {
            return None;
        }
        let (s, t) = (self.supported as u64, self.total as u64);
        Some((2000 * s + t) / (2 * t))
    }

    pub fn percent(&self) -> Option<f64> {
        self.percent_tenths().map(|t| t as f64 / 10.0)
    }

    /// `69.0` style text, or `n/a` for an empty total.
    pub fn percent_text(&self) -> String {
        match self.percent_tenths() {
            Some(t) => format!("{}.{}", t / 10, t % 10),
            None => "n/a".into(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} | {}/{}", self.percent_text(), self.supported, self.total)
    }
}

#[derive(Serialize, Deserialize)]
struct CellDoc {
    supported: usize,
    total: usize,
    percent: Option<f64>,
}

impl Serialize for Cell {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        CellDoc {
            supported: self.supported,
            total: self.total,
            percent: self.percent(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Cell {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let doc = CellDoc::deserialize(deserializer)?;
        if doc.supported > doc.total {
            return Err(serde::de::Error::custom("supported exceeds total"));
        }
        Ok(Self {
            supported: doc.supported,
            total: doc.total,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub unit_name: String,
    pub node_precision: Cell,
    pub node_recall: Cell,
    pub edge_precision: Cell,
    pub edge_recall: Cell,
    pub triplet_precision: Cell,
    pub triplet_recall: Cell,
}

impl EvalReport {
    pub fn cells(&self) -> [(&'static str, Cell); 6] {
        [
            ("node P", self.node_precision),
            ("node R", self.node_recall),
            ("edge P", self.edge_precision),
            ("edge R", self.edge_recall),
            ("triplet P", self.triplet_precision),
            ("triplet R", self.triplet_recall),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MatchPolicy {
    #[default]
    ExactNormalized,
    EmbeddingThreshold {
        theta: f64,
    },
    OracleVerified,
}

impl MatchPolicy {
    pub fn validate(&self) -> std::result::Result<(), String> {
        match self {
            MatchPolicy::EmbeddingThreshold { theta } if !(*theta > 0.0 && *theta <= 1.0) => {
                Err(format!("threshold {theta} is outside (0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Policy plus the services it needs.
#[derive(Clone, Copy)]
pub struct Matcher<'a> {
    pub policy: MatchPolicy,
    pub store: Option<&'a EmbeddingStore>,
    pub oracle: Option<&'a Oracle>,
    /// Reference candidates shown to the verifier per predicted node.
    pub candidate_count: usize,
}

impl<'a> Matcher<'a> {
    pub fn exact() -> Self {
        Self {
            policy: MatchPolicy::ExactNormalized,
            store: None,
            oracle: None,
            candidate_count: crate::retrieval::DEFAULT_CANDIDATE_COUNT,
        }
    }

    pub fn new(policy: MatchPolicy, store: Option<&'a EmbeddingStore>, oracle: Option<&'a Oracle>) -> Self {
        Self {
            policy,
            store,
            oracle,
            ..Self::exact()
        }
    }

    fn store(&self) -> Result<&'a EmbeddingStore> {
        self.store
            .ok_or_else(|| Error::Config("this match policy needs an embedding backend".into()))
    }

    fn oracle(&self) -> Result<&'a Oracle> {
        self.oracle
            .ok_or_else(|| Error::Config("this match policy needs an oracle backend".into()))
    }
}

fn norm(label: &str) -> String {
    normalize_condition(label)
}

/// One-to-one partial mapping from predicted to reference node ids.
pub fn match_nodes(
    predicted: &DecisionGraph,
    reference: &DecisionGraph,
    matcher: &Matcher<'_>,
) -> Result<BTreeMap<NodeId, NodeId>> {
    matcher.policy.validate().map_err(Error::Config)?;
    let mut mapping = BTreeMap::new();
    let mut used = BTreeSet::new();
    match matcher.policy {
        MatchPolicy::ExactNormalized => {
            for p in predicted.nodes() {
                let label = norm(&p.label);
                if let Some(r) = reference
                    .nodes()
                    .find(|r| !used.contains(&r.node_id) && norm(&r.label) == label)
                {
                    used.insert(r.node_id.clone());
                    mapping.insert(p.node_id.clone(), r.node_id.clone());
                }
            }
        }
        MatchPolicy::EmbeddingThreshold { theta } => {
            let store = matcher.store()?;
            let mut pairs = Vec::new();
            for p in predicted.nodes() {
                let pv = store.embed(&p.label)?;
                for r in reference.nodes() {
                    let sim = cosine(&pv, &store.embed(&r.label)?);
                    if sim >= theta {
                        pairs.push((similarity_key(sim), &p.node_id, &r.node_id));
                    }
                }
            }
            pairs.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)).then_with(|| a.2.cmp(b.2)));
            for (_, p, r) in pairs {
                if !mapping.contains_key(p) && !used.contains(r) {
                    used.insert(r.clone());
                    mapping.insert(p.clone(), r.clone());
                }
            }
        }
        MatchPolicy::OracleVerified => {
            let store = matcher.store()?;
            let oracle = matcher.oracle()?;
            for p in predicted.nodes() {
                let label = norm(&p.label);
                if let Some(r) = reference
                    .nodes()
                    .find(|r| !used.contains(&r.node_id) && norm(&r.label) == label)
                {
                    used.insert(r.node_id.clone());
                    mapping.insert(p.node_id.clone(), r.node_id.clone());
                    continue;
                }
                let pool = reference
                    .nodes()
                    .filter(|r| !used.contains(&r.node_id))
                    .map(|r| (&r.node_id, r.label.as_str()));
                let candidates = cosine_candidates(store, Query::Label(&p.label), pool, matcher.candidate_count)?;
                if candidates.is_empty() {
                    continue;
                }
                let query = FindDuplicate {
                    candidate: label,
                    ancestors: Vec::new(),
                    candidates: candidates
                        .entries
                        .iter()
                        .map(|c| norm(&reference.node(&c.node_id).expect("reference node").label))
                        .collect(),
                };
                match oracle.ask(&query) {
                    Ok(reply) => {
                        // Candidates are sorted best first, so the smallest index wins.
                        if let Some(&i) = reply.matches.iter().min() {
                            let r = candidates.entries[i].node_id.clone();
                            used.insert(r.clone());
                            mapping.insert(p.node_id.clone(), r);
                        }
                    }
                    Err(e) => log::warn!("match verification for {} failed: {e}", p.node_id),
                }
            }
        }
    }
    Ok(mapping)
}

/// Whether two condition labels are equivalent under the policy.
fn labels_agree(a: &str, b: &str, matcher: &Matcher<'_>) -> Result<bool> {
    if norm(a) == norm(b) {
        return Ok(true);
    }
    if matcher.policy != MatchPolicy::OracleVerified || norm(a).is_empty() || norm(b).is_empty() {
        return Ok(false);
    }
    let query = FindDuplicate {
        candidate: norm(a),
        ancestors: Vec::new(),
        candidates: vec![norm(b)],
    };
    match matcher.oracle()?.ask(&query) {
        Ok(reply) => Ok(reply.matches.contains(&0)),
        Err(e) => {
            log::warn!("condition verification failed: {e}");
            Ok(false)
        }
    }
}

/// Edge and triplet support of `from`'s edges in `to`, through `map`.
fn edge_support(
    from: &DecisionGraph,
    to: &DecisionGraph,
    map: &BTreeMap<NodeId, NodeId>,
    matcher: &Matcher<'_>,
) -> Result<(Cell, Cell)> {
    let mut edges = 0;
    let mut triplets = 0;
    for e in from.edges() {
        let (Some(s), Some(t)) = (map.get(&e.source), map.get(&e.target)) else {
            continue;
        };
        let images: Vec<&str> = to
            .outgoing(s)
            .filter(|x| &x.target == t)
            .map(|x| x.label.as_str())
            .collect();
        if images.is_empty() {
            continue;
        }
        edges += 1;
        for label in images {
            if labels_agree(&e.label, label, matcher)? {
                triplets += 1;
                break;
            }
        }
    }
    let total = from.edge_count();
    Ok((Cell::new(edges, total), Cell::new(triplets, total)))
}

pub fn score(
    unit_name: &str,
    predicted: &DecisionGraph,
    reference: &DecisionGraph,
    matcher: &Matcher<'_>,
) -> Result<EvalReport> {
    let forward = match_nodes(predicted, reference, matcher)?;
    let backward: BTreeMap<NodeId, NodeId> = forward.iter().map(|(p, r)| (r.clone(), p.clone())).collect();
    let (edge_precision, triplet_precision) = edge_support(predicted, reference, &forward, matcher)?;
    let (edge_recall, triplet_recall) = edge_support(reference, predicted, &backward, matcher)?;
    Ok(EvalReport {
        unit_name: unit_name.to_string(),
        node_precision: Cell::new(forward.len(), predicted.node_count()),
        node_recall: Cell::new(backward.len(), reference.node_count()),
        edge_precision,
        edge_recall,
        triplet_precision,
        triplet_recall,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportDocument {
    format: String,
    version: u32,
    policy: MatchPolicy,
    units: Vec<EvalReport>,
}

pub fn reports_to_json(policy: MatchPolicy, reports: &[EvalReport]) -> String {
    let doc = ReportDocument {
        format: REPORT_FORMAT.into(),
        version: 1,
        policy,
        units: reports.to_vec(),
    };
    serde_json::to_string_pretty(&doc).expect("reports encode") + "\n"
}

pub fn reports_from_json(text: &str) -> std::result::Result<(MatchPolicy, Vec<EvalReport>), String> {
    let doc: ReportDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if doc.format != REPORT_FORMAT || doc.version != 1 {
        return Err(format!("unsupported report {}/{}", doc.format, doc.version));
    }
    Ok((doc.policy, doc.units))
}

/// Plain-text table, one row per unit, `% | S/T` per cell.
pub fn reports_to_table(reports: &[EvalReport]) -> String {
    let header: Vec<String> = std::iter::once("unit".to_string())
        .chain(EvalReport::cells(&reports.first().cloned().unwrap_or_else(empty_report)).iter().map(|(n, _)| n.to_string()))
        .collect();
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            std::iter::once(r.unit_name.clone())
                .chain(r.cells().iter().map(|(_, c)| c.to_string()))
                .collect()
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain(std::iter::once(header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
            + "\n"
    };
    let mut out = line(&header);
    for row in &rows {
        out.push_str(&line(row));
    }
    out
}

fn empty_report() -> EvalReport {
    EvalReport {
        unit_name: String::new(),
        node_precision: Cell::default(),
        node_recall: Cell::default(),
        edge_precision: Cell::default(),
        edge_recall: Cell::default(),
        triplet_precision: Cell::default(),
        triplet_recall: Cell::default(),
    }
}
