//! Splits a page-ordered document into chunks with explicit graph
//! interfaces.
//!
//! Header pages yield a profile; every page is classified as core or
//! auxiliary; core pages are grouped into maximal runs of consecutive
//! indices; each run is buffered page by page until the boundary predictor
//! (or the hard size limit) cuts, and each finished buffer becomes a
//! [`Chunk`]. Pages the builder marks for carry-forward open the next buffer
//! of the same run.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleError, Result};
use crate::model::{Chunk, GuidelineProfile, PageLabel, PageRecord};
use crate::normalize::normalize_label;
use crate::oracle::tasks::{
    BuildChunk, BuildReply, ClassifyPage, ExtractProfile, PageView, PredictBoundary, RefineNodes,
};
use crate::oracle::Oracle;

pub const DEFAULT_HEADER_PAGES: usize = 3;
pub const DEFAULT_CHUNK_BUDGET: usize = 8000;
pub const DEFAULT_PARALLELISM: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingSettings {
    /// Pages read for the profile.
    pub header_pages: usize,
    /// Soft buffer size in characters; twice this is a hard limit.
    pub budget: usize,
    /// Worker threads for page classification and run chunking.
    pub parallelism: usize,
}

impl Default for ChunkingSettings {
    fn default() -> Self {
        Self {
            header_pages: DEFAULT_HEADER_PAGES,
            budget: DEFAULT_CHUNK_BUDGET,
            parallelism: DEFAULT_PARALLELISM,
        }
    }
}

impl ChunkingSettings {
    pub fn hard_limit(&self) -> usize {
        self.budget.saturating_mul(2)
    }
}

/// Maximal run of consecutive core page indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Run {
    pub page_indices: Vec<u32>,
}

/// Pages of the chunk being assembled plus the running context.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkBuffer {
    pub pages: Vec<PageRecord>,
    pub running_context: String,
}

impl ChunkBuffer {
    pub fn new(running_context: impl Into<String>) -> Self {
        Self {
            pages: Vec::new(),
            running_context: running_context.into(),
        }
    }

    pub fn text_len(&self) -> usize {
        self.pages.iter().map(PageRecord::text_len).sum()
    }

    pub fn indices(&self) -> Vec<u32> {
        self.pages.iter().map(|p| p.index).collect()
    }

    fn views(&self) -> Vec<PageView> {
        self.pages.iter().map(PageView::from).collect()
    }
}

/// Builder output for one buffer, before refinement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkDraft {
    pub description: String,
    pub entry_labels: Vec<String>,
    pub terminal_labels: Vec<String>,
    pub carry_pages: Vec<u32>,
    pub context: String,
}

impl From<BuildReply> for ChunkDraft {
    fn from(r: BuildReply) -> Self {
        Self {
            description: r.description,
            entry_labels: r.entry_labels,
            terminal_labels: r.terminal_labels,
            carry_pages: r.carry_pages,
            context: r.context,
        }
    }
}

/// Everything the chunking stage produces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkingOutput {
    pub profile: GuidelineProfile,
    pub labels: Vec<PageLabel>,
    pub runs: Vec<Run>,
    pub chunks: Vec<Chunk>,
}

pub fn extract_profile(oracle: &Oracle, header: &[PageRecord]) -> Result<GuidelineProfile> {
    if header.is_empty() {
        return Err(Error::Profile("no header pages available".into()));
    }
    let query = ExtractProfile {
        pages: header.iter().map(PageView::from).collect(),
    };
    let reply = oracle.ask(&query).map_err(|e| match e {
        OracleError::Protocol { reason, .. } => Error::Profile(reason),
        transport => Error::Oracle(transport),
    })?;
    if reply.scope_context.trim().is_empty() {
        return Err(Error::Profile("scope context is empty".into()));
    }
    Ok(GuidelineProfile {
        metadata: reply.metadata,
        scope_context: reply.scope_context,
    })
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// One label per page, aligned with the input. A page whose classification
/// fails is labeled auxiliary.
pub fn classify_pages(
    oracle: &Oracle,
    pages: &[PageRecord],
    profile: &GuidelineProfile,
    parallelism: usize,
) -> Result<Vec<PageLabel>> {
    let classify = |page: &PageRecord| {
        let query = ClassifyPage {
            page: PageView::from(page),
            metadata: profile.metadata.clone(),
        };
        match oracle.ask(&query) {
            Ok(reply) => reply.label,
            Err(e) => {
                log::warn!("page {}: classification failed ({e}); treating as auxiliary", page.index);
                PageLabel::Auxiliary
            }
        }
    };
    Ok(thread_pool(parallelism)?.install(|| pages.par_iter().map(classify).collect()))
}

/// Splits sorted, duplicate-free indices into maximal consecutive runs.
pub fn contiguous_runs(core_indices: &[u32]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &index in core_indices {
        match runs.last_mut() {
            Some(run) if run.page_indices.last().is_some_and(|&l| l + 1 == index) => {
                run.page_indices.push(index)
            }
            _ => runs.push(Run {
                page_indices: vec![index],
            }),
        }
    }
    runs
}

/// Whether the chunk should end after `current`.
///
/// The cut is forced, without asking the oracle, when the buffer plus
/// `current` plus the lookahead page exceeds twice the budget, so the next
/// buffer can never outgrow the hard limit. An oracle failure also cuts.
pub fn predict_boundary(
    oracle: &Oracle,
    buffer: &ChunkBuffer,
    current: &PageRecord,
    lookahead: Option<&PageRecord>,
    budget: usize,
) -> bool {
    let projected = buffer.text_len() + current.text_len() + lookahead.map_or(0, PageRecord::text_len);
    if lookahead.is_some() && projected > budget.saturating_mul(2) {
        log::debug!("page {}: forced cut, {projected} characters over the hard limit", current.index);
        return true;
    }
    let query = PredictBoundary {
        buffer: buffer.views(),
        current: PageView::from(current),
        lookahead: lookahead.map(PageView::from),
        context: buffer.running_context.clone(),
        budget,
    };
    match oracle.ask(&query) {
        Ok(reply) => reply.cut,
        Err(e) => {
            log::warn!("page {}: boundary prediction failed ({e}); cutting", current.index);
            true
        }
    }
}

/// Asks for the chunk interface, re-requesting once if either side is empty.
pub fn build_chunk(
    oracle: &Oracle,
    buffer: &ChunkBuffer,
    lookahead: Option<&PageRecord>,
    chunk_id: u32,
) -> Result<ChunkDraft> {
    let mut query = BuildChunk {
        pages: buffer.views(),
        lookahead: lookahead.map(PageView::from),
        context: buffer.running_context.clone(),
        complaint: None,
    };
    let first = oracle.ask(&query)?;
    if !first.entry_labels.is_empty() && !first.terminal_labels.is_empty() {
        return Ok(first.into());
    }
    let complaint = empty_sides(&first);
    log::warn!("chunk {chunk_id}: {complaint}; asking again");
    query.complaint = Some(format!(
        "Your previous answer had {complaint}. Every segment needs at least one entry and one terminal label."
    ));
    let second = oracle.ask(&query)?;
    if second.entry_labels.is_empty() || second.terminal_labels.is_empty() {
        return Err(Error::ChunkInterface {
            chunk: chunk_id,
            reason: format!("{} after re-request", empty_sides(&second)),
        });
    }
    Ok(second.into())
}

fn empty_sides(reply: &BuildReply) -> String {
    match (reply.entry_labels.is_empty(), reply.terminal_labels.is_empty()) {
        (true, true) => "no entry and no terminal labels".into(),
        (true, false) => "no entry labels".into(),
        _ => "no terminal labels".into(),
    }
}

/// Normalizes and deduplicates both interface sides and drops labels the
/// pages do not support. A label is supported when it occurs verbatim in
/// the normalized page text, or when the oracle confirms it.
pub fn refine_nodes(
    oracle: &Oracle,
    pages: &[PageRecord],
    description: &str,
    entry: &[String],
    terminal: &[String],
    chunk_id: u32,
) -> Result<(Vec<String>, Vec<String>)> {
    let clean = |labels: &[String]| -> Vec<String> {
        let mut seen = BTreeSet::new();
        labels
            .iter()
            .filter_map(|l| normalize_label(l).ok())
            .filter(|l| seen.insert(l.clone()))
            .collect()
    };
    let entry = clean(entry);
    let terminal = clean(terminal);

    let haystack = pages
        .iter()
        .map(|p| p.text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n");
    let unsupported: Vec<String> = entry
        .iter()
        .chain(&terminal)
        .filter(|l| !haystack.contains(l.as_str()))
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let confirmed: BTreeSet<String> = if unsupported.is_empty() {
        BTreeSet::new()
    } else {
        let query = RefineNodes {
            pages: pages.iter().map(PageView::from).collect(),
            description: description.to_string(),
            labels: unsupported.clone(),
        };
        oracle.ask(&query)?.supported.into_iter().collect()
    };
    let keep = |labels: Vec<String>| -> Vec<String> {
        labels
            .into_iter()
            .filter(|l| {
                let ok = !unsupported.contains(l) || confirmed.contains(l);
                if !ok {
                    log::info!("chunk {chunk_id}: dropping unsupported interface label {l:?}");
                }
                ok
            })
            .collect()
    };
    let entry = keep(entry);
    let terminal = keep(terminal);

    let fail = |reason: String| Error::ChunkInterface { chunk: chunk_id, reason };
    if entry.is_empty() {
        return Err(fail("no supported entry labels".into()));
    }
    if terminal.is_empty() {
        return Err(fail("no supported terminal labels".into()));
    }
    if let Some(shared) = entry.iter().find(|l| terminal.contains(l)) {
        return Err(fail(format!("label {shared:?} is both entry and terminal")));
    }
    Ok((entry, terminal))
}

/// Expansion context for a chunk: profile, description, running context and
/// the page texts with their indices.
pub fn assemble_context(
    profile: &GuidelineProfile,
    description: &str,
    pages: &[PageRecord],
    running_context: &str,
) -> String {
    let mut out = String::from("# Guideline\n");
    for (key, value) in &profile.metadata {
        out.push_str(&format!("{key}: {value}\n"));
    }
    out.push_str(&format!("scope: {}\n\n# Segment\n{description}\n\n", profile.scope_context));
    out.push_str(&format!("# Running context\n{running_context}\n"));
    for page in pages {
        out.push_str(&format!("\n# Page {}\n{}\n", page.index, page.text));
    }
    out
}

/// Chunks one run. Chunk ids are assigned by the caller.
fn chunk_run(
    oracle: &Oracle,
    run: &[&PageRecord],
    profile: &GuidelineProfile,
    settings: &ChunkingSettings,
) -> Result<Vec<Chunk>> {
    let limit = settings.hard_limit();
    let mut chunks = Vec::new();
    let mut buffer = ChunkBuffer::new(profile.scope_context.clone());
    for (t, current) in run.iter().enumerate() {
        let lookahead = run.get(t + 1).copied();
        let cut = predict_boundary(oracle, &buffer, current, lookahead, settings.budget);
        buffer.pages.push((*current).clone());
        if !(cut || lookahead.is_none()) {
            continue;
        }

        let provisional = chunks.len() as u32 + 1;
        let stage_page = Some(buffer.pages[0].index);
        let draft = build_chunk(oracle, &buffer, lookahead, provisional)
            .map_err(|e| e.in_stage("chunk construction", stage_page))?;
        let (entry, terminal) = refine_nodes(
            oracle,
            &buffer.pages,
            &draft.description,
            &draft.entry_labels,
            &draft.terminal_labels,
            provisional,
        )
        .map_err(|e| e.in_stage("interface refinement", stage_page))?;

        let mut carried: Vec<PageRecord> = match lookahead {
            Some(next) => {
                let mut kept: Vec<PageRecord> = buffer
                    .pages
                    .iter()
                    .filter(|p| draft.carry_pages.contains(&p.index))
                    .cloned()
                    .collect();
                // Drop the earliest carried pages until the next page fits.
                while !kept.is_empty()
                    && kept.iter().map(PageRecord::text_len).sum::<usize>() + next.text_len() > limit
                {
                    log::debug!("not carrying page {}: over the hard limit", kept[0].index);
                    kept.remove(0);
                }
                kept
            }
            None => Vec::new(),
        };
        carried.sort_by_key(|p| p.index);

        chunks.push(Chunk {
            chunk_id: provisional,
            description: draft.description.clone(),
            entry_labels: entry,
            terminal_labels: terminal,
            carried_pages: carried.iter().map(|p| p.index).collect(),
            page_span: buffer.indices(),
            context: assemble_context(profile, &draft.description, &buffer.pages, &draft.context),
        });
        buffer = ChunkBuffer {
            pages: carried,
            running_context: draft.context,
        };
    }
    Ok(chunks)
}

/// Runs chunking on the core runs of an already profiled and classified
/// document. Chunks are numbered from 1 in page order.
pub fn chunk_runs(
    oracle: &Oracle,
    pages: &[PageRecord],
    profile: &GuidelineProfile,
    runs: &[Run],
    settings: &ChunkingSettings,
) -> Result<Vec<Chunk>> {
    let by_index = |i: u32| {
        pages
            .iter()
            .find(|p| p.index == i)
            .ok_or_else(|| Error::Manifest(format!("run refers to missing page {i}")))
    };
    let resolved: Vec<Vec<&PageRecord>> = runs
        .iter()
        .map(|r| r.page_indices.iter().map(|&i| by_index(i)).collect())
        .collect::<Result<_>>()?;
    let per_run: Vec<Result<Vec<Chunk>>> = thread_pool(settings.parallelism)?.install(|| {
        resolved
            .par_iter()
            .map(|run| chunk_run(oracle, run, profile, settings))
            .collect()
    });
    let mut chunks = Vec::new();
    for run in per_run {
        for mut chunk in run? {
            chunk.chunk_id = chunks.len() as u32 + 1;
            chunks.push(chunk);
        }
    }
    Ok(chunks)
}

/// Profile, classification, runs and chunks for a whole document.
pub fn run_chunking(
    oracle: &Oracle,
    pages: &[PageRecord],
    settings: &ChunkingSettings,
) -> Result<ChunkingOutput> {
    crate::model::validate_pages(pages).map_err(Error::Manifest)?;
    let (profile, labels) = if pages.is_empty() {
        (GuidelineProfile::default(), Vec::new())
    } else {
        let header = &pages[..settings.header_pages.clamp(1, pages.len())];
        let profile = extract_profile(oracle, header).map_err(|e| e.in_stage("profile extraction", Some(1)))?;
        let labels = classify_pages(oracle, pages, &profile, settings.parallelism)?;
        (profile, labels)
    };
    let core: Vec<u32> = pages
        .iter()
        .zip(&labels)
        .filter(|(_, l)| **l == PageLabel::Core)
        .map(|(p, _)| p.index)
        .collect();
    let runs = contiguous_runs(&core);
    let chunks = chunk_runs(oracle, pages, &profile, &runs, settings)?;
    Ok(ChunkingOutput {
        profile,
        labels,
        runs,
        chunks,
    })
}
