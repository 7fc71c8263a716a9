//! Stage orchestration over a run directory.
//!
//! Every stage reads its inputs from the files of the previous stage, so a
//! run can be resumed or replayed one stage at a time:
//!
//! ```text
//! run/
//!   config.json            resolved configuration
//!   profile.json           document profile
//!   labels.json            page labels and core-page runs
//!   chunks.json            chunk list
//!   graphs/chunk-001.json  chunk graph (canonical form)
//!   graphs/chunk-001.trace.jsonl
//!   merged.json            aggregated graph
//!   merge_log.json
//!   provenance.json
//!   audit.jsonl            oracle request log (appended)
//!   embedding_cache.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregator::{self, AggregateOutput, MergeLog};
use crate::builder::{self, BuildOutput};
use crate::chunker::{self, Run};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::graph::DecisionGraph;
use crate::model::{Chunk, GuidelineProfile, PageLabel, PageRecord};
use crate::oracle::{AuditLog, Backend, Oracle};
use crate::retrieval::EmbeddingStore;

const PROFILE_FORMAT: &str = "guidegraph.profile";
const LABELS_FORMAT: &str = "guidegraph.page-labels";
const CHUNKS_FORMAT: &str = "guidegraph.chunks";

/// File layout of one run.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn profile(&self) -> PathBuf {
        self.root.join("profile.json")
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.json")
    }

    pub fn chunks(&self) -> PathBuf {
        self.root.join("chunks.json")
    }

    pub fn graphs(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn chunk_graph(&self, chunk_id: u32) -> PathBuf {
        self.graphs().join(format!("chunk-{chunk_id:03}.json"))
    }

    pub fn chunk_trace(&self, chunk_id: u32) -> PathBuf {
        self.graphs().join(format!("chunk-{chunk_id:03}.trace.jsonl"))
    }

    /// Graph left behind when expansion hits the cap.
    pub fn partial_graph(&self, chunk_id: u32) -> PathBuf {
        self.graphs().join(format!("chunk-{chunk_id:03}.partial.json"))
    }

    pub fn merged(&self) -> PathBuf {
        self.root.join("merged.json")
    }

    pub fn merge_log(&self) -> PathBuf {
        self.root.join("merge_log.json")
    }

    pub fn provenance(&self) -> PathBuf {
        self.root.join("provenance.json")
    }

    pub fn audit(&self) -> PathBuf {
        self.root.join("audit.jsonl")
    }

    pub fn embedding_cache(&self) -> PathBuf {
        self.root.join("embedding_cache.json")
    }
}

/// Writes through a temporary sibling so readers never see half a file.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn artifact(path: &Path, reason: impl Into<String>) -> Error {
    Error::Artifact {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct Versioned<T> {
    format: String,
    version: u32,
    #[serde(flatten)]
    body: T,
}

fn to_versioned<T: Serialize>(format: &str, body: T) -> String {
    let doc = Versioned {
        format: format.into(),
        version: 1,
        body,
    };
    serde_json::to_string_pretty(&doc).expect("artifact encodes") + "\n"
}

fn read_versioned<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = read_file(path)?;
    let doc: Versioned<T> = serde_json::from_str(&text).map_err(|e| artifact(path, e.to_string()))?;
    if doc.format != format || doc.version != 1 {
        return Err(artifact(path, format!("expected {format}/1, found {}/{}", doc.format, doc.version)));
    }
    Ok(doc.body)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileBody {
    metadata: std::collections::BTreeMap<String, String>,
    scope_context: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPage {
    pub index: u32,
    pub label: PageLabel,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsBody {
    pages: Vec<LabeledPage>,
    runs: Vec<Run>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChunksBody {
    chunks: Vec<Chunk>,
}

pub fn profile_to_json(profile: &GuidelineProfile) -> String {
    to_versioned(
        PROFILE_FORMAT,
        ProfileBody {
            metadata: profile.metadata.clone(),
            scope_context: profile.scope_context.clone(),
        },
    )
}

pub fn chunks_to_json(chunks: &[Chunk]) -> String {
    to_versioned(CHUNKS_FORMAT, ChunksBody { chunks: chunks.to_vec() })
}

pub fn load_profile(path: &Path) -> Result<GuidelineProfile> {
    let body: ProfileBody = read_versioned(path, PROFILE_FORMAT)?;
    Ok(GuidelineProfile {
        metadata: body.metadata,
        scope_context: body.scope_context,
    })
}

pub fn load_chunks(path: &Path) -> Result<Vec<Chunk>> {
    let body: ChunksBody = read_versioned(path, CHUNKS_FORMAT)?;
    for (pos, chunk) in body.chunks.iter().enumerate() {
        if chunk.chunk_id != pos as u32 + 1 {
            return Err(artifact(path, format!("chunk ids must be 1..n, found {} at position {pos}", chunk.chunk_id)));
        }
        chunk
            .check_invariants()
            .map_err(|reason| artifact(path, format!("chunk {}: {reason}", chunk.chunk_id)))?;
    }
    Ok(body.chunks)
}

pub fn load_graph(path: &Path) -> Result<DecisionGraph> {
    DecisionGraph::from_json(&read_file(path)?).map_err(|reason| artifact(path, reason))
}

/// Configuration, oracle and embedding cache bound to one run directory.
pub struct Session {
    pub config: PipelineConfig,
    pub oracle: Oracle,
    pub store: EmbeddingStore,
    pub run: RunDir,
}

impl Session {
    /// Opens the configured backend.
    pub fn open(config: PipelineConfig, run_dir: &Path) -> Result<Self> {
        config.validate()?;
        let backend = config.backend.open()?;
        Self::with_backend(config, backend, run_dir)
    }

    pub fn with_backend(config: PipelineConfig, backend: Arc<dyn Backend>, run_dir: &Path) -> Result<Self> {
        config.validate()?;
        let run = RunDir::new(run_dir);
        std::fs::create_dir_all(run.root()).map_err(|e| Error::io(run.root(), e))?;
        let audit = AuditLog::to_file(&run.audit()).map_err(|e| Error::io(run.audit(), e))?;
        let oracle = Oracle::new(backend.clone())
            .with_retry_limit(config.retry_limit)
            .with_audit(audit);
        let store = EmbeddingStore::new(backend);
        let cache = run.embedding_cache();
        if cache.exists() {
            match store.load(&cache) {
                Ok(n) => log::debug!("loaded {n} cached embeddings"),
                Err(e) => log::warn!("ignoring embedding cache: {e}"),
            }
        }
        write_file(&run.config(), &config.to_json())?;
        Ok(Self {
            config,
            oracle,
            store,
            run,
        })
    }

    fn save_cache(&self) -> Result<()> {
        if self.store.is_empty() {
            return Ok(());
        }
        self.store.save(&self.run.embedding_cache())
    }

    /// Extracts the document profile into `profile.json`.
    pub fn profile(&self, pages: &[PageRecord]) -> Result<GuidelineProfile> {
        crate::model::validate_pages(pages).map_err(Error::Manifest)?;
        let profile = if pages.is_empty() {
            GuidelineProfile::default()
        } else {
            let h = self.config.header_pages.min(pages.len());
            chunker::extract_profile(&self.oracle, &pages[..h])
                .map_err(|e| e.in_stage("profile extraction", Some(1)))?
        };
        write_file(&self.run.profile(), &profile_to_json(&profile))?;
        Ok(profile)
    }

    /// Classifies pages and builds chunks, reusing `profile.json` when it
    /// exists.
    pub fn chunk(&self, pages: &[PageRecord]) -> Result<Vec<Chunk>> {
        crate::model::validate_pages(pages).map_err(Error::Manifest)?;
        let profile = if self.run.profile().exists() {
            load_profile(&self.run.profile())?
        } else {
            self.profile(pages)?
        };
        let settings = self.config.chunking();
        let labels = if pages.is_empty() {
            Vec::new()
        } else {
            chunker::classify_pages(&self.oracle, pages, &profile, settings.parallelism)?
        };
        let core: Vec<u32> = pages
            .iter()
            .zip(&labels)
            .filter(|(_, l)| **l == PageLabel::Core)
            .map(|(p, _)| p.index)
            .collect();
        let runs = chunker::contiguous_runs(&core);
        let body = LabelsBody {
            pages: pages
                .iter()
                .zip(&labels)
                .map(|(p, l)| LabeledPage { index: p.index, label: *l })
                .collect(),
            runs: runs.clone(),
        };
        write_file(&self.run.labels(), &to_versioned(LABELS_FORMAT, body))?;
        let chunks = chunker::chunk_runs(&self.oracle, pages, &profile, &runs, &settings)?;
        write_file(&self.run.chunks(), &chunks_to_json(&chunks))?;
        Ok(chunks)
    }

    /// Expands every chunk of `chunks.json` into `graphs/`. With `resume`,
    /// chunks whose graph file exists are loaded instead of rebuilt.
    pub fn build(&self, resume: bool) -> Result<Vec<DecisionGraph>> {
        let chunks = load_chunks(&self.run.chunks())?;
        let settings = self.config.build();
        for chunk in &chunks {
            let interface = chunk.entry_labels.len() + chunk.terminal_labels.len();
            if settings.expansion_cap < interface {
                return Err(Error::Config(format!(
                    "expansion_cap {} is below the {interface} interface labels of chunk {}",
                    settings.expansion_cap, chunk.chunk_id
                )));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        let results: Vec<Result<DecisionGraph>> = pool.install(|| {
            use rayon::prelude::*;
            chunks.par_iter().map(|chunk| self.build_one(chunk, resume)).collect()
        });
        self.save_cache()?;
        results.into_iter().collect()
    }

    fn build_one(&self, chunk: &Chunk, resume: bool) -> Result<DecisionGraph> {
        let path = self.run.chunk_graph(chunk.chunk_id);
        if resume && path.exists() {
            return load_graph(&path);
        }
        let first_page = chunk.page_span.first().copied();
        match builder::build_graph(&self.oracle, &self.store, chunk, &self.config.build()) {
            Ok(BuildOutput { graph, trace }) => {
                write_file(&self.run.chunk_trace(chunk.chunk_id), &builder::trace_to_jsonl(&trace))?;
                write_file(&path, &graph.to_canonical_json())?;
                let partial = self.run.partial_graph(chunk.chunk_id);
                if partial.exists() {
                    std::fs::remove_file(&partial).map_err(|e| Error::io(&partial, e))?;
                }
                Ok(graph)
            }
            Err(e) => {
                if let Error::ExpansionBudgetExceeded { partial, .. } = &e {
                    write_file(&self.run.partial_graph(chunk.chunk_id), &partial.to_canonical_json())?;
                }
                Err(e.in_stage("graph expansion", first_page))
            }
        }
    }

    /// Merges the chunk graphs into `merged.json`, `merge_log.json` and
    /// `provenance.json`.
    pub fn aggregate(&self) -> Result<AggregateOutput> {
        let chunks = load_chunks(&self.run.chunks())?;
        let mut graphs = Vec::with_capacity(chunks.len());
        for chunk in &chunks {
            let path = self.run.chunk_graph(chunk.chunk_id);
            if !path.exists() {
                return Err(artifact(&path, "missing chunk graph; run the build stage first"));
            }
            graphs.push(load_graph(&path)?);
        }
        let output = aggregator::aggregate(&self.oracle, &self.store, &chunks, &graphs, &self.config.aggregate())
            .map_err(|e| e.in_stage("aggregation", None))?;
        self.save_cache()?;
        let union = aggregator::union_graphs(&graphs)?;
        aggregator::check_edge_preservation(&union, &output.graph, &output.log)
            .map_err(|reason| artifact(&self.run.merged(), reason))?;
        write_file(&self.run.merged(), &output.graph.to_canonical_json())?;
        write_file(&self.run.merge_log(), &output.log.to_json())?;
        let rows = aggregator::provenance_table(&output.graph);
        write_file(&self.run.provenance(), &aggregator::provenance_to_json(&rows))?;
        Ok(output)
    }

    /// All stages in order. With `resume`, stages whose outputs already
    /// exist are skipped.
    pub fn run(&self, pages: &[PageRecord], resume: bool) -> Result<AggregateOutput> {
        if !(resume && self.run.chunks().exists()) {
            if !(resume && self.run.profile().exists()) {
                self.profile(pages)?;
            }
            self.chunk(pages)?;
        }
        self.build(resume)?;
        if resume && self.run.merged().exists() && self.run.merge_log().exists() {
            let graph = load_graph(&self.run.merged())?;
            let log = MergeLog::from_json(&read_file(&self.run.merge_log())?)
                .map_err(|reason| artifact(&self.run.merge_log(), reason))?;
            return Ok(AggregateOutput { graph, log });
        }
        self.aggregate()
    }
}
