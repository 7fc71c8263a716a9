//! Label embeddings and exact top-k cosine candidate retrieval.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, OracleError, Result};
use crate::graph::NodeId;
use crate::normalize::normalize_label;
use crate::oracle::Backend;

pub const DEFAULT_CANDIDATE_COUNT: usize = 5;
pub const DEFAULT_EMBEDDING_DIM: usize = 256;
pub const DEFAULT_EMBEDDING_SEED: u64 = 0x5eed_1abe1;

const CACHE_FORMAT: &str = "guidegraph.embeddings";
const CACHE_VERSION: u32 = 1;

/// Seeded feature hashing of character trigrams.
///
/// Labels are whitespace-normalized and padded with one space on each side
/// before the trigrams are taken, so every non-empty label has at least one
/// feature and all weights are positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self {
            seed: DEFAULT_EMBEDDING_SEED,
            dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl HashingEmbedder {
    pub fn new(seed: u64, dim: usize) -> Self {
        Self { seed, dim: dim.max(1) }
    }

    pub fn bucket(&self, gram: &str) -> usize {
        (fnv1a(self.seed, gram.as_bytes()) % self.dim as u64) as usize
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for gram in trigrams(text) {
            out[self.bucket(&gram)] += 1.0;
        }
        out
    }
}

/// Character trigrams of the space-padded, whitespace-collapsed text.
pub fn trigrams(text: &str) -> Vec<String> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if collapsed.is_empty() {
        return Vec::new();
    }
    let padded: Vec<char> = format!(" {collapsed} ").chars().collect();
    padded.windows(3).map(|w| w.iter().collect()).collect()
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer to spread the low bits used for bucketing
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

pub type Embedding = Arc<[f64]>;

/// Embedding cache keyed by normalized label.
pub struct EmbeddingStore {
    backend: Arc<dyn Backend>,
    cache: RwLock<HashMap<String, Embedding>>,
    dim: RwLock<Option<usize>>,
}

impl std::fmt::Debug for EmbeddingStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingStore")
            .field("backend", &self.backend.id())
            .field("cached", &self.len())
            .finish()
    }
}

fn label_key(normalized: &str) -> String {
    hex::encode(Sha256::digest(normalized.as_bytes()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheFile {
    format: String,
    version: u32,
    backend_id: String,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingStore {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            cache: RwLock::new(HashMap::new()),
            dim: RwLock::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed(&self, label: &str) -> Result<Embedding> {
        let normalized = normalize_label(label)?;
        let key = label_key(&normalized);
        if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let values = self.backend.embed(&normalized)?;
        self.check_vector(&values)?;
        let embedding: Embedding = values.into();
        let mut cache = self.cache.write().expect("cache lock");
        Ok(cache.entry(key).or_insert(embedding).clone())
    }

    fn check_vector(&self, values: &[f64]) -> Result<()> {
        let reject = |reason: String| Error::Oracle(OracleError::protocol("embed", reason));
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(reject("embedding is empty or not finite".into()));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(reject("zero embedding vector".into()));
        }
        let mut dim = self.dim.write().expect("dim lock");
        match *dim {
            Some(d) if d != values.len() => Err(reject(format!(
                "embedding dimension {} differs from {d}",
                values.len()
            ))),
            Some(_) => Ok(()),
            None => {
                *dim = Some(values.len());
                Ok(())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self
            .cache
            .read()
            .expect("cache lock")
            .iter()
            .map(|(k, v)| (k.clone(), v.to_vec()))
            .collect();
        let file = CacheFile {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            backend_id: self.backend.id(),
            entries,
        };
        let text = serde_json::to_string(&file)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a persisted cache. Entries recorded for another backend are ignored.
    pub fn load(&self, path: &Path) -> Result<usize> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CacheFile = serde_json::from_str(&text)?;
        if file.format != CACHE_FORMAT || file.version != CACHE_VERSION {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                reason: format!("unsupported embedding cache {}/{}", file.format, file.version),
            });
        }
        if file.backend_id != self.backend.id() {
            log::warn!(
                "ignoring embedding cache for backend {} (current backend {})",
                file.backend_id,
                self.backend.id()
            );
            return Ok(0);
        }
        let mut loaded = 0;
        for (key, values) in file.entries {
            self.check_vector(&values)?;
            self.cache.write().expect("cache lock").insert(key, values.into());
            loaded += 1;
        }
        Ok(loaded)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub node_id: NodeId,
    pub similarity: f64,
}

/// Top-k neighbors, most similar first, ties by ascending node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub entries: Vec<Candidate>,
    pub k: usize,
}

impl CandidateSet {
    pub fn empty(k: usize) -> Self {
        Self { entries: Vec::new(), k }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn ids(&self) -> impl Iterator<Item = &NodeId> {
        self.entries.iter().map(|c| &c.node_id)
    }
}

/// Ordering key for a similarity. Scores that agree to nine decimals are
/// ties, so rounding noise between mathematically equal cosines cannot beat
/// the id tie-break.
pub fn similarity_key(similarity: f64) -> i64 {
    (similarity * 1e9).round() as i64
}

/// Exact top-k over precomputed vectors.
pub fn rank_candidates<'a>(
    query: &[f64],
    pool: impl IntoIterator<Item = (&'a NodeId, &'a [f64])>,
    k: usize,
) -> CandidateSet {
    let mut scored: Vec<Candidate> = pool
        .into_iter()
        .map(|(id, v)| Candidate {
            node_id: id.clone(),
            similarity: cosine(query, v),
        })
        .collect();
    scored.sort_by(|a, b| {
        similarity_key(b.similarity)
            .cmp(&similarity_key(a.similarity))
            .then_with(|| a.node_id.cmp(&b.node_id))
    });
    scored.truncate(k);
    CandidateSet { entries: scored, k }
}

#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    /// An existing node; it is excluded from its own candidates.
    Node(&'a NodeId, &'a str),
    /// A free label, e.g. a candidate that is not registered yet.
    Label(&'a str),
}

impl<'a> Query<'a> {
    fn label(&self) -> &'a str {
        match self {
            Query::Node(_, l) | Query::Label(l) => l,
        }
    }

    fn excludes(&self, id: &NodeId) -> bool {
        matches!(self, Query::Node(q, _) if *q == id)
    }
}

/// Top-k pool members by cosine similarity of their label embeddings.
pub fn cosine_candidates<'a>(
    store: &EmbeddingStore,
    query: Query<'_>,
    pool: impl IntoIterator<Item = (&'a NodeId, &'a str)>,
    k: usize,
) -> Result<CandidateSet> {
    let k = k.max(1);
    let mut vectors: Vec<(&NodeId, Embedding)> = Vec::new();
    for (id, label) in pool {
        if query.excludes(id) {
            continue;
        }
        vectors.push((id, store.embed(label)?));
    }
    if vectors.is_empty() {
        return Ok(CandidateSet::empty(k));
    }
    let q = store.embed(query.label())?;
    Ok(rank_candidates(
        &q,
        vectors.iter().map(|(id, v)| (*id, v.as_ref())),
        k,
    ))
}
