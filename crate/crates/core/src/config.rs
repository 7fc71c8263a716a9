//! Pipeline configuration: a TOML file with command-line overrides applied
//! on top, echoed into every run directory as JSON.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregateSettings, DEFAULT_ANCESTOR_CAP};
use crate::builder::{BuildSettings, DEFAULT_EXPANSION_CAP};
use crate::chunker::{ChunkingSettings, DEFAULT_CHUNK_BUDGET, DEFAULT_HEADER_PAGES, DEFAULT_PARALLELISM};
use crate::error::{Error, Result};
use crate::eval::MatchPolicy;
use crate::oracle::live::{LiveBackend, LiveSettings, DEFAULT_TOKEN_ENV};
use crate::oracle::scripted::{FixtureSet, ScriptedBackend};
use crate::oracle::{Backend, DEFAULT_RETRY_LIMIT};
use crate::retrieval::{HashingEmbedder, DEFAULT_CANDIDATE_COUNT, DEFAULT_EMBEDDING_DIM, DEFAULT_EMBEDDING_SEED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Live,
    #[default]
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Chat-completions base URL (live).
    pub endpoint: Option<String>,
    pub chat_model: Option<String>,
    pub embedding_model: Option<String>,
    /// Embeddings base URL when it differs from `endpoint` (live).
    pub embedding_endpoint: Option<String>,
    /// Environment variable holding the bearer token (live).
    pub token_env: String,
    pub timeout_secs: u64,
    /// Recorded fixture directory (scripted).
    pub fixtures: Option<PathBuf>,
    /// Hashing embedder parameters (scripted).
    pub embedding_seed: u64,
    pub embedding_dim: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Scripted,
            endpoint: None,
            chat_model: None,
            embedding_model: None,
            embedding_endpoint: None,
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 120,
            fixtures: None,
            embedding_seed: DEFAULT_EMBEDDING_SEED,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

impl BackendConfig {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.embedding_dim == 0 {
            return Err("backend.embedding_dim must be at least 1".into());
        }
        if self.timeout_secs == 0 {
            return Err("backend.timeout_secs must be at least 1".into());
        }
        Ok(())
    }

    /// Instantiates the configured backend.
    pub fn open(&self) -> Result<Arc<dyn Backend>> {
        match self.kind {
            BackendKind::Scripted => {
                let dir = self
                    .fixtures
                    .as_ref()
                    .ok_or_else(|| Error::Config("scripted backend needs backend.fixtures".into()))?;
                let backend = ScriptedBackend::new(FixtureSet::load_dir(dir)?)
                    .with_embedder(HashingEmbedder::new(self.embedding_seed, self.embedding_dim));
                Ok(Arc::new(backend))
            }
            BackendKind::Live => {
                let need = |v: &Option<String>, name: &str| {
                    v.clone()
                        .ok_or_else(|| Error::Config(format!("live backend needs backend.{name}")))
                };
                let settings = LiveSettings {
                    endpoint: need(&self.endpoint, "endpoint")?,
                    chat_model: need(&self.chat_model, "chat_model")?,
                    embedding_model: need(&self.embedding_model, "embedding_model")?,
                    embedding_endpoint: self.embedding_endpoint.clone(),
                    token_env: self.token_env.clone(),
                    timeout_secs: self.timeout_secs,
                };
                Ok(Arc::new(LiveBackend::new(settings)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Leading pages read for the document profile.
    pub header_pages: usize,
    /// Soft chunk budget in characters.
    pub chunk_budget: usize,
    /// Neighbors retrieved per duplicate check.
    pub candidate_count: usize,
    /// Maximum nodes per chunk graph.
    pub expansion_cap: usize,
    /// Attempts per oracle request.
    pub retry_limit: usize,
    /// Concurrent oracle requests.
    pub parallelism: usize,
    pub backend: BackendConfig,
    pub match_policy: MatchPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            header_pages: DEFAULT_HEADER_PAGES,
            chunk_budget: DEFAULT_CHUNK_BUDGET,
            candidate_count: DEFAULT_CANDIDATE_COUNT,
            expansion_cap: DEFAULT_EXPANSION_CAP,
            retry_limit: DEFAULT_RETRY_LIMIT,
            parallelism: DEFAULT_PARALLELISM,
            backend: BackendConfig::default(),
            match_policy: MatchPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a TOML file. A relative fixture directory is resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.root())))?;
        if let Some(dir) = &config.backend.fixtures {
            if dir.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.backend.fixtures = Some(base.join(dir));
            }
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("header_pages", self.header_pages),
            ("chunk_budget", self.chunk_budget),
            ("candidate_count", self.candidate_count),
            ("expansion_cap", self.expansion_cap),
            ("retry_limit", self.retry_limit),
            ("parallelism", self.parallelism),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        self.backend.validate().map_err(Error::Config)?;
        self.match_policy.validate().map_err(Error::Config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config encodes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn chunking(&self) -> ChunkingSettings {
        ChunkingSettings {
            header_pages: self.header_pages,
            budget: self.chunk_budget,
            parallelism: self.parallelism,
        }
    }

    pub fn build(&self) -> BuildSettings {
        BuildSettings {
            candidate_count: self.candidate_count,
            expansion_cap: self.expansion_cap,
        }
    }

    pub fn aggregate(&self) -> AggregateSettings {
        AggregateSettings {
            candidate_count: self.candidate_count,
            ancestor_cap: DEFAULT_ANCESTOR_CAP,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        assert_eq!(c.header_pages, 3);
        assert_eq!(c.chunk_budget, 8000);
        assert_eq!(c.match_policy, MatchPolicy::ExactNormalized);
    }

    #[test]
    fn full_file() {
        let c = PipelineConfig::from_toml_str(
            r#"
            header_pages = 2
            chunk_budget = 500
            candidate_count = 3
            expansion_cap = 40
            retry_limit = 2
            parallelism = 1

            [backend]
            kind = "live"
            endpoint = "http://localhost:9/v1"
            chat_model = "vlm"
            embedding_model = "embed"

            [match_policy]
            mode = "embedding_threshold"
            theta = 0.8
            "#,
        )
        .unwrap();
        assert_eq!(c.chunking().budget, 500);
        assert_eq!(c.build().expansion_cap, 40);
        assert_eq!(c.backend.kind, BackendKind::Live);
        assert_eq!(c.match_policy, MatchPolicy::EmbeddingThreshold { theta: 0.8 });
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "chunk_budget = 0",
            "header_pages = 0",
            "unknown_key = 1",
            "[backend]\nkind = \"remote\"",
            "[match_policy]\nmode = \"embedding_threshold\"\ntheta = 0.0",
            "[match_policy]\nmode = \"embedding_threshold\"\ntheta = 1.5",
            "chunk_budget = \"big\"",
        ] {
            assert!(
                matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn backend_requirements() {
        let mut b = BackendConfig::default();
        assert!(matches!(b.open(), Err(Error::Config(_))));
        b.kind = BackendKind::Live;
        b.endpoint = Some("http://localhost:9/v1".into());
        assert!(matches!(b.open(), Err(Error::Config(_))));
        b.chat_model = Some("m".into());
        b.embedding_model = Some("e".into());
        assert!(b.open().is_ok());
        b.kind = BackendKind::Scripted;
        b.fixtures = Some("/no/such/fixtures".into());
        assert!(b.open().is_err());
    }

    #[test]
    fn relative_fixture_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pipeline.toml");
        std::fs::write(&path, "[backend]\nfixtures = \"fx\"\n").unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.backend.fixtures, Some(dir.path().join("fx")));
    }
}
