//! Page manifest ingestion.
//!
//! A manifest is a JSON document listing the pages of one guideline:
//!
//! ```json
//! {
//!   "format": "guidegraph.manifest",
//!   "version": 1,
//!   "pages": [
//!     {"index": 1, "text_path": "p01.txt"},
//!     {"index": 2, "text_path": "p02.txt", "image_path": "p02.png"}
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest. Text must already be extracted;
//! OCR happens upstream.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::PageRecord;

pub const MANIFEST_FORMAT: &str = "guidegraph.manifest";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestPage {
    pub index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub pages: Vec<ManifestPage>,
}

impl Manifest {
    pub fn new(pages: Vec<ManifestPage>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            pages,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest encodes") + "\n"
    }
}

/// Reads the manifest and every page text it references, returning pages in
/// index order.
pub fn ingest(manifest_path: &Path) -> Result<Vec<PageRecord>> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let where_ = manifest_path.display();
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{where_}: {e}")))?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != 1 {
        return Err(Error::Manifest(format!(
            "{where_}: unsupported manifest {}/{}",
            manifest.format, manifest.version
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = manifest.pages;
    if entries.windows(2).any(|w| w[0].index > w[1].index) {
        log::warn!("{where_}: pages are not listed in index order; sorting");
        entries.sort_by_key(|p| p.index);
    }
    let mut pages = Vec::with_capacity(entries.len());
    for (pos, entry) in entries.into_iter().enumerate() {
        let expected = pos as u32 + 1;
        if entry.index != expected {
            return Err(Error::Manifest(format!(
                "{where_}: page indices must be 1..n without gaps or repeats; found {} where {expected} was expected",
                entry.index
            )));
        }
        let Some(text_path) = entry.text_path else {
            let what = if entry.image_path.is_some() {
                "has an image but no text_path; run text extraction before ingestion"
            } else {
                "has neither text_path nor image_path"
            };
            return Err(Error::Manifest(format!("{where_}: page {} {what}", entry.index)));
        };
        let text_file = base.join(&text_path);
        let text = std::fs::read_to_string(&text_file).map_err(|e| {
            Error::Manifest(format!(
                "{where_}: page {}: cannot read {}: {e}",
                entry.index,
                text_file.display()
            ))
        })?;
        let image_ref = entry.image_path.map(|p| base.join(p).to_string_lossy().into_owned());
        if text.trim().is_empty() && image_ref.is_none() {
            return Err(Error::Manifest(format!(
                "{where_}: page {} has empty text and no image",
                entry.index
            )));
        }
        pages.push(PageRecord {
            index: entry.index,
            text,
            image_ref,
        });
    }
    Ok(pages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(dir: &Path, manifest: serde_json::Value, texts: &[(&str, &str)]) -> PathBuf {
        for (name, body) in texts {
            std::fs::write(dir.join(name), body).unwrap();
        }
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        path
    }

    fn pages(entries: serde_json::Value) -> serde_json::Value {
        json!({"format": MANIFEST_FORMAT, "version": 1, "pages": entries})
    }

    #[test]
    fn seven_pages_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (1..=7).map(|i| format!("p{i}.txt")).collect();
        let texts: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "text")).collect();
        let entries: Vec<_> = (1..=7).map(|i| json!({"index": i, "text_path": format!("p{i}.txt")})).collect();
        let path = write(dir.path(), pages(json!(entries)), &texts);
        let got = ingest(&path).unwrap();
        assert_eq!(got.iter().map(|p| p.index).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn out_of_order_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            pages(json!([
                {"index": 2, "text_path": "b.txt", "image_path": "b.png"},
                {"index": 1, "text_path": "a.txt"},
            ])),
            &[("a.txt", "first"), ("b.txt", "second")],
        );
        let got = ingest(&path).unwrap();
        assert_eq!(got[0].text, "first");
        assert_eq!(got[1].index, 2);
        assert_eq!(got[1].image_ref.as_deref(), Some(dir.path().join("b.png").to_str().unwrap()));
    }

    #[test]
    fn image_only_page_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            pages(json!([
                {"index": 1, "text_path": "a.txt"},
                {"index": 2, "image_path": "scan.png"},
            ])),
            &[("a.txt", "first")],
        );
        let err = ingest(&path).unwrap_err().to_string();
        assert!(err.contains("page 2"), "{err}");
    }

    #[test]
    fn malformed_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (pages(json!([{"index": 1, "text_path": "a.txt"}, {"index": 3, "text_path": "a.txt"}])), "without gaps"),
            (pages(json!([{"index": 1, "text_path": "a.txt"}, {"index": 1, "text_path": "a.txt"}])), "without gaps"),
            (pages(json!([{"index": 1, "text_path": "missing.txt"}])), "page 1: cannot read"),
            (pages(json!([{"index": 1, "text_path": "blank.txt"}])), "empty text"),
            (pages(json!([{"index": 1, "text": "inline"}])), "unknown field"),
            (json!({"format": "other", "version": 1, "pages": []}), "unsupported"),
        ];
        for (doc, needle) in cases {
            let path = write(dir.path(), doc, &[("a.txt", "x"), ("blank.txt", "  \n")]);
            match ingest(&path) {
                Err(Error::Manifest(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("expected manifest error containing {needle:?}, got {other:?}"),
            }
        }
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\n  \"format\": \"guidegraph.manifest\",\n  \"version\": 1,\n  \"pages\": [\n    {\"index\": \"one\"}\n  ]\n}").unwrap();
        let msg = ingest(&path).unwrap_err().to_string();
        assert!(msg.contains("line 5"), "{msg}");
    }
}
