//! Document and chunk data model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One document page: 1-based index, extracted text and an optional rendered image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRecord {
    pub index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl PageRecord {
    pub fn new(index: u32, text: impl Into<String>) -> Self {
        Self {
            index,
            text: text.into(),
            image_ref: None,
        }
    }

    pub fn with_image(mut self, image_ref: impl Into<String>) -> Self {
        self.image_ref = Some(image_ref.into());
        self
    }

    /// Length in text units (Unicode scalar values), the unit of the chunk budget.
    pub fn text_len(&self) -> usize {
        self.text.chars().count()
    }
}

/// Checks the document-level page invariants: indices are exactly `1..=n` in
/// order, and a page has text unless it has an image.
pub fn validate_pages(pages: &[PageRecord]) -> Result<(), String> {
    for (pos, page) in pages.iter().enumerate() {
        let expected = pos as u32 + 1;
        if page.index != expected {
            return Err(format!(
                "page at position {pos} has index {} (expected {expected})",
                page.index
            ));
        }
        if page.text.trim().is_empty() && page.image_ref.is_none() {
            return Err(format!("page {} has neither text nor image", page.index));
        }
    }
    Ok(())
}

/// Document-level profile extracted from the header pages.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineProfile {
    pub metadata: BTreeMap<String, String>,
    pub scope_context: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PageLabel {
    Core,
    Auxiliary,
}

/// One decision segment of the document together with its graph interface.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: u32,
    pub description: String,
    pub entry_labels: Vec<String>,
    pub terminal_labels: Vec<String>,
    /// Pages replicated at the start of the next chunk of the same run.
    pub carried_pages: Vec<u32>,
    pub page_span: Vec<u32>,
    /// Assembled context handed to graph expansion.
    pub context: String,
}

impl Chunk {
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.entry_labels.is_empty() || self.terminal_labels.is_empty() {
            return Err("entry and terminal labels must be non-empty".into());
        }
        for labels in [&self.entry_labels, &self.terminal_labels] {
            let mut seen = std::collections::BTreeSet::new();
            if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                return Err(format!("duplicate interface label {dup:?}"));
            }
        }
        if let Some(shared) = self
            .entry_labels
            .iter()
            .find(|l| self.terminal_labels.contains(l))
        {
            return Err(format!("label {shared:?} is both entry and terminal"));
        }
        if let Some(p) = self
            .carried_pages
            .iter()
            .find(|p| !self.page_span.contains(p))
        {
            return Err(format!("carried page {p} is outside the page span"));
        }
        Ok(())
    }
}
