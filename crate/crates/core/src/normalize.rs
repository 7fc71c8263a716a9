//! Label normalization shared by every stage and by the scoring harness.
//!
//! Rules: casefold, collapse whitespace runs to one space, trim, and strip
//! trailing `.`, `,`, `;` and `:`.

use crate::error::GraphError;

const TERMINAL_PUNCTUATION: [char; 4] = ['.', ',', ';', ':'];

/// Normalizes a node label. Fails if nothing is left.
pub fn normalize_label(raw: &str) -> Result<String, GraphError> {
    let normalized = normalize_condition(raw);
    if normalized.is_empty() {
        Err(GraphError::EmptyLabel)
    } else {
        Ok(normalized)
    }
}

/// Normalizes an edge condition. Unconditional transitions keep an empty label.
pub fn normalize_condition(raw: &str) -> String {
    let folded = raw.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| TERMINAL_PUNCTUATION.contains(&c) || c.is_whitespace())
        .to_string()
}
