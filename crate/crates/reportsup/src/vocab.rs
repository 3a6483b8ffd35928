//! Organ vocabulary config files.
//!
//! ```json
//! {"organs": [{"id": "pancreas_head", "display_name": "Pancreas head", "parent": "pancreas"}]}
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use reportsup_core::report::OrganEntry;
use reportsup_core::OrganVocabulary;

use crate::error::{io_err, IoError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyFile {
    pub organs: Vec<OrganEntry>,
}

impl VocabularyFile {
    pub fn from_vocabulary(vocabulary: &OrganVocabulary) -> Self {
        Self { organs: vocabulary.entries().cloned().collect() }
    }
}

fn violation(source_name: &str, field: String, message: String) -> IoError {
    IoError::SchemaViolation { source_name: source_name.to_string(), line: 0, field, message }
}

/// Parses a vocabulary; ids must be unique and parents must be listed.
pub fn parse_vocabulary(text: &str, source_name: &str) -> Result<OrganVocabulary> {
    let file: VocabularyFile =
        serde_json::from_str(text).map_err(|e| violation(source_name, "$".into(), e.to_string()))?;
    let ids: Vec<&str> = file.organs.iter().map(|o| o.id.as_str()).collect();
    for (i, organ) in file.organs.iter().enumerate() {
        if organ.id.is_empty() {
            return Err(violation(source_name, format!("organs[{i}].id"), "must not be empty".into()));
        }
        if ids[..i].contains(&organ.id.as_str()) {
            return Err(violation(source_name, format!("organs[{i}].id"), format!("duplicate id {:?}", organ.id)));
        }
        if let Some(parent) = &organ.parent {
            if !ids.contains(&parent.as_str()) || parent == &organ.id {
                return Err(violation(source_name, format!("organs[{i}].parent"), format!("unknown parent {parent:?}")));
            }
        }
    }
    Ok(OrganVocabulary::new(file.organs))
}

pub fn load_vocabulary(path: &Path) -> Result<OrganVocabulary> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_vocabulary(&text, &path.display().to_string())
}

/// The configured vocabulary, or the built-in default.
pub fn vocabulary_or_default(path: Option<&Path>) -> Result<OrganVocabulary> {
    path.map_or_else(|| Ok(OrganVocabulary::default()), load_vocabulary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let v = OrganVocabulary::default();
        let text = serde_json::to_string(&VocabularyFile::from_vocabulary(&v)).unwrap();
        assert_eq!(parse_vocabulary(&text, "v").unwrap(), v);
    }

    #[test]
    fn rejects_unknown_parent_and_duplicates() {
        let bad_parent = r#"{"organs":[{"id":"a","display_name":"A","parent":"b"}]}"#;
        assert!(parse_vocabulary(bad_parent, "v").unwrap_err().to_string().contains("organs[0].parent"));
        let dup = r#"{"organs":[{"id":"a","display_name":"A"},{"id":"a","display_name":"B"}]}"#;
        assert!(parse_vocabulary(dup, "v").unwrap_err().to_string().contains("organs[1].id"));
    }
}
