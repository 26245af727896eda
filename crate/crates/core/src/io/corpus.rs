//! Paragraph corpora: JSONL `{doc_id, title, section_title, text}`.

use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics::{Corpus, Document};

#[derive(Deserialize)]
#[serde(untagged)]
enum DocId {
    Text(String),
    Number(serde_json::Number),
}

#[derive(Deserialize)]
struct RawDocument {
    doc_id: DocId,
    #[serde(default)]
    title: String,
    #[serde(default)]
    section_title: String,
    text: String,
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument =
            serde_json::from_str(line).map_err(|e| Error::Dataset { line: i + 1, message: e.to_string() })?;
        let doc_id = match raw.doc_id {
            DocId::Text(s) => s,
            DocId::Number(n) => n.to_string(),
        };
        docs.push(Document { doc_id, title: raw.title, section_title: raw.section_title, text: raw.text });
    }
    if docs.is_empty() {
        log::warn!("corpus contains no documents");
    }
    Ok(Corpus::new(docs))
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_corpus(&text)
}
