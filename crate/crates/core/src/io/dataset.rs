//! Factual query datasets, one JSON object per line.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: String,
    pub subject: String,
    pub attribute: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation_id: Option<String>,
}

fn required(obj: &serde_json::Map<String, Value>, field: &str, line: usize) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(Error::Dataset { line, message: format!("field `{field}` must be a string") }),
        None => Err(Error::Dataset { line, message: format!("missing field `{field}`") }),
    }
}

fn parse_line(text: &str, line: usize) -> Result<QueryRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| Error::Dataset { line, message: format!("invalid JSON: {e}") })?;
    let Value::Object(obj) = value else {
        return Err(Error::Dataset { line, message: "expected a JSON object".into() });
    };
    let record = QueryRecord {
        query: required(&obj, "query", line)?,
        subject: required(&obj, "subject", line)?,
        attribute: required(&obj, "attribute", line)?,
        relation_id: match obj.get("relation_id") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(Error::Dataset { line, message: "field `relation_id` must be a string".into() }),
        },
    };
    if record.subject.is_empty() || !record.query.contains(&record.subject) {
        return Err(Error::Dataset {
            line,
            message: format!("subject {:?} is not a substring of query {:?}", record.subject, record.query),
        });
    }
    Ok(record)
}

/// Parses JSONL text. Line numbers in errors are 1-based. With `permissive`,
/// malformed lines are logged and skipped instead of failing the load.
pub fn parse_dataset(text: &str, permissive: bool) -> Result<Vec<QueryRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, i + 1) {
            Ok(r) => records.push(r),
            Err(e) if permissive => log::warn!("skipping dataset {e}"),
            Err(e) => return Err(e),
        }
    }
    if records.is_empty() {
        log::warn!("dataset contains no queries");
    }
    Ok(records)
}

pub fn load_dataset(path: &Path, permissive: bool) -> Result<Vec<QueryRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_dataset(&text, permissive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_a_record() {
        let r = parse_dataset(r#"{"query":"Beats Music is owned by","subject":"Beats Music","attribute":"Apple"}"#, false)
            .unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].attribute, "Apple");
        assert_eq!(r[0].relation_id, None);
    }

    #[test]
    fn errors_name_line_and_field() {
        let text = "{\"query\":\"a b\",\"subject\":\"a\",\"attribute\":\"c\",\"relation_id\":127}\n\n{\"query\":\"x\",\"attribute\":\"y\"}";
        match parse_dataset(text, false) {
            Err(Error::Dataset { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("subject"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let kept = parse_dataset(text, true).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].relation_id.as_deref(), Some("127"));
    }

    #[test]
    fn subject_must_occur_in_query() {
        let text = r#"{"query":"Paris is in","subject":"Rome","attribute":"France"}"#;
        assert!(matches!(parse_dataset(text, false), Err(Error::Dataset { line: 1, .. })));
        assert!(parse_dataset("", false).unwrap().is_empty());
    }
}
