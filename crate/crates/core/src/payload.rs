//! Payload helpers shared across validation, execution, and logging.

use serde_json::Value;

/// Tool inputs and outputs are arbitrary JSON documents.
pub type Payload = Value;

/// Canonical serialization used for policy matching and size limits.
///
/// `serde_json` maps are ordered by key, so the same document always
/// serializes to the same bytes.
pub fn canonical_string(payload: &Payload) -> String {
    serde_json::to_string(payload).expect("JSON value serializes")
}

/// Look up a slash-delimited path (`/a/b/0`) inside a payload.
///
/// Empty path and `/` address the whole document. Numeric segments index
/// arrays. Returns `None` when any segment is missing.
pub fn lookup_path<'a>(payload: &'a Payload, path: &str) -> Option<&'a Payload> {
    let trimmed = path.trim_start_matches('/');
    if trimmed.is_empty() {
        return Some(payload);
    }
    let mut current = payload;
    for segment in trimmed.split('/') {
        current = match current {
            Value::Object(map) => map.get(segment)?,
            Value::Array(items) => items.get(segment.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(current)
}

/// Join a parent path and a child segment into a slash-delimited path.
pub fn child_path(parent: &str, segment: &str) -> String {
    format!("{parent}/{segment}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn lookup_nested_object_and_array() {
        let doc = json!({"a": {"b": [10, 20]}});
        assert_eq!(lookup_path(&doc, "/a/b/1"), Some(&json!(20)));
        assert_eq!(lookup_path(&doc, "/a/b/2"), None);
        assert_eq!(lookup_path(&doc, "/a/missing"), None);
    }

    #[test]
    fn empty_path_is_the_document() {
        let doc = json!({"x": 1});
        assert_eq!(lookup_path(&doc, ""), Some(&doc));
        assert_eq!(lookup_path(&doc, "/"), Some(&doc));
    }

    #[test]
    fn canonical_string_is_key_ordered() {
        let a: Value = serde_json::from_str(r#"{"b":1,"a":2}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a":2,"b":1}"#).unwrap();
        assert_eq!(canonical_string(&a), canonical_string(&b));
    }
}
