use regex::Regex;
use serde_json::Value;

use crate::error::{Error, Result};

/// Index of the brace closing the object opened at `start`, honoring JSON strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i);
                }
            }
            _ => {}
        }
    }
    None
}

/// First brace-balanced substring that parses as a JSON object.
fn scan_objects(text: &str) -> Option<Value> {
    let bytes = text.as_bytes();
    for (start, &b) in bytes.iter().enumerate() {
        if b != b'{' {
            continue;
        }
        if let Some(end) = balanced_end(bytes, start) {
            if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(&text[start..=end]) {
                return Some(v);
            }
        }
    }
    None
}

/// Pull the first JSON object out of free-form model output.
///
/// Fenced code blocks are searched before the surrounding prose.
pub fn extract_json_block(text: &str) -> Result<Value> {
    let fence = Regex::new(r"(?s)```[A-Za-z0-9_-]*[ \t]*\n?(.*?)```").expect("static regex");
    for cap in fence.captures_iter(text) {
        let body = cap[1].trim();
        if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(body) {
            return Ok(v);
        }
        if let Some(v) = scan_objects(body) {
            return Ok(v);
        }
    }
    scan_objects(text).ok_or(Error::NoJsonFound)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn fenced_and_bare() {
        assert_eq!(extract_json_block("```json\n{\"a\":1}\n```").unwrap(), json!({"a": 1}));
        assert_eq!(extract_json_block("Here is the plan: {\"a\":1} hope it helps").unwrap(), json!({"a": 1}));
    }

    #[test]
    fn fence_wins_over_earlier_prose_object() {
        let t = "first {\"prose\":true}\n```\n{\"fenced\":true}\n```";
        assert_eq!(extract_json_block(t).unwrap(), json!({"fenced": true}));
    }

    #[test]
    fn braces_inside_strings() {
        let t = r#"note {"msg": "a } inside", "n": 2} end"#;
        assert_eq!(extract_json_block(t).unwrap(), json!({"msg": "a } inside", "n": 2}));
    }

    #[test]
    fn nothing_found() {
        assert!(matches!(extract_json_block("no json here [1,2]"), Err(Error::NoJsonFound)));
        assert!(matches!(extract_json_block("{broken"), Err(Error::NoJsonFound)));
    }
}
