//! Lenient extraction of JSON objects and tagged spans from model output.

use serde_json::{Map, Value};

/// Every top-level `{...}` span in `text` that parses as a JSON object,
/// in order of appearance. Braces inside JSON strings are skipped.
/// Markdown fences and surrounding prose are ignored because only balanced
/// object spans are considered; a trailing-comma repair is attempted on
/// spans that fail to parse as-is.
pub fn json_objects(text: &str) -> Vec<Map<String, Value>> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        match balanced_end(bytes, i) {
            Some(end) => {
                let span = &text[i..=end];
                if let Some(obj) = parse_object(span) {
                    out.push(obj);
                    i = end + 1;
                    continue;
                }
                i += 1;
            }
            None => i += 1,
        }
    }
    out
}

fn parse_object(span: &str) -> Option<Map<String, Value>> {
    let parsed = serde_json::from_str::<Value>(span)
        .ok()
        .or_else(|| serde_json::from_str::<Value>(&strip_trailing_commas(span)).ok());
    match parsed {
        Some(Value::Object(m)) => Some(m),
        _ => None,
    }
}

/// Index of the `}` closing the object opened at `start`, honoring strings.
fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (off, &b) in bytes[start..].iter().enumerate() {
        if in_str {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_str = false;
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + off);
                }
            }
            _ => {}
        }
    }
    None
}

/// Removes commas that directly precede `}` or `]` (ignoring whitespace),
/// outside of strings.
fn strip_trailing_commas(s: &str) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    for (i, &c) in chars.iter().enumerate() {
        if in_str {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_str = false;
            }
            continue;
        }
        if c == '"' {
            in_str = true;
        } else if c == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some('}') | Some(']')) {
                continue;
            }
        }
        out.push(c);
    }
    out
}

/// Content between the first `<tag>` and the next `</tag>` after it.
pub fn tagged<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)? + open.len();
    let len = text[start..].find(&close)?;
    Some(&text[start..start + len])
}

/// All contents of `<tag>...</tag>` pairs, in order.
pub fn tagged_all<'a>(text: &'a str, tag: &str) -> Vec<&'a str> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(s) = rest.find(&open) {
        let after = &rest[s + open.len()..];
        match after.find(&close) {
            Some(e) => {
                out.push(&after[..e]);
                rest = &after[e + close.len()..];
            }
            None => break,
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_object() {
        let objs = json_objects(r#"{"a": 1}"#);
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0]["a"], 1);
    }

    #[test]
    fn fenced_with_prose() {
        let text = "Sure! Here it is:\n```json\n{\"a\": \"x}y\", \"b\": [1, 2]}\n```\nThanks.";
        let objs = json_objects(text);
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0]["a"], "x}y");
    }

    #[test]
    fn trailing_commas_repaired() {
        let objs = json_objects("{\"a\": [1, 2,], \"b\": 3,}");
        assert_eq!(objs.len(), 1);
        assert_eq!(objs[0]["b"], 3);
    }

    #[test]
    fn comma_inside_string_kept() {
        let objs = json_objects(r#"{"a": "x,}"}"#);
        assert_eq!(objs[0]["a"], "x,}");
    }

    #[test]
    fn unbalanced_yields_nothing() {
        assert!(json_objects("{\"a\": 1").is_empty());
        assert!(json_objects("no json here }{").is_empty());
    }

    #[test]
    fn two_objects() {
        assert_eq!(json_objects("{\"a\":1} and {\"b\":2}").len(), 2);
    }

    #[test]
    fn tags() {
        assert_eq!(tagged("x <t> hi </t> y", "t"), Some(" hi "));
        assert_eq!(tagged("<t>hi", "t"), None);
        assert_eq!(tagged_all("<t>1</t><t>2</t><t>3", "t"), vec!["1", "2"]);
    }
}
