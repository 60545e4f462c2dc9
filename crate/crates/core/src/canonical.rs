//! Canonical JSON: keys sorted lexicographically (by UTF-8 bytes) at every
//! level, no insignificant whitespace, strings in NFC.
//!
//! Written by hand rather than relying on `serde_json::Map` ordering, which
//! changes if any crate in the build enables `preserve_order`.

use serde::Serialize;
use serde_json::Value;
use unicode_normalization::UnicodeNormalization;

/// Render `value` canonically. No trailing newline.
pub fn to_canonical_string(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

/// Serialize any value through `serde_json::Value` and render canonically.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(to_canonical_string(&serde_json::to_value(value)?))
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Null | Value::Bool(_) | Value::Number(_) => out.push_str(&value.to_string()),
        Value::String(s) => write_str(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut entries: Vec<(String, &Value)> =
                map.iter().map(|(k, v)| (k.nfc().collect(), v)).collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_str(k, out);
                out.push(':');
                write_value(v, out);
            }
            out.push('}');
        }
    }
}

fn write_str(s: &str, out: &mut String) {
    let normalized: String = s.nfc().collect();
    // serde_json's string escaping is already minimal and deterministic.
    out.push_str(&Value::String(normalized).to_string());
}
