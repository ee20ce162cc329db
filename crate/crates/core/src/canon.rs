//! Canonical JSON encoding.
//!
//! Receipts and manifest entries are hashed and signed over a canonical byte
//! form: UTF-8 JSON with object keys sorted lexicographically, no
//! insignificant whitespace, and shortest-roundtrip float rendering. The
//! encoding is exactly what `serde_json` produces for a `Value` (its map type
//! is ordered), so canonicalization reduces to a `Value` round-trip plus
//! validation.
//!
//! Non-finite floats have no JSON representation; `serde_json` coerces them
//! to `null`. Canonical documents never contain `null` (optional fields are
//! omitted instead), so any `null` encountered is rejected as
//! [`CanonError::NonCanonicalInput`] — this is the NaN/∞ guard.

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum CanonError {
    #[error("value cannot be represented as JSON: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("non-canonical input at {path}: {reason}")]
    NonCanonicalInput { path: String, reason: String },
}

/// Serialize `value` to canonical JSON bytes.
pub fn canonical_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CanonError> {
    let v = serde_json::to_value(value)?;
    validate(&v, "$")?;
    Ok(serde_json::to_vec(&v)?)
}

/// Canonicalize an already-parsed JSON value (e.g. a receipt read from disk).
pub fn canonical_value_bytes(v: &Value) -> Result<Vec<u8>, CanonError> {
    validate(v, "$")?;
    // Re-encoding through Value sorts keys and normalizes whitespace.
    Ok(serde_json::to_vec(v)?)
}

fn validate(v: &Value, path: &str) -> Result<(), CanonError> {
    match v {
        Value::Null => Err(CanonError::NonCanonicalInput {
            path: path.to_string(),
            reason: "null (canonical documents omit absent fields; \
                     non-finite floats are not representable)"
                .to_string(),
        }),
        Value::Number(n) => {
            // serde_json numbers are always finite, but an integer-valued
            // f64 beyond u64/i64 range would lose meaning on re-parse.
            if n.as_f64().is_some_and(|f| !f.is_finite()) {
                return Err(CanonError::NonCanonicalInput {
                    path: path.to_string(),
                    reason: "non-finite number".to_string(),
                });
            }
            Ok(())
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                validate(item, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, item) in map {
                validate(item, &format!("{path}.{k}"))?;
            }
            Ok(())
        }
        Value::Bool(_) | Value::String(_) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn keys_sorted_and_whitespace_stripped() {
        let v: Value = serde_json::from_str(r#"{ "b": 1,  "a": [2, 3], "c": {"z": 1, "y": 2} }"#)
            .unwrap();
        let bytes = canonical_value_bytes(&v).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"a":[2,3],"b":1,"c":{"y":2,"z":1}}"#
        );
    }

    #[test]
    fn equal_documents_produce_equal_bytes() {
        let a: Value = serde_json::from_str(r#"{"x": 1.5, "y": "s"}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{  "y": "s", "x": 1.50 }"#).unwrap();
        // 1.50 parses to the same f64 as 1.5; canonical bytes must agree.
        assert_eq!(
            canonical_value_bytes(&a).unwrap(),
            canonical_value_bytes(&b).unwrap()
        );
    }

    #[test]
    fn nan_rejected_as_non_canonical() {
        #[derive(Serialize)]
        struct Bad {
            score: f64,
        }
        let err = canonical_bytes(&Bad { score: f64::NAN }).unwrap_err();
        match err {
            CanonError::NonCanonicalInput { path, .. } => assert_eq!(path, "$.score"),
            other => panic!("expected NonCanonicalInput, got {other:?}"),
        }
    }

    #[test]
    fn infinity_rejected_as_non_canonical() {
        let err = canonical_bytes(&json!({ "v": [1.0, f64::INFINITY] })).unwrap_err();
        assert!(matches!(err, CanonError::NonCanonicalInput { .. }));
    }

    #[test]
    fn explicit_null_rejected() {
        let v = json!({ "field": null });
        assert!(canonical_value_bytes(&v).is_err());
    }

    #[test]
    fn float_rendering_is_shortest_roundtrip() {
        let bytes = canonical_bytes(&json!({ "g": 0.6666666666666666_f64 })).unwrap();
        assert_eq!(
            String::from_utf8(bytes).unwrap(),
            r#"{"g":0.6666666666666666}"#
        );
    }

    #[test]
    fn unicode_preserved_as_utf8() {
        let bytes = canonical_bytes(&json!({ "citação": "règlement" })).unwrap();
        let s = String::from_utf8(bytes).unwrap();
        assert_eq!(s, "{\"citação\":\"règlement\"}");
    }
}
