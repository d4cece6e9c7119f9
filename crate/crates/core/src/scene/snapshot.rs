//! Canonical JSON: object keys sorted, floats rounded to 1e-6.

use serde::Serialize;
use serde_json::{Map, Number, Value};

const SCALE: f64 = 1e6;

fn round(f: f64) -> f64 {
    let r = (f * SCALE).round() / SCALE;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn canon(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k, canon(v));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canon).collect()),
        Value::Number(n) if n.is_f64() => {
            let f = round(n.as_f64().expect("f64 number"));
            Number::from_f64(f).map_or(Value::Null, Value::Number)
        }
        other => other,
    }
}

/// Canonical form of any serializable value.
pub fn canonical_value<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<Value> {
    Ok(canon(serde_json::to_value(value)?))
}

/// Canonical compact JSON text. Equal inputs give byte-identical output.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    serde_json::to_string(&canonical_value(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn sorts_keys_recursively_and_rounds() {
        let v = json!({"b": {"z": 1, "a": 0.12345678}, "a": [-0.0000001, 2.5]});
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":[0.0,2.5],"b":{"a":0.123457,"z":1}}"#);
    }

    #[test]
    fn integers_are_untouched() {
        let v = json!({"n": 12345678901u64});
        assert_eq!(canonical_json(&v).unwrap(), r#"{"n":12345678901}"#);
    }
}
