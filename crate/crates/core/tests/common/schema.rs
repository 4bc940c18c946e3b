//! Validator for the subset of JSON Schema used by the files in `schemas/`:
//! `type`, `enum`, `const`, `properties`, `required`, `additionalProperties`
//! (boolean or schema), `items`, `minItems`, `maxItems`, `minimum`,
//! `maximum`, `exclusiveMinimum`, `exclusiveMaximum`, `oneOf`, `anyOf`,
//! `allOf` and local `$ref`s into `$defs`. Unknown keywords are rejected so
//! a schema cannot silently rely on something this code ignores.

use serde_json::Value;

const ANNOTATIONS: &[&str] = &["$schema", "$id", "title", "description", "default", "$defs", "examples"];
const KEYWORDS: &[&str] = &[
    "type",
    "enum",
    "const",
    "properties",
    "required",
    "additionalProperties",
    "items",
    "minItems",
    "maxItems",
    "minimum",
    "maximum",
    "exclusiveMinimum",
    "exclusiveMaximum",
    "oneOf",
    "anyOf",
    "allOf",
    "$ref",
];

pub fn load(name: &str) -> Value {
    let path = format!("{}/../../schemas/{name}", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

/// All violations, as `path: message` strings.
pub fn validate(schema: &Value, instance: &Value) -> Vec<String> {
    let mut errors = Vec::new();
    check(schema, schema, instance, "$", &mut errors);
    errors
}

fn resolve<'a>(root: &'a Value, reference: &str) -> &'a Value {
    let name = reference.strip_prefix("#/$defs/").unwrap_or_else(|| panic!("unsupported $ref {reference}"));
    root.get("$defs").and_then(|d| d.get(name)).unwrap_or_else(|| panic!("dangling $ref {reference}"))
}

fn type_matches(t: &str, v: &Value) -> bool {
    match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "number" => v.is_number(),
        "integer" => v.is_i64() || v.is_u64() || v.as_f64().is_some_and(|f| f.fract() == 0.0),
        other => panic!("unknown type {other}"),
    }
}

fn check(root: &Value, schema: &Value, v: &Value, path: &str, errors: &mut Vec<String>) {
    if let Some(b) = schema.as_bool() {
        if !b {
            errors.push(format!("{path}: not allowed"));
        }
        return;
    }
    let s = schema.as_object().expect("schema is an object");
    for k in s.keys() {
        assert!(KEYWORDS.contains(&k.as_str()) || ANNOTATIONS.contains(&k.as_str()), "unsupported keyword {k}");
    }
    let mut fail = |m: String| errors.push(format!("{path}: {m}"));
    if let Some(r) = s.get("$ref") {
        check(root, resolve(root, r.as_str().unwrap()), v, path, errors);
        return;
    }
    if let Some(t) = s.get("type") {
        let ok = match t {
            Value::String(t) => type_matches(t, v),
            Value::Array(ts) => ts.iter().any(|t| type_matches(t.as_str().unwrap(), v)),
            _ => panic!("bad type keyword"),
        };
        if !ok {
            fail(format!("expected type {t}, got {v}"));
            return;
        }
    }
    if let Some(e) = s.get("enum") {
        if !e.as_array().unwrap().contains(v) {
            fail(format!("{v} not in {e}"));
        }
    }
    if let Some(c) = s.get("const") {
        if c != v {
            fail(format!("{v} != {c}"));
        }
    }
    if let Some(x) = v.as_f64() {
        let bound = |k: &str| s.get(k).and_then(Value::as_f64);
        if bound("minimum").is_some_and(|m| x < m) {
            fail(format!("{x} below minimum"));
        }
        if bound("maximum").is_some_and(|m| x > m) {
            fail(format!("{x} above maximum"));
        }
        if bound("exclusiveMinimum").is_some_and(|m| x <= m) {
            fail(format!("{x} not above exclusive minimum"));
        }
        if bound("exclusiveMaximum").is_some_and(|m| x >= m) {
            fail(format!("{x} not below exclusive maximum"));
        }
    }
    if let Some(arr) = v.as_array() {
        let n = arr.len() as u64;
        if s.get("minItems").and_then(Value::as_u64).is_some_and(|m| n < m) {
            fail(format!("{n} items, fewer than minItems"));
        }
        if s.get("maxItems").and_then(Value::as_u64).is_some_and(|m| n > m) {
            fail(format!("{n} items, more than maxItems"));
        }
        if let Some(items) = s.get("items") {
            for (i, item) in arr.iter().enumerate() {
                check(root, items, item, &format!("{path}[{i}]"), errors);
            }
        }
    }
    if let Some(obj) = v.as_object() {
        if let Some(req) = s.get("required") {
            for r in req.as_array().unwrap() {
                if !obj.contains_key(r.as_str().unwrap()) {
                    errors.push(format!("{path}: missing {r}"));
                }
            }
        }
        let props = s.get("properties").and_then(Value::as_object);
        for (k, val) in obj {
            let sub = format!("{path}.{k}");
            match props.and_then(|p| p.get(k)) {
                Some(ps) => check(root, ps, val, &sub, errors),
                None => {
                    if let Some(extra) = s.get("additionalProperties") {
                        check(root, extra, val, &sub, errors);
                    }
                }
            }
        }
    }
    if let Some(all) = s.get("allOf") {
        for sub in all.as_array().unwrap() {
            check(root, sub, v, path, errors);
        }
    }
    if let Some(any) = s.get("anyOf") {
        if !any.as_array().unwrap().iter().any(|sub| validate_in(root, sub, v)) {
            errors.push(format!("{path}: matches no anyOf branch"));
        }
    }
    if let Some(one) = s.get("oneOf") {
        let n = one.as_array().unwrap().iter().filter(|sub| validate_in(root, sub, v)).count();
        if n != 1 {
            errors.push(format!("{path}: matches {n} oneOf branches"));
        }
    }
}

fn validate_in(root: &Value, schema: &Value, v: &Value) -> bool {
    let mut e = Vec::new();
    check(root, schema, v, "$", &mut e);
    e.is_empty()
}
