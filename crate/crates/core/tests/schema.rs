use dda_core::experiment::ExperimentConfig;
use serde_json::Value;

fn schema() -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/config.schema.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.strip_prefix("#/$defs/").unwrap();
            resolve(root, &root["$defs"][name])
        }
        None => node,
    }
}

/// Every key of `value` must be a declared property somewhere in `node`.
fn covered(root: &Value, node: &Value, value: &Value, path: &str, missing: &mut Vec<String>) {
    let node = resolve(root, node);
    if let Some(alts) = node.get("oneOf").and_then(Value::as_array) {
        // the alternative that fits best decides
        let mut best: Option<Vec<String>> = None;
        for alt in alts {
            let mut m = Vec::new();
            covered(root, alt, value, path, &mut m);
            if best.as_ref().is_none_or(|b| m.len() < b.len()) {
                best = Some(m);
            }
        }
        missing.extend(best.unwrap_or_default());
        return;
    }
    if let Value::Object(map) = value {
        for (k, v) in map {
            let p = format!("{path}.{k}");
            match node.get("properties").and_then(|props| props.get(k)) {
                Some(child) => covered(root, child, v, &p, missing),
                None => missing.push(p),
            }
        }
    }
}

fn config(source: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"dataset": {{"name": "d", "source": {source}, "window_len": 64}},
            "grid": {{"methods": ["raw", "dpm"]}},
            "downstream": {{"eager_expansion": 2, "train": {{"input_jitter": {{}}}}}},
            "output_dir": "o", "workers": 2}}"#
    ))
    .unwrap()
}

#[test]
fn schema_declares_every_config_key() {
    let root = schema();
    for source in [
        r#"{"synthetic": {"n_train": 3, "n_val": 3, "n_test": 3, "seed": 1}}"#,
        r#"{"files": {"train": "a", "test": "b", "format": "csv", "task": {"regression": {"min_max": true}}}}"#,
        r#"{"files": {"train": "a", "test": "b", "format": "ucr_tsv", "task": {"classification": {"n_classes": 2}}}}"#,
    ] {
        let value = serde_json::to_value(config(source)).unwrap();
        let mut missing = Vec::new();
        covered(&root, &root, &value, "", &mut missing);
        assert!(missing.is_empty(), "undocumented keys: {missing:?}");
    }
}

#[test]
fn schema_requires_what_the_config_requires() {
    let root = schema();
    let required: Vec<&str> = root["required"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(required, ["dataset", "grid", "output_dir"]);
    for key in required {
        let text = r#"{"dataset": {"name": "d", "source": {"synthetic": {"n_train": 3, "n_val": 3, "n_test": 3}}},
                       "grid": {"methods": ["raw"]}, "output_dir": "o"}"#;
        let mut v: Value = serde_json::from_str(text).unwrap();
        v.as_object_mut().unwrap().remove(key);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err(), "{key} should be required");
    }
}
