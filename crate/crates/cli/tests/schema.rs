use std::path::{Path, PathBuf};

use glclef_cli::ExperimentConfig;
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn schema() -> Value {
    serde_json::from_str(&std::fs::read_to_string(root().join("docs/config.schema.json")).unwrap()).unwrap()
}

fn resolve<'a>(schema: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => schema.pointer(r.trim_start_matches('#')).unwrap(),
        None => node,
    }
}

/// Every key of `value` is declared under `node`, every declared key is
/// present in `value`, and declared defaults equal the serialized ones.
fn check(schema: &Value, node: &Value, value: &Value, at: &str, defaults: bool) {
    let node = resolve(schema, node);
    if let Some(d) = node.get("default").filter(|_| defaults) {
        assert_eq!(d, value, "default of {at}");
    }
    let (Some(props), Some(obj)) = (node.get("properties").and_then(Value::as_object), value.as_object()) else {
        return;
    };
    if node.get("additionalProperties") == Some(&Value::Bool(false)) {
        for key in obj.keys() {
            assert!(props.contains_key(key), "{at}.{key} missing from schema");
        }
        for key in props.keys() {
            assert!(obj.contains_key(key), "{at}.{key} not in the config type");
        }
    }
    for (key, sub) in props {
        if let Some(v) = obj.get(key) {
            check(schema, sub, v, &format!("{at}.{key}"), defaults);
        }
    }
}

#[test]
fn schema_matches_config_types_and_defaults() {
    let schema = schema();
    let minimal = ExperimentConfig::from_json(
        r#"{"data": {"synthetic": {"languages": 2, "intents": 2, "slot_types": 2,
            "templates": 2, "train": 4, "dev": 2, "test": 2, "seed": 0}}}"#,
    )
    .unwrap();
    let value = serde_json::to_value(&minimal).unwrap();
    check(&schema, &schema, &value, "config", true);
    let synthetic = &value["data"]["synthetic"];
    check(&schema, &schema["$defs"]["synthetic"], synthetic, "synthetic", true);

    let files = ExperimentConfig::from_json(
        r#"{"data": {"files": {"source_lang": "en", "train": "a", "dev": "b", "test": {"de": "c"}}}}"#,
    )
    .unwrap();
    let value = serde_json::to_value(&files).unwrap();
    check(&schema, &schema["$defs"]["files"], &value["data"]["files"], "files", false);
}

#[test]
fn shipped_configs_load() {
    for name in ["synthetic.json", "files.json"] {
        let cfg = ExperimentConfig::load(&root().join("configs").join(name)).unwrap();
        assert!(!cfg.seeds.is_empty());
    }
    let spec = std::fs::read_to_string(root().join("configs/spec.json")).unwrap();
    let spec: glclef::corpus::SyntheticSpec = serde_json::from_str(&spec).unwrap();
    spec.validate().unwrap();
}
