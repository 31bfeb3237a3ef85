use std::path::PathBuf;

use avfusion::config::ExperimentConfig;
use serde_json::Value;

fn repo_file(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Key paths of a TOML table, e.g. `model.tcn.levels`.
fn toml_keys(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if let toml::Value::Table(sub) = v {
            toml_keys(&path, sub, out);
        } else {
            out.push(path);
        }
    }
}

fn schema_keys(prefix: &str, s: &Value, out: &mut Vec<String>) {
    assert_eq!(s["additionalProperties"], Value::Bool(false), "{prefix} accepts unknown keys");
    for (k, v) in s["properties"].as_object().unwrap() {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if v.get("properties").is_some() {
            schema_keys(&path, v, out);
        } else {
            assert!(v["description"].is_string(), "{path} is undocumented");
            out.push(path);
        }
    }
}

#[test]
fn shipped_default_config_matches_code_defaults() {
    let cfg = ExperimentConfig::load(&repo_file("default.toml")).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn schema_documents_every_key() {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(repo_file("config.schema.json")).unwrap()).unwrap();
    let mut documented = Vec::new();
    schema_keys("", &schema, &mut documented);
    // Optional keys are only emitted when set.
    let mut cfg = ExperimentConfig::default();
    cfg.train.fold = Some(0);
    cfg.model.time_weight_gain = Some(1.0);
    let table: toml::Table = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
    let mut emitted = Vec::new();
    toml_keys("", &table, &mut emitted);
    documented.sort();
    emitted.sort();
    assert_eq!(documented, emitted);
}

#[test]
fn parse_serialize_parse_is_identity() {
    let text = std::fs::read_to_string(repo_file("default.toml")).unwrap();
    let a = ExperimentConfig::from_toml(&text).unwrap();
    let b = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
    assert_eq!(a, b);
}
