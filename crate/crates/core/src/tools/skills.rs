//! Skill manifests, lazy registry, call validation and built-in handlers.
//!
//! A manifest is one JSON file per skill. Discovery reads only `name` and
//! `description`; the full manifest (output schemas, label rules, trigger
//! token) is parsed on first [`SkillRegistry::load_skill`] and cached.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::ToolCall;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkillError {
    #[error("skill {0:?} not found")]
    SkillNotFound(String),
    #[error("manifest {file}: {path}: {message}")]
    ManifestInvalid { file: String, path: String, message: String },
    #[error("no loaded skill exposes function {0:?}")]
    UnknownFunction(String),
    #[error("call to {function} violates its schema: missing {missing:?}, unknown {unknown:?}")]
    SchemaViolation {
        function: String,
        missing: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("skill handler {function} failed: {message}")]
    Handler { function: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropertySpec {
    #[serde(rename = "type")]
    pub ty: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub properties: IndexMap<String, PropertySpec>,
    pub required: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSchema {
    pub name: String,
    pub parameters: Parameters,
}

/// Emits `function(args)` when `label` shows up in a chunk. Among the
/// matching rules of one function the highest rank wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub label: String,
    pub function: String,
    pub args: Map<String, Value>,
    pub rank: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkillManifest {
    pub name: String,
    pub description: String,
    pub trigger_scenarios: Vec<String>,
    pub token: String,
    pub label_rules: Vec<LabelRule>,
    pub output_schemas: Vec<OutputSchema>,
}

impl SkillManifest {
    pub fn to_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn schema(&self, function: &str) -> Option<&OutputSchema> {
        self.output_schemas.iter().find(|s| s.name == function)
    }

    /// Labels that trigger any rule, in rule order.
    pub fn trigger_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.label_rules {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    /// Calls implied by the chunk labels, in output-schema order.
    pub fn calls_for_labels(&self, labels: &[String]) -> Vec<ToolCall> {
        self.output_schemas
            .iter()
            .filter_map(|schema| {
                let mut best: Option<&LabelRule> = None;
                for r in self.label_rules.iter().filter(|r| r.function == schema.name) {
                    if labels.contains(&r.label) && best.is_none_or(|b| r.rank > b.rank) {
                        best = Some(r);
                    }
                }
                best.map(|r| ToolCall {
                    name: r.function.clone(),
                    args: r.args.clone(),
                })
            })
            .collect()
    }

    fn check(&self, file: &str) -> Result<(), SkillError> {
        let invalid = |path: String, message: &str| SkillError::ManifestInvalid {
            file: file.to_string(),
            path,
            message: message.to_string(),
        };
        for (i, s) in self.output_schemas.iter().enumerate() {
            for (j, r) in s.parameters.required.iter().enumerate() {
                if !s.parameters.properties.contains_key(r) {
                    return Err(invalid(
                        format!("output_schemas[{i}].parameters.required[{j}]"),
                        "required argument is not a declared property",
                    ));
                }
            }
        }
        for (i, r) in self.label_rules.iter().enumerate() {
            if self.schema(&r.function).is_none() {
                return Err(invalid(format!("label_rules[{i}].function"), "unknown output schema"));
            }
        }
        Ok(())
    }
}

/// Fills defaults and checks `required ⊆ keys ⊆ properties`. The returned
/// arguments follow property order.
pub fn validate_call(schema: &OutputSchema, call: &ToolCall) -> Result<ToolCall, SkillError> {
    let props = &schema.parameters.properties;
    let mut unknown: Vec<String> = call.args.keys().filter(|k| !props.contains_key(*k)).cloned().collect();
    unknown.sort();
    let mut args = Map::new();
    for (name, prop) in props {
        if let Some(v) = call.args.get(name).or(prop.default.as_ref()) {
            args.insert(name.clone(), v.clone());
        }
    }
    let missing: Vec<String> = schema
        .parameters
        .required
        .iter()
        .filter(|r| !args.contains_key(*r))
        .cloned()
        .collect();
    if !missing.is_empty() || !unknown.is_empty() {
        return Err(SkillError::SchemaViolation {
            function: schema.name.clone(),
            missing,
            unknown,
        });
    }
    Ok(ToolCall {
        name: call.name.clone(),
        args,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillSummary {
    pub name: String,
    pub description: String,
}

#[derive(Debug)]
pub struct SkillRegistry {
    dir: PathBuf,
    summaries: Vec<SkillSummary>,
    loaded: Mutex<BTreeMap<String, Arc<SkillManifest>>>,
    parses: Mutex<usize>,
}

fn manifest_file(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

impl SkillRegistry {
    pub fn empty() -> Self {
        Self::with_summaries(PathBuf::new(), Vec::new())
    }

    fn with_summaries(dir: PathBuf, summaries: Vec<SkillSummary>) -> Self {
        Self {
            dir,
            summaries,
            loaded: Mutex::new(BTreeMap::new()),
            parses: Mutex::new(0),
        }
    }

    /// Reads `name` and `description` of every `*.json` in `dir`, sorted by name.
    pub fn discover(dir: impl Into<PathBuf>) -> Result<Self, SkillError> {
        #[derive(Deserialize)]
        struct Head {
            name: String,
            description: String,
        }
        let dir = dir.into();
        let entries = fs::read_dir(&dir).map_err(|e| SkillError::ManifestInvalid {
            file: dir.display().to_string(),
            path: String::new(),
            message: e.to_string(),
        })?;
        let mut summaries = Vec::new();
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for path in files {
            let file = manifest_file(&path);
            let text = fs::read_to_string(&path).map_err(|e| SkillError::ManifestInvalid {
                file: file.clone(),
                path: String::new(),
                message: e.to_string(),
            })?;
            let head: Head = parse_with_path(&file, &text)?;
            if path.file_stem().is_none_or(|s| s.to_string_lossy() != head.name) {
                return Err(SkillError::ManifestInvalid {
                    file,
                    path: "name".into(),
                    message: "must match the file name".into(),
                });
            }
            summaries.push(SkillSummary {
                name: head.name,
                description: head.description,
            });
        }
        summaries.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(Self::with_summaries(dir, summaries))
    }

    pub fn summaries(&self) -> &[SkillSummary] {
        &self.summaries
    }

    pub fn is_loaded(&self, name: &str) -> bool {
        self.loaded.lock().expect("registry lock").contains_key(name)
    }

    pub fn loaded(&self) -> Vec<Arc<SkillManifest>> {
        self.loaded.lock().expect("registry lock").values().cloned().collect()
    }

    /// How many manifests have been parsed in full.
    pub fn parse_count(&self) -> usize {
        *self.parses.lock().expect("registry lock")
    }

    /// Parses and caches a manifest. Concurrent first loads parse it once.
    pub fn load_skill(&self, name: &str) -> Result<Arc<SkillManifest>, SkillError> {
        let mut loaded = self.loaded.lock().expect("registry lock");
        if let Some(m) = loaded.get(name) {
            return Ok(m.clone());
        }
        if !self.summaries.iter().any(|s| s.name == name) {
            return Err(SkillError::SkillNotFound(name.to_string()));
        }
        let path = self.dir.join(format!("{name}.json"));
        let file = manifest_file(&path);
        let text = fs::read_to_string(&path).map_err(|_| SkillError::SkillNotFound(name.to_string()))?;
        let manifest: SkillManifest = parse_with_path(&file, &text)?;
        manifest.check(&file)?;
        *self.parses.lock().expect("registry lock") += 1;
        let m = Arc::new(manifest);
        loaded.insert(name.to_string(), m.clone());
        Ok(m)
    }

    /// The loaded skill and schema exposing `function`.
    pub fn find_function(&self, function: &str) -> Option<(Arc<SkillManifest>, OutputSchema)> {
        let loaded = self.loaded.lock().expect("registry lock");
        loaded
            .values()
            .find_map(|m| m.schema(function).map(|s| (m.clone(), s.clone())))
    }
}

fn parse_with_path<T: serde::de::DeserializeOwned>(file: &str, text: &str) -> Result<T, SkillError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| SkillError::ManifestInvalid {
        file: file.to_string(),
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

/// Result of a handler that needs no session services.
#[derive(Debug, Clone, PartialEq)]
pub struct SkillOutput {
    pub text: String,
    pub payload: Value,
}

/// Handlers for functions that only format their validated arguments.
pub fn run_plain_handler(call: &ToolCall) -> Option<Result<SkillOutput, SkillError>> {
    let arg = |k: &str| call.args.get(k).cloned().unwrap_or(Value::Null);
    let text_arg = |k: &str| match call.args.get(k) {
        Some(Value::String(s)) => s.clone(),
        Some(v) => v.to_string(),
        None => String::new(),
    };
    let out = match call.name.as_str() {
        "driver_fatigue_warning" => {
            let level = match arg("fatigue_state").as_i64() {
                Some(l) => l,
                None => {
                    return Some(Err(SkillError::Handler {
                        function: call.name.clone(),
                        message: "fatigue_state must be an integer".into(),
                    }))
                }
            };
            SkillOutput {
                text: format!("Driver fatigue warning: level {level}"),
                payload: Value::Object(call.args.clone()),
            }
        }
        "proactive_caring_inquiry" => SkillOutput {
            text: format!("Caring inquiry: {}", text_arg("query")),
            payload: Value::Object(call.args.clone()),
        },
        "dial_emergency_number" => SkillOutput {
            text: format!("Dialing {}: {}", text_arg("phone_num"), text_arg("scene_description")),
            payload: Value::Object(call.args.clone()),
        },
        _ => return None,
    };
    Some(Ok(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn schema() -> OutputSchema {
        serde_json::from_value(json!({
            "name": "dial_emergency_number",
            "parameters": {
                "properties": {
                    "phone_num": {"type": "string", "description": "n", "default": "123456789"},
                    "scene_description": {"type": "string", "description": "d"}
                },
                "required": ["phone_num"]
            }
        }))
        .unwrap()
    }

    fn call(args: Value) -> ToolCall {
        ToolCall {
            name: "dial_emergency_number".into(),
            args: args.as_object().unwrap().clone(),
        }
    }

    #[test]
    fn defaults_fill_and_order() {
        let c = validate_call(&schema(), &call(json!({"scene_description": "x"}))).unwrap();
        assert_eq!(Value::Object(c.args), json!({"phone_num": "123456789", "scene_description": "x"}));
    }

    #[test]
    fn unknown_and_missing_keys() {
        let mut s = schema();
        s.parameters.properties.get_mut("phone_num").unwrap().default = None;
        match validate_call(&s, &call(json!({"zzz": 1, "aaa": 2}))) {
            Err(SkillError::SchemaViolation { missing, unknown, .. }) => {
                assert_eq!(missing, vec!["phone_num"]);
                assert_eq!(unknown, vec!["aaa", "zzz"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_rules_take_highest_rank() {
        let m: SkillManifest = serde_json::from_value(json!({
            "name": "d", "description": "", "trigger_scenarios": [], "token": "<TRIG:d>",
            "label_rules": [
                {"label": "phone_use", "function": "f", "args": {"level": 0}, "rank": 0},
                {"label": "yawning", "function": "f", "args": {"level": 1}, "rank": 1},
                {"label": "eyes_closed", "function": "f", "args": {"level": 2}, "rank": 2}
            ],
            "output_schemas": [{"name": "f", "parameters": {"properties": {}, "required": []}}]
        }))
        .unwrap();
        let labels = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(m.calls_for_labels(&labels(&["yawning", "phone_use"]))[0].args["level"], 1);
        assert_eq!(m.calls_for_labels(&labels(&["eyes_closed", "yawning"]))[0].args["level"], 2);
        assert!(m.calls_for_labels(&labels(&["smiling"])).is_empty());
        assert_eq!(m.trigger_labels(), labels(&["phone_use", "yawning", "eyes_closed"]));
    }

    #[test]
    fn plain_handlers() {
        let c = ToolCall {
            name: "driver_fatigue_warning".into(),
            args: json!({"fatigue_state": 2}).as_object().unwrap().clone(),
        };
        let out = run_plain_handler(&c).unwrap().unwrap();
        assert_eq!(out.payload, json!({"fatigue_state": 2}));
        assert!(run_plain_handler(&ToolCall {
            name: "solve_problems".into(),
            args: Map::new()
        })
        .is_none());
    }
}
