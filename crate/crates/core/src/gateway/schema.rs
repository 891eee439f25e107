//! Response shapes the gateway enforces, and the parser that checks them.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::ingest::SLATE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Extract,
    UpdateList,
    Rank20,
    FreeRank,
}

impl SchemaId {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemaId::Extract => "extract",
            SchemaId::UpdateList => "update_list",
            SchemaId::Rank20 => "rank20",
            SchemaId::FreeRank => "free_rank",
        }
    }

    /// Compact shape description embedded in prompts and repair requests.
    pub fn shape(&self) -> &'static str {
        match self {
            SchemaId::Extract => {
                r#"{"likes": [string], "dislikes": [string], "key_features": [string]}"#
            }
            SchemaId::UpdateList => r#"{"items": [string]}"#,
            SchemaId::Rank20 => r#"{"ranking": [string, ... exactly 20 entries]}"#,
            SchemaId::FreeRank => r#"{"ranking": [string]}"#,
        }
    }

    /// Instruction appended to every prompt that expects this shape.
    pub fn instruction(&self) -> String {
        let mut s = format!(
            "Respond with a single JSON object and nothing else, matching this schema: {}",
            self.shape()
        );
        if *self == SchemaId::Rank20 {
            s.push_str(
                "\nEach entry is a candidate label from \"1\" to \"20\", ordered from most to least likely; use every label exactly once.",
            );
        }
        s
    }

    /// JSON Schema sent to endpoints that support structured output.
    pub fn json_schema(&self) -> Value {
        let str_array = json!({"type": "array", "items": {"type": "string"}});
        match self {
            SchemaId::Extract => json!({
                "type": "object",
                "properties": {
                    "likes": str_array,
                    "dislikes": str_array,
                    "key_features": str_array,
                },
                "required": ["likes", "dislikes", "key_features"],
                "additionalProperties": false,
            }),
            SchemaId::UpdateList => json!({
                "type": "object",
                "properties": {"items": str_array},
                "required": ["items"],
                "additionalProperties": false,
            }),
            SchemaId::Rank20 => json!({
                "type": "object",
                "properties": {"ranking": {
                    "type": "array",
                    "items": {"type": "string", "enum": (1..=SLATE_SIZE).map(|i| i.to_string()).collect::<Vec<_>>()},
                    "minItems": SLATE_SIZE,
                    "maxItems": SLATE_SIZE,
                }},
                "required": ["ranking"],
                "additionalProperties": false,
            }),
            SchemaId::FreeRank => json!({
                "type": "object",
                "properties": {"ranking": str_array},
                "required": ["ranking"],
                "additionalProperties": false,
            }),
        }
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A validated response value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "schema", rename_all = "snake_case")]
pub enum SchemaValue {
    Extract {
        likes: Vec<String>,
        dislikes: Vec<String>,
        key_features: Vec<String>,
    },
    UpdateList {
        items: Vec<String>,
    },
    Rank20 {
        ranking: Vec<String>,
    },
    FreeRank {
        ranking: Vec<String>,
    },
}

impl SchemaValue {
    pub fn schema(&self) -> SchemaId {
        match self {
            SchemaValue::Extract { .. } => SchemaId::Extract,
            SchemaValue::UpdateList { .. } => SchemaId::UpdateList,
            SchemaValue::Rank20 { .. } => SchemaId::Rank20,
            SchemaValue::FreeRank { .. } => SchemaId::FreeRank,
        }
    }

    /// Serializes back to the wire shape (without the tag).
    pub fn to_wire(&self) -> String {
        let v = match self {
            SchemaValue::Extract {
                likes,
                dislikes,
                key_features,
            } => json!({"likes": likes, "dislikes": dislikes, "key_features": key_features}),
            SchemaValue::UpdateList { items } => json!({ "items": items }),
            SchemaValue::Rank20 { ranking } | SchemaValue::FreeRank { ranking } => {
                json!({ "ranking": ranking })
            }
        };
        v.to_string()
    }
}

/// Locates the JSON object in a model reply, tolerating code fences and
/// surrounding prose.
pub fn extract_json_object(raw: &str) -> Option<Map<String, Value>> {
    let trimmed = raw.trim();
    if let Ok(Value::Object(m)) = serde_json::from_str(trimmed) {
        return Some(m);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str(&trimmed[start..=end]) {
        Ok(Value::Object(m)) => Some(m),
        _ => None,
    }
}

fn string_list(obj: &Map<String, Value>, key: &str) -> Result<Vec<String>, String> {
    let arr = obj
        .get(key)
        .ok_or_else(|| format!("missing field \"{key}\""))?
        .as_array()
        .ok_or_else(|| format!("field \"{key}\" must be an array of strings"))?;
    let mut out = Vec::with_capacity(arr.len());
    for (i, v) in arr.iter().enumerate() {
        let s = v
            .as_str()
            .ok_or_else(|| format!("\"{key}\"[{i}] is not a string"))?
            .trim();
        if !s.is_empty() {
            out.push(s.to_string());
        }
    }
    Ok(out)
}

/// Ranking entries as label strings; integer entries are accepted and
/// converted.
fn label_list(obj: &Map<String, Value>) -> Result<Vec<String>, String> {
    let arr = obj
        .get("ranking")
        .ok_or_else(|| "missing field \"ranking\"".to_string())?
        .as_array()
        .ok_or_else(|| "field \"ranking\" must be an array".to_string())?;
    arr.iter()
        .enumerate()
        .map(|(i, v)| match v {
            Value::String(s) => Ok(s.trim().to_string()),
            Value::Number(n) if n.is_u64() => Ok(n.to_string()),
            _ => Err(format!("\"ranking\"[{i}] is not a label string")),
        })
        .collect()
}

/// Best-effort ranking labels from an invalid reply; empty when none can
/// be recovered.
pub fn loose_ranking_labels(raw: &str) -> Vec<String> {
    extract_json_object(raw)
        .and_then(|obj| {
            obj.get("ranking")?.as_array().map(|arr| {
                arr.iter()
                    .filter_map(|v| match v {
                        Value::String(s) => Some(s.trim().to_string()),
                        Value::Number(n) => Some(n.to_string()),
                        _ => None,
                    })
                    .collect()
            })
        })
        .unwrap_or_default()
}

/// Parses and validates a reply against `schema`. The error string names
/// the violation and is fed back to the model on repair.
pub fn validate(schema: SchemaId, raw: &str) -> Result<SchemaValue, String> {
    let obj = extract_json_object(raw).ok_or_else(|| "reply is not a JSON object".to_string())?;
    match schema {
        SchemaId::Extract => Ok(SchemaValue::Extract {
            likes: string_list(&obj, "likes")?,
            dislikes: string_list(&obj, "dislikes")?,
            key_features: string_list(&obj, "key_features")?,
        }),
        SchemaId::UpdateList => Ok(SchemaValue::UpdateList {
            items: string_list(&obj, "items")?,
        }),
        SchemaId::Rank20 => {
            let ranking = label_list(&obj)?;
            if ranking.len() != SLATE_SIZE {
                return Err(format!(
                    "\"ranking\" must list exactly {SLATE_SIZE} labels, got {}",
                    ranking.len()
                ));
            }
            let mut seen = HashSet::new();
            for label in &ranking {
                let ok = label
                    .parse::<usize>()
                    .is_ok_and(|n| (1..=SLATE_SIZE).contains(&n) && label == &n.to_string());
                if !ok {
                    return Err(format!(
                        "\"{label}\" is not a candidate label (1-{SLATE_SIZE})"
                    ));
                }
                if !seen.insert(label) {
                    return Err(format!("label \"{label}\" appears more than once"));
                }
            }
            Ok(SchemaValue::Rank20 { ranking })
        }
        SchemaId::FreeRank => {
            let ranking = label_list(&obj)?;
            if ranking.is_empty() {
                return Err("\"ranking\" is empty".to_string());
            }
            Ok(SchemaValue::FreeRank { ranking })
        }
    }
}
