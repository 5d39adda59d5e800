//! Structured-output parsing for agent responses. Total: every input maps
//! to a (possibly empty) prediction; malformed replies never raise.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// One predicted label with its confidence and rationale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub label: String,
    pub confidence: f64,
    pub rationale: String,
}

/// Parsed agent output. `dropped_labels` records predictions whose label was
/// outside the allowed set; `abstained` marks responses with no usable
/// structured object at all.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedPrediction {
    pub entries: Vec<PredictionEntry>,
    pub dropped_labels: Vec<String>,
    pub abstained: bool,
    pub repaired: bool,
}

impl ParsedPrediction {
    pub fn abstain() -> Self {
        ParsedPrediction {
            abstained: true,
            ..Default::default()
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.label.as_str())
    }
}

const LABEL_KEYS: &[&str] = &["label", "category", "type", "cwe"];
const RATIONALE_KEYS: &[&str] = &["rationale", "reason", "explanation"];

/// Extracts the first well-formed prediction object from free-form response
/// text. Returns `None` when no balanced JSON object carrying a
/// `predictions` array can be found; the gateway's repair policy handles
/// that case.
pub fn try_parse_prediction(
    response: &str,
    allowed_labels: &HashSet<String>,
) -> Option<ParsedPrediction> {
    let mut search_from = 0;
    while let Some(offset) = response[search_from..].find('{') {
        let start = search_from + offset;
        // An object that never closes cannot be rescued by scanning on.
        let len = balanced_json_end(&response[start..])?;
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&response[start..start + len])
        {
            if let Some(parsed) = predictions_from_value(&value, allowed_labels) {
                return Some(parsed);
            }
        }
        search_from = start + 1;
    }
    None
}

fn predictions_from_value(
    value: &serde_json::Value,
    allowed_labels: &HashSet<String>,
) -> Option<ParsedPrediction> {
    let items = value.get("predictions")?.as_array()?;
    let mut parsed = ParsedPrediction::default();
    for item in items {
        let Some(label) = LABEL_KEYS
            .iter()
            .find_map(|k| item.get(*k).and_then(|v| v.as_str()))
        else {
            log::warn!("prediction entry without a label key skipped: {item}");
            continue;
        };
        if !allowed_labels.contains(label) {
            log::warn!("prediction label {label} outside allowed set, dropped");
            parsed.dropped_labels.push(label.to_string());
            continue;
        }
        let confidence = match item.get("confidence").and_then(|v| v.as_f64()) {
            Some(c) if (0.0..=1.0).contains(&c) => c,
            Some(c) => {
                log::warn!("confidence {c} out of range, clamped");
                c.clamp(0.0, 1.0)
            }
            None => 0.5,
        };
        let rationale = RATIONALE_KEYS
            .iter()
            .find_map(|k| item.get(*k).and_then(|v| v.as_str()))
            .unwrap_or("")
            .to_string();
        parsed.entries.push(PredictionEntry {
            label: label.to_string(),
            confidence,
            rationale,
        });
    }
    Some(parsed)
}

/// Length of the balanced JSON object starting at the first byte of `text`
/// (which must be `{`), or `None` if it never closes.
fn balanced_json_end(text: &str) -> Option<usize> {
    let bytes = text.as_bytes();
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(i + 1);
                }
            }
            _ => {}
        }
    }
    None
}
