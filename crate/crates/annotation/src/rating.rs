//! Rating records and their validation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::task::{REAL_LABEL, SET_LABELS};

pub const ASPECTS: [&str; 6] = [
    "clinical_realism",
    "prompt_faithfulness",
    "detectability",
    "color_contrast",
    "intra_set_diversity",
    "confidence_of_use",
];
pub const MAX_SCORE: u8 = 10;
pub const DEFAULT_ANNOTATOR: &str = "expert";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectScores {
    pub clinical_realism: u8,
    pub prompt_faithfulness: u8,
    pub detectability: u8,
    pub color_contrast: u8,
    pub intra_set_diversity: u8,
    pub confidence_of_use: u8,
}

impl AspectScores {
    /// Scores in [`ASPECTS`] order.
    pub fn values(&self) -> [u8; 6] {
        [
            self.clinical_realism,
            self.prompt_faithfulness,
            self.detectability,
            self.color_contrast,
            self.intra_set_diversity,
            self.confidence_of_use,
        ]
    }

    fn from_values(v: [u8; 6]) -> Self {
        Self {
            clinical_realism: v[0],
            prompt_faithfulness: v[1],
            detectability: v[2],
            color_contrast: v[3],
            intra_set_diversity: v[4],
            confidence_of_use: v[5],
        }
    }
}

/// One annotator's judgement of one task: six scores for each of the sets A, B
/// and C, and a ranking (1 = best) of A, B, C and the real images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub task_id: String,
    pub scores: BTreeMap<String, AspectScores>,
    pub global_preference: BTreeMap<String, u8>,
    pub annotator_id: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

fn score(v: &Value, path: &str, errors: &mut Vec<String>) -> u8 {
    match v.as_u64() {
        Some(s) if s <= u64::from(MAX_SCORE) => s as u8,
        _ => {
            errors.push(format!("{path}: expected an integer 0-{MAX_SCORE}, got {v}"));
            0
        }
    }
}

fn check_keys(obj: &serde_json::Map<String, Value>, allowed: &[&str], path: &str, errors: &mut Vec<String>) {
    for k in obj.keys() {
        if !allowed.contains(&k.as_str()) {
            errors.push(format!("{path}.{k}: unexpected field"));
        }
    }
}

impl RatingRecord {
    /// Parse and validate a submitted JSON document, collecting every problem found.
    pub fn from_json(v: &Value) -> Result<Self, Vec<String>> {
        let mut errors = Vec::new();
        let Some(obj) = v.as_object() else {
            return Err(vec!["record: expected a JSON object".into()]);
        };
        check_keys(obj, &["task_id", "scores", "global_preference", "annotator_id", "timestamp"], "record", &mut errors);

        let task_id = match obj.get("task_id").and_then(Value::as_str) {
            Some(s) if !s.is_empty() => s.to_string(),
            _ => {
                errors.push("task_id: expected a non-empty string".into());
                String::new()
            }
        };
        let annotator_id = match obj.get("annotator_id") {
            None | Some(Value::Null) => DEFAULT_ANNOTATOR.to_string(),
            Some(Value::String(s)) if !s.trim().is_empty() => s.clone(),
            Some(other) => {
                errors.push(format!("annotator_id: expected a non-empty string, got {other}"));
                String::new()
            }
        };
        let timestamp = match obj.get("timestamp") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                errors.push(format!("timestamp: expected a string, got {other}"));
                None
            }
        };

        let mut scores = BTreeMap::new();
        match obj.get("scores").and_then(Value::as_object) {
            None => errors.push("scores: expected an object keyed by A, B, C".into()),
            Some(s) => {
                check_keys(s, &SET_LABELS, "scores", &mut errors);
                for label in SET_LABELS {
                    let path = format!("scores.{label}");
                    let Some(set) = s.get(label).and_then(Value::as_object) else {
                        errors.push(format!("{path}: missing"));
                        continue;
                    };
                    check_keys(set, &ASPECTS, &path, &mut errors);
                    let mut vals = [0u8; 6];
                    for (slot, aspect) in vals.iter_mut().zip(ASPECTS) {
                        let p = format!("{path}.{aspect}");
                        match set.get(aspect) {
                            Some(x) => *slot = score(x, &p, &mut errors),
                            None => errors.push(format!("{p}: missing")),
                        }
                    }
                    scores.insert(label.to_string(), AspectScores::from_values(vals));
                }
            }
        }

        let candidates: Vec<&str> = SET_LABELS.iter().copied().chain([REAL_LABEL]).collect();
        let mut global_preference = BTreeMap::new();
        match obj.get("global_preference").and_then(Value::as_object) {
            None => errors.push("global_preference: expected an object keyed by A, B, C, real".into()),
            Some(g) => {
                check_keys(g, &candidates, "global_preference", &mut errors);
                let mut ok = true;
                for c in &candidates {
                    let p = format!("global_preference.{c}");
                    match g.get(*c).and_then(Value::as_u64) {
                        Some(r) if (1..=candidates.len() as u64).contains(&r) => {
                            global_preference.insert(c.to_string(), r as u8);
                        }
                        Some(_) | None => {
                            errors.push(format!("{p}: expected a rank 1-{}", candidates.len()));
                            ok = false;
                        }
                    }
                }
                if ok {
                    let mut ranks: Vec<u8> = global_preference.values().copied().collect();
                    ranks.sort_unstable();
                    if ranks != [1, 2, 3, 4] {
                        errors.push(format!("global_preference: ranks {ranks:?} are not a permutation of 1-4"));
                    }
                }
            }
        }

        if errors.is_empty() {
            Ok(Self { task_id, scores, global_preference, annotator_id, timestamp })
        } else {
            Err(errors)
        }
    }

    /// Validate an already-typed record (same rules as [`RatingRecord::from_json`]).
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let v = serde_json::to_value(self).map_err(|e| vec![e.to_string()])?;
        Self::from_json(&v).map(|_| ())
    }
}
