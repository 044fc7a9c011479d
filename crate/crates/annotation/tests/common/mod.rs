use std::collections::BTreeMap;
use std::path::Path;

use msdm_annotation::task::{PromptPair, StudyPrompt};
use msdm_annotation::{build_study, Study, StudyInput};
use msdm_core::image::RgbImage;
use msdm_core::rng::Stream;
use serde_json::{json, Value};

pub const MODELS: [&str; 3] = ["msdm-scratch", "base-zero-shot", "base-lora"];

fn tile(seed: u64) -> RgbImage {
    let mut r = Stream::new(seed);
    let px = (0..8 * 8 * 3).map(|_| r.index(256) as u8).collect();
    RgbImage::from_pixels(8, 8, px).unwrap()
}

pub fn study(dir: &Path) -> Study {
    let pairs: Vec<PromptPair> = (0..20)
        .map(|i| PromptPair {
            original: StudyPrompt { id: format!("p{i:02}"), text: format!("two polyps, case {i}") },
            rephrased: StudyPrompt { id: format!("p{i:02}-eval"), text: format!("a pair of polyps, case {i}") },
        })
        .collect();
    let mut generated = BTreeMap::new();
    let mut references = BTreeMap::new();
    let mut k = 0;
    for p in &pairs {
        for id in [&p.original.id, &p.rephrased.id] {
            for m in MODELS {
                k += 1;
                generated.insert((m.to_string(), id.clone()), (0..10).map(|j| tile(k * 100 + j)).collect());
            }
        }
        references.insert(p.original.id.clone(), (0..4).map(|j| tile(90_000 + j)).collect());
    }
    let input = StudyInput {
        pairs,
        models: MODELS.iter().map(|m| m.to_string()).collect(),
        generated,
        references,
        references_per_task: 4,
        images_per_set: 10,
        seed: 5,
    };
    build_study(dir, &input).unwrap()
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// A valid record for `task` with scores and ranks drawn from `r`.
pub fn random_valid(task: &str, annotator: &str, r: &mut Stream) -> Value {
    let mut scores = serde_json::Map::new();
    for label in ["A", "B", "C"] {
        let s: serde_json::Map<String, Value> =
            msdm_annotation::ASPECTS.iter().map(|a| (a.to_string(), json!(r.index(11)))).collect();
        scores.insert(label.into(), Value::Object(s));
    }
    let mut ranks = [1, 2, 3, 4];
    r.shuffle(&mut ranks);
    json!({
        "task_id": task,
        "scores": scores,
        "global_preference": {"A": ranks[0], "B": ranks[1], "C": ranks[2], "real": ranks[3]},
        "annotator_id": annotator,
        "timestamp": "2024-01-01T00:00:00Z",
    })
}

/// A record that breaks exactly one rule: a score out of range or a
/// global preference that is not a permutation of 1..=4.
pub fn random_invalid(task: &str, r: &mut Stream) -> Value {
    let mut v = random_valid(task, "fuzz", r);
    let label = ["A", "B", "C"][r.index(3)];
    let aspect = msdm_annotation::ASPECTS[r.index(6)];
    let cand = ["A", "B", "C", "real"][r.index(4)];
    match r.index(6) {
        0 => v["scores"][label][aspect] = json!(11 + r.index(1000)),
        1 => v["scores"][label][aspect] = json!(-1 - r.index(1000) as i64),
        2 => v["scores"][label][aspect] = json!(r.index(10) as f64 + 0.5),
        3 => {
            // duplicate one rank
            let other = ["A", "B", "C", "real"].into_iter().find(|c| *c != cand).unwrap();
            v["global_preference"][cand] = v["global_preference"][other].clone();
        }
        4 => v["global_preference"][cand] = json!([0, 5, 6, -2][r.index(4)]),
        _ => {
            v["global_preference"].as_object_mut().unwrap().remove(cand);
        }
    }
    v
}
