//! Rating tasks: prompt selection, blinded set labels and the on-disk study layout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use msdm_core::image::RgbImage;
use msdm_core::rng::{derive_seed, Stream};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AnnotationError, Result};

pub const TASK_COUNT: usize = 40;
pub const IMAGES_PER_SET: usize = 10;
pub const DEFAULT_REFERENCES: usize = 4;
pub const SET_LABELS: [&str; 3] = ["A", "B", "C"];
/// Candidate label for the real reference images in the global ranking.
pub const REAL_LABEL: &str = "real";

const TASKS_FILE: &str = "tasks.json";
const ASSIGNMENTS_FILE: &str = "assignments.json";
const SOURCES_FILE: &str = "sources.json";
const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Original,
    Rephrased,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Original => "original",
            PromptKind::Rephrased => "rephrased",
        }
    }

    /// Kind of the task at `index`: even indices are originals.
    pub fn of_index(index: usize) -> Self {
        if index % 2 == 0 {
            PromptKind::Original
        } else {
            PromptKind::Rephrased
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyPrompt {
    pub id: String,
    pub text: String,
}

/// An original prompt and its held-out rephrasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub original: StudyPrompt,
    pub rephrased: StudyPrompt,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub label: String,
    pub images: Vec<String>,
}

/// One rating task as served to the annotator. Holds no model identity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub index: usize,
    pub prompt_id: String,
    pub prompt_text: String,
    pub prompt_kind: PromptKind,
    pub references: Vec<String>,
    pub sets: Vec<LabeledSet>,
}

/// Where an opaque image id came from. Kept server-side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImageSource {
    Generated { model: String, prompt_id: String, index: usize },
    Reference { prompt_id: String, index: usize },
}

/// Label → model id for every task. Kept server-side.
pub type Assignments = BTreeMap<String, BTreeMap<String, String>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPlan {
    pub tasks: Vec<Task>,
    pub assignments: Assignments,
    pub sources: BTreeMap<String, ImageSource>,
}

pub fn task_id(index: usize) -> String {
    format!("task-{index:02}")
}

fn opaque_id(seed: u64, task: &str, slot: &str, j: usize) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(task.as_bytes());
    h.update([0]);
    h.update(slot.as_bytes());
    h.update((j as u64).to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

/// True for ids produced by this module (16 lowercase hex digits).
pub fn is_image_id(id: &str) -> bool {
    id.len() == 16 && id.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Forty tasks from the first twenty prompt pairs: task `2i` shows the original
/// of pair `i`, task `2i + 1` its rephrasing. Each task gets its own seeded
/// assignment of the three models to labels A, B and C.
pub fn build_tasks(
    pairs: &[PromptPair],
    models: &[String],
    references_per_task: usize,
    images_per_set: usize,
    seed: u64,
) -> Result<TaskPlan> {
    let need = TASK_COUNT / 2;
    if pairs.len() < need {
        return Err(AnnotationError::Config(format!("{} prompt pairs available, {need} needed", pairs.len())));
    }
    if models.len() != SET_LABELS.len() {
        return Err(AnnotationError::Config(format!("exactly 3 models required, got {}", models.len())));
    }
    let mut distinct = models.to_vec();
    distinct.sort();
    distinct.dedup();
    if distinct.len() != models.len() {
        return Err(AnnotationError::Config("model ids must be distinct".into()));
    }
    if images_per_set == 0 || references_per_task == 0 {
        return Err(AnnotationError::Config("sets and references need at least one image".into()));
    }
    let mut plan = TaskPlan { tasks: Vec::new(), assignments: BTreeMap::new(), sources: BTreeMap::new() };
    for index in 0..TASK_COUNT {
        let pair = &pairs[index / 2];
        let kind = PromptKind::of_index(index);
        let prompt = if kind == PromptKind::Original { &pair.original } else { &pair.rephrased };
        let id = task_id(index);
        let mut order: Vec<usize> = (0..models.len()).collect();
        Stream::new(derive_seed(seed, &id)).shuffle(&mut order);

        let mut sets = Vec::new();
        let mut assignment = BTreeMap::new();
        for (label, &m) in SET_LABELS.iter().zip(&order) {
            let images = (0..images_per_set)
                .map(|j| {
                    let iid = opaque_id(seed, &id, label, j);
                    let src = ImageSource::Generated { model: models[m].clone(), prompt_id: prompt.id.clone(), index: j };
                    plan.sources.insert(iid.clone(), src);
                    iid
                })
                .collect();
            sets.push(LabeledSet { label: (*label).to_string(), images });
            assignment.insert((*label).to_string(), models[m].clone());
        }
        // References follow the original prompt so both halves of a pair show the same real images.
        let references = (0..references_per_task)
            .map(|j| {
                let iid = opaque_id(seed, &id, REAL_LABEL, j);
                plan.sources.insert(iid.clone(), ImageSource::Reference { prompt_id: pair.original.id.clone(), index: j });
                iid
            })
            .collect();
        plan.tasks.push(Task {
            id: id.clone(),
            index,
            prompt_id: prompt.id.clone(),
            prompt_text: prompt.text.clone(),
            prompt_kind: kind,
            references,
            sets,
        });
        plan.assignments.insert(id, assignment);
    }
    Ok(plan)
}

/// Everything needed to lay out a study on disk.
#[derive(Clone, Debug)]
pub struct StudyInput {
    pub pairs: Vec<PromptPair>,
    pub models: Vec<String>,
    /// Generated images keyed by (model id, prompt id).
    pub generated: BTreeMap<(String, String), Vec<RgbImage>>,
    /// Real images keyed by original prompt id.
    pub references: BTreeMap<String, Vec<RgbImage>>,
    pub references_per_task: usize,
    pub images_per_set: usize,
    pub seed: u64,
}

/// A study directory: served tasks plus the hidden assignment.
#[derive(Clone, Debug)]
pub struct Study {
    pub dir: PathBuf,
    pub tasks: Vec<Task>,
    pub assignments: Assignments,
}

fn lookup<'a>(input: &'a StudyInput, src: &ImageSource) -> Result<&'a RgbImage> {
    let (list, index, what) = match src {
        ImageSource::Generated { model, prompt_id, index } => {
            (input.generated.get(&(model.clone(), prompt_id.clone())), *index, format!("model {model}, prompt {prompt_id}"))
        }
        ImageSource::Reference { prompt_id, index } => {
            (input.references.get(prompt_id), *index, format!("references for {prompt_id}"))
        }
    };
    list.and_then(|l| l.get(index))
        .ok_or_else(|| AnnotationError::Config(format!("missing image {index} of {what}")))
}

/// Build the tasks and write `tasks.json`, the hidden `assignments.json` and
/// `sources.json`, and one PNG per opaque image id under `images/`.
pub fn build_study(dir: impl AsRef<Path>, input: &StudyInput) -> Result<Study> {
    let dir = dir.as_ref();
    let plan = build_tasks(&input.pairs, &input.models, input.references_per_task, input.images_per_set, input.seed)?;
    for src in plan.sources.values() {
        lookup(input, src)?;
    }
    let images = dir.join(IMAGE_DIR);
    std::fs::create_dir_all(&images)?;
    for (id, src) in &plan.sources {
        lookup(input, src)?.save_png(images.join(format!("{id}.png")))?;
    }
    std::fs::write(dir.join(TASKS_FILE), serde_json::to_string_pretty(&plan.tasks)?)?;
    std::fs::write(dir.join(ASSIGNMENTS_FILE), serde_json::to_string_pretty(&plan.assignments)?)?;
    std::fs::write(dir.join(SOURCES_FILE), serde_json::to_string_pretty(&plan.sources)?)?;
    Ok(Study { dir: dir.to_path_buf(), tasks: plan.tasks, assignments: plan.assignments })
}

impl Study {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<String> {
            std::fs::read_to_string(dir.join(name))
                .map_err(|e| AnnotationError::Config(format!("cannot read {} in {}: {e}", name, dir.display())))
        };
        let tasks: Vec<Task> = serde_json::from_str(&read(TASKS_FILE)?)?;
        let assignments: Assignments = serde_json::from_str(&read(ASSIGNMENTS_FILE)?)?;
        for t in &tasks {
            let a = assignments
                .get(&t.id)
                .ok_or_else(|| AnnotationError::Corrupt(format!("task {} has no assignment", t.id)))?;
            let labels: Vec<&str> = a.keys().map(String::as_str).collect();
            if labels != SET_LABELS {
                return Err(AnnotationError::Corrupt(format!("task {} assigns labels {labels:?}", t.id)));
            }
        }
        Ok(Self { dir: dir.to_path_buf(), tasks, assignments })
    }

    pub fn task(&self, id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn model_of(&self, task: &str, label: &str) -> Option<&str> {
        self.assignments.get(task)?.get(label).map(String::as_str)
    }

    /// Path of an image, if the id is well-formed and the file exists.
    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        if !is_image_id(id) {
            return None;
        }
        let p = self.dir.join(IMAGE_DIR).join(format!("{id}.png"));
        p.is_file().then_some(p)
    }

    /// Model ids in sorted order.
    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.assignments.values().flat_map(|a| a.values().cloned()).collect();
        m.sort();
        m.dedup();
        m
    }
}
