//! De-anonymized export of the latest ratings.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{AnnotationError, Result};
use crate::rating::ASPECTS;
use crate::store::StoredRating;
use crate::task::{PromptKind, Study, REAL_LABEL, SET_LABELS};

/// Model id written for the real-image row of each rating.
pub const REAL_MODEL_ID: &str = "real";

/// One CSV row: a model's scores and rank in one rating, or the rank the real
/// images received (scores empty).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportRow {
    pub task_id: String,
    pub prompt_kind: PromptKind,
    pub model_id: String,
    pub clinical_realism: Option<u8>,
    pub prompt_faithfulness: Option<u8>,
    pub detectability: Option<u8>,
    pub color_contrast: Option<u8>,
    pub intra_set_diversity: Option<u8>,
    pub confidence_of_use: Option<u8>,
    pub rank: u8,
    pub annotator_id: String,
    pub label: String,
}

impl ExportRow {
    /// Scores in aspect order, `None` for the real row.
    pub fn scores(&self) -> Option<[u8; 6]> {
        Some([
            self.clinical_realism?,
            self.prompt_faithfulness?,
            self.detectability?,
            self.color_contrast?,
            self.intra_set_diversity?,
            self.confidence_of_use?,
        ])
    }

    pub fn is_real(&self) -> bool {
        self.label == REAL_LABEL
    }
}

/// Four rows per rating: A, B and C with their model ids restored, then the real images.
pub fn export_rows(study: &Study, ratings: &[&StoredRating]) -> Result<Vec<ExportRow>> {
    let mut rows = Vec::with_capacity(ratings.len() * 4);
    for r in ratings {
        let rec = &r.record;
        let task = study.task(&rec.task_id).ok_or_else(|| AnnotationError::UnknownTask(rec.task_id.clone()))?;
        let rank = |label: &str| {
            rec.global_preference
                .get(label)
                .copied()
                .ok_or_else(|| AnnotationError::Corrupt(format!("rating {} has no rank for {label}", r.id)))
        };
        for label in SET_LABELS {
            let model = study
                .model_of(&task.id, label)
                .ok_or_else(|| AnnotationError::Corrupt(format!("task {} has no model for {label}", task.id)))?;
            let s = rec
                .scores
                .get(label)
                .ok_or_else(|| AnnotationError::Corrupt(format!("rating {} has no scores for {label}", r.id)))?;
            rows.push(ExportRow {
                task_id: task.id.clone(),
                prompt_kind: task.prompt_kind,
                model_id: model.to_string(),
                clinical_realism: Some(s.clinical_realism),
                prompt_faithfulness: Some(s.prompt_faithfulness),
                detectability: Some(s.detectability),
                color_contrast: Some(s.color_contrast),
                intra_set_diversity: Some(s.intra_set_diversity),
                confidence_of_use: Some(s.confidence_of_use),
                rank: rank(label)?,
                annotator_id: rec.annotator_id.clone(),
                label: label.to_string(),
            });
        }
        rows.push(ExportRow {
            task_id: task.id.clone(),
            prompt_kind: task.prompt_kind,
            model_id: REAL_MODEL_ID.to_string(),
            clinical_realism: None,
            prompt_faithfulness: None,
            detectability: None,
            color_contrast: None,
            intra_set_diversity: None,
            confidence_of_use: None,
            rank: rank(REAL_LABEL)?,
            annotator_id: rec.annotator_id.clone(),
            label: REAL_LABEL.to_string(),
        });
    }
    Ok(rows)
}

pub const CSV_HEADER: [&str; 12] = [
    "task_id",
    "prompt_kind",
    "model_id",
    "clinical_realism",
    "prompt_faithfulness",
    "detectability",
    "color_contrast",
    "intra_set_diversity",
    "confidence_of_use",
    "rank",
    "annotator_id",
    "label",
];

pub fn write_csv<W: Write>(rows: &[ExportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv(rows: &[ExportRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| AnnotationError::Corrupt(e.to_string()))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ExportRow>> {
    csv::Reader::from_reader(input).deserialize().map(|r| r.map_err(AnnotationError::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub ratings: usize,
    pub aspect_means: BTreeMap<String, f64>,
    pub mean_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub ratings: usize,
    pub tasks_rated: usize,
    pub tasks_total: usize,
    pub models: BTreeMap<String, ModelSummary>,
}

/// Per-model means of each aspect and of the rank (the real images get a rank only).
pub fn summarize(rows: &[ExportRow], tasks_total: usize) -> ExportSummary {
    let mut acc: BTreeMap<&str, (usize, [f64; 6], f64)> = BTreeMap::new();
    let mut tasks: Vec<&str> = Vec::new();
    for r in rows {
        let e = acc.entry(r.model_id.as_str()).or_insert((0, [0.0; 6], 0.0));
        e.0 += 1;
        e.2 += f64::from(r.rank);
        if let Some(s) = r.scores() {
            for (a, v) in e.1.iter_mut().zip(s) {
                *a += f64::from(v);
            }
        }
        tasks.push(&r.task_id);
    }
    tasks.sort_unstable();
    tasks.dedup();
    let models = acc
        .into_iter()
        .map(|(m, (n, sums, rank))| {
            let aspect_means = if m == REAL_MODEL_ID {
                BTreeMap::new()
            } else {
                ASPECTS.iter().zip(sums).map(|(a, s)| (a.to_string(), s / n as f64)).collect()
            };
            (m.to_string(), ModelSummary { ratings: n, aspect_means, mean_rank: rank / n as f64 })
        })
        .collect();
    ExportSummary {
        ratings: rows.iter().filter(|r| r.is_real()).count(),
        tasks_rated: tasks.len(),
        tasks_total,
        models,
    }
}
