//! Blinded expert-rating service.
//!
//! A study directory holds the task list, the hidden label assignment, the
//! served images (under opaque ids) and an append-only rating log. The HTTP
//! API lets annotators fetch tasks and submit ratings, and exports the latest
//! rating of every (task, annotator) pair with model identities restored.

pub mod error;
pub mod export;
pub mod rating;
pub mod server;
pub mod store;
pub mod task;

pub use error::{AnnotationError, Result};
pub use export::{ExportRow, ExportSummary};
pub use rating::{AspectScores, RatingRecord, ASPECTS};
pub use server::{router, spawn, AppState, RunningServer};
pub use store::{RatingStore, StoredRating};
pub use task::{build_study, build_tasks, PromptKind, Study, StudyInput, StudyPrompt, Task};
