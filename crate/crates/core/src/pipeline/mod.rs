//! Staged orchestration of one compilation job: R1 → R2 (selection) → R3
//! (agreement) → unanimous-consent output.
//!
//! A [`Job`] is an event-sourced aggregate. Commands validate against the
//! current [`StageState`], append an [`Event`], and fold it in. Replaying the
//! log reproduces the state exactly.

pub mod events;
mod job;
mod plan;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use events::{Event, EventKind, Stage, Timestamp};
pub use job::{
    Job, JobProgress, R2Slot, R3Batch, R3Slot, SelectionAck, StageState, Transition, WorkerProgress,
};
pub use plan::{plan_r2, r2_selection_cap, r2_worker_count, R2Assignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Created,
    R1Done,
    R2Running,
    R3Running,
    Finalized,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("operation needs phase {expected}, job is {actual:?}")]
    Phase { expected: &'static str, actual: Phase },
    #[error("video {video:?} is not in worker {worker:?}'s assignment")]
    OutOfScope { worker: String, video: String },
    #[error("worker {worker:?} reached selection cap {cap}")]
    CapExceeded { worker: String, cap: usize },
    #[error("worker {0:?} already served in the other stage of this job")]
    WorkerOverlap(String),
    #[error("worker {0:?} has already submitted their final page")]
    SessionClosed(String),
    #[error("worker {0:?} has no assignment on this job")]
    UnknownWorker(String),
    #[error("no open {0:?} task on this job")]
    NoOpenSlot(Stage),
    #[error("cannot replay event {seq}: {message}")]
    Replay { seq: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Videos one R2 worker reviews at most.
    pub r2_pool_per_worker: usize,
    pub r2_select_cap: usize,
    /// Pool size that starts an agreement batch.
    pub r3_trigger_threshold: usize,
    pub r3_min_select: usize,
    pub r3_workers: usize,
    pub final_min: usize,
    pub final_max: usize,
    pub page_size: usize,
    /// Seconds per task page.
    pub page_time_limit: f64,
    pub random_seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            r2_pool_per_worker: 1000,
            r2_select_cap: 100,
            r3_trigger_threshold: 100,
            r3_min_select: 30,
            r3_workers: 2,
            final_min: 10,
            final_max: 20,
            page_size: 8,
            page_time_limit: 30.0,
            random_seed: 0,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("r2_pool_per_worker", self.r2_pool_per_worker),
            ("r2_select_cap", self.r2_select_cap),
            ("r3_trigger_threshold", self.r3_trigger_threshold),
            ("r3_min_select", self.r3_min_select),
            ("r3_workers", self.r3_workers),
            ("final_min", self.final_min),
            ("final_max", self.final_max),
            ("page_size", self.page_size),
        ] {
            if v == 0 {
                return Err(PipelineError::Validation(format!("{name} must be positive")));
            }
        }
        if !self.page_time_limit.is_finite() || self.page_time_limit <= 0.0 {
            return Err(PipelineError::Validation("page_time_limit must be positive".into()));
        }
        if self.final_min > self.final_max {
            return Err(PipelineError::Validation("final_min exceeds final_max".into()));
        }
        Ok(())
    }
}

/// A themed curation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilationJob {
    pub job_id: String,
    pub theme: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub params: PipelineParams,
    /// Videos from previously published compilations, shown as examples.
    #[serde(default)]
    pub example_refs: Vec<String>,
}

impl CompilationJob {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.job_id.trim().is_empty() {
            return Err(PipelineError::Validation("job_id is empty".into()));
        }
        if self.keywords.is_empty() || self.keywords.iter().any(|k| k.trim().is_empty()) {
            return Err(PipelineError::Validation("keywords must be non-empty".into()));
        }
        self.params.validate()
    }
}

/// Final compilation: videos with unanimous consent, ordered by their
/// earliest agreement-stage selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompilationOutput {
    pub job_id: String,
    pub videos: Vec<String>,
    /// Distinct workers who selected each output video.
    pub consent_counts: std::collections::BTreeMap<String, usize>,
    /// Consent set had fewer than `final_min` videos.
    pub under_supplied: bool,
    /// Size of the consent set before truncation to `final_max`.
    pub consent_set_size: usize,
    /// Agreement workers who picked fewer than their required count.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub short_reviewers: Vec<String>,
}
