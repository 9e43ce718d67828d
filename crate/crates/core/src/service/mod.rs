//! Worker-facing task service: sessions, timed task pages and submissions.
//!
//! Transport-agnostic; the HTTP layer lives in a separate crate. Every job
//! sits behind its own mutex, so all state changes for one job form a single
//! serialized command stream while distinct jobs proceed independently.

mod clock;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::Duration;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::JobConfig;
use crate::corpus::{self, CorpusManifest, FrameLoader, FsFrameLoader};
use crate::exec::Execution;
use crate::filters::{self, FilterVerdict, R1Config};
use crate::pipeline::events::{PageIssuedPayload, PageSubmittedPayload};
use crate::pipeline::{Event, Job, JobProgress, Phase, PipelineError, SelectionAck, Stage, Timestamp};

pub use clock::{Clock, ManualClock, SystemClock};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("R1 failed: {0}")]
    R1(String),
}

impl ServiceError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation",
            ServiceError::Pipeline(PipelineError::WorkerOverlap(_)) => "worker_overlap",
            ServiceError::Pipeline(PipelineError::Phase { .. }) => "phase",
            ServiceError::Pipeline(_) => "pipeline",
            ServiceError::R1(_) => "r1_failed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceConfig {
    /// Seconds after a page deadline during which submissions still count.
    pub grace_seconds: f64,
    /// Prefix for media locators handed to clients.
    pub media_base: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            grace_seconds: 5.0,
            media_base: "/media".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Completed,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssuedPage {
    pub page_id: String,
    pub videos: Vec<String>,
    pub issued_at: Timestamp,
    pub deadline: Timestamp,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<SubmitAck>,
}

/// One worker's pass through one stage of one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerSession {
    pub session_id: String,
    pub worker_id: String,
    pub job_id: String,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    /// Index of the next unseen video in `queue`.
    pub cursor: usize,
    #[serde(skip)]
    queue: Vec<String>,
    pub issued_pages: Vec<IssuedPage>,
    pub status: SessionStatus,
}

impl WorkerSession {
    fn open_page(&self) -> Option<usize> {
        self.issued_pages.iter().position(|p| p.outcome.is_none())
    }

    pub fn assignment_len(&self) -> usize {
        self.queue.len()
    }

    /// Videos this session will page through, in order.
    pub fn queue(&self) -> &[String] {
        &self.queue
    }

    /// Videos handed out so far, in issue order.
    pub fn seen(&self) -> Vec<&str> {
        self.issued_pages
            .iter()
            .flat_map(|p| p.videos.iter().map(String::as_str))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landing {
    pub theme: String,
    pub instructions: String,
    pub required_count: usize,
    pub page_time_limit: f64,
    pub example_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session: WorkerSession,
    pub landing: Landing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoDescriptor {
    pub id: String,
    pub media: String,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPage {
    pub page_id: String,
    pub videos: Vec<VideoDescriptor>,
    pub needed_remaining: usize,
    pub pool_remaining: usize,
    pub selected_so_far: usize,
    pub deadline: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PageResponse {
    Page(TaskPage),
    Complete { session_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitStatus {
    Accepted,
    Expired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub video: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub page_id: String,
    pub status: SubmitStatus,
    pub recorded: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub already_selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rejected: Vec<Rejection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PageSubmission {
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_timings: Option<serde_json::Value>,
}

struct JobEntry {
    job: Job,
    r1: R1Config,
    corpus: Option<Arc<CorpusManifest>>,
    sessions: BTreeMap<String, WorkerSession>,
    durations: HashMap<String, f64>,
}

pub struct TaskService {
    config: ServiceConfig,
    clock: Arc<dyn Clock>,
    jobs: RwLock<BTreeMap<String, Arc<Mutex<JobEntry>>>>,
    session_index: RwLock<HashMap<String, String>>,
    session_counter: AtomicU64,
}

fn secs(s: f64) -> Duration {
    Duration::milliseconds((s * 1000.0).round() as i64)
}

impl TaskService {
    pub fn new(config: ServiceConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            config,
            clock,
            jobs: RwLock::new(BTreeMap::new()),
            session_index: RwLock::new(HashMap::new()),
            session_counter: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn entry(&self, job_id: &str) -> Result<Arc<Mutex<JobEntry>>, ServiceError> {
        self.jobs
            .read()
            .get(job_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("job {job_id:?}")))
    }

    fn entry_for_session(&self, session_id: &str) -> Result<Arc<Mutex<JobEntry>>, ServiceError> {
        let job_id = self
            .session_index
            .read()
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id:?}")))?;
        self.entry(&job_id)
    }

    /// Registers a job. The corpus, when configured, is ingested immediately.
    pub fn submit_job(&self, cfg: JobConfig) -> Result<String, ServiceError> {
        cfg.validate().map_err(|e| ServiceError::Validation(e.to_string()))?;
        let corpus = match &cfg.corpus {
            Some(path) => Some(Arc::new(
                corpus::ingest_manifest(path).map_err(|e| ServiceError::Validation(e.to_string()))?,
            )),
            None => None,
        };
        let job_id = cfg
            .job_id
            .clone()
            .unwrap_or_else(|| format!("job-{}", self.jobs.read().len() + 1));
        let mut jobs = self.jobs.write();
        if jobs.contains_key(&job_id) {
            return Err(ServiceError::Conflict(format!("job {job_id:?} already exists")));
        }
        let job = Job::create(cfg.to_job(&job_id), self.now())?;
        let durations = corpus
            .as_ref()
            .map(|c| c.entries.iter().map(|a| (a.id.clone(), a.duration)).collect())
            .unwrap_or_default();
        jobs.insert(
            job_id.clone(),
            Arc::new(Mutex::new(JobEntry {
                job,
                r1: cfg.r1,
                corpus,
                sessions: BTreeMap::new(),
                durations,
            })),
        );
        Ok(job_id)
    }

    /// Runs keyword search and R1 over the job's corpus, then opens the
    /// selection stage. Returns one verdict per search hit.
    pub fn run_r1(&self, job_id: &str, exec: Execution) -> Result<Vec<FilterVerdict>, ServiceError> {
        let entry = self.entry(job_id)?;
        let corpus = entry
            .lock()
            .corpus
            .clone()
            .ok_or_else(|| ServiceError::Validation("job has no corpus".into()))?;
        let loader = FsFrameLoader::new(corpus.base_dir());
        self.run_r1_with(job_id, &corpus, &loader, exec)
    }

    pub fn run_r1_with(
        &self,
        job_id: &str,
        corpus: &CorpusManifest,
        loader: &dyn FrameLoader,
        exec: Execution,
    ) -> Result<Vec<FilterVerdict>, ServiceError> {
        let entry = self.entry(job_id)?;
        let (keywords, r1) = {
            let e = entry.lock();
            if e.job.phase() != Phase::Created {
                return Err(ServiceError::Conflict("R1 already ran for this job".into()));
            }
            (e.job.state().job.keywords.clone(), e.r1.clone())
        };
        let hits: Vec<_> = corpus::search_by_keywords(&keywords, corpus)
            .map_err(|e| ServiceError::Validation(e.to_string()))?
            .into_iter()
            .cloned()
            .collect();
        let outcome = filters::run_r1(&hits, &r1, loader, exec).map_err(|e| ServiceError::R1(e.to_string()))?;
        let mut e = entry.lock();
        e.durations.extend(hits.iter().map(|a| (a.id.clone(), a.duration)));
        self.open_selection(&mut e, outcome.kept_ids())?;
        Ok(outcome.verdicts)
    }

    /// Opens the selection stage over an externally produced R1 output.
    pub fn load_r1_result(&self, job_id: &str, kept: Vec<String>) -> Result<(), ServiceError> {
        let entry = self.entry(job_id)?;
        let mut e = entry.lock();
        self.open_selection(&mut e, kept)
    }

    fn open_selection(&self, e: &mut JobEntry, kept: Vec<String>) -> Result<(), ServiceError> {
        let now = self.now();
        e.job.record_r1(kept, now)?;
        e.job.start_r2(now)?;
        Ok(())
    }

    pub fn create_session(&self, worker_id: &str, job_id: &str) -> Result<SessionCreated, ServiceError> {
        if worker_id.trim().is_empty() {
            return Err(ServiceError::Validation("worker_id is empty".into()));
        }
        let entry = self.entry(job_id)?;
        let mut e = entry.lock();
        let now = self.now();
        let phase = e.job.phase();
        if !matches!(phase, Phase::R2Running | Phase::R3Running) {
            return Err(ServiceError::Conflict(format!("job is {phase:?}, not accepting workers")));
        }
        if let Some(s) = e
            .sessions
            .values()
            .find(|s| s.worker_id == worker_id && s.status == SessionStatus::Active)
        {
            return Ok(SessionCreated {
                landing: landing(&e, s),
                session: s.clone(),
            });
        }

        let state = e.job.state();
        let (stage, batch, queue) = if let Some(slot) = state.r2_slot_of(worker_id) {
            if state.r2_slots[slot].completed {
                return Err(ServiceError::Conflict(format!(
                    "worker {worker_id:?} already finished the selection stage of this job"
                )));
            }
            let s = &state.r2_slots[slot];
            (Stage::Selection, None, s.videos[s.seen.min(s.videos.len())..].to_vec())
        } else {
            let r3 = if phase == Phase::R3Running {
                match e.job.bind_r3_worker(worker_id, now) {
                    Ok(pair) => Some(pair),
                    Err(PipelineError::NoOpenSlot(_)) => None,
                    Err(err) => return Err(conflict(err)),
                }
            } else {
                None
            };
            match r3 {
                Some((b, s)) => {
                    let batch = &e.job.state().r3_batches[b];
                    let seen = batch.slots[s].seen.min(batch.videos.len());
                    (Stage::Agreement, Some(b), batch.videos[seen..].to_vec())
                }
                None => {
                    let slot = e.job.bind_r2_worker(worker_id, now).map_err(conflict)?;
                    (Stage::Selection, None, e.job.state().r2_slots[slot].videos.clone())
                }
            }
        };

        let n = self.session_counter.fetch_add(1, Ordering::Relaxed) + 1;
        let session_id = format!("s{n}");
        let session = WorkerSession {
            session_id: session_id.clone(),
            worker_id: worker_id.to_string(),
            job_id: job_id.to_string(),
            stage,
            batch,
            cursor: 0,
            queue,
            issued_pages: Vec::new(),
            status: SessionStatus::Active,
        };
        e.sessions.insert(session_id.clone(), session.clone());
        self.session_index.write().insert(session_id, job_id.to_string());
        Ok(SessionCreated {
            landing: landing(&e, &session),
            session,
        })
    }

    pub fn session(&self, session_id: &str) -> Result<WorkerSession, ServiceError> {
        let entry = self.entry_for_session(session_id)?;
        let e = entry.lock();
        e.sessions
            .get(session_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id:?}")))
    }

    /// Issues the next page of unseen videos, or the completion marker once
    /// the assignment is exhausted (or an R2 worker has hit their cap).
    pub fn next_page(&self, session_id: &str) -> Result<PageResponse, ServiceError> {
        let entry = self.entry_for_session(session_id)?;
        let mut guard = entry.lock();
        let e = &mut *guard;
        let now = self.now();
        let grace = secs(self.config.grace_seconds);
        let sess = e
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id:?}")))?;
        if sess.status != SessionStatus::Active {
            return Ok(PageResponse::Complete {
                session_id: session_id.to_string(),
            });
        }
        if let Some(open) = sess.open_page() {
            let page = &sess.issued_pages[open];
            if now <= page.deadline + grace {
                return Err(ServiceError::Conflict(format!(
                    "page {} is still open",
                    page.page_id
                )));
            }
            // abandoned page: consume it as expired
            let page_id = page.page_id.clone();
            let ack = expire(&mut e.job, sess, open, None, now)?;
            tracing::debug!(session = session_id, page = %page_id, status = ?ack.status, "auto-expired page");
        }

        let (selected, target) = selection_counts(&e.job, sess);
        let capped = sess.stage == Stage::Selection && selected >= target;
        if sess.cursor >= sess.queue.len() || capped {
            sess.status = SessionStatus::Completed;
            match sess.stage {
                Stage::Selection => e.job.complete_r2_worker(&sess.worker_id, now)?,
                Stage::Agreement => e.job.complete_r3_worker(&sess.worker_id, sess.batch.unwrap_or(0), now)?,
            }
            e.job.advance(now)?;
            return Ok(PageResponse::Complete {
                session_id: session_id.to_string(),
            });
        }

        let params = &e.job.state().job.params;
        let end = (sess.cursor + params.page_size).min(sess.queue.len());
        let videos = sess.queue[sess.cursor..end].to_vec();
        sess.cursor = end;
        let deadline = now + secs(params.page_time_limit);
        let page_id = format!("{session_id}-p{}", sess.issued_pages.len() + 1);
        e.job.record_page_issued(
            &sess.worker_id,
            PageIssuedPayload {
                session_id: session_id.to_string(),
                page_id: page_id.clone(),
                stage: sess.stage,
                videos: videos.clone(),
                deadline,
            },
            now,
        )?;
        sess.issued_pages.push(IssuedPage {
            page_id: page_id.clone(),
            videos: videos.clone(),
            issued_at: now,
            deadline,
            outcome: None,
        });
        let descriptors = videos
            .iter()
            .map(|id| VideoDescriptor {
                id: id.clone(),
                media: format!("{}/{}", self.config.media_base.trim_end_matches('/'), id),
                duration: e.durations.get(id).copied().unwrap_or(0.0),
            })
            .collect();
        Ok(PageResponse::Page(TaskPage {
            page_id,
            videos: descriptors,
            needed_remaining: target.saturating_sub(selected),
            pool_remaining: sess.queue.len() - sess.cursor,
            selected_so_far: selected,
            deadline,
        }))
    }

    /// Records a page's selections. Late pages (past deadline + grace) are
    /// consumed with their selections discarded. Resubmitting a closed page
    /// returns the original acknowledgement.
    pub fn submit_page(
        &self,
        session_id: &str,
        page_id: &str,
        submission: PageSubmission,
    ) -> Result<SubmitAck, ServiceError> {
        let entry = self.entry_for_session(session_id)?;
        let mut guard = entry.lock();
        let e = &mut *guard;
        let now = self.now();
        let sess = e
            .sessions
            .get_mut(session_id)
            .ok_or_else(|| ServiceError::NotFound(format!("session {session_id:?}")))?;
        let idx = sess
            .issued_pages
            .iter()
            .position(|p| p.page_id == page_id)
            .ok_or_else(|| ServiceError::NotFound(format!("page {page_id:?}")))?;
        if let Some(ack) = &sess.issued_pages[idx].outcome {
            return Ok(ack.clone());
        }
        let page = &sess.issued_pages[idx];
        let on_page: BTreeSet<&str> = page.videos.iter().map(String::as_str).collect();
        if let Some(bad) = submission.selected.iter().find(|v| !on_page.contains(v.as_str())) {
            return Err(ServiceError::Validation(format!("video {bad:?} is not on page {page_id}")));
        }
        if now > page.deadline + secs(self.config.grace_seconds) {
            return expire(&mut e.job, sess, idx, submission.client_timings, now);
        }

        let mut ack = SubmitAck {
            page_id: page_id.to_string(),
            status: SubmitStatus::Accepted,
            recorded: Vec::new(),
            already_selected: Vec::new(),
            rejected: Vec::new(),
        };
        let mut dedup = BTreeSet::new();
        for v in submission.selected.iter().filter(|v| dedup.insert(v.as_str())) {
            let res = match sess.stage {
                Stage::Selection => e.job.record_r2_selection(&sess.worker_id, v, now),
                Stage::Agreement => e.job.record_r3_selection(&sess.worker_id, v, now),
            };
            match res {
                Ok(SelectionAck::Recorded) => ack.recorded.push(v.clone()),
                Ok(SelectionAck::AlreadySelected) => ack.already_selected.push(v.clone()),
                Err(err) => ack.rejected.push(Rejection {
                    video: v.clone(),
                    reason: err.to_string(),
                }),
            }
        }
        e.job.record_page_submitted(
            &sess.worker_id,
            PageSubmittedPayload {
                session_id: session_id.to_string(),
                page_id: page_id.to_string(),
                expired: false,
                selected: ack.recorded.clone(),
                client_timings: submission.client_timings,
            },
            now,
        )?;
        sess.issued_pages[idx].outcome = Some(ack.clone());
        e.job.advance(now)?;
        Ok(ack)
    }

    pub fn job_status(&self, job_id: &str) -> Result<JobProgress, ServiceError> {
        Ok(self.entry(job_id)?.lock().job.progress())
    }

    pub fn job_events(&self, job_id: &str) -> Result<Vec<Event>, ServiceError> {
        Ok(self.entry(job_id)?.lock().job.events().to_vec())
    }

    /// Snapshot of the job aggregate.
    pub fn job_snapshot(&self, job_id: &str) -> Result<Job, ServiceError> {
        Ok(self.entry(job_id)?.lock().job.clone())
    }

    pub fn job_ids(&self) -> Vec<String> {
        self.jobs.read().keys().cloned().collect()
    }
}

fn conflict(err: PipelineError) -> ServiceError {
    match err {
        PipelineError::WorkerOverlap(_) | PipelineError::NoOpenSlot(_) => ServiceError::Conflict(err.to_string()),
        other => ServiceError::Pipeline(other),
    }
}

fn expire(
    job: &mut Job,
    sess: &mut WorkerSession,
    idx: usize,
    client_timings: Option<serde_json::Value>,
    now: Timestamp,
) -> Result<SubmitAck, ServiceError> {
    let page_id = sess.issued_pages[idx].page_id.clone();
    job.record_page_submitted(
        &sess.worker_id,
        PageSubmittedPayload {
            session_id: sess.session_id.clone(),
            page_id: page_id.clone(),
            expired: true,
            selected: Vec::new(),
            client_timings,
        },
        now,
    )?;
    let ack = SubmitAck {
        page_id,
        status: SubmitStatus::Expired,
        recorded: Vec::new(),
        already_selected: Vec::new(),
        rejected: Vec::new(),
    };
    sess.issued_pages[idx].outcome = Some(ack.clone());
    Ok(ack)
}

/// `(selected so far, cap or required count)` for the session's slot.
fn selection_counts(job: &Job, sess: &WorkerSession) -> (usize, usize) {
    let st = job.state();
    match sess.stage {
        Stage::Selection => st
            .r2_slot_of(&sess.worker_id)
            .map(|i| (st.r2_slots[i].selected.len(), st.r2_slots[i].cap))
            .unwrap_or((0, 0)),
        Stage::Agreement => {
            let b = sess.batch.unwrap_or(0);
            let batch = &st.r3_batches[b];
            let selected = st
                .r3_slots_of(&sess.worker_id)
                .into_iter()
                .find(|(bb, _)| *bb == b)
                .map(|(_, s)| batch.slots[s].selected.len())
                .unwrap_or(0);
            (selected, batch.required(st.job.params.r3_min_select))
        }
    }
}

fn landing(e: &JobEntry, sess: &WorkerSession) -> Landing {
    let st = e.job.state();
    let p = &st.job.params;
    let (_, required) = selection_counts(&e.job, sess);
    Landing {
        theme: st.job.theme.clone(),
        instructions: format!(
            "Choose {required} high-quality video{} fitting the theme \"{}\". \
             Each page shows up to {} looping clips and moves on after {} seconds; \
             you do not need to find every good video.",
            if required == 1 { "" } else { "s" },
            st.job.theme,
            p.page_size,
            p.page_time_limit
        ),
        required_count: required,
        page_time_limit: p.page_time_limit,
        example_refs: st.job.example_refs.clone(),
    }
}
