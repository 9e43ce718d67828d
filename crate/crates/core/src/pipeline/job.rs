use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::events::*;
use super::plan::{batch_seed, plan_r2, shuffled, R2Assignment};
use super::{CompilationJob, CompilationOutput, Phase, PipelineError};

/// A selection with its position in the log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pick {
    pub video: String,
    pub at: Timestamp,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R2Slot {
    pub videos: Vec<String>,
    pub cap: usize,
    pub worker: Option<String>,
    pub selected: Vec<Pick>,
    pub seen: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct R3Slot {
    pub worker: Option<String>,
    pub selected: Vec<Pick>,
    pub seen: usize,
    pub completed: bool,
}

/// A snapshot of the R3 pool reviewed by `r3_workers` agreement workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct R3Batch {
    pub videos: Vec<String>,
    pub slots: Vec<R3Slot>,
}

impl R3Batch {
    /// Selections each agreement worker is asked for.
    pub fn required(&self, min_select: usize) -> usize {
        min_select.min(self.videos.len())
    }
}

/// Everything known about a job, derived from its event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageState {
    pub job: CompilationJob,
    pub phase: Phase,
    pub r1_kept: Vec<String>,
    pub r2_slots: Vec<R2Slot>,
    /// R2 selections in arrival order, deduplicated.
    pub r3_pool: Vec<String>,
    /// Pool video → index of the R2 slot that selected it.
    pub pool_origin: BTreeMap<String, usize>,
    pub r3_batches: Vec<R3Batch>,
    /// Prefix of `r3_pool` already handed to agreement batches.
    pub batched: usize,
    pub output: Option<CompilationOutput>,
}

impl StageState {
    fn new(job: CompilationJob) -> Self {
        Self {
            job,
            phase: Phase::Created,
            r1_kept: Vec::new(),
            r2_slots: Vec::new(),
            r3_pool: Vec::new(),
            pool_origin: BTreeMap::new(),
            r3_batches: Vec::new(),
            batched: 0,
            output: None,
        }
    }

    pub fn r2_slot_of(&self, worker: &str) -> Option<usize> {
        self.r2_slots
            .iter()
            .position(|s| s.worker.as_deref() == Some(worker))
    }

    pub fn is_r2_worker(&self, worker: &str) -> bool {
        self.r2_slot_of(worker).is_some()
    }

    /// `(batch, slot)` pairs claimed by `worker`.
    pub fn r3_slots_of(&self, worker: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (b, batch) in self.r3_batches.iter().enumerate() {
            for (s, slot) in batch.slots.iter().enumerate() {
                if slot.worker.as_deref() == Some(worker) {
                    out.push((b, s));
                }
            }
        }
        out
    }

    pub fn is_r3_worker(&self, worker: &str) -> bool {
        !self.r3_slots_of(worker).is_empty()
    }

    pub fn r2_assignments(&self) -> BTreeMap<String, Vec<String>> {
        self.r2_slots
            .iter()
            .filter_map(|s| s.worker.clone().map(|w| (w, s.videos.clone())))
            .collect()
    }

    pub fn r2_selected(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.r2_slots
            .iter()
            .filter_map(|s| {
                s.worker
                    .clone()
                    .map(|w| (w, s.selected.iter().map(|p| p.video.clone()).collect()))
            })
            .collect()
    }

    pub fn r3_selected(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for batch in &self.r3_batches {
            for slot in &batch.slots {
                if let Some(w) = &slot.worker {
                    out.entry(w.clone())
                        .or_default()
                        .extend(slot.selected.iter().map(|p| p.video.clone()));
                }
            }
        }
        out
    }

    pub fn all_r2_completed(&self) -> bool {
        !self.r2_slots.is_empty() && self.r2_slots.iter().all(|s| s.completed)
    }

    fn pending_pool(&self) -> &[String] {
        &self.r3_pool[self.batched..]
    }

    /// True once nothing can change the consent set any more.
    pub fn agreement_complete(&self) -> bool {
        matches!(self.phase, Phase::R2Running | Phase::R3Running)
            && self.all_r2_completed()
            && self.pending_pool().is_empty()
            && self
                .r3_batches
                .iter()
                .all(|b| b.slots.iter().all(|s| s.worker.is_some() && s.completed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionAck {
    Recorded,
    AlreadySelected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "transition")]
pub enum Transition {
    R3Triggered { batch: usize, size: usize },
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProgress {
    pub worker: Option<String>,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    pub assigned: usize,
    pub seen: usize,
    pub selected: usize,
    /// Selection cap (R2) or required picks (R3).
    pub target: usize,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub job_id: String,
    pub phase: Phase,
    pub r1_kept: usize,
    pub r2_workers: Vec<WorkerProgress>,
    pub r2_selected: usize,
    pub r3_pool: usize,
    pub r3_batches: usize,
    pub r3_workers: Vec<WorkerProgress>,
    pub events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<CompilationOutput>,
}

/// Event-sourced compilation job.
#[derive(Debug, Clone)]
pub struct Job {
    state: StageState,
    log: Vec<Event>,
}

fn payload<T: Serialize>(p: &T) -> Option<serde_json::Value> {
    Some(serde_json::to_value(p).expect("payload types serialize"))
}

fn decode<T: serde::de::DeserializeOwned>(e: &Event) -> Result<T, PipelineError> {
    let raw = e.payload.clone().ok_or_else(|| PipelineError::Replay {
        seq: e.seq,
        message: format!("{:?} without payload", e.kind),
    })?;
    serde_json::from_value(raw).map_err(|err| PipelineError::Replay {
        seq: e.seq,
        message: err.to_string(),
    })
}

fn need<'a>(e: &'a Event, field: Option<&'a String>, name: &str) -> Result<&'a str, PipelineError> {
    field.map(String::as_str).ok_or_else(|| PipelineError::Replay {
        seq: e.seq,
        message: format!("{:?} without {name}", e.kind),
    })
}

fn bad(e: &Event, message: impl Into<String>) -> PipelineError {
    PipelineError::Replay {
        seq: e.seq,
        message: message.into(),
    }
}

impl Job {
    pub fn create(job: CompilationJob, at: Timestamp) -> Result<Self, PipelineError> {
        job.validate()?;
        let event = Event {
            seq: 0,
            at,
            kind: EventKind::JobCreated,
            worker: None,
            video: None,
            payload: payload(&job),
        };
        Ok(Self {
            state: StageState::new(job),
            log: vec![event],
        })
    }

    /// Rebuilds a job by folding its log.
    pub fn replay<I: IntoIterator<Item = Event>>(events: I) -> Result<Self, PipelineError> {
        let mut iter = events.into_iter();
        let first = iter.next().ok_or(PipelineError::Replay {
            seq: 0,
            message: "empty log".into(),
        })?;
        if first.kind != EventKind::JobCreated || first.seq != 0 {
            return Err(bad(&first, "log must start with job_created at seq 0"));
        }
        let job: CompilationJob = decode(&first)?;
        let mut this = Self {
            state: StageState::new(job),
            log: vec![first],
        };
        for e in iter {
            if e.seq != this.log.len() as u64 {
                return Err(bad(&e, format!("expected seq {}", this.log.len())));
            }
            apply(&mut this.state, &e)?;
            this.log.push(e);
        }
        Ok(this)
    }

    pub fn state(&self) -> &StageState {
        &self.state
    }

    pub fn events(&self) -> &[Event] {
        &self.log
    }

    pub fn phase(&self) -> Phase {
        self.state.phase
    }

    pub fn job_id(&self) -> &str {
        &self.state.job.job_id
    }

    pub fn output(&self) -> Option<&CompilationOutput> {
        self.state.output.as_ref()
    }

    fn emit(
        &mut self,
        at: Timestamp,
        kind: EventKind,
        worker: Option<&str>,
        video: Option<&str>,
        payload: Option<serde_json::Value>,
    ) -> Result<(), PipelineError> {
        let e = Event {
            seq: self.log.len() as u64,
            at,
            kind,
            worker: worker.map(str::to_string),
            video: video.map(str::to_string),
            payload,
        };
        apply(&mut self.state, &e)?;
        self.log.push(e);
        Ok(())
    }

    fn expect_phase(&self, ok: &[Phase], expected: &'static str) -> Result<(), PipelineError> {
        if ok.contains(&self.state.phase) {
            Ok(())
        } else {
            Err(PipelineError::Phase {
                expected,
                actual: self.state.phase,
            })
        }
    }

    pub fn record_r1(&mut self, kept: Vec<String>, at: Timestamp) -> Result<(), PipelineError> {
        self.expect_phase(&[Phase::Created], "created")?;
        let unique: BTreeSet<&String> = kept.iter().collect();
        if unique.len() != kept.len() {
            return Err(PipelineError::Validation("R1 output contains duplicate ids".into()));
        }
        self.emit(at, EventKind::R1Done, None, None, payload(&R1DonePayload { kept }))
    }

    /// Partitions the R1 output among selection workers.
    pub fn start_r2(&mut self, at: Timestamp) -> Result<Vec<R2Assignment>, PipelineError> {
        self.expect_phase(&[Phase::R1Done], "r1_done")?;
        let p = &self.state.job.params;
        let slots = plan_r2(&self.state.r1_kept, p, p.random_seed)?;
        self.emit(
            at,
            EventKind::R2Assigned,
            None,
            None,
            payload(&R2AssignedPayload::Plan { slots: slots.clone() }),
        )?;
        Ok(slots)
    }

    /// Claims an R2 slot for `worker`; returns the existing one if already claimed.
    pub fn bind_r2_worker(&mut self, worker: &str, at: Timestamp) -> Result<usize, PipelineError> {
        self.expect_phase(&[Phase::R2Running, Phase::R3Running], "r2_running or r3_running")?;
        if self.state.is_r3_worker(worker) {
            return Err(PipelineError::WorkerOverlap(worker.into()));
        }
        if let Some(slot) = self.state.r2_slot_of(worker) {
            return Ok(slot);
        }
        let slot = self
            .state
            .r2_slots
            .iter()
            .position(|s| s.worker.is_none())
            .ok_or(PipelineError::NoOpenSlot(Stage::Selection))?;
        self.emit(
            at,
            EventKind::R2Assigned,
            Some(worker),
            None,
            payload(&R2AssignedPayload::Claim { slot }),
        )?;
        Ok(slot)
    }

    pub fn record_r2_selection(
        &mut self,
        worker: &str,
        video: &str,
        at: Timestamp,
    ) -> Result<SelectionAck, PipelineError> {
        self.expect_phase(&[Phase::R2Running, Phase::R3Running], "r2_running")?;
        let slot_idx = self
            .state
            .r2_slot_of(worker)
            .ok_or_else(|| PipelineError::UnknownWorker(worker.into()))?;
        let slot = &self.state.r2_slots[slot_idx];
        if slot.completed {
            return Err(PipelineError::SessionClosed(worker.into()));
        }
        if !slot.videos.iter().any(|v| v == video) {
            return Err(PipelineError::OutOfScope {
                worker: worker.into(),
                video: video.into(),
            });
        }
        if slot.selected.iter().any(|p| p.video == video) {
            return Ok(SelectionAck::AlreadySelected);
        }
        if slot.selected.len() >= slot.cap {
            return Err(PipelineError::CapExceeded {
                worker: worker.into(),
                cap: slot.cap,
            });
        }
        self.emit(at, EventKind::Selection, Some(worker), Some(video), None)?;
        Ok(SelectionAck::Recorded)
    }

    /// Starts an agreement batch when the unbatched pool reaches the trigger
    /// threshold, or when every selection worker is done and something is
    /// left over.
    pub fn maybe_trigger_r3(&mut self, at: Timestamp) -> Result<bool, PipelineError> {
        if !matches!(self.state.phase, Phase::R2Running | Phase::R3Running) {
            return Ok(false);
        }
        let pending = self.state.pending_pool();
        let threshold = self.state.job.params.r3_trigger_threshold;
        if pending.is_empty() || (pending.len() < threshold && !self.state.all_r2_completed()) {
            return Ok(false);
        }
        let batch = self.state.r3_batches.len();
        let videos = shuffled(pending, batch_seed(self.state.job.params.random_seed, batch));
        self.emit(
            at,
            EventKind::R3Triggered,
            None,
            None,
            payload(&R3TriggeredPayload { batch, videos }),
        )?;
        Ok(true)
    }

    /// Claims an agreement slot. A worker holds at most one open slot and
    /// never two slots in the same batch.
    pub fn bind_r3_worker(&mut self, worker: &str, at: Timestamp) -> Result<(usize, usize), PipelineError> {
        self.expect_phase(&[Phase::R3Running], "r3_running")?;
        if self.state.is_r2_worker(worker) {
            return Err(PipelineError::WorkerOverlap(worker.into()));
        }
        let mine = self.state.r3_slots_of(worker);
        if let Some(&open) = mine
            .iter()
            .find(|(b, s)| !self.state.r3_batches[*b].slots[*s].completed)
        {
            return Ok(open);
        }
        let target = self.state.r3_batches.iter().enumerate().find_map(|(b, batch)| {
            if mine.iter().any(|(mb, _)| *mb == b) {
                return None;
            }
            batch.slots.iter().position(|s| s.worker.is_none()).map(|s| (b, s))
        });
        let (batch, slot) = target.ok_or(PipelineError::NoOpenSlot(Stage::Agreement))?;
        self.emit(
            at,
            EventKind::R3Assigned,
            Some(worker),
            None,
            payload(&R3AssignedPayload { batch, slot }),
        )?;
        Ok((batch, slot))
    }

    pub fn record_r3_selection(
        &mut self,
        worker: &str,
        video: &str,
        at: Timestamp,
    ) -> Result<SelectionAck, PipelineError> {
        self.expect_phase(&[Phase::R3Running], "r3_running")?;
        if self.state.is_r2_worker(worker) {
            return Err(PipelineError::WorkerOverlap(worker.into()));
        }
        let mine = self.state.r3_slots_of(worker);
        if mine.is_empty() {
            return Err(PipelineError::UnknownWorker(worker.into()));
        }
        let (b, s) = mine
            .into_iter()
            .find(|(b, _)| self.state.r3_batches[*b].videos.iter().any(|v| v == video))
            .ok_or_else(|| PipelineError::OutOfScope {
                worker: worker.into(),
                video: video.into(),
            })?;
        let slot = &self.state.r3_batches[b].slots[s];
        if slot.completed {
            return Err(PipelineError::SessionClosed(worker.into()));
        }
        if slot.selected.iter().any(|p| p.video == video) {
            return Ok(SelectionAck::AlreadySelected);
        }
        self.emit(at, EventKind::R3Selection, Some(worker), Some(video), None)?;
        Ok(SelectionAck::Recorded)
    }

    pub fn complete_r2_worker(&mut self, worker: &str, at: Timestamp) -> Result<(), PipelineError> {
        let slot = self
            .state
            .r2_slot_of(worker)
            .ok_or_else(|| PipelineError::UnknownWorker(worker.into()))?;
        if self.state.r2_slots[slot].completed {
            return Ok(());
        }
        self.emit(
            at,
            EventKind::WorkerCompleted,
            Some(worker),
            None,
            payload(&WorkerCompletedPayload {
                stage: Stage::Selection,
                batch: None,
            }),
        )
    }

    pub fn complete_r3_worker(&mut self, worker: &str, batch: usize, at: Timestamp) -> Result<(), PipelineError> {
        let (b, s) = self
            .state
            .r3_slots_of(worker)
            .into_iter()
            .find(|(b, _)| *b == batch)
            .ok_or_else(|| PipelineError::UnknownWorker(worker.into()))?;
        if self.state.r3_batches[b].slots[s].completed {
            return Ok(());
        }
        self.emit(
            at,
            EventKind::WorkerCompleted,
            Some(worker),
            None,
            payload(&WorkerCompletedPayload {
                stage: Stage::Agreement,
                batch: Some(batch),
            }),
        )
    }

    /// Audit record for a task page handed to a worker.
    pub fn record_page_issued(&mut self, worker: &str, page: PageIssuedPayload, at: Timestamp) -> Result<(), PipelineError> {
        self.emit(at, EventKind::PageIssued, Some(worker), None, payload(&page))
    }

    pub fn record_page_submitted(
        &mut self,
        worker: &str,
        page: PageSubmittedPayload,
        at: Timestamp,
    ) -> Result<(), PipelineError> {
        self.emit(at, EventKind::PageSubmitted, Some(worker), None, payload(&page))
    }

    /// Unanimous-consent output: videos picked by their R2 worker and by
    /// every agreement worker of their batch.
    pub fn compute_agreement(&self) -> Result<CompilationOutput, PipelineError> {
        let st = &self.state;
        if st.phase == Phase::Finalized {
            return Ok(st.output.clone().expect("finalized jobs carry output"));
        }
        if !st.agreement_complete() {
            return Err(PipelineError::Phase {
                expected: "all agreement workers completed",
                actual: st.phase,
            });
        }
        let params = &st.job.params;
        let mut consent: Vec<(Timestamp, u64, String, usize)> = Vec::new();
        let mut short = Vec::new();
        for batch in &st.r3_batches {
            let required = batch.required(params.r3_min_select);
            for slot in &batch.slots {
                if slot.selected.len() < required {
                    short.push(slot.worker.clone().unwrap_or_default());
                }
            }
            let picks: Vec<HashMap<&str, &Pick>> = batch
                .slots
                .iter()
                .map(|s| s.selected.iter().map(|p| (p.video.as_str(), p)).collect())
                .collect();
            for v in &batch.videos {
                let by_r2 = st
                    .pool_origin
                    .get(v)
                    .is_some_and(|&o| st.r2_slots[o].selected.iter().any(|p| &p.video == v));
                if !by_r2 || !picks.iter().all(|m| m.contains_key(v.as_str())) {
                    continue;
                }
                let first = picks
                    .iter()
                    .map(|m| m[v.as_str()])
                    .min_by(|a, b| (a.at, a.seq).cmp(&(b.at, b.seq)))
                    .expect("at least one agreement worker");
                consent.push((first.at, first.seq, v.clone(), 1 + batch.slots.len()));
            }
        }
        consent.sort_by_key(|a| (a.0, a.1));
        let consent_set_size = consent.len();
        consent.truncate(params.final_max);
        Ok(CompilationOutput {
            job_id: st.job.job_id.clone(),
            consent_counts: consent.iter().map(|c| (c.2.clone(), c.3)).collect(),
            videos: consent.into_iter().map(|c| c.2).collect(),
            under_supplied: consent_set_size < params.final_min,
            consent_set_size,
            short_reviewers: short,
        })
    }

    pub fn finalize(&mut self, at: Timestamp) -> Result<CompilationOutput, PipelineError> {
        let out = self.compute_agreement()?;
        if self.state.phase != Phase::Finalized {
            self.emit(at, EventKind::Finalized, None, None, payload(&out))?;
        }
        Ok(out)
    }

    /// Applies every automatic transition that is currently due.
    pub fn advance(&mut self, at: Timestamp) -> Result<Vec<Transition>, PipelineError> {
        let mut done = Vec::new();
        while self.maybe_trigger_r3(at)? {
            let b = self.state.r3_batches.len() - 1;
            done.push(Transition::R3Triggered {
                batch: b,
                size: self.state.r3_batches[b].videos.len(),
            });
        }
        if self.state.agreement_complete() {
            self.finalize(at)?;
            done.push(Transition::Finalized);
        }
        Ok(done)
    }

    pub fn progress(&self) -> JobProgress {
        let st = &self.state;
        let min_select = st.job.params.r3_min_select;
        let r2_workers = st
            .r2_slots
            .iter()
            .map(|s| WorkerProgress {
                worker: s.worker.clone(),
                stage: Stage::Selection,
                batch: None,
                assigned: s.videos.len(),
                seen: s.seen,
                selected: s.selected.len(),
                target: s.cap,
                completed: s.completed,
            })
            .collect();
        let r3_workers = st
            .r3_batches
            .iter()
            .enumerate()
            .flat_map(|(b, batch)| {
                batch.slots.iter().map(move |s| WorkerProgress {
                    worker: s.worker.clone(),
                    stage: Stage::Agreement,
                    batch: Some(b),
                    assigned: batch.videos.len(),
                    seen: s.seen,
                    selected: s.selected.len(),
                    target: batch.required(min_select),
                    completed: s.completed,
                })
            })
            .collect();
        JobProgress {
            job_id: st.job.job_id.clone(),
            phase: st.phase,
            r1_kept: st.r1_kept.len(),
            r2_workers,
            r2_selected: st.r2_slots.iter().map(|s| s.selected.len()).sum(),
            r3_pool: st.r3_pool.len(),
            r3_batches: st.r3_batches.len(),
            r3_workers,
            events: self.log.len(),
            output: st.output.clone(),
        }
    }
}

/// Folds one event into the state. Commands validate before emitting, so
/// failures here only happen when replaying a foreign or corrupted log.
fn apply(st: &mut StageState, e: &Event) -> Result<(), PipelineError> {
    if st.phase == Phase::Finalized {
        return Err(bad(e, "job already finalized"));
    }
    match e.kind {
        EventKind::JobCreated => return Err(bad(e, "duplicate job_created")),
        EventKind::R1Done => {
            if st.phase != Phase::Created {
                return Err(bad(e, "r1_done out of order"));
            }
            let p: R1DonePayload = decode(e)?;
            st.r1_kept = p.kept;
            st.phase = Phase::R1Done;
        }
        EventKind::R2Assigned => match decode::<R2AssignedPayload>(e)? {
            R2AssignedPayload::Plan { slots } => {
                if st.phase != Phase::R1Done {
                    return Err(bad(e, "R2 plan out of order"));
                }
                st.r2_slots = slots
                    .into_iter()
                    .map(|a| R2Slot {
                        videos: a.videos,
                        cap: a.cap,
                        worker: None,
                        selected: Vec::new(),
                        seen: 0,
                        completed: false,
                    })
                    .collect();
                st.phase = Phase::R2Running;
            }
            R2AssignedPayload::Claim { slot } => {
                let w = need(e, e.worker.as_ref(), "worker")?.to_string();
                let s = st.r2_slots.get_mut(slot).ok_or_else(|| bad(e, "unknown R2 slot"))?;
                if s.worker.is_some() {
                    return Err(bad(e, "R2 slot already claimed"));
                }
                s.worker = Some(w);
            }
        },
        EventKind::Selection => {
            let w = need(e, e.worker.as_ref(), "worker")?;
            let v = need(e, e.video.as_ref(), "video")?.to_string();
            let idx = st.r2_slot_of(w).ok_or_else(|| bad(e, "selection by unassigned worker"))?;
            st.r2_slots[idx].selected.push(Pick {
                video: v.clone(),
                at: e.at,
                seq: e.seq,
            });
            if !st.pool_origin.contains_key(&v) {
                st.pool_origin.insert(v.clone(), idx);
                st.r3_pool.push(v);
            }
        }
        EventKind::PageIssued => {
            let w = need(e, e.worker.as_ref(), "worker")?;
            let p: PageIssuedPayload = decode(e)?;
            match p.stage {
                Stage::Selection => {
                    if let Some(idx) = st.r2_slot_of(w) {
                        st.r2_slots[idx].seen += p.videos.len();
                    }
                }
                Stage::Agreement => {
                    let first = p.videos.first();
                    if let Some((b, s)) = st
                        .r3_slots_of(w)
                        .into_iter()
                        .find(|(b, _)| first.is_some_and(|f| st.r3_batches[*b].videos.contains(f)))
                    {
                        st.r3_batches[b].slots[s].seen += p.videos.len();
                    }
                }
            }
        }
        EventKind::PageSubmitted => {}
        EventKind::R3Triggered => {
            let p: R3TriggeredPayload = decode(e)?;
            if p.batch != st.r3_batches.len() {
                return Err(bad(e, "R3 batch index out of order"));
            }
            st.batched += p.videos.len();
            if st.batched > st.r3_pool.len() {
                return Err(bad(e, "R3 batch larger than pool"));
            }
            st.r3_batches.push(R3Batch {
                videos: p.videos,
                slots: vec![R3Slot::default(); st.job.params.r3_workers],
            });
            st.phase = Phase::R3Running;
        }
        EventKind::R3Assigned => {
            let w = need(e, e.worker.as_ref(), "worker")?.to_string();
            let p: R3AssignedPayload = decode(e)?;
            let slot = st
                .r3_batches
                .get_mut(p.batch)
                .and_then(|b| b.slots.get_mut(p.slot))
                .ok_or_else(|| bad(e, "unknown R3 slot"))?;
            if slot.worker.is_some() {
                return Err(bad(e, "R3 slot already claimed"));
            }
            slot.worker = Some(w);
        }
        EventKind::R3Selection => {
            let w = need(e, e.worker.as_ref(), "worker")?;
            let v = need(e, e.video.as_ref(), "video")?.to_string();
            let (b, s) = st
                .r3_slots_of(w)
                .into_iter()
                .find(|(b, _)| st.r3_batches[*b].videos.contains(&v))
                .ok_or_else(|| bad(e, "R3 selection outside worker batches"))?;
            st.r3_batches[b].slots[s].selected.push(Pick {
                video: v,
                at: e.at,
                seq: e.seq,
            });
        }
        EventKind::WorkerCompleted => {
            let w = need(e, e.worker.as_ref(), "worker")?;
            let p: WorkerCompletedPayload = decode(e)?;
            match (p.stage, p.batch) {
                (Stage::Selection, _) => {
                    let idx = st.r2_slot_of(w).ok_or_else(|| bad(e, "unknown R2 worker"))?;
                    st.r2_slots[idx].completed = true;
                }
                (Stage::Agreement, Some(batch)) => {
                    let (b, s) = st
                        .r3_slots_of(w)
                        .into_iter()
                        .find(|(b, _)| *b == batch)
                        .ok_or_else(|| bad(e, "unknown R3 worker"))?;
                    st.r3_batches[b].slots[s].completed = true;
                }
                (Stage::Agreement, None) => return Err(bad(e, "agreement completion without batch")),
            }
        }
        EventKind::Finalized => {
            let out: CompilationOutput = decode(e)?;
            st.output = Some(out);
            st.phase = Phase::Finalized;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::PipelineParams;
    use chrono::{Duration, TimeZone, Utc};

    fn t(s: i64) -> Timestamp {
        Utc.timestamp_opt(1_700_000_000, 0).unwrap() + Duration::seconds(s)
    }

    fn job(params: PipelineParams) -> CompilationJob {
        CompilationJob {
            job_id: "c1".into(),
            theme: "Magic Wins".into(),
            keywords: vec!["magic".into()],
            params,
            example_refs: vec![],
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    fn running(n: usize, params: PipelineParams) -> Job {
        let mut j = Job::create(job(params), t(0)).unwrap();
        j.record_r1(ids(n), t(1)).unwrap();
        j.start_r2(t(2)).unwrap();
        j
    }

    #[test]
    fn fresh_job_progress() {
        let j = Job::create(job(PipelineParams::default()), t(0)).unwrap();
        let p = j.progress();
        assert_eq!(p.phase, Phase::Created);
        assert_eq!((p.r1_kept, p.r2_selected, p.r3_pool), (0, 0, 0));
    }

    #[test]
    fn selection_streams_into_pool() {
        let mut j = running(30, PipelineParams::default());
        j.bind_r2_worker("w1", t(3)).unwrap();
        let mine = j.state().r2_slots[0].videos.clone();
        assert_eq!(j.record_r2_selection("w1", &mine[4], t(4)).unwrap(), SelectionAck::Recorded);
        assert_eq!(j.state().r3_pool, [mine[4].clone()]);
        assert_eq!(
            j.record_r2_selection("w1", &mine[4], t(5)).unwrap(),
            SelectionAck::AlreadySelected
        );
        assert_eq!(j.state().r3_pool.len(), 1);
        assert!(matches!(
            j.record_r2_selection("w1", "nope", t(5)),
            Err(PipelineError::OutOfScope { .. })
        ));
        assert!(matches!(
            j.record_r2_selection("w9", &mine[0], t(5)),
            Err(PipelineError::UnknownWorker(_))
        ));
    }

    #[test]
    fn cap_enforced() {
        let mut j = running(1000, PipelineParams::default());
        j.bind_r2_worker("w1", t(3)).unwrap();
        let mine = j.state().r2_slots[0].videos.clone();
        assert_eq!(j.state().r2_slots[0].cap, 100);
        for (i, v) in mine.iter().take(100).enumerate() {
            j.record_r2_selection("w1", v, t(10 + i as i64)).unwrap();
        }
        assert_eq!(
            j.record_r2_selection("w1", &mine[100], t(200)),
            Err(PipelineError::CapExceeded {
                worker: "w1".into(),
                cap: 100
            })
        );
    }

    #[test]
    fn trigger_rules() {
        let params = PipelineParams {
            r3_trigger_threshold: 5,
            ..PipelineParams::default()
        };
        let mut j = running(100, params);
        j.bind_r2_worker("w1", t(3)).unwrap();
        let mine = j.state().r2_slots[0].videos.clone();
        for v in &mine[..4] {
            j.record_r2_selection("w1", v, t(4)).unwrap();
        }
        assert!(!j.maybe_trigger_r3(t(5)).unwrap());
        j.record_r2_selection("w1", &mine[4], t(6)).unwrap();
        assert!(j.maybe_trigger_r3(t(7)).unwrap());
        assert_eq!(j.phase(), Phase::R3Running);
        assert_eq!(j.state().r3_batches[0].videos.len(), 5);
        // streaming continues into a second batch
        j.record_r2_selection("w1", &mine[5], t(8)).unwrap();
        assert!(!j.maybe_trigger_r3(t(9)).unwrap());
        j.complete_r2_worker("w1", t(10)).unwrap();
        assert!(j.maybe_trigger_r3(t(11)).unwrap());
        assert_eq!(j.state().r3_batches[1].videos, [mine[5].clone()]);
    }

    #[test]
    fn completion_fallback_triggers_small_pool() {
        let mut j = running(100, PipelineParams::default());
        j.bind_r2_worker("w1", t(3)).unwrap();
        let mine = j.state().r2_slots[0].videos.clone();
        for v in &mine[..9] {
            j.record_r2_selection("w1", v, t(4)).unwrap();
        }
        assert!(!j.maybe_trigger_r3(t(5)).unwrap());
        j.complete_r2_worker("w1", t(6)).unwrap();
        assert!(j.maybe_trigger_r3(t(7)).unwrap());
    }

    fn to_r3(j: &mut Job, picks: &[usize]) -> Vec<String> {
        j.bind_r2_worker("r2", t(3)).unwrap();
        let mine = j.state().r2_slots[0].videos.clone();
        for &i in picks {
            j.record_r2_selection("r2", &mine[i], t(4 + i as i64)).unwrap();
        }
        j.complete_r2_worker("r2", t(100)).unwrap();
        j.advance(t(101)).unwrap();
        mine
    }

    #[test]
    fn set_intersection() {
        let mut j = running(40, PipelineParams::default());
        let mine = to_r3(&mut j, &[0, 1, 2]);
        let (a, b, c) = (&mine[0], &mine[1], &mine[2]);
        j.bind_r3_worker("x", t(200)).unwrap();
        j.bind_r3_worker("y", t(200)).unwrap();
        j.record_r3_selection("x", a, t(201)).unwrap();
        j.record_r3_selection("x", b, t(202)).unwrap();
        j.record_r3_selection("y", b, t(203)).unwrap();
        j.record_r3_selection("y", c, t(204)).unwrap();
        assert!(matches!(j.compute_agreement(), Err(PipelineError::Phase { .. })));
        j.complete_r3_worker("x", 0, t(205)).unwrap();
        assert_eq!(
            j.record_r3_selection("x", c, t(206)),
            Err(PipelineError::SessionClosed("x".into()))
        );
        j.complete_r3_worker("y", 0, t(206)).unwrap();
        let out = j.compute_agreement().unwrap();
        assert_eq!(out.videos, [b.clone()]);
        assert_eq!(out.consent_counts[b], 3);
        assert!(out.under_supplied);
        assert_eq!(j.advance(t(300)).unwrap(), [Transition::Finalized]);
        assert_eq!(j.phase(), Phase::Finalized);
    }

    #[test]
    fn r2_worker_cannot_join_r3() {
        let mut j = running(40, PipelineParams::default());
        let mine = to_r3(&mut j, &[0, 1]);
        assert_eq!(
            j.bind_r3_worker("r2", t(200)),
            Err(PipelineError::WorkerOverlap("r2".into()))
        );
        assert_eq!(
            j.record_r3_selection("r2", &mine[0], t(200)),
            Err(PipelineError::WorkerOverlap("r2".into()))
        );
        j.bind_r3_worker("x", t(200)).unwrap();
        assert_eq!(
            j.bind_r2_worker("x", t(200)),
            Err(PipelineError::WorkerOverlap("x".into()))
        );
        assert!(matches!(
            j.record_r3_selection("x", &mine[5], t(201)),
            Err(PipelineError::OutOfScope { .. })
        ));
    }

    #[test]
    fn ordering_and_truncation() {
        let params = PipelineParams {
            final_max: 3,
            final_min: 2,
            ..PipelineParams::default()
        };
        let mut j = running(50, params);
        let mine = to_r3(&mut j, &[0, 1, 2, 3, 4]);
        j.bind_r3_worker("x", t(200)).unwrap();
        j.bind_r3_worker("y", t(200)).unwrap();
        // x picks in reverse order, y forward; earliest pick wins.
        for (k, i) in [4usize, 3, 2, 1, 0].iter().enumerate() {
            j.record_r3_selection("x", &mine[*i], t(300 + 10 * k as i64)).unwrap();
        }
        for (k, i) in [0usize, 1, 2, 3, 4].iter().enumerate() {
            j.record_r3_selection("y", &mine[*i], t(305 + 10 * k as i64)).unwrap();
        }
        j.complete_r3_worker("x", 0, t(400)).unwrap();
        j.complete_r3_worker("y", 0, t(400)).unwrap();
        let out = j.compute_agreement().unwrap();
        // earliest picks: v4@300, v0@305, v3@310, v1@315, v2@320
        assert_eq!(out.videos, [mine[4].clone(), mine[0].clone(), mine[3].clone()]);
        assert_eq!(out.consent_set_size, 5);
        assert!(!out.under_supplied);
    }

    #[test]
    fn replay_is_exact() {
        let mut j = running(40, PipelineParams::default());
        let mine = to_r3(&mut j, &[1, 3, 5, 7]);
        j.bind_r3_worker("x", t(200)).unwrap();
        j.bind_r3_worker("y", t(200)).unwrap();
        for v in [&mine[1], &mine[3]] {
            j.record_r3_selection("x", v, t(210)).unwrap();
            j.record_r3_selection("y", v, t(211)).unwrap();
        }
        j.complete_r3_worker("x", 0, t(220)).unwrap();
        j.complete_r3_worker("y", 0, t(221)).unwrap();
        j.advance(t(222)).unwrap();

        let mut buf = Vec::new();
        write_log(&mut buf, j.events()).unwrap();
        let back = read_log(buf.as_slice()).unwrap();
        let r = Job::replay(back).unwrap();
        assert_eq!(
            serde_json::to_string(r.state()).unwrap(),
            serde_json::to_string(j.state()).unwrap()
        );
        assert_eq!(r.output(), j.output());
        let mut buf2 = Vec::new();
        write_log(&mut buf2, r.events()).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn replay_rejects_corrupt_logs() {
        let j = running(5, PipelineParams::default());
        let mut events = j.events().to_vec();
        events[2].seq = 7;
        assert!(matches!(Job::replay(events), Err(PipelineError::Replay { .. })));
        assert!(Job::replay(j.events()[1..].to_vec()).is_err());
    }

    #[test]
    fn phase_errors() {
        let mut j = Job::create(job(PipelineParams::default()), t(0)).unwrap();
        assert!(matches!(j.start_r2(t(1)), Err(PipelineError::Phase { .. })));
        assert!(matches!(j.bind_r2_worker("w", t(1)), Err(PipelineError::Phase { .. })));
        j.record_r1(vec![], t(1)).unwrap();
        assert!(matches!(j.start_r2(t(2)), Err(PipelineError::Validation(_))));
        let bad = CompilationJob {
            keywords: vec![],
            ..job(PipelineParams::default())
        };
        assert!(Job::create(bad, t(0)).is_err());
    }
}
