//! Synthetic workers for end-to-end runs and agreement studies.
//!
//! Each simulated worker holds a hidden "intended" subset of its assignment,
//! drawn once per session by [`choose_subset`]: every draw takes, with
//! probability `q`, a random not-yet-chosen video from the assignment's
//! latent top-k, and otherwise a random not-yet-chosen video from the whole
//! assignment. `q = 0` is a uniform random subset, `q = 1` exactly the top-k.
//! While paging, the worker submits whatever part of the intended subset is on
//! the current page after a sampled dwell time.
//!
//! Latent quality exists only here; the pipeline never sees it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashSet};
use std::sync::Arc;

use chrono::TimeZone;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::JobConfig;
use crate::eval::{self, MeanSd, StageTiming};
use crate::exec::Execution;
use crate::pipeline::{r2_worker_count, CompilationOutput, Event, Phase, Stage, Timestamp};
use crate::service::{
    ManualClock, PageResponse, PageSubmission, ServiceConfig, ServiceError, SubmitStatus, TaskPage, TaskService,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error("simulation stalled: {0}")]
    Stalled(String),
}

/// Seconds spent on one page: `mean` plus a uniform offset in `±jitter`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dwell {
    pub mean: f64,
    #[serde(default)]
    pub jitter: f64,
}

impl Default for Dwell {
    fn default() -> Self {
        Self { mean: 20.0, jitter: 5.0 }
    }
}

impl Dwell {
    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let j = self.jitter.max(0.0);
        (self.mean + rng.gen_range(-j..=j)).max(0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    pub quality_bias: f64,
    #[serde(default)]
    pub dwell: Dwell,
    /// Fraction of the assignment the worker aims to pick.
    pub selection_rate: f64,
}

impl WorkerProfile {
    pub fn new(worker_id: impl Into<String>, quality_bias: f64, selection_rate: f64) -> Self {
        Self {
            worker_id: worker_id.into(),
            quality_bias,
            dwell: Dwell::default(),
            selection_rate,
        }
    }

    pub fn validate(&self, page_time_limit: f64) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(format!("worker {}: {m}", self.worker_id)));
        if self.worker_id.trim().is_empty() {
            return Err(SimError::Invalid("empty worker_id".into()));
        }
        if !(0.0..=1.0).contains(&self.quality_bias) {
            return bad(format!("quality_bias {} outside [0, 1]", self.quality_bias));
        }
        if !(self.selection_rate > 0.0 && self.selection_rate <= 1.0) {
            return bad(format!("selection_rate {} outside (0, 1]", self.selection_rate));
        }
        if !(self.dwell.mean >= 0.0 && self.dwell.mean <= page_time_limit) || self.dwell.jitter.is_nan() || self.dwell.jitter < 0.0 {
            return bad(format!(
                "dwell mean {} must lie in [0, {page_time_limit}] with jitter >= 0",
                self.dwell.mean
            ));
        }
        Ok(())
    }
}

/// Hidden per-video quality in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LatentQuality {
    scores: BTreeMap<String, f64>,
}

impl LatentQuality {
    pub fn from_map(scores: BTreeMap<String, f64>) -> Self {
        Self { scores }
    }

    /// Independent uniform scores.
    pub fn uniform(ids: &[String], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            scores: ids.iter().map(|id| (id.clone(), rng.gen::<f64>())).collect(),
        }
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn ids(&self) -> Vec<String> {
        self.scores.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// The `k` best of `candidates`, best first; ties broken by id.
    pub fn top(&self, candidates: &[String], k: usize) -> Vec<String> {
        let mut v: Vec<(f64, &String)> = candidates
            .iter()
            .map(|c| (self.get(c).unwrap_or(0.0), c))
            .collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        v.into_iter().take(k).map(|(_, c)| c.clone()).collect()
    }
}

pub fn video_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:05}")).collect()
}

/// Draws `k` distinct videos from `candidates` with top-k bias `q`, in draw
/// order.
pub fn choose_subset(
    candidates: &[String],
    k: usize,
    q: f64,
    latent: &LatentQuality,
    rng: &mut ChaCha8Rng,
) -> Vec<String> {
    let k = k.min(candidates.len());
    let mut top = latent.top(candidates, k);
    let mut rest: Vec<String> = candidates.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let biased = rng.gen_bool(q.clamp(0.0, 1.0));
        let pick = if biased && !top.is_empty() {
            let v = top.swap_remove(rng.gen_range(0..top.len()));
            let i = rest.iter().position(|r| *r == v).expect("top is a subset of rest");
            rest.swap_remove(i);
            v
        } else {
            let v = rest.swap_remove(rng.gen_range(0..rest.len()));
            if let Some(i) = top.iter().position(|t| *t == v) {
                top.swap_remove(i);
            }
            v
        };
        out.push(pick);
    }
    out
}

/// How many videos a worker intends to pick from an assignment. Selection
/// workers stay within their cap; agreement workers meet the requested minimum.
pub fn selection_target(stage: Stage, assignment_len: usize, rate: f64, required: usize) -> usize {
    let want = (rate * assignment_len as f64).round() as usize;
    match stage {
        Stage::Selection => want.min(required),
        Stage::Agreement => want.max(required).min(assignment_len),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageTrace {
    pub page_id: String,
    pub issued_at: Timestamp,
    pub submitted_at: Timestamp,
    pub offered: usize,
    pub selected: Vec<String>,
    pub status: SubmitStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub session_id: String,
    pub worker_id: String,
    pub stage: Stage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    pub intended: usize,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
    pub pages: Vec<PageTrace>,
}

impl SessionTrace {
    pub fn minutes(&self) -> f64 {
        (self.finished_at - self.started_at).num_milliseconds() as f64 / 60_000.0
    }
}

struct Active {
    intended: HashSet<String>,
    pending: Option<(TaskPage, Timestamp)>,
    trace: SessionTrace,
}

/// One simulated worker, advanced one action at a time.
struct SimWorker<'a> {
    profile: &'a WorkerProfile,
    job_id: String,
    rng: ChaCha8Rng,
    active: Option<Active>,
    traces: Vec<SessionTrace>,
    /// Selection workers do a single session; agreement workers keep asking
    /// for batches until the job is finalized.
    single_session: bool,
    poll_secs: f64,
}

impl<'a> SimWorker<'a> {
    fn new(profile: &'a WorkerProfile, job_id: &str, seed: u64, single_session: bool) -> Self {
        Self {
            profile,
            job_id: job_id.to_string(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            active: None,
            traces: Vec::new(),
            single_session,
            poll_secs: 15.0,
        }
    }

    /// Performs the next action at the service clock's current time and
    /// returns when the worker wants to act again, or `None` when done.
    fn step(&mut self, svc: &TaskService, latent: &LatentQuality) -> Result<Option<Timestamp>, SimError> {
        let now = svc.now();
        let Some(active) = self.active.as_mut() else {
            return self.start_session(svc, latent, now);
        };
        if let Some((page, issued_at)) = active.pending.take() {
            let selected: Vec<String> = page
                .videos
                .iter()
                .filter(|v| active.intended.contains(&v.id))
                .map(|v| v.id.clone())
                .collect();
            let ack = svc.submit_page(
                &active.trace.session_id,
                &page.page_id,
                PageSubmission {
                    selected: selected.clone(),
                    client_timings: None,
                },
            )?;
            active.trace.pages.push(PageTrace {
                page_id: page.page_id,
                issued_at,
                submitted_at: now,
                offered: page.videos.len(),
                selected: ack.recorded,
                status: ack.status,
            });
        }
        match svc.next_page(&active.trace.session_id)? {
            PageResponse::Page(page) => {
                let dwell = self.profile.dwell.draw(&mut self.rng);
                active.pending = Some((page, now));
                Ok(Some(now + secs(dwell)))
            }
            PageResponse::Complete { .. } => {
                let mut done = self.active.take().expect("active session").trace;
                done.finished_at = now;
                self.traces.push(done);
                Ok((!self.single_session).then_some(now))
            }
        }
    }

    fn start_session(
        &mut self,
        svc: &TaskService,
        latent: &LatentQuality,
        now: Timestamp,
    ) -> Result<Option<Timestamp>, SimError> {
        let created = match svc.create_session(&self.profile.worker_id, &self.job_id) {
            Ok(c) => c,
            Err(ServiceError::Conflict(_)) => {
                if self.single_session || svc.job_status(&self.job_id)?.phase == Phase::Finalized {
                    return Ok(None);
                }
                return Ok(Some(now + secs(self.poll_secs)));
            }
            Err(e) => return Err(e.into()),
        };
        let s = &created.session;
        let k = selection_target(
            s.stage,
            s.assignment_len(),
            self.profile.selection_rate,
            created.landing.required_count,
        );
        let intended = choose_subset(s.queue(), k, self.profile.quality_bias, latent, &mut self.rng);
        self.active = Some(Active {
            intended: intended.into_iter().collect(),
            pending: None,
            trace: SessionTrace {
                session_id: s.session_id.clone(),
                worker_id: s.worker_id.clone(),
                stage: s.stage,
                batch: s.batch,
                intended: k,
                started_at: now,
                finished_at: now,
                pages: Vec::new(),
            },
        });
        Ok(Some(now))
    }
}

fn secs(s: f64) -> chrono::Duration {
    chrono::Duration::milliseconds((s * 1000.0).round() as i64)
}

/// SplitMix64 step; derives independent seeds from a base seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plays one session to completion on its own, advancing `clock` by each
/// page's dwell time.
pub fn simulate_session(
    svc: &TaskService,
    clock: &ManualClock,
    profile: &WorkerProfile,
    job_id: &str,
    latent: &LatentQuality,
    seed: u64,
) -> Result<SessionTrace, SimError> {
    let mut w = SimWorker::new(profile, job_id, seed, true);
    let mut wake = w.start_session(svc, latent, svc.now())?;
    if w.active.is_none() {
        return Err(SimError::Invalid(format!(
            "worker {} cannot join job {job_id}",
            profile.worker_id
        )));
    }
    while let Some(t) = wake {
        if t > svc.now() {
            clock.set(t);
        }
        wake = w.step(svc, latent)?;
    }
    Ok(w.traces.pop().expect("session finished"))
}

/// Pairwise intersection of two agreement workers in one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverlap {
    pub batch: usize,
    pub workers: (String, String),
    pub sizes: (usize, usize),
    pub intersection: usize,
    /// `intersection` over the mean of the two selection sizes.
    pub fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndToEnd {
    pub output: CompilationOutput,
    pub events: Vec<Event>,
    pub sessions: Vec<SessionTrace>,
    /// Per-worker active minutes per stage.
    pub timing: StageTiming,
    pub overlaps: Vec<PairOverlap>,
    pub selection_workers: Vec<String>,
    pub agreement_workers: Vec<String>,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
}

const MAX_STEPS: usize = 2_000_000;

/// Runs a whole job against an in-process task service on a simulated
/// clock. The R1 output is every video in `latent`. The first
/// `ceil(n / r2_pool_per_worker)` profiles do selection; the rest do
/// agreement. `seed` drives the R2 shuffle, batch shuffles and all worker
/// randomness, so equal inputs give identical event logs.
pub fn run_end_to_end(
    cfg: &JobConfig,
    profiles: &[WorkerProfile],
    latent: &LatentQuality,
    seed: u64,
) -> Result<EndToEnd, SimError> {
    let mut cfg = cfg.clone();
    cfg.corpus = None;
    cfg.params.random_seed = seed;
    let job_id = cfg.job_id.get_or_insert_with(|| "sim".into()).clone();
    cfg.validate().map_err(|e| SimError::Invalid(e.to_string()))?;
    let params = cfg.params.clone();
    if latent.is_empty() {
        return Err(SimError::Invalid("latent quality covers no videos".into()));
    }
    let n_sel = r2_worker_count(latent.len(), params.r2_pool_per_worker);
    if profiles.len() < n_sel + params.r3_workers {
        return Err(SimError::Invalid(format!(
            "{} videos need {n_sel} selection and {} agreement workers; got {} profiles",
            latent.len(),
            params.r3_workers,
            profiles.len()
        )));
    }
    let mut ids = BTreeSet::new();
    for p in profiles {
        p.validate(params.page_time_limit)?;
        if !ids.insert(p.worker_id.as_str()) {
            return Err(SimError::Invalid(format!("duplicate worker_id {}", p.worker_id)));
        }
    }

    let start = chrono::Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
    let clock = Arc::new(ManualClock::new(start));
    let svc = TaskService::new(ServiceConfig::default(), clock.clone());
    svc.submit_job(cfg)?;
    svc.load_r1_result(&job_id, latent.ids())?;

    let mut workers: Vec<SimWorker> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| SimWorker::new(p, &job_id, derive_seed(seed, i as u64), i < n_sel))
        .collect();
    let mut queue: BinaryHeap<Reverse<(Timestamp, usize)>> = (0..workers.len()).map(|i| Reverse((start, i))).collect();
    let mut steps = 0;
    while let Some(Reverse((t, i))) = queue.pop() {
        steps += 1;
        if steps > MAX_STEPS {
            return Err(SimError::Stalled(format!("no completion after {MAX_STEPS} steps")));
        }
        if t > svc.now() {
            clock.set(t);
        }
        if let Some(next) = workers[i].step(&svc, latent)? {
            queue.push(Reverse((next, i)));
        }
    }

    let job = svc.job_snapshot(&job_id)?;
    let output = job
        .output()
        .cloned()
        .ok_or_else(|| SimError::Stalled(format!("job ended in phase {:?}", job.phase())))?;
    let finished_at = job.events().last().map(|e| e.at).unwrap_or(start);

    let mut timing = StageTiming {
        job_id: job_id.clone(),
        durations: Vec::new(),
        videos: Some(output.videos.len()),
    };
    let mut sessions = Vec::new();
    for (i, w) in workers.into_iter().enumerate() {
        let stage = if i < n_sel { Stage::Selection } else { Stage::Agreement };
        let minutes: f64 = w.traces.iter().map(SessionTrace::minutes).sum();
        if !w.traces.is_empty() {
            timing.push(&w.profile.worker_id, stage, minutes);
        }
        sessions.extend(w.traces);
    }

    let st = job.state();
    let mut overlaps = Vec::new();
    for (b, batch) in st.r3_batches.iter().enumerate() {
        let sets: Vec<(String, BTreeSet<&str>)> = batch
            .slots
            .iter()
            .map(|s| {
                (
                    s.worker.clone().unwrap_or_default(),
                    s.selected.iter().map(|p| p.video.as_str()).collect(),
                )
            })
            .collect();
        for x in 0..sets.len() {
            for y in x + 1..sets.len() {
                let inter = sets[x].1.intersection(&sets[y].1).count();
                let (a, b2) = (sets[x].1.len(), sets[y].1.len());
                overlaps.push(PairOverlap {
                    batch: b,
                    workers: (sets[x].0.clone(), sets[y].0.clone()),
                    sizes: (a, b2),
                    intersection: inter,
                    fraction: if a + b2 == 0 { 0.0 } else { 2.0 * inter as f64 / (a + b2) as f64 },
                });
            }
        }
    }

    Ok(EndToEnd {
        output,
        events: job.events().to_vec(),
        sessions,
        timing,
        overlaps,
        selection_workers: profiles[..n_sel].iter().map(|p| p.worker_id.clone()).collect(),
        agreement_workers: profiles[n_sel..].iter().map(|p| p.worker_id.clone()).collect(),
        started_at: start,
        finished_at,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub output_size: usize,
    pub consent_set_size: usize,
    pub under_supplied: bool,
    pub overlaps: Vec<PairOverlap>,
    pub timing: StageTiming,
    pub sifter_minutes: Option<f64>,
    pub makespan_minutes: f64,
    pub events: usize,
}

impl TrialSummary {
    fn from_run(trial: usize, seed: u64, run: &EndToEnd) -> Self {
        Self {
            trial,
            seed,
            output_size: run.output.videos.len(),
            consent_set_size: run.output.consent_set_size,
            under_supplied: run.output.under_supplied,
            overlaps: run.overlaps.clone(),
            timing: run.timing.clone(),
            sifter_minutes: eval::sifter_time(&run.timing).ok(),
            makespan_minutes: (run.finished_at - run.started_at).num_milliseconds() as f64 / 60_000.0,
            events: run.events.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub output_size: MeanSd,
    pub under_supplied: usize,
    pub overlap_fraction: Option<MeanSd>,
    pub sifter_minutes: Option<MeanSd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub seed: u64,
    pub trials: usize,
    pub videos: usize,
    pub profiles: Vec<WorkerProfile>,
    pub summary: ReportSummary,
    pub per_trial: Vec<TrialSummary>,
}

/// `trials` independent end-to-end runs over `videos` synthetic videos with
/// fresh uniform latent quality per trial.
pub fn run_trials(
    cfg: &JobConfig,
    profiles: &[WorkerProfile],
    videos: usize,
    seed: u64,
    trials: usize,
    exec: Execution,
) -> Result<SimReport, SimError> {
    if trials == 0 {
        return Err(SimError::Invalid("trials must be at least 1".into()));
    }
    let ids = video_ids(videos);
    let per_trial = exec
        .map_range(trials, |t| {
            let s = derive_seed(seed, t as u64);
            let latent = LatentQuality::uniform(&ids, s);
            run_end_to_end(cfg, profiles, &latent, s).map(|run| TrialSummary::from_run(t, s, &run))
        })
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let sizes: Vec<f64> = per_trial.iter().map(|t| t.output_size as f64).collect();
    let fractions: Vec<f64> = per_trial
        .iter()
        .flat_map(|t| t.overlaps.iter().map(|o| o.fraction))
        .collect();
    let sifter: Vec<f64> = per_trial.iter().filter_map(|t| t.sifter_minutes).collect();
    Ok(SimReport {
        seed,
        trials,
        videos,
        profiles: profiles.to_vec(),
        summary: ReportSummary {
            output_size: eval::mean_sd(&sizes).expect("trials >= 1"),
            under_supplied: per_trial.iter().filter(|t| t.under_supplied).count(),
            overlap_fraction: eval::mean_sd(&fractions),
            sifter_minutes: eval::mean_sd(&sifter),
        },
        per_trial,
    })
}

/// Mean pairwise overlap of two independent workers picking `k` of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub q: f64,
    pub n: usize,
    pub k: usize,
    pub trials: usize,
    pub mean_overlap: f64,
    pub sd: f64,
    /// `mean_overlap / k`.
    pub fraction: f64,
}

/// Sizes of the common subset of `workers` independent `k`-of-`n` picks,
/// one per trial. Each trial draws fresh latent quality.
pub fn intersection_sizes(
    q: f64,
    n: usize,
    k: usize,
    workers: usize,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Vec<usize> {
    let ids = video_ids(n);
    exec.map_range(trials, |t| {
        let ts = derive_seed(seed, t as u64);
        let latent = LatentQuality::uniform(&ids, ts);
        let mut common: Option<BTreeSet<String>> = None;
        for w in 0..workers {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ts, w as u64 + 1));
            let pick: BTreeSet<String> = choose_subset(&ids, k, q, &latent, &mut rng).into_iter().collect();
            common = Some(match common {
                None => pick,
                Some(c) => c.intersection(&pick).cloned().collect(),
            });
        }
        common.map_or(0, |c| c.len())
    })
}

pub fn pairwise_overlap(q: f64, n: usize, k: usize, trials: usize, seed: u64, exec: Execution) -> OverlapStats {
    let sizes: Vec<f64> = intersection_sizes(q, n, k, 2, trials, seed, exec)
        .into_iter()
        .map(|s| s as f64)
        .collect();
    let ms = eval::mean_sd(&sizes).unwrap_or(MeanSd {
        mean: 0.0,
        sd: None,
        n: 0,
    });
    OverlapStats {
        q,
        n,
        k,
        trials,
        mean_overlap: ms.mean,
        sd: ms.sd.unwrap_or(0.0),
        fraction: if k == 0 { 0.0 } else { ms.mean / k as f64 },
    }
}

pub fn calibration_sweep(qs: &[f64], n: usize, k: usize, trials: usize, seed: u64, exec: Execution) -> Vec<OverlapStats> {
    qs.iter().map(|&q| pairwise_overlap(q, n, k, trials, seed, exec)).collect()
}

/// The swept `q` whose overlap fraction lies in `[lo, hi]`, closest to the
/// band's midpoint.
pub fn calibrate(sweep: &[OverlapStats], lo: f64, hi: f64) -> Option<f64> {
    let mid = (lo + hi) / 2.0;
    sweep
        .iter()
        .filter(|s| (lo..=hi).contains(&s.fraction))
        .min_by(|a, b| (a.fraction - mid).abs().total_cmp(&(b.fraction - mid).abs()))
        .map(|s| s.q)
}
