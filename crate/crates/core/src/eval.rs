//! Timing and rating statistics used to compare Sifter runs with manual
//! curation.
//!
//! Times are in minutes throughout.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::pipeline::{Stage, Timestamp};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Validation(String),
}

fn invalid(msg: impl Into<String>) -> EvalError {
    EvalError::Validation(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerDuration {
    pub worker: String,
    pub stage: Stage,
    pub minutes: f64,
}

/// Per-worker stage durations of one job.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTiming {
    pub job_id: String,
    pub durations: Vec<WorkerDuration>,
    /// Size of the produced compilation, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos: Option<usize>,
}

impl StageTiming {
    pub fn push(&mut self, worker: impl Into<String>, stage: Stage, minutes: f64) {
        self.durations.push(WorkerDuration {
            worker: worker.into(),
            stage,
            minutes,
        });
    }

    fn stage_max(&self, stage: Stage) -> Option<f64> {
        self.durations
            .iter()
            .filter(|d| d.stage == stage)
            .map(|d| d.minutes)
            .fold(None, |acc, m| Some(acc.map_or(m, |a: f64| a.max(m))))
    }
}

/// Slowest selection worker plus slowest agreement worker.
pub fn sifter_time(t: &StageTiming) -> Result<f64, EvalError> {
    if let Some(d) = t.durations.iter().find(|d| !d.minutes.is_finite() || d.minutes < 0.0) {
        return Err(invalid(format!("duration of {} is {}", d.worker, d.minutes)));
    }
    let sel = t
        .stage_max(Stage::Selection)
        .ok_or_else(|| invalid(format!("job {} has no selection timings", t.job_id)))?;
    let agr = t
        .stage_max(Stage::Agreement)
        .ok_or_else(|| invalid(format!("job {} has no agreement timings", t.job_id)))?;
    Ok(sel + agr)
}

/// One search query issued by a curator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEvent {
    pub curator_id: String,
    #[serde(deserialize_with = "de_instant")]
    pub at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

fn de_instant<'de, D: Deserializer<'de>>(d: D) -> Result<Timestamp, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Text(String),
    }
    let secs = match Raw::deserialize(d)? {
        Raw::Int(v) => v,
        Raw::Text(s) => crate::corpus::parse_timestamp(&s).map_err(serde::de::Error::custom)?,
    };
    chrono::DateTime::from_timestamp(secs, 0).ok_or_else(|| serde::de::Error::custom("timestamp out of range"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySession {
    pub curator_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
    pub queries: usize,
    pub minutes: f64,
}

/// Splits each curator's queries into sessions. A gap strictly longer than
/// `timeout_minutes` starts a new session; a session lasts from its first to
/// its last query.
pub fn segment_sessions(events: &[QueryEvent], timeout_minutes: f64) -> Vec<QuerySession> {
    let mut by_curator: BTreeMap<&str, Vec<Timestamp>> = BTreeMap::new();
    for e in events {
        by_curator.entry(&e.curator_id).or_default().push(e.at);
    }
    let mut out = Vec::new();
    for (curator, mut times) in by_curator {
        times.sort();
        let mut start = times[0];
        let mut last = times[0];
        let mut queries = 1;
        let close = |start: Timestamp, end: Timestamp, queries: usize| QuerySession {
            curator_id: curator.to_string(),
            start,
            end,
            queries,
            minutes: minutes_between(start, end),
        };
        for &t in &times[1..] {
            if minutes_between(last, t) > timeout_minutes {
                out.push(close(start, last, queries));
                start = t;
                queries = 0;
            }
            last = t;
            queries += 1;
        }
        out.push(close(start, last, queries));
    }
    out
}

fn minutes_between(a: Timestamp, b: Timestamp) -> f64 {
    (b - a).num_milliseconds() as f64 / 60_000.0
}

pub fn total_minutes(sessions: &[QuerySession]) -> f64 {
    sessions.iter().map(|s| s.minutes).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    /// Sample standard deviation; `None` for a single observation.
    pub sd: Option<f64>,
    pub n: usize,
}

pub fn mean_sd(xs: &[f64]) -> Option<MeanSd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let sd = (n > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
    Some(MeanSd { mean, sd, n })
}

/// Mean of per-job minutes-per-video ratios (not the ratio of totals).
pub fn per_video_time(per_job: &[(f64, usize)]) -> Result<MeanSd, EvalError> {
    if per_job.iter().any(|&(_, c)| c == 0) {
        return Err(invalid("job with zero videos"));
    }
    let ratios: Vec<f64> = per_job.iter().map(|&(m, c)| m / c as f64).collect();
    mean_sd(&ratios).ok_or_else(|| invalid("no jobs"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Sifter,
    Curator,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSample {
    pub rater_id: String,
    pub condition: Condition,
    pub video_id: String,
    pub score: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
}

impl RatingSample {
    pub fn validate(&self) -> Result<(), EvalError> {
        if (1..=5).contains(&self.score) {
            Ok(())
        } else {
            Err(invalid(format!(
                "score {} for {} by {} is outside 1..=5",
                self.score, self.video_id, self.rater_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeScore {
    pub rater_id: String,
    pub video_id: String,
    pub relative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeRatings {
    pub scores: Vec<RelativeScore>,
    pub mean: f64,
}

/// Subtracts each rater's mean baseline score from their condition scores.
pub fn relative_ratings(condition: &[RatingSample], baseline: &[RatingSample]) -> Result<RelativeRatings, EvalError> {
    if baseline.is_empty() {
        return Err(invalid("baseline ratings are empty"));
    }
    for s in condition.iter().chain(baseline) {
        s.validate()?;
    }
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for s in baseline {
        let e = sums.entry(&s.rater_id).or_default();
        e.0 += f64::from(s.score);
        e.1 += 1;
    }
    let scores = condition
        .iter()
        .map(|s| {
            let (sum, n) = sums
                .get(s.rater_id.as_str())
                .ok_or_else(|| invalid(format!("rater {} has no baseline ratings", s.rater_id)))?;
            Ok(RelativeScore {
                rater_id: s.rater_id.clone(),
                video_id: s.video_id.clone(),
                relative: f64::from(s.score) - sum / *n as f64,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let mean = if scores.is_empty() {
        0.0
    } else {
        scores.iter().map(|s| s.relative).sum::<f64>() / scores.len() as f64
    };
    Ok(RelativeRatings { scores, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-tailed.
    pub p: f64,
}

/// Two-tailed paired-samples t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(invalid(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite sample"));
    }
    let df = n - 1;
    if d.iter().all(|&x| x == 0.0) {
        return Ok(TTest { t: 0.0, df, p: 1.0 });
    }
    let ms = mean_sd(&d).expect("n >= 2");
    let sd = ms.sd.expect("n >= 2");
    if sd == 0.0 {
        return Err(invalid("differences are constant and non-zero; t is undefined"));
    }
    let t = ms.mean / (sd / (n as f64).sqrt());
    Ok(TTest { t, df, p: t_two_tailed(t, df as f64) })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn t_two_tailed(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn bonferroni_significant(p: f64, m: usize, alpha: f64) -> bool {
    p < alpha / m.max(1) as f64
}

/// Per-job comparison of Sifter and curator ratings, paired by rater: each
/// rater contributes their mean relative score under both conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingComparison {
    pub job_id: String,
    pub sifter_mean: f64,
    pub curator_mean: f64,
    pub raters: usize,
    pub test: Option<TTest>,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn compare_ratings(samples: &[RatingSample], m: usize, alpha: f64) -> Result<Vec<RatingComparison>, EvalError> {
    let mut jobs: BTreeMap<String, Vec<&RatingSample>> = BTreeMap::new();
    for s in samples {
        jobs.entry(s.job_id.clone().unwrap_or_else(|| "all".into())).or_default().push(s);
    }
    let mut out = Vec::new();
    for (job_id, rows) in jobs {
        let pick = |c: Condition| rows.iter().filter(|s| s.condition == c).map(|s| (*s).clone()).collect::<Vec<_>>();
        let base = pick(Condition::Baseline);
        let sifter = relative_ratings(&pick(Condition::Sifter), &base)?;
        let curator = relative_ratings(&pick(Condition::Curator), &base)?;
        let per_rater = |r: &RelativeRatings| {
            let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
            for s in &r.scores {
                let e = acc.entry(s.rater_id.clone()).or_default();
                e.0 += s.relative;
                e.1 += 1;
            }
            acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect::<BTreeMap<_, _>>()
        };
        let (ps, pc) = (per_rater(&sifter), per_rater(&curator));
        let (a, b): (Vec<f64>, Vec<f64>) = ps.iter().filter_map(|(r, x)| pc.get(r).map(|y| (*x, *y))).unzip();
        let (test, note) = match paired_t_test(&a, &b) {
            Ok(t) => (Some(t), None),
            Err(e) => (None, Some(e.to_string())),
        };
        out.push(RatingComparison {
            job_id,
            sifter_mean: sifter.mean,
            curator_mean: curator.mean,
            raters: a.len(),
            significant: test.is_some_and(|t| bonferroni_significant(t.p, m, alpha)),
            test,
            note,
        });
    }
    Ok(out)
}

/// Reads `rater_id,condition,video_id,score[,job_id]` rows with a header.
pub fn read_ratings_csv<R: std::io::Read>(input: R) -> Result<Vec<RatingSample>, EvalError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<RatingSample>().enumerate() {
        let s = row.map_err(|e| invalid(format!("ratings row {}: {e}", i + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobTime {
    pub job_id: String,
    pub minutes: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub videos: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSummary {
    pub per_job: Vec<JobTime>,
    pub minutes: Option<MeanSd>,
    /// Mean of per-job minutes-per-video over jobs with a known size.
    pub per_video: Option<MeanSd>,
}

impl TimeSummary {
    fn from_jobs(per_job: Vec<JobTime>) -> Result<Self, EvalError> {
        let minutes = mean_sd(&per_job.iter().map(|j| j.minutes).collect::<Vec<_>>());
        let sized: Vec<(f64, usize)> = per_job.iter().filter_map(|j| j.videos.map(|v| (j.minutes, v))).collect();
        let per_video = if sized.is_empty() { None } else { Some(per_video_time(&sized)?) };
        Ok(Self {
            per_job,
            minutes,
            per_video,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratorTime {
    #[serde(flatten)]
    pub summary: TimeSummary,
    pub sessions: Vec<QuerySession>,
    /// Minutes per curator per job.
    pub per_curator: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub comparisons: usize,
    pub alpha: f64,
    /// Bonferroni-corrected significance threshold.
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sifter: Option<TimeSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curator: Option<CuratorTime>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratings: Vec<RatingComparison>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub timings: Option<Vec<StageTiming>>,
    pub queries: Option<Vec<QueryEvent>>,
    pub ratings: Option<Vec<RatingSample>>,
}

/// Assembles every available comparison. Query events without a job id are
/// pooled under `"all"`; the curator time of a job is the sum of all its
/// sessions across curators.
pub fn build_report(
    inputs: &EvalInputs,
    m: usize,
    alpha: f64,
    timeout_minutes: f64,
) -> Result<EvalReport, EvalError> {
    if m == 0 {
        return Err(invalid("m must be at least 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let sifter = match &inputs.timings {
        Some(ts) => {
            let per_job = ts
                .iter()
                .map(|t| {
                    Ok(JobTime {
                        job_id: t.job_id.clone(),
                        minutes: sifter_time(t)?,
                        videos: t.videos,
                    })
                })
                .collect::<Result<Vec<_>, EvalError>>()?;
            Some(TimeSummary::from_jobs(per_job)?)
        }
        None => None,
    };
    let curator = match &inputs.queries {
        Some(qs) => {
            let mut by_job: BTreeMap<String, Vec<QueryEvent>> = BTreeMap::new();
            for q in qs {
                by_job.entry(q.job_id.clone().unwrap_or_else(|| "all".into())).or_default().push(q.clone());
            }
            let mut sessions = Vec::new();
            let mut per_curator: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
            let mut per_job = Vec::new();
            for (job, events) in by_job {
                let s = segment_sessions(&events, timeout_minutes);
                for x in &s {
                    *per_curator.entry(x.curator_id.clone()).or_default().entry(job.clone()).or_default() += x.minutes;
                }
                per_job.push(JobTime {
                    job_id: job,
                    minutes: total_minutes(&s),
                    videos: None,
                });
                sessions.extend(s);
            }
            Some(CuratorTime {
                summary: TimeSummary::from_jobs(per_job)?,
                sessions,
                per_curator,
            })
        }
        None => None,
    };
    let ratings = match &inputs.ratings {
        Some(rs) => compare_ratings(rs, m, alpha)?,
        None => Vec::new(),
    };
    Ok(EvalReport {
        comparisons: m,
        alpha,
        threshold: alpha / m as f64,
        sifter,
        curator,
        ratings,
    })
}
