//! R1: automated quality filters.
//!
//! Four filters run in a fixed order, cheapest first:
//!
//! 1. duration: drop clips shorter than `min_duration`;
//! 2. session dedup: one video per uploader per `dedup_window` seconds;
//! 3. motion: drop clips whose sampled center crops barely change;
//! 4. aesthetics: drop clips whose mean colorfulness is below threshold.
//!
//! The first filter that fires decides the removal reason. Frames are only
//! loaded for videos that survive the two metadata filters.

mod dedup;
pub mod metrics;

use std::collections::BTreeMap;
use std::io::Write;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{FrameLoader, FrameSequence, VideoAsset};
use crate::exec::Execution;

pub use dedup::dedup_sessions;
pub use metrics::{center_crop, colorfulness, sample_indices};

/// Colorfulness cut-off used when no reference set is available.
pub const DEFAULT_COLORFULNESS_THRESHOLD: f64 = 15.0;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("invalid R1 config: {0}")]
    Config(String),
    #[error("expected {expected} sampled frames, got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("sampled frames differ in size: {0:?} vs {1:?}")]
    DimensionMismatch((u32, u32), (u32, u32)),
    #[error("frame sequence is empty")]
    EmptySequence,
    #[error("reference set is empty")]
    EmptyReference,
    #[error("percentile {0} outside 0..=100")]
    Percentile(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct R1Config {
    /// Seconds; strictly shorter clips are removed.
    pub min_duration: f64,
    pub sample_count: usize,
    /// Side of the square center crop, in pixels.
    pub crop_size: u32,
    pub motion_diff_threshold: f64,
    /// How many consecutive-pair diffs must fall below the threshold for a
    /// clip to count as static.
    pub motion_low_diff_count: usize,
    pub colorfulness_threshold: f64,
    /// Seconds after a kept post during which the same uploader's posts are dropped.
    pub dedup_window: f64,
}

impl Default for R1Config {
    fn default() -> Self {
        Self {
            min_duration: 3.0,
            sample_count: 5,
            crop_size: 200,
            motion_diff_threshold: 1000.0,
            motion_low_diff_count: 4,
            colorfulness_threshold: DEFAULT_COLORFULNESS_THRESHOLD,
            dedup_window: 120.0,
        }
    }
}

impl R1Config {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: &str| Err(FilterError::Config(m.to_string()));
        if self.sample_count < 2 {
            return bad("sample_count must be at least 2");
        }
        if self.crop_size == 0 {
            return bad("crop_size must be positive");
        }
        for (name, v) in [
            ("min_duration", self.min_duration),
            ("motion_diff_threshold", self.motion_diff_threshold),
            ("colorfulness_threshold", self.colorfulness_threshold),
            ("dedup_window", self.dedup_window),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(FilterError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.motion_low_diff_count > self.sample_count - 1 {
            return bad("motion_low_diff_count cannot exceed sample_count - 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    TooShort,
    StaticContent,
    LowColorfulness,
    SameSessionDuplicate,
    Unreadable,
    Kept,
}

pub type Diagnostics = BTreeMap<String, f64>;

/// Outcome of R1 for one video. `kept` is true exactly when `reason` is
/// [`RemovalReason::Kept`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    #[serde(rename = "id")]
    pub video_id: String,
    pub kept: bool,
    pub reason: RemovalReason,
    pub diagnostics: Diagnostics,
}

impl FilterVerdict {
    pub fn kept(id: &str, diagnostics: Diagnostics) -> Self {
        Self {
            video_id: id.to_string(),
            kept: true,
            reason: RemovalReason::Kept,
            diagnostics,
        }
    }

    pub fn removed(id: &str, reason: RemovalReason, diagnostics: Diagnostics) -> Self {
        debug_assert_ne!(reason, RemovalReason::Kept);
        Self {
            video_id: id.to_string(),
            kept: false,
            reason,
            diagnostics,
        }
    }
}

pub fn filter_duration(asset: &VideoAsset, cfg: &R1Config) -> FilterVerdict {
    let diag = Diagnostics::from([("duration_s".to_string(), asset.duration)]);
    if asset.duration < cfg.min_duration {
        FilterVerdict::removed(&asset.id, RemovalReason::TooShort, diag)
    } else {
        FilterVerdict::kept(&asset.id, diag)
    }
}

pub fn sample_frames<'a>(seq: &'a FrameSequence, cfg: &R1Config) -> Result<Vec<&'a RgbImage>, FilterError> {
    if seq.frame_count() == 0 {
        return Err(FilterError::EmptySequence);
    }
    Ok(sample_indices(seq.frame_count(), cfg.sample_count)
        .into_iter()
        .map(|i| &seq.frames()[i])
        .collect())
}

fn check_sampled(frames: &[&RgbImage], cfg: &R1Config) -> Result<(), FilterError> {
    if frames.len() != cfg.sample_count {
        return Err(FilterError::FrameCount {
            expected: cfg.sample_count,
            got: frames.len(),
        });
    }
    let dims = frames[0].dimensions();
    if let Some(f) = frames.iter().find(|f| f.dimensions() != dims) {
        return Err(FilterError::DimensionMismatch(dims, f.dimensions()));
    }
    Ok(())
}

/// Static-content check over sampled frames.
///
/// Each frame is center-cropped and converted to luma; the sum of absolute
/// differences is taken for every consecutive pair. The clip is removed when
/// at least `motion_low_diff_count` pairs fall below `motion_diff_threshold`.
pub fn motion_filter(id: &str, frames: &[&RgbImage], cfg: &R1Config) -> Result<FilterVerdict, FilterError> {
    check_sampled(frames, cfg)?;
    let crops: Vec<RgbImage> = frames.iter().map(|f| center_crop(f, cfg.crop_size)).collect();
    Ok(motion_on_crops(id, &crops, cfg))
}

fn motion_on_crops(id: &str, crops: &[RgbImage], cfg: &R1Config) -> FilterVerdict {
    let grays: Vec<_> = crops.iter().map(metrics::to_gray).collect();
    let diffs: Vec<u64> = grays.windows(2).map(|w| metrics::abs_diff_sum(&w[0], &w[1])).collect();
    let low = diffs.iter().filter(|&&d| (d as f64) < cfg.motion_diff_threshold).count();
    let mut diag: Diagnostics = diffs
        .iter()
        .enumerate()
        .map(|(i, &d)| (format!("motion_diff_{i}"), d as f64))
        .collect();
    diag.insert("motion_low_pairs".into(), low as f64);
    if low >= cfg.motion_low_diff_count {
        FilterVerdict::removed(id, RemovalReason::StaticContent, diag)
    } else {
        FilterVerdict::kept(id, diag)
    }
}

/// Mean colorfulness of the sampled frames' center crops.
pub fn mean_colorfulness(frames: &[&RgbImage], crop_size: u32) -> (f64, Vec<f64>) {
    let crops: Vec<RgbImage> = frames.iter().map(|f| center_crop(f, crop_size)).collect();
    mean_of_crops(&crops)
}

fn mean_of_crops(crops: &[RgbImage]) -> (f64, Vec<f64>) {
    let scores: Vec<f64> = crops.iter().map(colorfulness).collect();
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    (mean, scores)
}

pub fn aesthetics_filter(id: &str, frames: &[&RgbImage], cfg: &R1Config) -> Result<FilterVerdict, FilterError> {
    check_sampled(frames, cfg)?;
    let crops: Vec<RgbImage> = frames.iter().map(|f| center_crop(f, cfg.crop_size)).collect();
    Ok(aesthetics_on_crops(id, &crops, cfg))
}

fn aesthetics_on_crops(id: &str, crops: &[RgbImage], cfg: &R1Config) -> FilterVerdict {
    let (mean, scores) = mean_of_crops(crops);
    let mut diag: Diagnostics = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (format!("colorfulness_{i}"), s))
        .collect();
    diag.insert("colorfulness_mean".into(), mean);
    if mean < cfg.colorfulness_threshold {
        FilterVerdict::removed(id, RemovalReason::LowColorfulness, diag)
    } else {
        FilterVerdict::kept(id, diag)
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p/100 · n)` (at least 1)
/// of the ascending scores.
pub fn nearest_rank_percentile(scores: &[f64], percentile: f64) -> Result<f64, FilterError> {
    if scores.is_empty() {
        return Err(FilterError::EmptyReference);
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(FilterError::Percentile(percentile));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Colorfulness threshold learned from videos known to be acceptable:
/// the given percentile of their per-video mean colorfulness.
pub fn derive_colorfulness_threshold(
    reference: &[FrameSequence],
    percentile: f64,
    cfg: &R1Config,
) -> Result<f64, FilterError> {
    if reference.is_empty() {
        return Err(FilterError::EmptyReference);
    }
    let mut means = Vec::with_capacity(reference.len());
    for seq in reference {
        let frames = sample_frames(seq, cfg)?;
        means.push(mean_colorfulness(&frames, cfg.crop_size).0);
    }
    nearest_rank_percentile(&means, percentile)
}

/// Motion then aesthetics on one decoded video.
fn frame_filters(id: &str, seq: &FrameSequence, cfg: &R1Config) -> FilterVerdict {
    let frames = match sample_frames(seq, cfg) {
        Ok(f) => f,
        Err(e) => return unreadable(id, &e.to_string()),
    };
    if let Err(e) = check_sampled(&frames, cfg) {
        return unreadable(id, &e.to_string());
    }
    // both filters look at the same crops
    let crops: Vec<RgbImage> = frames.iter().map(|f| center_crop(f, cfg.crop_size)).collect();
    let motion = motion_on_crops(id, &crops, cfg);
    if !motion.kept {
        return motion;
    }
    let mut v = aesthetics_on_crops(id, &crops, cfg);
    v.diagnostics.extend(motion.diagnostics);
    v
}

fn unreadable(id: &str, message: &str) -> FilterVerdict {
    tracing::debug!(video = id, %message, "frames unreadable");
    FilterVerdict::removed(id, RemovalReason::Unreadable, Diagnostics::new())
}

#[derive(Debug, Clone, Default)]
pub struct R1Outcome {
    /// Surviving assets, in input order.
    pub kept: Vec<VideoAsset>,
    /// One verdict per input, in input order.
    pub verdicts: Vec<FilterVerdict>,
}

impl R1Outcome {
    pub fn kept_ids(&self) -> Vec<String> {
        self.kept.iter().map(|a| a.id.clone()).collect()
    }

    pub fn count(&self, reason: RemovalReason) -> usize {
        self.verdicts.iter().filter(|v| v.reason == reason).count()
    }
}

/// Runs all four filters over `candidates`.
///
/// Frame decoding and the pixel filters run per video under `exec`; results
/// are identical for sequential and parallel execution.
pub fn run_r1(
    candidates: &[VideoAsset],
    cfg: &R1Config,
    loader: &dyn FrameLoader,
    exec: Execution,
) -> Result<R1Outcome, FilterError> {
    cfg.validate()?;
    let mut verdicts: Vec<Option<FilterVerdict>> = vec![None; candidates.len()];

    let mut long_enough = Vec::with_capacity(candidates.len());
    let mut long_idx = Vec::with_capacity(candidates.len());
    for (i, a) in candidates.iter().enumerate() {
        let v = filter_duration(a, cfg);
        if v.kept {
            long_enough.push(a.clone());
            long_idx.push(i);
        } else {
            verdicts[i] = Some(v);
        }
    }

    let (_, dedup_verdicts) = dedup_sessions(&long_enough, cfg);
    let mut survivors = Vec::with_capacity(long_enough.len());
    for (v, &i) in dedup_verdicts.into_iter().zip(&long_idx) {
        if v.kept {
            survivors.push(i);
        } else {
            verdicts[i] = Some(v);
        }
    }

    let frame_verdicts = exec.map(&survivors, |&i| {
        let asset = &candidates[i];
        let mut v = match loader.load(asset) {
            Ok(seq) => frame_filters(&asset.id, &seq, cfg),
            Err(e) => unreadable(&asset.id, &e.message),
        };
        v.diagnostics.insert("duration_s".into(), asset.duration);
        v
    });
    for (v, &i) in frame_verdicts.into_iter().zip(&survivors) {
        verdicts[i] = Some(v);
    }

    let verdicts: Vec<FilterVerdict> = verdicts
        .into_iter()
        .map(|v| v.expect("every candidate receives a verdict"))
        .collect();
    let kept = candidates
        .iter()
        .zip(&verdicts)
        .filter(|(_, v)| v.kept)
        .map(|(a, _)| a.clone())
        .collect();
    Ok(R1Outcome { kept, verdicts })
}

/// Writes verdicts as JSON Lines (`id`, `kept`, `reason`, `diagnostics`).
pub fn write_verdicts<W: Write>(mut out: W, verdicts: &[FilterVerdict]) -> std::io::Result<()> {
    for v in verdicts {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
