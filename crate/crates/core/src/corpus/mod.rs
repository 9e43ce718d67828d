//! Video metadata corpus: JSON Lines ingestion, keyword search and frame access.

mod frames;
mod search;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use chrono::DateTime;
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub use frames::{load_frames, FrameLoader, FrameSequence, FrameSource, FrameSourceError, FsFrameLoader, MemoryFrameLoader};
pub use search::{search_by_keywords, tokenize};

pub type VideoId = String;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate video id {0:?}")]
    DuplicateId(String),
    #[error("invalid keywords: {0}")]
    InvalidKeywords(String),
}

/// One short video's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAsset {
    pub id: VideoId,
    pub uploader_id: String,
    /// Epoch seconds. Manifests may give either an integer or an ISO-8601 string.
    #[serde(deserialize_with = "de_timestamp")]
    pub posted_at: i64,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    #[serde(default)]
    pub caption: String,
    /// Frame locator: a directory of image files, or `cmd:` followed by a
    /// decoder command line (see [`FrameSource`]).
    #[serde(rename = "frames")]
    pub frame_source_ref: String,
}

fn de_timestamp<'de, D: Deserializer<'de>>(d: D) -> Result<i64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Int(i64),
        Float(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Int(v) => Ok(v),
        Raw::Float(v) if v.is_finite() && v.fract() == 0.0 => Ok(v as i64),
        Raw::Float(v) => Err(serde::de::Error::custom(format!(
            "posted_at must be whole seconds, got {v}"
        ))),
        Raw::Text(s) => parse_timestamp(&s).map_err(serde::de::Error::custom),
    }
}

/// Parses RFC 3339 / ISO-8601 timestamps or a decimal epoch-seconds string.
pub fn parse_timestamp(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Ok(v);
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.timestamp())
        .or_else(|_| {
            chrono::NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S").map(|t| t.and_utc().timestamp())
        })
        .map_err(|e| format!("bad timestamp {s:?}: {e}"))
}

/// A validated set of assets, in file order.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub entries: Vec<VideoAsset>,
    pub source_path: PathBuf,
}

impl CorpusManifest {
    /// Builds a manifest from in-memory assets, rejecting duplicate ids.
    pub fn from_entries(entries: Vec<VideoAsset>, source_path: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(CorpusError::DuplicateId(e.id.clone()));
            }
        }
        Ok(Self {
            entries,
            source_path: source_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&VideoAsset> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Directory that relative frame locators are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        self.source_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
    }
}

/// Reads a JSON Lines manifest. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn ingest_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let mut entries = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let asset: VideoAsset = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !asset.duration.is_finite() || asset.duration < 0.0 {
            return Err(CorpusError::Parse {
                line: idx + 1,
                message: format!("duration_s must be a finite non-negative number, got {}", asset.duration),
            });
        }
        if asset.id.is_empty() {
            return Err(CorpusError::Parse {
                line: idx + 1,
                message: "empty id".into(),
            });
        }
        entries.push(asset);
    }
    CorpusManifest::from_entries(entries, path)
}
