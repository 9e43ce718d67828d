//! Job configuration file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::R1Config;
use crate::pipeline::{CompilationJob, PipelineError, PipelineParams};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad job config {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Invalid(#[from] PipelineError),
    #[error("invalid R1 settings: {0}")]
    R1(#[from] crate::filters::FilterError),
}

/// JSON job description: theme, keywords, stage parameters, R1 settings and
/// the corpus manifest to search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    pub theme: String,
    pub keywords: Vec<String>,
    #[serde(default)]
    pub params: PipelineParams,
    #[serde(default)]
    pub r1: R1Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub example_refs: Vec<String>,
}

impl JobConfig {
    /// Reads a config file; a relative `corpus` path is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: JobConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        if let Some(c) = &cfg.corpus {
            if c.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.corpus = Some(dir.join(c));
                }
            }
        }
        if cfg.job_id.is_none() {
            cfg.job_id = path.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.r1.validate()?;
        self.to_job("validate").validate()?;
        Ok(())
    }

    /// The pipeline-level job; `fallback_id` is used when the config has none.
    pub fn to_job(&self, fallback_id: &str) -> CompilationJob {
        CompilationJob {
            job_id: self.job_id.clone().unwrap_or_else(|| fallback_id.to_string()),
            theme: self.theme.clone(),
            keywords: self.keywords.clone(),
            params: self.params.clone(),
            example_refs: self.example_refs.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_applied_and_corpus_resolved() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c5.json");
        std::fs::write(
            &p,
            r#"{"theme":"Magic Wins","keywords":["magic","tricks"],"params":{"random_seed":7},"r1":{"colorfulness_threshold":20},"corpus":"corpus.jsonl"}"#,
        )
        .unwrap();
        let cfg = JobConfig::load(&p).unwrap();
        assert_eq!(cfg.job_id.as_deref(), Some("c5"));
        assert_eq!(cfg.params.random_seed, 7);
        assert_eq!(cfg.params.r2_pool_per_worker, 1000);
        assert_eq!(cfg.r1.colorfulness_threshold, 20.0);
        assert_eq!(cfg.r1.dedup_window, 120.0);
        assert_eq!(cfg.corpus.unwrap(), dir.path().join("corpus.jsonl"));
    }

    #[test]
    fn invalid_params_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("j.json");
        std::fs::write(&p, r#"{"theme":"x","keywords":["a"],"params":{"final_min":30,"final_max":20}}"#).unwrap();
        assert!(matches!(JobConfig::load(&p), Err(ConfigError::Invalid(_))));
        std::fs::write(&p, r#"{"theme":"x","keywords":[]}"#).unwrap();
        assert!(JobConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"theme":"x","keywords":["a"],"r1":{"sample_count":1}}"#).unwrap();
        assert!(matches!(JobConfig::load(&p), Err(ConfigError::R1(_))));
    }
}
