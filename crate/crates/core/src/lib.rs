//! Core of the sifter video-curation system.
//!
//! A compilation job flows through three rounds:
//!
//! - **R1** ([`filters`]): automated removal of short, static, dull and
//!   same-session videos.
//! - **R2** (selection): a handful of workers each skim a partition of the R1
//!   output and pick candidates. Picks stream into the R3 pool as they happen.
//! - **R3** (agreement): a disjoint group of workers re-selects from the pool;
//!   only videos with unanimous consent make the final compilation.
//!
//! [`pipeline`] holds the event-sourced job state, [`service`] the timed
//! task-page sessions workers interact with, [`sim`] synthetic workers for
//! end-to-end runs, and [`eval`] the timing and rating statistics.

pub mod config;
pub mod corpus;
pub mod eval;
pub mod exec;
pub mod filters;
pub mod pipeline;
pub mod service;
pub mod sim;

pub use corpus::{CorpusManifest, FrameSequence, VideoAsset};
pub use exec::Execution;
pub use filters::{FilterVerdict, R1Config, RemovalReason};
pub use pipeline::{CompilationJob, CompilationOutput, Job, PipelineParams, StageState};
