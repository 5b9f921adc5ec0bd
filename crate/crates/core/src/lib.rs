//! Building a spoken-dialogue corpus from in-the-wild audio: collection,
//! language filtering, diarization-driven dialogue extraction, cleansing,
//! packaging and corpus statistics, run as a resumable sharded pipeline.

pub mod analytics;
pub mod audio;
pub mod error;
pub mod ingest;
pub mod lid;
pub mod manifest;
pub mod model;
pub mod package;
pub mod pipeline;
pub mod ratio;
pub mod segment;
pub mod worker;

pub use error::{Error, Result};
pub use model::{
    AudioDocument, Dialogue, DiarizationTurn, LidConfig, RejectionReason, SegmentationConfig,
    Source, Stage, StageStatus,
};
